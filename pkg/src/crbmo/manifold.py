"""Riemannian gradient descent on the masked complex-circle manifold.

Iterates are masked matrices: unit-modulus entries on the PC support, exact
zeros elsewhere. The tangent projection and retraction act entry-wise.
"""
from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from crbmo.combiner import CombinerSet, mask_layout
from crbmo.crb import AngleGrid, evaluate_matrix
from crbmo.geometry import UpaGeometry

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig",
    "OptimizerTrace",
    "TerminationReason",
    "StepFailure",
    "DegenerateRetraction",
    "ChainResult",
    "random_feasible_init",
    "riemannian_gradient",
    "retract",
    "armijo_search",
    "run_chain",
    "run_chains",
    "crb_mo",
    "crb_mo_chains",
]

MAX_CONTRACTIONS = 50
RETRACTION_FLOOR = 1e-14


class StepFailure(RuntimeError):
    """Backtracking found no step with sufficient decrease."""


class DegenerateRetraction(ArithmeticError):
    """An entry of ``w + step * d`` collapsed onto the origin."""


class TerminationReason(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    STEP_FAILURE = "step_failure"
    SINGULAR_FISHER = "singular_fisher"


@dataclass(frozen=True)
class OptimizerConfig:
    """Stopping rule and line-search knobs.

    ``epsilon`` is the absolute threshold on the per-iteration objective
    decrease; when ``None`` it is ``epsilon_rel`` times the initial objective.
    """

    epsilon: float | None = None
    epsilon_rel: float = 1e-6
    max_iters: int = 1000
    armijo_initial_step: float = 1.0
    armijo_contraction: float = 0.5
    armijo_slope: float = 1e-4
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not self.epsilon_rel >= 0:
            raise ValueError("epsilon_rel must be >= 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.armijo_initial_step > 0:
            raise ValueError("armijo_initial_step must be > 0")
        if not 0 < self.armijo_contraction < 1:
            raise ValueError("armijo_contraction must lie in (0, 1)")
        if not 0 < self.armijo_slope < 1:
            raise ValueError("armijo_slope must lie in (0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class OptimizerTrace:
    objective_history: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    gradient_norms: list[float] = field(default_factory=list)
    iterations: int = 0
    termination_reason: TerminationReason = TerminationReason.MAX_ITERS
    restart: int = 0


@dataclass(frozen=True, eq=False)
class ChainResult:
    combiners: CombinerSet
    trace: OptimizerTrace

    @property
    def objective(self) -> float:
        return self.trace.objective_history[-1]


def random_feasible_init(mask, rng: np.random.Generator) -> CombinerSet:
    """Uniform random phases on the mask support, zeros elsewhere."""
    mask = np.asarray(mask, dtype=np.int8)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=mask.shape)
    return CombinerSet.from_phases(phases, mask)


def inner(x: np.ndarray, y: np.ndarray) -> float:
    """Real inner product ``Re tr(x^H y)``."""
    return float(np.real(np.vdot(x, y)))


def riemannian_gradient(eucl_grad: np.ndarray, w_tilde: np.ndarray) -> np.ndarray:
    """Remove the radial component of each entry: ``g - Re{g w*} w``."""
    return eucl_grad - np.real(eucl_grad * np.conj(w_tilde)) * w_tilde


def retract(w_tilde: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
    """Entry-wise normalisation of ``w + step * d`` back to the unit circle.

    Entries where ``w_tilde`` is zero (off the mask) stay exactly zero.
    """
    support = w_tilde != 0
    moved = w_tilde + step * direction
    mags = np.abs(moved[support])
    if mags.size and mags.min() < RETRACTION_FLOOR:
        raise DegenerateRetraction(f"entry modulus {mags.min():.3g} at step {step:.3g}")
    out = np.zeros_like(moved)
    out[support] = moved[support] / mags
    return out


def armijo_search(
    objective_fn: Callable[[np.ndarray], float],
    w_tilde: np.ndarray,
    grad: np.ndarray,
    direction: np.ndarray,
    config: OptimizerConfig,
    initial_step: float | None = None,
    f0: float | None = None,
):
    """Backtrack from ``initial_step`` until sufficient decrease holds.

    Returns ``(step, new_point, new_objective)``. Raises :class:`StepFailure`
    for a non-descent direction or after ``MAX_CONTRACTIONS`` contractions.
    """
    slope = inner(grad, direction)
    if not slope < 0:
        raise StepFailure("direction is not a descent direction")
    f0 = objective_fn(w_tilde) if f0 is None else f0
    step = config.armijo_initial_step if initial_step is None else initial_step
    for _ in range(MAX_CONTRACTIONS + 1):
        try:
            candidate = retract(w_tilde, direction, step)
        except DegenerateRetraction:
            step *= 0.5
            continue
        f_new = objective_fn(candidate)
        if f_new <= f0 + config.armijo_slope * step * slope:
            return step, candidate, f_new
        step *= config.armijo_contraction
    raise StepFailure(f"no sufficient decrease after {MAX_CONTRACTIONS} contractions")


def _frob(x: np.ndarray) -> float:
    return float(np.linalg.norm(x))


def run_chain(
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    init: CombinerSet,
    config: OptimizerConfig,
    restart: int = 0,
) -> ChainResult:
    """One CRB-MO descent chain from ``init``."""
    n_rf, mask = init.n_rf, init.mask

    def value(w):
        return evaluate_matrix(w, n_rf, grid, geom, sigma2).value

    def value_and_grad(w):
        ev = evaluate_matrix(w, n_rf, grid, geom, sigma2, want_grad=True)
        return ev.value, ev.gradient

    trace = OptimizerTrace(restart=restart)
    w = np.array(init.w_rf)
    f, egrad = value_and_grad(w)
    trace.objective_history.append(f)
    if not math.isfinite(f):
        trace.termination_reason = TerminationReason.SINGULAR_FISHER
        return ChainResult(init, trace)
    eps = config.epsilon if config.epsilon is not None else config.epsilon_rel * f
    prev_step = None

    for _ in range(config.max_iters):
        rgrad = riemannian_gradient(egrad, w)
        gnorm = _frob(rgrad)
        trace.gradient_norms.append(gnorm)
        if gnorm == 0.0:
            trace.termination_reason = TerminationReason.CONVERGED
            break
        first = config.armijo_initial_step / gnorm
        if prev_step is not None:
            first = min(first, 2.0 * prev_step)
        try:
            step, w_new, f_new = armijo_search(value, w, rgrad, -rgrad, config, first, f)
        except StepFailure as exc:
            log.debug("restart %d: %s", restart, exc)
            trace.termination_reason = TerminationReason.STEP_FAILURE
            break
        trace.iterations += 1
        trace.step_sizes.append(step)
        trace.objective_history.append(f_new)
        decrease = f - f_new
        w, f, prev_step = w_new, f_new, step
        if decrease <= eps:
            trace.termination_reason = TerminationReason.CONVERGED
            break
        f, egrad = value_and_grad(w)
    else:
        trace.termination_reason = TerminationReason.MAX_ITERS

    if trace.iterations == 0:
        return ChainResult(init, trace)
    return ChainResult(CombinerSet(w, mask, n_rf, init.n_snapshots), trace)


def run_chains(
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    mask,
    config: OptimizerConfig,
    threads: int = 1,
) -> list[ChainResult]:
    """All restart chains, each seeded from its own child of ``config.seed``."""
    mask = np.asarray(mask, dtype=np.int8)
    mask_layout(mask)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    inits = [random_feasible_init(mask, np.random.default_rng(s)) for s in seeds]

    def work(i):
        return run_chain(grid, geom, sigma2, inits[i], config, restart=i)

    if threads > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, range(config.restarts)))
    return [work(i) for i in range(config.restarts)]


def best_chain(chains: list[ChainResult]) -> ChainResult:
    # ties keep the lowest restart index
    return min(chains, key=lambda c: (c.objective, c.trace.restart))


def crb_mo_chains(
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    mask,
    config: OptimizerConfig,
    threads: int = 1,
) -> tuple[CombinerSet, OptimizerTrace, list[ChainResult]]:
    """Like :func:`crb_mo` but also returns every restart chain."""
    chains = run_chains(grid, geom, sigma2, mask, config, threads)
    best = best_chain(chains)
    if best.trace.iterations == 0:
        return best.combiners, best.trace, chains
    return CombinerSet.from_matrix(best.combiners.w_rf, best.combiners.mask), best.trace, chains


def crb_mo(
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    mask,
    config: OptimizerConfig,
    threads: int = 1,
) -> tuple[CombinerSet, OptimizerTrace]:
    """Best-of-restarts CRB-MO optimisation.

    Returns the final combiner snapped to its phases (so it round-trips
    through the combiner file bit-exactly) and the winning chain's trace.
    """
    comb, trace, _ = crb_mo_chains(grid, geom, sigma2, mask, config, threads)
    return comb, trace
