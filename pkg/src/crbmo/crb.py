"""Fisher information and DOA Cramer-Rao bound under a hybrid combiner.

Parameters are ordered ``eta = [theta, phi, Re(beta), Im(beta)]``. The DOA
block ``C11`` is the inverse Schur complement of the nuisance block.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from crbmo import kernels
from crbmo.combiner import CombinerSet, masked_values, scatter_values, support_rows
from crbmo.geometry import (
    AnglePair,
    UpaGeometry,
    derivative_stack,
    steering,
    steering_dphi,
    steering_dtheta,
)

log = logging.getLogger(__name__)

COND_MAX = kernels.COND_MAX

__all__ = [
    "SingularFisher",
    "AngleGrid",
    "DerivativeMatrixA",
    "FisherBlocks",
    "build_a_matrix",
    "fisher",
    "fisher_unsimplified",
    "crb_matrix",
    "crb_trace",
    "gamma_scale",
    "a_stack",
    "GridEvaluation",
    "evaluate_matrix",
    "evaluate_grid",
    "objective",
]


class SingularFisher(ArithmeticError):
    """The combiner carries too little information at an angle to bound it."""

    def __init__(self, message, angle=None):
        super().__init__(message)
        self.angle = angle


@dataclass(frozen=True)
class AngleGrid:
    """Uniform sampling of a prior angle box.

    Points follow ``lo + (j - 1) / J * (hi - lo)`` for ``j = 1..J``, so the
    upper edge itself is never sampled.
    """

    theta_lo: float
    theta_hi: float
    phi_lo: float
    phi_hi: float
    j_count: int
    k_count: int

    def __post_init__(self):
        if self.j_count < 1 or self.k_count < 1:
            raise ValueError("grid counts must be >= 1")
        if self.theta_hi < self.theta_lo or self.phi_hi < self.phi_lo:
            raise ValueError("grid bounds must satisfy lo <= hi")

    @property
    def thetas(self) -> np.ndarray:
        return self.theta_lo + np.arange(self.j_count) / self.j_count * (self.theta_hi - self.theta_lo)

    @property
    def phis(self) -> np.ndarray:
        return self.phi_lo + np.arange(self.k_count) / self.k_count * (self.phi_hi - self.phi_lo)

    @property
    def size(self) -> int:
        return self.j_count * self.k_count

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(thetas, phis)``, row-major over ``j`` then ``k``."""
        tt, pp = np.meshgrid(self.thetas, self.phis, indexing="ij")
        return tt.ravel(), pp.ravel()

    def with_counts(self, j_count: int, k_count: int) -> "AngleGrid":
        return AngleGrid(self.theta_lo, self.theta_hi, self.phi_lo, self.phi_hi, j_count, k_count)


@dataclass(frozen=True, eq=False)
class DerivativeMatrixA:
    a1: np.ndarray
    a2: np.ndarray
    a: np.ndarray
    beta: complex

    @property
    def matrix(self) -> np.ndarray:
        """``[beta a1, beta a2, a, j a]`` of shape ``(n_bs, 4)``."""
        return np.column_stack([self.beta * self.a1, self.beta * self.a2, self.a, 1j * self.a])

    @property
    def a_doa(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def a_gain(self) -> np.ndarray:
        return self.matrix[:, 2:]


@dataclass(frozen=True, eq=False)
class FisherBlocks:
    full: np.ndarray
    gamma_scale: float

    @property
    def f11(self):
        return self.full[:2, :2]

    @property
    def f12(self):
        return self.full[:2, 2:]

    @property
    def f21(self):
        return self.full[2:, :2]

    @property
    def f22(self):
        return self.full[2:, 2:]


def gamma_scale(n_rf: int, n_bs: int, sigma2: float) -> float:
    return n_rf / (sigma2 * n_bs)


def build_a_matrix(geom: UpaGeometry, angle: AnglePair, beta: complex = 1.0) -> DerivativeMatrixA:
    return DerivativeMatrixA(
        a1=steering_dtheta(geom, angle),
        a2=steering_dphi(geom, angle),
        a=steering(geom, angle),
        beta=complex(beta),
    )


def fisher(combiners: CombinerSet, A: DerivativeMatrixA, sigma2: float) -> FisherBlocks:
    """Fisher matrix using ``W_hat^H W_hat = (n_bs / n_rf) I``.

    Only the small product ``W_RF^H A`` is formed.
    """
    g = gamma_scale(combiners.n_rf, combiners.n_bs, sigma2)
    B = combiners.w_rf.conj().T @ A.matrix
    F = 2.0 * g * (B.conj().T @ B).real
    return FisherBlocks(0.5 * (F + F.T), g)


def fisher_unsimplified(combiners: CombinerSet, A: DerivativeMatrixA, sigma2: float) -> np.ndarray:
    """Fisher matrix straight from the coloured-noise Gaussian model.

    ``(2 / sigma2) Re{A^H W (W_hat^H W_hat)^-1 W^H A}`` with the hybrid
    ``W = W_RF W_BB``; the digital stage is kept, not assumed away.
    """
    W = combiners.effective()
    n_rf = combiners.n_rf
    cov = np.zeros((combiners.n_cols, combiners.n_cols), dtype=complex)
    for n in range(combiners.n_snapshots):
        sl = slice(n * n_rf, (n + 1) * n_rf)
        wn = W[:, sl]
        cov[sl, sl] = wn.conj().T @ wn
    WhA = W.conj().T @ A.matrix
    F = (2.0 / sigma2) * (WhA.conj().T @ np.linalg.solve(cov, WhA)).real
    return 0.5 * (F + F.T)


def _cond_sym(m: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(m)
    if not np.all(np.isfinite(ev)) or ev[-1] <= 0:
        return np.inf
    if ev[0] <= 0:
        return np.inf
    return ev[-1] / ev[0]


def crb_matrix(blocks: FisherBlocks) -> np.ndarray:
    """DOA block ``C11 = (F11 - F12 F22^-1 F21)^-1``."""
    if _cond_sym(blocks.f22) > COND_MAX:
        raise SingularFisher("gain block of the Fisher matrix is singular")
    schur = blocks.f11 - blocks.f12 @ np.linalg.solve(blocks.f22, blocks.f21)
    schur = 0.5 * (schur + schur.T)
    if _cond_sym(schur) > COND_MAX:
        raise SingularFisher("DOA Schur complement of the Fisher matrix is singular")
    return np.linalg.inv(schur)


def crb_trace(blocks: FisherBlocks) -> float:
    return float(np.trace(crb_matrix(blocks)))


def a_stack(geom: UpaGeometry, thetas, phis, beta: complex = 1.0) -> np.ndarray:
    """``(G, n_bs, 4)`` stack of derivative matrices ``[beta a1, beta a2, a, j a]``."""
    a, d_theta, d_phi = derivative_stack(geom, thetas, phis)
    return np.ascontiguousarray(np.stack([beta * d_theta, beta * d_phi, a, 1j * a], axis=-1))


@lru_cache(maxsize=16)
def grid_a_stack(geom: UpaGeometry, grid: AngleGrid) -> np.ndarray:
    """Cached read-only beta=1 stack for a fixed optimization grid."""
    out = a_stack(geom, *grid.points())
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GridEvaluation:
    thetas: np.ndarray
    phis: np.ndarray
    traces: np.ndarray
    c11: np.ndarray
    singular: np.ndarray
    gradient: np.ndarray | None = None

    @property
    def value(self) -> float:
        if self.singular.any():
            return np.inf
        return float(np.sum(self.traces))

    def singular_angles(self) -> list[AnglePair]:
        idx = np.flatnonzero(self.singular)
        return [AnglePair(float(self.thetas[i]), float(self.phis[i])) for i in idx]


def evaluate_matrix(
    w_rf: np.ndarray,
    n_rf: int,
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    want_grad: bool = False,
    impl=None,
) -> GridEvaluation:
    """Grid evaluation on a raw masked matrix.

    ``w_rf`` need not be unit modulus, which lets finite-difference checks
    step off the manifold. Entries outside the PC support are ignored.
    """
    n_bs, n_cols = w_rf.shape
    if n_bs != geom.n_bs:
        raise ValueError(f"combiner has {n_bs} rows, array has {geom.n_bs} antennas")
    rows = support_rows(n_bs, n_rf, n_cols)
    thetas, phis = grid.points()
    A = grid_a_stack(geom, grid)
    g = gamma_scale(n_rf, n_bs, sigma2)
    traces, c11, singular, grad_vals = kernels.crb_batch(
        A, rows, masked_values(w_rf, rows), g, want_grad, impl=impl
    )
    gradient = scatter_values(grad_vals, rows, w_rf.shape) if want_grad else None
    return GridEvaluation(thetas, phis, traces, c11, singular.astype(bool), gradient)


def evaluate_grid(
    combiners: CombinerSet,
    grid: AngleGrid,
    geom: UpaGeometry,
    sigma2: float,
    want_grad: bool = False,
    impl=None,
) -> GridEvaluation:
    """Per-point CRB traces (beta = 1) and, optionally, the summed gradient."""
    return evaluate_matrix(combiners.w_rf, combiners.n_rf, grid, geom, sigma2, want_grad, impl)


def objective(combiners: CombinerSet, grid: AngleGrid, geom: UpaGeometry, sigma2: float) -> float:
    """Sum of ``tr(C11)`` over the grid with beta = 1; ``inf`` if any point is singular."""
    ev = evaluate_grid(combiners, grid, geom, sigma2)
    if ev.singular.any():
        bad = ev.singular_angles()[0]
        log.warning(
            "singular Fisher at %d grid point(s), first at theta=%.6g phi=%.6g",
            int(ev.singular.sum()), bad.theta, bad.phi,
        )
    return ev.value
