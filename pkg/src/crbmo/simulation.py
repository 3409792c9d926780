"""Monte Carlo MSE-vs-SNR sweeps, CRB curves and array power response.

Every random draw comes from a stream keyed by ``(trial, slot)`` under the
scenario seed, so adding a path or a combiner type never perturbs the other
draws and results replay bit-for-bit.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from crbmo import kernels
from crbmo.channel import (
    PathParams,
    UeConfig,
    channel_matrix,
    complex_normal,
    effective_beta,
    synthesize_pilots,
)
from crbmo.combiner import CombinerSet, partially_connected_mask
from crbmo.crb import AngleGrid, a_stack, gamma_scale
from crbmo.estimator import EstimatorConfig, estimate
from crbmo.geometry import AnglePair, UpaGeometry, steering_stack
from crbmo.manifold import OptimizerConfig, random_feasible_init

log = logging.getLogger(__name__)

__all__ = [
    "PathSpec",
    "Scenario",
    "SweepRow",
    "SweepResult",
    "CrbCurve",
    "run_mse_sweep",
    "run_two_path_sweep",
    "array_power_response",
    "crb_curve",
    "crb_unit",
]

SLOT_COMBINER = 0
SLOT_NOISE = 1
SLOT_UE = 2
SLOT_PATH0 = 10
TINY_BETA = 1e-12
MAX_REDRAW_FRACTION = 0.01
MAX_TRIAL_REDRAWS = 100

COMBINER_TYPES = ("optimized", "random")


@dataclass(frozen=True)
class PathSpec:
    """How one path's gain and arrival angles are drawn.

    ``power`` is ``E|alpha|^2`` in ``"cn"`` mode and ``|alpha|^2`` (random
    phase) in ``"fixed"`` mode. A zero-power path is left out of the channel
    entirely, including the ``1/sqrt(L)`` normalisation.
    """

    theta_lo: float
    theta_hi: float
    phi_lo: float
    phi_hi: float
    power: float = 1.0
    gain_mode: str = "cn"

    def __post_init__(self):
        if self.gain_mode not in ("cn", "fixed"):
            raise ValueError(f"gain_mode must be 'cn' or 'fixed', got {self.gain_mode!r}")
        if not self.power >= 0:
            raise ValueError("path power must be >= 0")
        if self.theta_hi < self.theta_lo or self.phi_hi < self.phi_lo:
            raise ValueError("path angle box must satisfy lo <= hi")

    @property
    def active(self) -> bool:
        return self.power > 0

    def draw_alpha(self, rng: np.random.Generator) -> complex:
        if self.gain_mode == "cn":
            return complex(complex_normal(rng, (), self.power))
        return complex(np.sqrt(self.power) * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi)))

    def draw_doa(self, rng: np.random.Generator) -> AnglePair:
        return AnglePair(
            float(rng.uniform(self.theta_lo, self.theta_hi)),
            float(rng.uniform(self.phi_lo, self.phi_hi)),
        )


@dataclass(frozen=True)
class Scenario:
    geom: UpaGeometry
    prior: AngleGrid
    paths: tuple[PathSpec, ...]
    n_ue: int = 4
    n_rf: int = 4
    n_snapshots: int = 4
    snr_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    trials: int = 500
    tx_power: float = 1.0
    precoder: str = "matched"
    combiner_source: str = "both"
    combiner_file: str | None = None
    seed: int = 0
    opt_sigma2: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    estimator_j: int = 30
    estimator_k: int = 30
    refine_levels: int = 4
    refine_shrink: float = 0.2
    beampattern_theta: float = 0.0
    beampattern_samples: int = 181
    crb_eval_grid: AngleGrid | None = None
    crb_eval_sigma2: float = 1.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        snr = tuple(float(s) for s in self.snr_db)
        if not snr or any(b <= a for a, b in zip(snr, snr[1:])):
            raise ValueError("snr_db must be a non-empty, strictly increasing list")
        object.__setattr__(self, "snr_db", snr)
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.paths or not self.paths[0].active:
            raise ValueError("the first (LoS) path must exist and have positive power")
        if self.combiner_source not in ("random", "optimized", "both"):
            raise ValueError(f"combiner_source must be random|optimized|both, got {self.combiner_source!r}")
        if self.precoder not in ("matched", "random"):
            raise ValueError(f"precoder must be matched|random, got {self.precoder!r}")
        if self.tx_power <= 0:
            raise ValueError("tx_power must be > 0")
        if self.geom.n_bs % self.n_rf:
            raise ValueError(f"n_bs={self.geom.n_bs} is not divisible by n_rf={self.n_rf}")

    @property
    def mask(self) -> np.ndarray:
        return partially_connected_mask(self.geom.n_bs, self.n_rf, self.n_snapshots)

    @property
    def combiner_types(self) -> tuple[str, ...]:
        if self.combiner_source == "both":
            return COMBINER_TYPES
        return (self.combiner_source,)

    @property
    def los_box(self) -> AngleGrid:
        p = self.paths[0]
        return AngleGrid(p.theta_lo, p.theta_hi, p.phi_lo, p.phi_hi, self.estimator_j, self.estimator_k)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(self.los_box, self.refine_levels, self.refine_shrink)

    def sigma2(self, snr_db: float) -> float:
        return self.tx_power / 10.0 ** (snr_db / 10.0)

    def stream(self, trial: int, slot: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(trial, slot)))


@dataclass(frozen=True)
class SweepRow:
    snr_db: float
    combiner: str
    mse_theta: float
    mse_phi: float
    crb_mean: float
    crb_theta: float
    crb_phi: float
    trials: int
    failures: int


@dataclass(frozen=True, eq=False)
class SweepResult:
    rows: tuple[SweepRow, ...]
    seed: int
    redraws: int
    per_trial: dict = field(default_factory=dict, repr=False)

    def row(self, snr_db: float, combiner: str) -> SweepRow:
        for r in self.rows:
            if r.snr_db == snr_db and r.combiner == combiner:
                return r
        raise KeyError((snr_db, combiner))

    def curve(self, combiner: str, column: str) -> np.ndarray:
        return np.array([getattr(r, column) for r in self.rows if r.combiner == combiner])

    def same_as(self, other: "SweepResult") -> bool:
        return self.rows == other.rows and self.redraws == other.redraws


@dataclass(frozen=True, eq=False)
class CrbCurve:
    snr_db: tuple[float, ...]
    mean_trace: np.ndarray
    mean_theta: np.ndarray
    mean_phi: np.ndarray
    failures: int


def crb_unit(combiners: CombinerSet, geom: UpaGeometry, thetas, phis):
    """DOA CRB at ``beta = 1``, ``sigma2 = 1`` for each angle; NaN where singular.

    The bound at other operating points follows as ``C11 * sigma2 / |beta|^2``.
    """
    A = a_stack(geom, thetas, phis)
    g = gamma_scale(combiners.n_rf, combiners.n_bs, 1.0)
    _, c11, singular, _ = kernels.crb_batch(A, combiners.rows, combiners.vals, g)
    return c11, singular.astype(bool)


def _draw_paths(scenario: Scenario, trial: int):
    """Draw every path spec; returns ``(params, ue, beta0, redraws)``."""
    params = []
    for l, spec in enumerate(scenario.paths):
        rng = scenario.stream(trial, SLOT_PATH0 + l)
        doa = spec.draw_doa(rng)
        psi = float(rng.uniform(-np.pi / 2, np.pi / 2))
        gam = float(rng.uniform(0.0, np.pi))
        alpha = spec.draw_alpha(rng) if spec.active else 0j
        params.append([alpha, doa, psi, gam, rng])

    if scenario.precoder == "matched":
        ue = UeConfig.matched(scenario.n_ue, scenario.tx_power, params[0][2], params[0][3])
    else:
        ue = UeConfig.random_unit(scenario.n_ue, scenario.tx_power, scenario.stream(trial, SLOT_UE))
    n_active = sum(1 for s in scenario.paths if s.active)

    redraws = 0
    while True:
        alpha, doa, psi, gam, rng = params[0]
        los = PathParams(alpha, doa, psi, gam)
        beta = effective_beta(los, ue, scenario.geom.n_bs, n_active).beta
        if abs(beta) >= TINY_BETA:
            break
        redraws += 1
        if redraws > MAX_TRIAL_REDRAWS:
            raise RuntimeError(f"trial {trial}: |beta| stays below {TINY_BETA}; check gains and precoder")
        params[0][0] = scenario.paths[0].draw_alpha(rng)

    active = [
        PathParams(a, d, p, g)
        for (a, d, p, g, _), spec in zip(params, scenario.paths)
        if spec.active
    ]
    return active, ue, beta, redraws


def _run_trial(scenario: Scenario, trial: int, optimized: CombinerSet | None):
    paths, ue, beta, redraws = _draw_paths(scenario, trial)
    geom = scenario.geom
    H = channel_matrix(geom, ue, paths)
    noise = complex_normal(scenario.stream(trial, SLOT_NOISE), (scenario.n_snapshots, geom.n_bs), 1.0)
    est_cfg = scenario.estimator_config()
    truth = paths[0].doa

    n_snr, n_types = len(scenario.snr_db), len(scenario.combiner_types)
    err = np.empty((2, n_snr, n_types))
    crb = np.empty((2, n_snr, n_types))
    fail = np.zeros(n_types, dtype=bool)
    for k, kind in enumerate(scenario.combiner_types):
        if kind == "optimized":
            comb = optimized
        else:
            comb = random_feasible_init(scenario.mask, scenario.stream(trial, SLOT_COMBINER))
        c11, singular = crb_unit(comb, geom, [truth.theta], [truth.phi])
        fail[k] = singular[0]
        diag = np.diag(c11[0]) / abs(beta) ** 2
        for i, snr in enumerate(scenario.snr_db):
            s2 = scenario.sigma2(snr)
            y = synthesize_pilots(H, ue, comb, s2, noise=noise)
            est = estimate(y, comb, geom, est_cfg)
            err[0, i, k] = (est.theta_hat - truth.theta) ** 2
            err[1, i, k] = (est.phi_hat - truth.phi) ** 2
            crb[:, i, k] = diag * s2
    return err, crb, fail, redraws


def _load_optimized(scenario: Scenario) -> CombinerSet:
    from crbmo.io import load_combiners

    if scenario.combiner_file is None:
        raise FileNotFoundError("scenario requests an optimized combiner but names no combiner file")
    comb, geom = load_combiners(scenario.combiner_file)
    if geom != scenario.geom or comb.n_rf != scenario.n_rf or comb.n_snapshots != scenario.n_snapshots:
        raise ValueError(f"combiner file {scenario.combiner_file} does not match the scenario's array layout")
    return comb


def _sweep(scenario: Scenario, optimized: CombinerSet | None, threads: int) -> SweepResult:
    if "optimized" in scenario.combiner_types and optimized is None:
        optimized = _load_optimized(scenario)

    def work(t):
        return _run_trial(scenario, t, optimized)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(scenario.trials)))
    else:
        results = [work(t) for t in range(scenario.trials)]

    err = np.stack([r[0] for r in results])  # (trials, 2, n_snr, n_types)
    crb = np.stack([r[1] for r in results])
    fail = np.stack([r[2] for r in results])  # (trials, n_types)
    redraws = sum(r[3] for r in results)
    if redraws > max(1, int(MAX_REDRAW_FRACTION * scenario.trials)):
        raise RuntimeError(f"{redraws} degenerate |beta| redraws exceed 1% of {scenario.trials} trials")

    rows = []
    for k, kind in enumerate(scenario.combiner_types):
        ok = ~fail[:, k]
        for i, snr in enumerate(scenario.snr_db):
            mse = err[:, :, i, k].mean(axis=0)
            if ok.any():
                crb_th, crb_ph = crb[ok, :, i, k].mean(axis=0)
            else:
                crb_th = crb_ph = np.nan
            rows.append(SweepRow(
                snr_db=snr, combiner=kind,
                mse_theta=float(mse[0]), mse_phi=float(mse[1]),
                crb_mean=float(crb_th + crb_ph), crb_theta=float(crb_th), crb_phi=float(crb_ph),
                trials=scenario.trials, failures=int((~ok).sum()),
            ))
    return SweepResult(tuple(rows), scenario.seed, redraws, {"sq_err": err, "crb": crb, "crb_failed": fail})


def run_mse_sweep(scenario: Scenario, optimized: CombinerSet | None = None, threads: int = 1) -> SweepResult:
    """MSE of the ML estimator and the CRB at the true angles versus SNR."""
    return _sweep(scenario, optimized, threads)


def run_two_path_sweep(scenario: Scenario, optimized: CombinerSet | None = None, threads: int = 1) -> SweepResult:
    """LoS-only estimation with one NLoS path acting as structured interference."""
    if len(scenario.paths) != 2:
        raise ValueError(f"two-path sweep needs exactly 2 path specs, got {len(scenario.paths)}")
    return _sweep(scenario, optimized, threads)


def array_power_response(combiners: CombinerSet, geom: UpaGeometry, theta_fixed: float, phi_samples) -> list[tuple[float, float]]:
    """``g(phi) = ||W^H a(theta_fixed, phi)||`` for each elevation sample.

    ``phi_samples`` is either a sample count over ``[0, pi]`` or an explicit
    sequence of elevations.
    """
    if np.ndim(phi_samples) == 0:
        count = int(phi_samples)
        if count < 1:
            raise ValueError("phi_samples must be >= 1")
        phis = np.linspace(0.0, np.pi, count)
    else:
        phis = np.asarray(phi_samples, dtype=float)
        if phis.size == 0:
            raise ValueError("phi_samples must not be empty")
    S = steering_stack(geom, np.full(phis.shape, theta_fixed), phis)
    g = np.linalg.norm(S.conj() @ combiners.effective(), axis=1)
    return list(zip(phis.tolist(), g.tolist()))


def crb_curve(combiners: CombinerSet, scenario: Scenario, box: AngleGrid | None = None) -> CrbCurve:
    """Mean CRB over random true angles and LoS gains, one value per SNR.

    Angles are uniform over ``box`` (default: the LoS box) and gains follow
    the LoS gain mode, all from the scenario's LoS streams. Singular trials
    are excluded and counted.
    """
    spec = scenario.paths[0]
    if box is not None:
        spec = PathSpec(box.theta_lo, box.theta_hi, box.phi_lo, box.phi_hi, spec.power, spec.gain_mode)
    n_active = sum(1 for s in scenario.paths if s.active)
    thetas, phis, inv_b2 = [], [], []
    for t in range(scenario.trials):
        rng = scenario.stream(t, SLOT_PATH0)
        doa = spec.draw_doa(rng)
        psi = float(rng.uniform(-np.pi / 2, np.pi / 2))
        gam = float(rng.uniform(0.0, np.pi))
        ue = UeConfig.matched(scenario.n_ue, scenario.tx_power, psi, gam)
        while True:
            beta = effective_beta(PathParams(spec.draw_alpha(rng), doa, psi, gam), ue, scenario.geom.n_bs, n_active).beta
            if abs(beta) >= TINY_BETA:
                break
        thetas.append(doa.theta)
        phis.append(doa.phi)
        inv_b2.append(1.0 / abs(beta) ** 2)
    c11, singular = crb_unit(combiners, scenario.geom, thetas, phis)
    ok = ~singular
    w = np.asarray(inv_b2)[ok]
    th = float(np.mean(c11[ok, 0, 0] * w)) if ok.any() else np.nan
    ph = float(np.mean(c11[ok, 1, 1] * w)) if ok.any() else np.nan
    s2 = np.array([scenario.sigma2(s) for s in scenario.snr_db])
    return CrbCurve(scenario.snr_db, (th + ph) * s2, th * s2, ph * s2, int(singular.sum()))
