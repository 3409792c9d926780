"""Concentrated maximum-likelihood DOA search over a coarse-to-fine grid.

With ``W_BB = I`` the combined noise is white (``W_hat^H W_hat`` is a
multiple of identity), so maximising ``|b^H y|^2 / ||b||^2`` over
``b = W^H a(theta, phi)`` is the ML estimate with the gain profiled out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crbmo import kernels
from crbmo.combiner import CombinerSet
from crbmo.crb import AngleGrid
from crbmo.geometry import AnglePair, UpaGeometry, steering, steering_stack

__all__ = ["EstimatorConfig", "DoaEstimate", "ml_metric", "ml_metric_grid", "estimate"]

TINY_NORM = 1e-12


@dataclass(frozen=True)
class EstimatorConfig:
    """Search box, grid resolution and refinement schedule.

    The coarse grid samples the box of ``coarse_grid`` with both edges
    included. Each refinement level re-centres a grid of the same size on
    the current best point with the box shrunk by ``refine_shrink``.
    """

    coarse_grid: AngleGrid
    refine_levels: int = 4
    refine_shrink: float = 0.2

    def __post_init__(self):
        if self.refine_levels < 0:
            raise ValueError("refine_levels must be >= 0")
        if not 0 < self.refine_shrink < 1:
            raise ValueError("refine_shrink must lie in (0, 1)")


@dataclass(frozen=True)
class DoaEstimate:
    theta_hat: float
    phi_hat: float
    beta_hat: complex
    peak_metric: float


def _combined(combiners: CombinerSet, vec: np.ndarray) -> np.ndarray:
    return combiners.effective().conj().T @ vec


def ml_metric(y_tilde, combiners: CombinerSet, geom: UpaGeometry, angle: AnglePair) -> float:
    b = _combined(combiners, steering(geom, angle))
    norm2 = float(np.vdot(b, b).real)
    if norm2 < TINY_NORM**2:
        return 0.0
    return float(abs(np.vdot(b, y_tilde)) ** 2 / norm2)


def ml_metric_grid(y_tilde, combiners: CombinerSet, geom: UpaGeometry, thetas, phis) -> np.ndarray:
    """Vectorised :func:`ml_metric` over paired angle arrays."""
    S = steering_stack(geom, thetas, phis)
    if combiners.w_bb is None:
        return kernels.ml_metric_batch(S, combiners.rows, combiners.vals, y_tilde)
    b = S.conj() @ combiners.effective()  # rows are conj(b)
    norm2 = np.einsum("gc,gc->g", b.conj(), b).real
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norm2 < TINY_NORM**2, 0.0, np.abs(b @ y_tilde) ** 2 / norm2)


def _box_grid(t_lo, t_hi, p_lo, p_hi, nj, nk):
    tt, pp = np.meshgrid(np.linspace(t_lo, t_hi, nj), np.linspace(p_lo, p_hi, nk), indexing="ij")
    return tt.ravel(), pp.ravel()


def estimate(y_tilde, combiners: CombinerSet, geom: UpaGeometry, config: EstimatorConfig) -> DoaEstimate:
    box = config.coarse_grid
    nj, nk = box.j_count, box.k_count
    thetas, phis = _box_grid(box.theta_lo, box.theta_hi, box.phi_lo, box.phi_hi, nj, nk)
    metric = ml_metric_grid(y_tilde, combiners, geom, thetas, phis)
    best = int(np.argmax(metric))
    t_best, p_best, m_best = thetas[best], phis[best], metric[best]

    half_t = 0.5 * (box.theta_hi - box.theta_lo)
    half_p = 0.5 * (box.phi_hi - box.phi_lo)
    for _ in range(config.refine_levels):
        half_t *= config.refine_shrink
        half_p *= config.refine_shrink
        thetas, phis = _box_grid(
            max(box.theta_lo, t_best - half_t), min(box.theta_hi, t_best + half_t),
            max(box.phi_lo, p_best - half_p), min(box.phi_hi, p_best + half_p),
            nj, nk,
        )
        metric = ml_metric_grid(y_tilde, combiners, geom, thetas, phis)
        i = int(np.argmax(metric))
        # keep the incumbent unless strictly beaten
        if metric[i] > m_best:
            t_best, p_best, m_best = thetas[i], phis[i], metric[i]

    b = _combined(combiners, steering(geom, AnglePair(float(t_best), float(p_best))))
    norm2 = float(np.vdot(b, b).real)
    beta_hat = complex(np.vdot(b, y_tilde) / norm2) if norm2 >= TINY_NORM**2 else 0j
    return DoaEstimate(float(t_best), float(p_best), beta_hat, float(m_best))
