"""Closed-form Euclidean gradient of the grid-summed CRB objective.

Convention: for a perturbation ``D`` of the masked entries the objective
changes by ``2 Re tr(grad^H D)`` to first order (gradient with respect to
``conj(W)``). Per grid point the gradient is

    2 * gamma * (J + K - (Q + Q^H)) @ W_RF, masked,

with ``J = A1 T A1^H``, ``K = A2 X T X^T A2^H``, ``Q = A2 X T A1^H``,
``X = F22^-1 F21`` and ``T = -(C11)^2``. Every term has rank <= 2, so it is
applied through its ``n_bs x 2`` factors and never formed densely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crbmo.combiner import CombinerSet
from crbmo.crb import (
    AngleGrid,
    DerivativeMatrixA,
    FisherBlocks,
    SingularFisher,
    build_a_matrix,
    crb_matrix,
    evaluate_grid,
    fisher,
)
from crbmo.geometry import AnglePair, UpaGeometry

__all__ = [
    "GradientTerms",
    "build_gradient_terms",
    "euclidean_gradient",
    "pointwise_gradient",
]


@dataclass(frozen=True, eq=False)
class GradientTerms:
    """Low-rank pieces of one grid point's gradient.

    Each ``*_factors`` pair ``(left, right)`` reconstructs its term as
    ``left @ right.conj().T``.
    """

    t_mat: np.ndarray
    j_mat_factors: tuple[np.ndarray, np.ndarray]
    k_mat_factors: tuple[np.ndarray, np.ndarray]
    q_mat_factors: tuple[np.ndarray, np.ndarray]
    gamma_scale: float

    @staticmethod
    def _dense(factors):
        left, right = factors
        return left @ right.conj().T

    def j_dense(self):
        return self._dense(self.j_mat_factors)

    def k_dense(self):
        return self._dense(self.k_mat_factors)

    def q_dense(self):
        return self._dense(self.q_mat_factors)

    def apply(self, w_rf: np.ndarray) -> np.ndarray:
        """``(J + K - Q - Q^H) @ w_rf`` through the factors, unmasked and unscaled."""
        out = np.zeros(w_rf.shape, dtype=complex)
        for left, right in (self.j_mat_factors, self.k_mat_factors):
            out += left @ (right.conj().T @ w_rf)
        ql, qr = self.q_mat_factors
        out -= ql @ (qr.conj().T @ w_rf)
        out -= qr @ (ql.conj().T @ w_rf)
        return out


def build_gradient_terms(blocks: FisherBlocks, A: DerivativeMatrixA, combiners: CombinerSet | None = None) -> GradientTerms:
    """T from one 2x2 inversion and squaring, factors from 2x2 products.

    ``combiners`` is accepted for symmetry with the per-point pipeline; the
    terms themselves depend only on the Fisher blocks and ``A``.
    """
    c11 = crb_matrix(blocks)
    T = -(c11 @ c11)
    X = np.linalg.solve(blocks.f22, blocks.f21)
    a1 = A.a_doa
    a2 = A.a_gain
    a2x = a2 @ X
    return GradientTerms(
        t_mat=T,
        j_mat_factors=(a1 @ T, a1),
        k_mat_factors=(a2x @ T, a2x),
        q_mat_factors=(a2x @ T, a1),
        gamma_scale=blocks.gamma_scale,
    )


def pointwise_gradient(combiners: CombinerSet, grid: AngleGrid, geom: UpaGeometry, sigma2: float) -> np.ndarray:
    """Gradient accumulated point by point through :class:`GradientTerms`.

    Slow reference path for the batched kernels; same result and convention
    as :func:`euclidean_gradient`.
    """
    total = np.zeros(combiners.w_rf.shape, dtype=complex)
    for theta, phi in zip(*grid.points()):
        angle = AnglePair(float(theta), float(phi))
        A = build_a_matrix(geom, angle)
        blocks = fisher(combiners, A, sigma2)
        try:
            terms = build_gradient_terms(blocks, A, combiners)
        except SingularFisher as exc:
            raise SingularFisher(str(exc), angle) from None
        total += 2.0 * terms.gamma_scale * terms.apply(combiners.w_rf)
    return total * combiners.mask


def euclidean_gradient(combiners: CombinerSet, grid: AngleGrid, geom: UpaGeometry, sigma2: float) -> np.ndarray:
    """Masked Euclidean gradient summed over the grid (beta = 1)."""
    ev = evaluate_grid(combiners, grid, geom, sigma2, want_grad=True)
    if ev.singular.any():
        bad = ev.singular_angles()[0]
        raise SingularFisher(
            f"singular Fisher at theta={bad.theta:.6g}, phi={bad.phi:.6g}", bad
        )
    return ev.gradient
