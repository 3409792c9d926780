"""Geometric mmWave channel and received-pilot synthesis.

The UE is a half-wavelength uniform linear array steered by the departure
azimuth ``psi`` only; the elevation ``gamma`` is carried for completeness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crbmo.combiner import CombinerSet
from crbmo.geometry import AnglePair, UpaGeometry, steering

__all__ = [
    "PathParams",
    "UeConfig",
    "EffectiveGain",
    "ue_response",
    "channel_matrix",
    "effective_beta",
    "complex_normal",
    "synthesize_pilots",
]


@dataclass(frozen=True)
class PathParams:
    alpha: complex
    doa: AnglePair
    dod_psi: float = 0.0
    dod_gamma: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError("path gain must be finite")


def ue_response(n_ue: int, psi: float, gamma: float = 0.0) -> np.ndarray:
    """Unit-norm ULA response at departure azimuth ``psi``."""
    del gamma  # ULA has no elevation dependence
    return np.exp(1j * np.pi * np.arange(n_ue) * np.sin(psi)) / np.sqrt(n_ue)


@dataclass(frozen=True, eq=False)
class UeConfig:
    n_ue: int
    precoder_v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.precoder_v, dtype=complex).reshape(-1)
        if v.shape != (self.n_ue,):
            raise ValueError(f"precoder must have length n_ue={self.n_ue}")
        object.__setattr__(self, "precoder_v", v)

    @property
    def tx_power(self) -> float:
        return float(np.vdot(self.precoder_v, self.precoder_v).real)

    @classmethod
    def matched(cls, n_ue: int, tx_power: float, psi: float, gamma: float = 0.0) -> "UeConfig":
        """Precoder aligned with the UE response toward ``psi``."""
        if tx_power < 0:
            raise ValueError("tx_power must be >= 0")
        return cls(n_ue, np.sqrt(tx_power) * ue_response(n_ue, psi, gamma))

    @classmethod
    def random_unit(cls, n_ue: int, tx_power: float, rng: np.random.Generator) -> "UeConfig":
        v = complex_normal(rng, (n_ue,), 1.0)
        return cls(n_ue, np.sqrt(tx_power) * v / np.linalg.norm(v))


@dataclass(frozen=True)
class EffectiveGain:
    beta: complex


def _scale(n_bs: int, n_ue: int, n_paths: int) -> float:
    return np.sqrt(n_bs * n_ue / n_paths)


def channel_matrix(geom: UpaGeometry, ue: UeConfig, paths: list[PathParams]) -> np.ndarray:
    """``sqrt(N_BS N_UE / L) * sum_l alpha_l a_BS,l a_UE,l^H``."""
    if not paths:
        raise ValueError("channel needs at least one path")
    H = np.zeros((geom.n_bs, ue.n_ue), dtype=complex)
    for p in paths:
        H += p.alpha * np.outer(steering(geom, p.doa), ue_response(ue.n_ue, p.dod_psi, p.dod_gamma).conj())
    return _scale(geom.n_bs, ue.n_ue, len(paths)) * H


def effective_beta(path: PathParams, ue: UeConfig, n_bs: int, n_paths: int = 1) -> EffectiveGain:
    """Scalar gain seen along ``a_BS`` after the precoder, channel scaling included."""
    a_ue = ue_response(ue.n_ue, path.dod_psi, path.dod_gamma)
    beta = _scale(n_bs, ue.n_ue, n_paths) * path.alpha * np.vdot(a_ue, ue.precoder_v)
    return EffectiveGain(complex(beta))


def complex_normal(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circular complex Gaussian samples with the given per-entry variance."""
    s = np.sqrt(variance / 2.0)
    return s * rng.standard_normal(shape) + 1j * s * rng.standard_normal(shape)


def synthesize_pilots(
    H: np.ndarray,
    ue: UeConfig,
    combiners: CombinerSet,
    sigma2: float,
    seq=None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """De-rotated combined pilots ``y~`` stacked over snapshots.

    Snapshot ``n`` receives ``r_n = H v s_n + z_n`` through ``W_n`` and is
    multiplied by ``conj(s_n)``. Noise is drawn from ``rng`` unless a
    pre-drawn unit-variance ``noise`` array of shape ``(N, n_bs)`` is given,
    in which case it is scaled by ``sqrt(sigma2)``.
    """
    N, n_rf = combiners.n_snapshots, combiners.n_rf
    if H.shape != (combiners.n_bs, ue.n_ue):
        raise ValueError(f"channel shape {H.shape} does not match combiner ({combiners.n_bs}) / UE ({ue.n_ue})")
    seq = np.ones(N, dtype=complex) if seq is None else np.asarray(seq, dtype=complex)
    if seq.shape != (N,):
        raise ValueError(f"training sequence must have length {N}")
    if np.any(np.abs(np.abs(seq) - 1.0) > 1e-12):
        raise ValueError("training symbols must have unit modulus")
    if noise is None:
        if sigma2 > 0 and rng is None:
            raise ValueError("an rng is required to draw noise")
        noise = complex_normal(rng, (N, combiners.n_bs), 1.0) if sigma2 > 0 else np.zeros((N, combiners.n_bs))
    elif noise.shape != (N, combiners.n_bs):
        raise ValueError(f"noise must have shape {(N, combiners.n_bs)}")

    W = combiners.effective()
    hv = H @ ue.precoder_v
    out = np.empty(N * n_rf, dtype=complex)
    for n in range(N):
        wn = W[:, n * n_rf:(n + 1) * n_rf]
        r = hv * seq[n] + np.sqrt(sigma2) * noise[n]
        out[n * n_rf:(n + 1) * n_rf] = (wn.conj().T @ r) * np.conj(seq[n])
    return out
