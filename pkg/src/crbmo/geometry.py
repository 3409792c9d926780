"""Uniform planar array response and its angular derivatives.

The BS array has ``p_rows`` elements along z and ``q_cols`` along y with
half-wavelength spacing. The response is ``a_y (x) a_z`` (Kronecker), so the
antenna with y-index ``q`` and z-index ``p`` sits at flat index ``q * P + p``.
All angles are radians.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "UpaGeometry",
    "AnglePair",
    "steering_y",
    "steering_z",
    "steering",
    "steering_dtheta",
    "steering_dphi",
    "steering_stack",
    "derivative_stack",
]


@dataclass(frozen=True)
class UpaGeometry:
    p_rows: int
    q_cols: int

    def __post_init__(self):
        for name in ("p_rows", "q_cols"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def n_bs(self) -> int:
        return self.p_rows * self.q_cols

    def antenna_index(self, p: int, q: int) -> int:
        """Flat index of the element at z-position ``p`` and y-position ``q``."""
        return q * self.p_rows + p


@dataclass(frozen=True)
class AnglePair:
    theta: float  # azimuth
    phi: float  # elevation

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.phi)):
            raise ValueError(f"angles must be finite, got {self!r}")


def _y_phase(theta, phi):
    return np.pi * np.sin(theta) * np.sin(phi)


def _z_phase(phi):
    return np.pi * np.cos(phi)


def steering_y(geom: UpaGeometry, angle: AnglePair) -> np.ndarray:
    q = np.arange(geom.q_cols)
    return np.exp(1j * q * _y_phase(angle.theta, angle.phi)) / np.sqrt(geom.q_cols)


def steering_z(geom: UpaGeometry, angle: AnglePair) -> np.ndarray:
    p = np.arange(geom.p_rows)
    return np.exp(1j * p * _z_phase(angle.phi)) / np.sqrt(geom.p_rows)


def steering(geom: UpaGeometry, angle: AnglePair) -> np.ndarray:
    return np.kron(steering_y(geom, angle), steering_z(geom, angle))


def steering_dtheta(geom: UpaGeometry, angle: AnglePair) -> np.ndarray:
    """Partial derivative of :func:`steering` with respect to azimuth."""
    q = np.arange(geom.q_cols)
    ay = steering_y(geom, angle)
    scale = 1j * np.pi * np.cos(angle.theta) * np.sin(angle.phi)
    return np.kron(scale * q * ay, steering_z(geom, angle))


def steering_dphi(geom: UpaGeometry, angle: AnglePair) -> np.ndarray:
    """Partial derivative of :func:`steering` with respect to elevation.

    Both Kronecker factors depend on the elevation, hence two product-rule
    terms.
    """
    q = np.arange(geom.q_cols)
    p = np.arange(geom.p_rows)
    ay = steering_y(geom, angle)
    az = steering_z(geom, angle)
    y_scale = 1j * np.pi * np.sin(angle.theta) * np.cos(angle.phi)
    z_scale = -1j * np.pi * np.sin(angle.phi)
    return np.kron(y_scale * q * ay, az) + np.kron(ay, z_scale * p * az)


def _factor_stacks(geom, thetas, phis):
    thetas = np.asarray(thetas, dtype=float).reshape(-1)
    phis = np.asarray(phis, dtype=float).reshape(-1)
    if thetas.shape != phis.shape:
        raise ValueError("thetas and phis must have the same length")
    q = np.arange(geom.q_cols)
    p = np.arange(geom.p_rows)
    ay = np.exp(1j * np.outer(_y_phase(thetas, phis), q)) / np.sqrt(geom.q_cols)
    az = np.exp(1j * np.outer(_z_phase(phis), p)) / np.sqrt(geom.p_rows)
    return thetas, phis, q, p, ay, az


def _kron_rows(left, right):
    # row-wise Kronecker product, (G, Q) x (G, P) -> (G, Q*P)
    return (left[:, :, None] * right[:, None, :]).reshape(left.shape[0], -1)


def steering_stack(geom: UpaGeometry, thetas, phis) -> np.ndarray:
    """Steering vectors for many angle pairs at once, shape ``(G, n_bs)``."""
    _, _, _, _, ay, az = _factor_stacks(geom, thetas, phis)
    return _kron_rows(ay, az)


def derivative_stack(geom: UpaGeometry, thetas, phis):
    """Return ``(a, a_dtheta, a_dphi)`` stacks, each of shape ``(G, n_bs)``."""
    thetas, phis, q, p, ay, az = _factor_stacks(geom, thetas, phis)
    a = _kron_rows(ay, az)
    qay = q[None, :] * ay
    d_theta = _kron_rows((1j * np.pi * np.cos(thetas) * np.sin(phis))[:, None] * qay, az)
    d_phi = _kron_rows((1j * np.pi * np.sin(thetas) * np.cos(phis))[:, None] * qay, az)
    d_phi += _kron_rows(ay, (-1j * np.pi * np.sin(phis))[:, None] * (p[None, :] * az))
    return a, d_theta, d_phi
