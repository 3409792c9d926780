"""Stacked partially-connected analog combiners.

``w_rf`` stacks the per-snapshot analog combiners side by side, so column
``n * n_rf + m`` is RF chain ``m`` during snapshot ``n``. RF chain ``m``
drives the contiguous antenna block ``[m * L, (m + 1) * L)`` with
``L = n_bs / n_rf``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = ["CombinerSet", "partially_connected_mask", "mask_layout", "support_rows"]

UNIT_TOL = 1e-12


def partially_connected_mask(n_bs: int, n_rf: int, n_snapshots: int) -> np.ndarray:
    """Binary ``n_bs x (n_rf * n_snapshots)`` mask of the PC architecture."""
    if n_rf < 1 or n_snapshots < 1:
        raise ValueError("n_rf and n_snapshots must be >= 1")
    if n_bs % n_rf:
        raise ValueError(f"n_bs={n_bs} is not divisible by n_rf={n_rf}")
    per_rf = n_bs // n_rf
    block = np.kron(np.eye(n_rf, dtype=np.int8), np.ones((per_rf, 1), dtype=np.int8))
    return np.tile(block, (1, n_snapshots))


@lru_cache(maxsize=64)
def support_rows(n_bs: int, n_rf: int, n_cols: int) -> np.ndarray:
    """``(n_cols, L)`` antenna indices on each column's support."""
    per_rf = n_bs // n_rf
    start = (np.arange(n_cols) % n_rf) * per_rf
    rows = np.ascontiguousarray(start[:, None] + np.arange(per_rf)[None, :], dtype=np.intp)
    rows.setflags(write=False)
    return rows


def masked_values(w_rf: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w_rf[rows, np.arange(rows.shape[0])[:, None]])


def scatter_values(vals: np.ndarray, rows: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=complex)
    out[rows, np.arange(rows.shape[0])[:, None]] = vals
    return out


def mask_layout(mask: np.ndarray) -> tuple[int, int]:
    """Recover ``(n_rf, n_snapshots)`` from a PC mask, validating its structure."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-D array")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    n_bs, n_cols = mask.shape
    ones = mask.sum(axis=0)
    if n_cols == 0 or ones[0] == 0 or n_bs % ones[0]:
        raise ValueError("mask columns must each select n_bs / n_rf antennas")
    n_rf = n_bs // int(ones[0])
    if n_cols % n_rf:
        raise ValueError(f"mask has {n_cols} columns, not a multiple of n_rf={n_rf}")
    n_snapshots = n_cols // n_rf
    if not np.array_equal(mask, partially_connected_mask(n_bs, n_rf, n_snapshots)):
        raise ValueError("mask is not block-diagonal within each snapshot")
    return n_rf, n_snapshots


@dataclass(frozen=True, eq=False)
class CombinerSet:
    """Stacked analog combiner with its sparsity mask and optional digital stage.

    ``w_bb`` is the block-diagonal ``(n_rf*N) x (n_rf*N)`` baseband matrix;
    ``None`` means identity.
    """

    w_rf: np.ndarray
    mask: np.ndarray
    n_rf: int
    n_snapshots: int
    w_bb: np.ndarray | None = field(default=None)
    # exact phases when built by from_phases; keeps the file round trip bit-exact
    source_phases: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.array(self.w_rf, dtype=complex)
        m = np.array(self.mask, dtype=np.int8)
        w.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "w_rf", w)
        object.__setattr__(self, "mask", m)
        if self.w_bb is not None:
            bb = np.array(self.w_bb, dtype=complex)
            bb.setflags(write=False)
            object.__setattr__(self, "w_bb", bb)
        if self.source_phases is not None:
            ph = np.array(self.source_phases, dtype=float)
            ph.setflags(write=False)
            object.__setattr__(self, "source_phases", ph)
        self.validate()

    @classmethod
    def from_phases(cls, phases, mask, w_bb=None) -> "CombinerSet":
        """Build from a phase matrix (radians); off-mask phases are ignored."""
        mask = np.asarray(mask, dtype=np.int8)
        n_rf, n_snapshots = mask_layout(mask)
        phases = np.where(mask == 1, np.asarray(phases, dtype=float), 0.0)
        w = np.where(mask == 1, np.exp(1j * phases), 0.0)
        return cls(w, mask, n_rf, n_snapshots, w_bb, source_phases=phases)

    @classmethod
    def from_matrix(cls, w_rf, mask, w_bb=None) -> "CombinerSet":
        """Wrap a masked unit-modulus matrix, snapping it to its phases.

        Snapping makes the result exactly reproducible from ``phases``, which
        is what the combiner file stores.
        """
        return cls.from_phases(np.angle(w_rf), mask, w_bb)

    def validate(self) -> None:
        n_rf, n_snapshots = mask_layout(self.mask)
        if (n_rf, n_snapshots) != (self.n_rf, self.n_snapshots):
            raise ValueError(
                f"mask layout (n_rf={n_rf}, N={n_snapshots}) disagrees with "
                f"declared (n_rf={self.n_rf}, N={self.n_snapshots})"
            )
        if self.w_rf.shape != self.mask.shape:
            raise ValueError(f"w_rf shape {self.w_rf.shape} != mask shape {self.mask.shape}")
        on = self.mask == 1
        if np.any(self.w_rf[~on] != 0):
            raise ValueError("w_rf has nonzero entries outside the mask")
        if np.any(np.abs(np.abs(self.w_rf[on]) - 1.0) > UNIT_TOL):
            raise ValueError("w_rf entries on the mask must have unit modulus")
        if self.source_phases is not None:
            if self.source_phases.shape != self.mask.shape:
                raise ValueError("source_phases must match the mask shape")
            if not np.array_equal(np.where(on, np.exp(1j * self.source_phases), 0.0), self.w_rf):
                raise ValueError("source_phases do not reproduce w_rf")
        if self.w_bb is not None:
            size = self.n_rf * self.n_snapshots
            if self.w_bb.shape != (size, size):
                raise ValueError(f"w_bb must be {size}x{size}")
            off = np.ones((size, size), dtype=bool)
            for n in range(self.n_snapshots):
                sl = slice(n * self.n_rf, (n + 1) * self.n_rf)
                off[sl, sl] = False
            if np.any(self.w_bb[off] != 0):
                raise ValueError("w_bb must be block-diagonal per snapshot")

    @property
    def n_bs(self) -> int:
        return self.w_rf.shape[0]

    @property
    def n_cols(self) -> int:
        return self.w_rf.shape[1]

    @property
    def per_rf(self) -> int:
        return self.n_bs // self.n_rf

    @property
    def rows(self) -> np.ndarray:
        return support_rows(self.n_bs, self.n_rf, self.n_cols)

    @property
    def vals(self) -> np.ndarray:
        """``(n_cols, L)`` nonzero entries of each column, aligned with :attr:`rows`."""
        return masked_values(self.w_rf, self.rows)

    @property
    def phases(self) -> np.ndarray:
        if self.source_phases is not None:
            return self.source_phases
        return np.where(self.mask == 1, np.angle(self.w_rf), 0.0)

    def snapshot(self, n: int) -> np.ndarray:
        """Analog combiner ``W_RF,n`` of snapshot ``n``."""
        return self.w_rf[:, n * self.n_rf:(n + 1) * self.n_rf]

    def effective(self) -> np.ndarray:
        """Hybrid combiner ``W = W_RF W_BB`` (``W_RF`` when no digital stage)."""
        if self.w_bb is None:
            return self.w_rf
        return self.w_rf @ self.w_bb

    def block_diag_rf(self) -> np.ndarray:
        """``blkdiag(W_RF,0, ..., W_RF,N-1)`` of shape ``(N n_bs, N n_rf)``."""
        out = np.zeros((self.n_snapshots * self.n_bs, self.n_cols), dtype=complex)
        for n in range(self.n_snapshots):
            out[n * self.n_bs:(n + 1) * self.n_bs, n * self.n_rf:(n + 1) * self.n_rf] = self.snapshot(n)
        return out

    def with_snapshots(self, w_rf_extra: np.ndarray) -> "CombinerSet":
        """Append extra snapshot columns (same mask layout per snapshot)."""
        w = np.hstack([self.w_rf, w_rf_extra])
        extra = w_rf_extra.shape[1] // self.n_rf
        mask = partially_connected_mask(self.n_bs, self.n_rf, self.n_snapshots + extra)
        return CombinerSet(w, mask, self.n_rf, self.n_snapshots + extra)
