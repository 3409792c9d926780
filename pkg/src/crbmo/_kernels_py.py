"""Pure-numpy kernels; reference twin of ``_kernels.pyx``.

Both modules expose the same two functions with identical contracts:

``crb_batch(A, rows, vals, gamma, want_grad, cond_max)``
    ``A`` is ``(G, n_bs, 4)`` holding ``[beta*a1, beta*a2, a, j*a]`` per grid
    point, ``rows``/``vals`` the masked combiner columns (``(M, L)`` each).
    Returns ``(trace, c11, singular, grad)`` where ``trace`` is ``tr(C11)``
    per point (``inf`` when singular), ``c11`` the ``(G, 2, 2)`` DOA CRB,
    ``singular`` a uint8 flag and ``grad`` the ``(M, L)`` masked Euclidean
    gradient summed over non-singular points (``None`` unless requested).

``ml_metric_batch(S, rows, vals, y)``
    Concentrated-likelihood metric ``|b^H y|^2 / ||b||^2`` with
    ``b = W^H s`` for each steering row of ``S`` (``(G, n_bs)``).
"""
from __future__ import annotations

import numpy as np

CHUNK = 512
TINY_NORM2 = 1e-24


def _ill_conditioned(a, b, d, cond_max):
    # symmetric 2x2 [[a, b], [b, d]]; NaN compares False and lands as singular
    tr = a + d
    det = a * d - b * b
    disc = np.sqrt((a - d) ** 2 + 4.0 * b * b)
    lmax = 0.5 * (tr + disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        lmin = det / lmax
        ok = (lmax > 0) & (lmin * cond_max > lmax)
    return ~ok


def _inv2(a, b, d):
    det = a * d - b * b
    return d / det, -b / det, a / det


def _chunk(A, rows, vals, gamma, want_grad, cond_max):
    Ag = A[:, rows, :]  # (G, M, L, 4)
    B = np.einsum("cl,gclk->gck", vals.conj(), Ag)
    gram = np.einsum("gck,gcm->gkm", B.conj(), B)
    F = 2.0 * gamma * gram.real
    F = 0.5 * (F + np.swapaxes(F, 1, 2))

    f11 = F[:, :2, :2]
    f12 = F[:, :2, 2:]
    f21 = F[:, 2:, :2]
    sing = _ill_conditioned(F[:, 2, 2], F[:, 2, 3], F[:, 3, 3], cond_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        i00, i01, i11 = _inv2(F[:, 2, 2], F[:, 2, 3], F[:, 3, 3])
        f22inv = np.stack([np.stack([i00, i01], -1), np.stack([i01, i11], -1)], -2)
        X = f22inv @ f21  # F22^-1 F21
        S = f11 - f12 @ X
        s01 = 0.5 * (S[:, 0, 1] + S[:, 1, 0])
        sing |= _ill_conditioned(S[:, 0, 0], s01, S[:, 1, 1], cond_max)
        c00, c01, c11_ = _inv2(S[:, 0, 0], s01, S[:, 1, 1])
    c11 = np.stack([np.stack([c00, c01], -1), np.stack([c01, c11_], -1)], -2)
    trace = np.where(sing, np.inf, c00 + c11_)
    c11[sing] = np.nan

    grad = None
    if want_grad:
        ok = ~sing
        T = -(c11[ok] @ c11[ok])
        Xo = X[ok]
        XT = Xo @ T
        M = np.empty((XT.shape[0], 4, 4))
        M[:, :2, :2] = T
        M[:, :2, 2:] = -np.swapaxes(XT, 1, 2)
        M[:, 2:, :2] = -XT
        M[:, 2:, 2:] = XT @ np.swapaxes(Xo, 1, 2)
        MBh = np.einsum("gkm,gcm->gkc", M, B[ok].conj())
        grad = 2.0 * gamma * np.einsum("gclk,gkc->cl", Ag[ok], MBh)
    return trace, c11, sing, grad


def crb_batch(A, rows, vals, gamma, want_grad=False, cond_max=1e12):
    A = np.asarray(A, dtype=complex)
    G = A.shape[0]
    trace = np.empty(G)
    c11 = np.empty((G, 2, 2))
    singular = np.zeros(G, dtype=np.uint8)
    grad = np.zeros(rows.shape, dtype=complex) if want_grad else None
    for start in range(0, G, CHUNK):
        sl = slice(start, min(G, start + CHUNK))
        t, c, s, g = _chunk(A[sl], rows, vals, gamma, want_grad, cond_max)
        trace[sl] = t
        c11[sl] = c
        singular[sl] = s
        if want_grad:
            grad += g
    return trace, c11, singular, grad


def ml_metric_batch(S, rows, vals, y):
    S = np.asarray(S, dtype=complex)
    out = np.empty(S.shape[0])
    for start in range(0, S.shape[0], CHUNK):
        sl = slice(start, min(S.shape[0], start + CHUNK))
        b = np.einsum("cl,gcl->gc", vals.conj(), S[sl][:, rows])
        norm2 = np.einsum("gc,gc->g", b.conj(), b).real
        num = np.abs(b.conj() @ y) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            out[sl] = np.where(norm2 < TINY_NORM2, 0.0, num / norm2)
    return out
