# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as ``crbmo._kernels_py``.

Loops run over the nonzero combiner entries only, so a grid point costs
``O(N * n_bs)`` instead of ``O(n_rf * N * n_bs)``. Everything after the
memoryview setup runs without the GIL.
"""
import numpy as np

from libc.math cimport sqrt, INFINITY, NAN

ctypedef double complex cplx


cdef inline bint _ill(double a, double b, double d, double cond_max) noexcept nogil:
    cdef double tr = a + d
    cdef double det = a * d - b * b
    cdef double disc = sqrt((a - d) * (a - d) + 4.0 * b * b)
    cdef double lmax = 0.5 * (tr + disc)
    cdef double lmin
    if not (lmax > 0):
        return True
    lmin = det / lmax
    return not (lmin * cond_max > lmax)


def crb_batch(const cplx[:, :, ::1] A, const Py_ssize_t[:, ::1] rows,
              const cplx[:, ::1] vals, double gamma, bint want_grad=False,
              double cond_max=1e12):
    cdef Py_ssize_t G = A.shape[0]
    cdef Py_ssize_t M = rows.shape[0]
    cdef Py_ssize_t L = rows.shape[1]
    if A.shape[2] != 4:
        raise ValueError("A must have 4 columns per grid point")
    if vals.shape[0] != M or vals.shape[1] != L:
        raise ValueError("rows and vals must have the same shape")

    trace_arr = np.empty(G)
    c11_arr = np.empty((G, 2, 2))
    sing_arr = np.zeros(G, dtype=np.uint8)
    grad_arr = np.zeros((M, L), dtype=complex)
    B_arr = np.empty((M, 4), dtype=complex)
    MB_arr = np.empty((4, M), dtype=complex)
    cdef double[::1] trace = trace_arr
    cdef double[:, :, ::1] c11 = c11_arr
    cdef unsigned char[::1] sing = sing_arr
    cdef cplx[:, ::1] grad = grad_arr
    cdef cplx[:, ::1] B = B_arr
    cdef cplx[:, ::1] MB = MB_arr

    cdef double F[4][4]
    cdef double Mq[4][4]
    cdef double X[2][2]
    cdef double XT[2][2]
    cdef double T[2][2]
    cdef double S00, S01, S11, det, i00, i01, i11, c00, c01, c11v, twog
    cdef double re, im, br, bi, ar, ai
    cdef Py_ssize_t g, c, l, k, k2, r
    cdef cplx acc, w, a

    twog = 2.0 * gamma
    with nogil:
        for g in range(G):
            # B = W^H A over the support of each column
            for c in range(M):
                for k in range(4):
                    re = 0.0
                    im = 0.0
                    for l in range(L):
                        w = vals[c, l]
                        a = A[g, rows[c, l], k]
                        # conj(w) * a
                        re = re + w.real * a.real + w.imag * a.imag
                        im = im + w.real * a.imag - w.imag * a.real
                    B[c, k] = re + 1j * im
            for k in range(4):
                for k2 in range(k, 4):
                    re = 0.0
                    for c in range(M):
                        br = B[c, k].real
                        bi = B[c, k].imag
                        re = re + br * B[c, k2].real + bi * B[c, k2].imag
                    F[k][k2] = twog * re
                    F[k2][k] = twog * re

            if _ill(F[2][2], F[2][3], F[3][3], cond_max):
                sing[g] = 1
            det = F[2][2] * F[3][3] - F[2][3] * F[2][3]
            i00 = F[3][3] / det
            i01 = -F[2][3] / det
            i11 = F[2][2] / det
            # X = F22^-1 F21
            X[0][0] = i00 * F[2][0] + i01 * F[3][0]
            X[0][1] = i00 * F[2][1] + i01 * F[3][1]
            X[1][0] = i01 * F[2][0] + i11 * F[3][0]
            X[1][1] = i01 * F[2][1] + i11 * F[3][1]
            S00 = F[0][0] - (F[0][2] * X[0][0] + F[0][3] * X[1][0])
            S11 = F[1][1] - (F[1][2] * X[0][1] + F[1][3] * X[1][1])
            S01 = 0.5 * ((F[0][1] - (F[0][2] * X[0][1] + F[0][3] * X[1][1]))
                         + (F[1][0] - (F[1][2] * X[0][0] + F[1][3] * X[1][0])))
            if not sing[g] and _ill(S00, S01, S11, cond_max):
                sing[g] = 1
            if sing[g]:
                trace[g] = INFINITY
                c11[g, 0, 0] = NAN
                c11[g, 0, 1] = NAN
                c11[g, 1, 0] = NAN
                c11[g, 1, 1] = NAN
                continue
            det = S00 * S11 - S01 * S01
            c00 = S11 / det
            c01 = -S01 / det
            c11v = S00 / det
            trace[g] = c00 + c11v
            c11[g, 0, 0] = c00
            c11[g, 0, 1] = c01
            c11[g, 1, 0] = c01
            c11[g, 1, 1] = c11v
            if not want_grad:
                continue

            # T = -C11^2 ; M = [[T, -T X^T], [-X T, X T X^T]]
            T[0][0] = -(c00 * c00 + c01 * c01)
            T[0][1] = -(c00 * c01 + c01 * c11v)
            T[1][0] = T[0][1]
            T[1][1] = -(c01 * c01 + c11v * c11v)
            for k in range(2):
                for k2 in range(2):
                    XT[k][k2] = X[k][0] * T[0][k2] + X[k][1] * T[1][k2]
            for k in range(2):
                for k2 in range(2):
                    Mq[k][k2] = T[k][k2]
                    Mq[k][k2 + 2] = -XT[k2][k]
                    Mq[k + 2][k2] = -XT[k][k2]
                    Mq[k + 2][k2 + 2] = XT[k][0] * X[k2][0] + XT[k][1] * X[k2][1]
            # MB = M B^H  (4 x M)
            for k in range(4):
                for c in range(M):
                    re = 0.0
                    im = 0.0
                    for k2 in range(4):
                        re = re + Mq[k][k2] * B[c, k2].real
                        im = im - Mq[k][k2] * B[c, k2].imag
                    MB[k, c] = re + 1j * im
            # grad[c, l] += 2 gamma * sum_k A[rows[c,l], k] MB[k, c]
            for c in range(M):
                for l in range(L):
                    r = rows[c, l]
                    re = 0.0
                    im = 0.0
                    for k in range(4):
                        ar = A[g, r, k].real
                        ai = A[g, r, k].imag
                        br = MB[k, c].real
                        bi = MB[k, c].imag
                        re = re + ar * br - ai * bi
                        im = im + ar * bi + ai * br
                    acc = grad[c, l]
                    grad[c, l] = (acc.real + twog * re) + 1j * (acc.imag + twog * im)

    return trace_arr, c11_arr, sing_arr, (grad_arr if want_grad else None)


def ml_metric_batch(const cplx[:, ::1] S, const Py_ssize_t[:, ::1] rows,
                    const cplx[:, ::1] vals, const cplx[::1] y):
    cdef Py_ssize_t G = S.shape[0]
    cdef Py_ssize_t M = rows.shape[0]
    cdef Py_ssize_t L = rows.shape[1]
    if y.shape[0] != M:
        raise ValueError("y length must equal the number of combiner columns")
    out_arr = np.empty(G)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t g, c, l
    cdef double re, im, nr, ni, norm2
    cdef cplx w, s
    with nogil:
        for g in range(G):
            nr = 0.0
            ni = 0.0
            norm2 = 0.0
            for c in range(M):
                re = 0.0
                im = 0.0
                for l in range(L):
                    w = vals[c, l]
                    s = S[g, rows[c, l]]
                    re = re + w.real * s.real + w.imag * s.imag
                    im = im + w.real * s.imag - w.imag * s.real
                norm2 = norm2 + re * re + im * im
                # conj(b_c) * y_c
                nr = nr + re * y[c].real + im * y[c].imag
                ni = ni + re * y[c].imag - im * y[c].real
            if norm2 < 1e-24:
                out[g] = 0.0
            else:
                out[g] = (nr * nr + ni * ni) / norm2
    return out_arr
