# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for batched spiking simulation and temporal filters.

Signatures and results match :mod:`eprop._kernels_py` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def spiking_forward(const double[:, :, ::1] current, const double[:, ::1] w_rec,
                    double alpha, double v_th, double gamma, int refractory_steps,
                    const double[::1] beta, double rho):
    """Batched LIF/ALIF recursion.

    ``current`` holds ``W_in x[t]`` for every trial and step, shape
    ``[B x T x n]``.  Returns ``(z, v, a, h, blocked)`` of the same shape;
    ``blocked`` marks steps in the refractory period.
    """
    cdef Py_ssize_t B = current.shape[0], T = current.shape[1], n = current.shape[2]
    cdef Py_ssize_t b, t, j, k, ns
    z_arr = np.zeros((B, T, n))
    v_arr = np.zeros((B, T, n))
    a_arr = np.zeros((B, T, n))
    h_arr = np.zeros((B, T, n))
    blk_arr = np.zeros((B, T, n), dtype=np.int8)
    cdef double[:, :, ::1] z = z_arr
    cdef double[:, :, ::1] v = v_arr
    cdef double[:, :, ::1] a = a_arr
    cdef double[:, :, ::1] h = h_arr
    cdef cnp.int8_t[:, :, ::1] blk = blk_arr
    cdef double[::1] vs = np.zeros(n)
    cdef double[::1] as_ = np.zeros(n)
    cdef double[::1] zs = np.zeros(n)
    cdef long[::1] refr = np.zeros(n, dtype=np.int_)
    cdef long[::1] spk = np.zeros(n, dtype=np.int_)
    cdef double acc, A, hv
    for b in range(B):
        for j in range(n):
            vs[j] = 0.0
            as_[j] = 0.0
            zs[j] = 0.0
            refr[j] = 0
        for t in range(T):
            ns = 0
            for k in range(n):
                if zs[k] != 0.0:
                    spk[ns] = k
                    ns += 1
            for j in range(n):
                acc = 0.0
                for k in range(ns):
                    acc += w_rec[j, spk[k]]
                vs[j] = alpha * vs[j] + acc + current[b, t, j] - v_th * zs[j]
                as_[j] = rho * as_[j] + zs[j]
            for j in range(n):
                A = v_th + beta[j] * as_[j]
                v[b, t, j] = vs[j]
                a[b, t, j] = as_[j]
                if refr[j] > 0:
                    blk[b, t, j] = 1
                    zs[j] = 0.0
                    h[b, t, j] = 0.0
                    refr[j] -= 1
                else:
                    hv = 1.0 - fabs((vs[j] - A) / v_th)
                    h[b, t, j] = gamma * hv if hv > 0.0 else 0.0
                    if vs[j] >= A:
                        zs[j] = 1.0
                        refr[j] = refractory_steps
                    else:
                        zs[j] = 0.0
                z[b, t, j] = zs[j]
    return z_arr, v_arr, a_arr, h_arr, blk_arr


def leaky_filter(const double[:, :, ::1] x, double decay, bint reverse=False):
    """``out[t] = decay*out[t-1] + x[t]`` along axis 1 (or backwards in time)."""
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], K = x.shape[2]
    cdef Py_ssize_t b, t, k, s
    out_arr = np.empty((B, T, K))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p
    for b in range(B):
        for s in range(T):
            t = T - 1 - s if reverse else s
            if s == 0:
                for k in range(K):
                    out[b, t, k] = x[b, t, k]
            else:
                p = t + 1 if reverse else t - 1
                for k in range(K):
                    out[b, t, k] = decay * out[b, p, k] + x[b, t, k]
    return out_arr


def adaptation_adjoint(const double[:, :, ::1] c, const double[:, :, ::1] h,
                       const double[::1] beta, double rho):
    """Coefficients that turn sums over the adaptation eligibility into a product.

    With ``eps[t] = h[t-1]*zhat[t-1] + (rho - beta*h[t-1])*eps[t-1]`` the sum
    ``sum_t c[t]*eps[t]`` equals ``sum_t q[t]*zhat[t]`` for the returned
    ``q`` (``q[T-1] = 0``).
    """
    cdef Py_ssize_t B = c.shape[0], T = c.shape[1], n = c.shape[2]
    cdef Py_ssize_t b, t, j
    q_arr = np.zeros((B, T, n))
    cdef double[:, :, ::1] q = q_arr
    lam_arr = np.zeros(n)
    cdef double[::1] lam = lam_arr
    # lam[t] = c[t] + (rho - beta*h[t]) * lam[t+1]; q[t-1] = lam[t]*h[t-1]
    for b in range(B):
        for t in range(T - 1, 0, -1):
            for j in range(n):
                if t == T - 1:
                    lam[j] = c[b, t, j]
                else:
                    lam[j] = c[b, t, j] + (rho - beta[j] * h[b, t, j]) * lam[j]
                q[b, t - 1, j] = lam[j] * h[b, t - 1, j]
    return q_arr
