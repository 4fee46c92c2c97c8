"""Pure numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np


def spiking_forward(current, w_rec, alpha, v_th, gamma, refractory_steps, beta, rho):
    current = np.ascontiguousarray(current, dtype=np.float64)
    B, T, n = current.shape
    beta = np.asarray(beta, dtype=np.float64)
    z = np.zeros((B, T, n))
    v = np.zeros((B, T, n))
    a = np.zeros((B, T, n))
    h = np.zeros((B, T, n))
    blocked = np.zeros((B, T, n), dtype=np.int8)
    vs = np.zeros((B, n))
    as_ = np.zeros((B, n))
    zs = np.zeros((B, n))
    refr = np.zeros((B, n), dtype=np.int64)
    w_rec_t = np.ascontiguousarray(np.asarray(w_rec).T)
    for t in range(T):
        vs = alpha * vs + zs @ w_rec_t + current[:, t] - v_th * zs
        as_ = rho * as_ + zs
        A = v_th + beta * as_
        blk = refr > 0
        hv = gamma * np.maximum(0.0, 1.0 - np.abs((vs - A) / v_th))
        zs = ((vs >= A) & ~blk).astype(np.float64)
        refr = np.where(zs > 0, refractory_steps, np.maximum(refr - 1, 0))
        v[:, t], a[:, t], z[:, t] = vs, as_, zs
        h[:, t] = np.where(blk, 0.0, hv)
        blocked[:, t] = blk
    return z, v, a, h, blocked


def leaky_filter(x, decay, reverse=False):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    prev = np.zeros((x.shape[0], x.shape[2]))
    steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
    for t in steps:
        prev = decay * prev + x[:, t]
        out[:, t] = prev
    return out


def adaptation_adjoint(c, h, beta, rho):
    c = np.asarray(c, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    B, T, n = c.shape
    q = np.zeros((B, T, n))
    lam = np.zeros((B, n))
    for t in range(T - 1, 0, -1):
        lam = c[:, t] if t == T - 1 else c[:, t] + (rho - beta * h[:, t]) * lam
        q[:, t - 1] = lam * h[:, t - 1]
    return q
