"""Gradient accumulation, Adam, learning-rate schedules and initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .dynamics import GATES, LstmWeights, NetworkWeights
from .errors import ConfigurationError

GradientSet = Dict[str, np.ndarray]


def accumulate(batch: Iterable[Mapping[str, np.ndarray]], reduction: str = "sum") -> GradientSet:
    """Elementwise sum (or mean) of gradient sets, in the order given.

    An empty batch yields an empty set, which :func:`adam_update` treats as
    zero gradients.
    """
    if reduction not in ("sum", "mean"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    out: GradientSet = {}
    count = 0
    for g in batch:
        count += 1
        if not out:
            out = {k: np.array(v, dtype=np.float64) for k, v in g.items()}
            continue
        if set(g) != set(out):
            raise ConfigurationError("gradient sets cover different blocks")
        for k, v in g.items():
            v = np.asarray(v)
            if v.shape != out[k].shape:
                raise ConfigurationError(f"block {k}: shape {v.shape} differs from {out[k].shape}")
            out[k] += v
    if reduction == "mean" and count:
        out = {k: v / count for k, v in out.items()}
    return out


def mask_recurrent_diagonal(grads: GradientSet) -> GradientSet:
    """Zero the self-connection entries so the diagonal stays at zero."""
    out = dict(grads)
    if "rec" in out:
        g = np.array(out["rec"], dtype=np.float64)
        np.fill_diagonal(g, 0.0)
        out["rec"] = g
    return out


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            v={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            **kwargs,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, rate: float):
    """One Adam step on a dictionary of parameter blocks (pure function).

    Blocks absent from ``grads`` receive a zero gradient.  Returns
    ``(new_params, new_state)``.
    """
    if set(state.m) != set(params):
        raise ConfigurationError("optimizer state does not match the parameter blocks")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads.get(k, 0.0), dtype=np.float64)
        if g.ndim and g.shape != p.shape:
            raise ConfigurationError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        new_p[k] = p - rate * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step, b1, b2, state.eps)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate: ``rate * factor**(iteration // period)``.

    ``max_decays`` caps the number of decays (``None`` = unlimited).
    """

    rate: float
    factor: float = 1.0
    period: int = 0
    max_decays: Optional[int] = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 < self.factor <= 1.0:
            raise ConfigurationError("decay factor must lie in (0, 1]")
        if self.period < 0:
            raise ConfigurationError("decay period must be non-negative")

    def at(self, iteration: int) -> float:
        if self.period == 0 or self.factor == 1.0:
            return self.rate
        k = iteration // self.period
        if self.max_decays is not None:
            k = min(k, self.max_decays)
        return self.rate * self.factor**k


# task schedules (regression / store-recall / copy-repeat)
SCHEDULES = {
    "pattern": Schedule(0.003, 0.7, 100),
    "store_recall": Schedule(0.01, 0.3, 100),
    "copy_repeat": Schedule(1e-4),
}


def gaussian(rng, shape, fan_in, scale=1.0):
    if fan_in < 1:
        raise ConfigurationError("fan-in must be at least 1")
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=shape)


def init_weights(n_in: int, n_rec: int, n_out: int, seed, scale: float = 1.0, *, recurrent=True) -> NetworkWeights:
    """Gaussian weights with standard deviation ``scale/sqrt(fan_in)``.

    The recurrent diagonal is zero; ``recurrent=False`` zeros the whole
    matrix (networks without recurrent connections).  Readout biases start
    at zero.
    """
    if min(n_in, n_rec, n_out) < 1:
        raise ConfigurationError("all layer sizes must be positive")
    rng = np.random.default_rng(seed)
    w_in = gaussian(rng, (n_rec, n_in), n_in, scale)
    w_rec = gaussian(rng, (n_rec, n_rec), n_rec, scale)
    w_out = gaussian(rng, (n_out, n_rec), n_rec)
    np.fill_diagonal(w_rec, 0.0)
    if not recurrent:
        w_rec[:] = 0.0
    return NetworkWeights(w_in, w_rec, w_out, np.zeros(n_out))


def init_lstm_weights(n_in: int, n_rec: int, n_out: int, seed, scale: float = 1.0) -> LstmWeights:
    rng = np.random.default_rng(seed)
    fan = n_in + n_rec
    w_in = {g: gaussian(rng, (n_rec, n_in), fan, scale) for g in GATES}
    w_rec = {g: gaussian(rng, (n_rec, n_rec), fan, scale) for g in GATES}
    w_out = gaussian(rng, (n_out, n_rec), n_rec)
    return LstmWeights(w_in, w_rec, w_out, np.zeros(n_out))
