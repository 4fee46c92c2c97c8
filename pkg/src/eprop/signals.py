"""Loss functions, readout gradients and the learning signals of e-prop 1.

Sign conventions: learning signals follow the update form, e.g.
``L = B (y* - y)``, so that ``eta * L * trace`` is a descent step.  Every
function that returns weight gradients returns ``dE/dtheta`` (or an
estimate of it), ready to be handed to a minimising optimizer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import sigmoid
from .errors import ConfigurationError

LOSS_KINDS = ("mse", "ce", "bce")


def softmax(y, axis=-1):
    y = np.asarray(y, dtype=np.float64)
    e = np.exp(y - y.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class LossSpec:
    """Error definition for one trial.

    kind: ``mse`` (regression), ``ce`` (softmax cross-entropy on one-hot
    targets) or ``bce`` (per-channel logistic outputs, base-2 cross-entropy,
    measured in bits).
    """

    kind: str
    target: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        target = np.asarray(self.target, dtype=np.float64)
        if target.ndim != 2:
            raise ConfigurationError("target must be a [T x n_out] array")
        mask = np.ones(target.shape[0]) if self.mask is None else np.asarray(self.mask, dtype=np.float64)
        if mask.shape != (target.shape[0],):
            raise ConfigurationError(f"mask length {mask.shape} does not match T={target.shape[0]}")
        if np.any(mask < 0):
            raise ConfigurationError("mask weights must be non-negative")
        if self.kind == "ce":
            on = mask > 0
            rows = target[on]
            if rows.size and not (
                np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1)
            ):
                raise ConfigurationError("cross-entropy targets must be one-hot on masked steps")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "mask", mask)

    @property
    def T(self):
        return self.target.shape[0]


def output_error(y, loss: LossSpec):
    """Return ``(E, dE/dy)`` where ``dE/dy`` is the per-step partial derivative."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != loss.target.shape:
        raise ConfigurationError(f"outputs {y.shape} do not match targets {loss.target.shape}")
    m = loss.mask[:, None]
    if loss.kind == "mse":
        diff = y - loss.target
        return 0.5 * float(np.sum(m * diff**2)), m * diff
    if loss.kind == "ce":
        pi = softmax(y)
        logp = y - y.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        E = -float(np.sum(m * loss.target * logp))
        return E, m * (pi - loss.target)
    p = sigmoid(y)
    # log(sigmoid(y)) = -log1p(exp(-y)), written stably
    log_p = -np.logaddexp(0.0, -y)
    log_q = -np.logaddexp(0.0, y)
    b = loss.target
    E = -float(np.sum(m * (b * log_p + (1 - b) * log_q))) / math.log(2.0)
    return E, m * (p - b) / math.log(2.0)


@dataclass
class ReadoutBackward:
    loss: float
    dEdy: np.ndarray  # per-step partial dE/dy
    delta: np.ndarray  # total dE/dy through the leaky readout
    dEdz: np.ndarray  # partial dE/dz (no recurrent paths)
    grad_out: np.ndarray
    grad_b: np.ndarray


def readout_backward(z, y, theta_out, kappa: float, loss: LossSpec) -> ReadoutBackward:
    """Exact gradients of the loss through the leaky readout.

    ``dEdz[t]`` is the partial derivative of the error w.r.t. the network
    output at ``t``; it ignores how ``z[t]`` shapes later network states.
    """
    z = np.asarray(z, dtype=np.float64)
    E, dEdy = output_error(y, loss)
    delta = np.empty_like(dEdy)
    acc = np.zeros(dEdy.shape[1])
    for t in range(dEdy.shape[0] - 1, -1, -1):
        acc = dEdy[t] + kappa * acc
        delta[t] = acc
    return ReadoutBackward(
        loss=E,
        dEdy=dEdy,
        delta=delta,
        dEdz=delta @ theta_out,
        grad_out=delta.T @ z,
        grad_b=delta.sum(axis=0),
    )


def grad_output_weights(y, loss: LossSpec, z, kappa: float) -> dict:
    """Readout gradients written as a forward (online) filter of the spikes.

    Equal to the exact gradient; computed as ``sum_t err_t * zbar_t`` with
    ``zbar_t = sum_{t'<=t} kappa^(t-t') z_t'``.
    """
    _, err = output_error(y, loss)
    z = np.asarray(z, dtype=np.float64)
    zbar = np.zeros(z.shape[1])
    one_bar = 0.0
    g_out = np.zeros((err.shape[1], z.shape[1]))
    g_b = np.zeros(err.shape[1])
    for t in range(z.shape[0]):
        zbar = kappa * zbar + z[t]
        one_bar = kappa * one_bar + 1.0
        g_out += np.outer(err[t], zbar)
        g_b += err[t] * one_bar
    return {"out": g_out, "b_out": g_b}


# ---------------------------------------------------------------------------
# feedback matrices and learning signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackMatrix:
    """Weights that broadcast output errors to the recurrent neurons.

    kind ``random``: Gaussian, sampled once (``matrices`` has one entry) or,
    with ``resample_period``, a fixed sequence with one matrix per window.
    kind ``symmetric``: tied to the current readout weights.
    kind ``global``: all entries ``1/sqrt(n)``.
    """

    kind: str
    matrices: Optional[np.ndarray] = None  # [P x n_rec x n_out]
    variance: Optional[float] = None
    resample_period: Optional[int] = None

    @classmethod
    def random(cls, n_rec, n_out, rng, variance=None, resample_period=None, T=None):
        variance = 1.0 / n_rec if variance is None else float(variance)
        n_mat = 1
        if resample_period is not None:
            if T is None or resample_period < 1:
                raise ConfigurationError("resampled feedback needs a positive period and the trial length")
            n_mat = -(-T // resample_period)
        mats = rng.normal(0.0, math.sqrt(variance), size=(n_mat, n_rec, n_out))
        mats.setflags(write=False)
        return cls("random", mats, variance, resample_period)

    @classmethod
    def symmetric(cls):
        return cls("symmetric")

    @classmethod
    def uniform(cls, n_rec, n_out):
        mats = np.full((1, n_rec, n_out), 1.0 / math.sqrt(n_rec))
        mats.setflags(write=False)
        return cls("global", mats)

    def sequence(self, theta_out=None):
        """``(matrices, period)``; period 0 means one matrix for the whole trial."""
        if self.kind == "symmetric":
            if theta_out is None:
                raise ConfigurationError("symmetric feedback needs the readout weights")
            return np.ascontiguousarray(np.asarray(theta_out).T[None, :, :]), 0
        return self.matrices, (self.resample_period or 0)

    def matrix(self, theta_out=None, t=0):
        mats, period = self.sequence(theta_out)
        return mats[t // period] if period else mats[0]

    def digest(self) -> str:
        if self.matrices is None:
            return "symmetric"
        return hashlib.sha256(np.ascontiguousarray(self.matrices).tobytes()).hexdigest()


def learning_signal_regression(y, y_star, B, mask=None):
    """``L_j = sum_k B_jk (y*_k - y_k)`` for a step (vectors) or a series (rows)."""
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    if y.shape != y_star.shape or y.shape[-1] != B.shape[1]:
        raise ConfigurationError("output, target and feedback shapes do not match")
    sig = (y_star - y) @ B.T
    if mask is not None:
        sig = sig * np.asarray(mask, dtype=np.float64)[..., None]
    return sig


def learning_signal_classification(y, pi_star, B, mask=None):
    """``L_j = sum_k B_jk (pi*_k - pi_k)`` with ``pi = softmax(y)``."""
    y = np.asarray(y, dtype=np.float64)
    pi_star = np.asarray(pi_star, dtype=np.float64)
    if y.shape != pi_star.shape or y.shape[-1] != B.shape[1]:
        raise ConfigurationError("output, target and feedback shapes do not match")
    m = np.ones(y.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    on = np.broadcast_to(m > 0, y.shape[:-1])
    rows = pi_star[on]
    if rows.size and not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=-1) == 1)):
        raise ConfigurationError("classification targets must be one-hot")
    return (pi_star - softmax(y)) @ B.T * m[..., None]


def grad_eprop1(signals, filtered, *, filter_kappa=None, readout_kappa=None):
    """Gradient estimate ``-sum_t L_j^t * filtered_e_ji^t``.

    ``signals`` is ``[T x n]`` and ``filtered`` ``[T x n x n_pre]``.  The two
    kappas, when given, must agree: the trace filter has to match the readout.
    """
    if filter_kappa is not None and readout_kappa is not None and not math.isclose(
        filter_kappa, readout_kappa, rel_tol=0, abs_tol=1e-15
    ):
        raise ConfigurationError(
            f"eligibility filter kappa {filter_kappa} differs from readout kappa {readout_kappa}"
        )
    signals = np.asarray(signals, dtype=np.float64)
    filtered = np.asarray(filtered, dtype=np.float64)
    if filtered.shape[:2] != signals.shape:
        raise ConfigurationError("signals and traces have mismatched shapes")
    return -np.einsum("tj,tji->ji", signals, filtered)


# ---------------------------------------------------------------------------
# firing-rate regularization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularizationSpec:
    """Quadratic pull of each neuron's mean rate towards ``f_target`` (Hz).

    ``E_reg = lam * mean_j (f_j - f_target)^2`` with ``f_j`` in Hz, averaged
    over the steps and trials that separate two weight updates.
    ``reduction="sum"`` sums over neurons instead of averaging and
    ``reduction="population"`` penalizes only the population mean rate,
    ``lam * (mean_j f_j - f_target)^2``.
    """

    f_target: float = 10.0
    lam: float = 0.5
    dt_ms: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.f_target < 0 or self.lam < 0:
            raise ConfigurationError("f_target and lam must be non-negative")
        if self.reduction not in ("mean", "sum", "population"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")

    def weight(self, n: int) -> float:
        return self.lam if self.reduction == "sum" else self.lam / n


def firing_rates(spike_counts, n_trials, T, dt_ms):
    """Mean rate in Hz from per-neuron spike counts."""
    return np.asarray(spike_counts, dtype=np.float64) * 1000.0 / (n_trials * T * dt_ms)


def regularization_loss(spike_counts, reg: RegularizationSpec, n_trials, T):
    f = firing_rates(spike_counts, n_trials, T, reg.dt_ms)
    if reg.reduction == "population":
        return reg.lam * float((f.mean() - reg.f_target) ** 2)
    return reg.weight(f.shape[0]) * float(np.sum((f - reg.f_target) ** 2))


def regularization_dEdz(spike_counts, reg: RegularizationSpec, n_trials, T):
    """Per-neuron ``dE_reg/dz_j^t``; identical for every step and trial."""
    f = firing_rates(spike_counts, n_trials, T, reg.dt_ms)
    if reg.reduction == "population":
        f = np.full_like(f, f.mean())
    return 2.0 * reg.weight(f.shape[0]) * (f - reg.f_target) * 1000.0 / (n_trials * T * reg.dt_ms)


def grad_regularization(spike_counts, reg: RegularizationSpec, trace_sums, n_trials, T) -> dict:
    """Rate-regularization gradient from unfiltered eligibility traces.

    ``trace_sums`` maps block names to ``sum_t e_ji^t`` accumulated over the
    same trials as ``spike_counts``.
    """
    c = regularization_dEdz(spike_counts, reg, n_trials, T)
    return {name: c[:, None] * np.asarray(s) for name, s in trace_sums.items()}


# ---------------------------------------------------------------------------
# Clopath-style postsynaptic factor
# ---------------------------------------------------------------------------

CLOPATH_TAU_MS = 10.0


def clopath_thresholds(v_th):
    """``(v_minus, v_plus)`` used by the postsynaptic factor."""
    return v_th / 4.0, 0.0


def lowpass_voltage(vhat, v, decay):
    """Normalised exponential trace of the membrane voltage."""
    return decay * vhat + (1.0 - decay) * v


def clopath_post_factor(v, vhat, v_th):
    """``[v - v_plus]^+ * [vhat - v_minus]^+``, replaces the pseudo-derivative."""
    v_minus, v_plus = clopath_thresholds(v_th)
    return np.maximum(np.asarray(v) - v_plus, 0.0) * np.maximum(np.asarray(vhat) - v_minus, 0.0)
