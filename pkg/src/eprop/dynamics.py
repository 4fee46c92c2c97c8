"""Discrete-time network dynamics for the four supported cell models.

Time convention used throughout the package: at step ``t`` a neuron receives
the external input ``x[t]`` and the network output of the previous step
``z[t-1]``::

    s[t] = M(s[t-1], z[t-1], x[t])        z[t] = f(s[t])

For LIF neurons this reads ``v[t] = alpha*v[t-1] + W_rec z[t-1] + W_in x[t]
- v_th*z[t-1]`` (soft reset by subtraction, uniform one-step recurrent
delay).  Every trial starts from the all-zero state unless an explicit
initial state is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

import numpy as np

from .errors import ConfigurationError, NumericError

GATES = ("i", "f", "o", "c")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def decay_factor(tau_ms: float, dt_ms: float = 1.0) -> float:
    """``exp(-dt/tau)``, the per-step decay of a leaky variable."""
    if tau_ms <= 0:
        raise ConfigurationError("time constant must be positive")
    return math.exp(-dt_ms / tau_ms)


# ---------------------------------------------------------------------------
# parameters and cell models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LifParams:
    alpha: float
    v_th: float = 0.61
    gamma: float = 0.3
    refractory_steps: int = 0
    dt_ms: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.v_th <= 0:
            raise ConfigurationError("v_th must be positive")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if int(self.refractory_steps) != self.refractory_steps or self.refractory_steps < 0:
            raise ConfigurationError("refractory_steps must be a non-negative integer")

    @classmethod
    def from_tau(cls, tau_m_ms: float = 20.0, dt_ms: float = 1.0, **kwargs) -> "LifParams":
        return cls(alpha=decay_factor(tau_m_ms, dt_ms), dt_ms=dt_ms, **kwargs)


@dataclass(frozen=True)
class AlifParams:
    """Adaptive threshold on top of LIF.

    ``beta`` may be a scalar or a per-neuron vector; a vector with zeros
    for some neurons describes an LSNN mixing plain LIF and adaptive units.
    """

    lif: LifParams
    beta: Union[float, np.ndarray] = 0.03
    rho: float = decay_factor(1200.0)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1), got {self.rho}")
        if np.any(np.asarray(self.beta) < 0):
            raise ConfigurationError("beta must be non-negative")

    @classmethod
    def from_tau(cls, lif: LifParams, tau_a_ms: float = 1200.0, beta=0.03) -> "AlifParams":
        return cls(lif=lif, beta=beta, rho=decay_factor(tau_a_ms, lif.dt_ms))

    def beta_vector(self, n: int) -> np.ndarray:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim == 0:
            return np.full(n, float(beta))
        if beta.shape != (n,):
            raise ConfigurationError(f"beta has shape {beta.shape}, expected ({n},)")
        return beta


@dataclass(frozen=True)
class LIF:
    params: LifParams
    kind = "lif"
    d = 1
    spiking = True


@dataclass(frozen=True)
class ALIF:
    params: AlifParams
    kind = "alif"
    d = 2
    spiking = True


@dataclass(frozen=True)
class SigmoidRNN:
    alpha: float = 0.0
    kind = "sigmoid"
    d = 1
    spiking = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class LSTM:
    kind = "lstm"
    d = 1
    spiking = False


CellModel = Union[LIF, ALIF, SigmoidRNN, LSTM]


def lsnn(n_lif: int, n_alif: int, lif: LifParams, tau_a_ms=1200.0, beta=0.03) -> ALIF:
    """LSNN: the first ``n_lif`` neurons do not adapt, the rest do."""
    betas = np.concatenate([np.zeros(n_lif), np.full(n_alif, float(beta))])
    return ALIF(AlifParams.from_tau(lif, tau_a_ms, betas))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _as_matrix(a, name):
    a = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class NetworkWeights:
    theta_in: np.ndarray
    theta_rec: np.ndarray
    theta_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name in ("theta_in", "theta_rec", "theta_out", "b_out"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        n = self.theta_rec.shape[0]
        if self.theta_rec.shape != (n, n):
            raise ConfigurationError("theta_rec must be square")
        if self.theta_in.ndim != 2 or self.theta_in.shape[0] != n:
            raise ConfigurationError(f"theta_in must have {n} rows")
        if self.theta_out.ndim != 2 or self.theta_out.shape[1] != n:
            raise ConfigurationError(f"theta_out must have {n} columns")
        if self.b_out.shape != (self.theta_out.shape[0],):
            raise ConfigurationError("b_out must match the number of readouts")
        if np.any(np.diag(self.theta_rec) != 0.0):
            raise ConfigurationError("theta_rec must have a zero diagonal")

    @property
    def n_rec(self):
        return self.theta_rec.shape[0]

    @property
    def n_in(self):
        return self.theta_in.shape[1]

    @property
    def n_out(self):
        return self.theta_out.shape[0]

    def blocks(self) -> dict:
        return {"in": self.theta_in, "rec": self.theta_rec, "out": self.theta_out, "b_out": self.b_out}

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, np.ndarray]) -> "NetworkWeights":
        return cls(blocks["in"], blocks["rec"], blocks["out"], blocks["b_out"])


@dataclass(frozen=True)
class LstmWeights:
    """Per-gate input and recurrent weights plus a linear readout (no gate biases)."""

    w_in: Mapping[str, np.ndarray]
    w_rec: Mapping[str, np.ndarray]
    theta_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        w_in = {g: _as_matrix(self.w_in[g], f"w_in[{g}]") for g in GATES}
        w_rec = {g: _as_matrix(self.w_rec[g], f"w_rec[{g}]") for g in GATES}
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_rec", w_rec)
        object.__setattr__(self, "theta_out", _as_matrix(self.theta_out, "theta_out"))
        object.__setattr__(self, "b_out", _as_matrix(self.b_out, "b_out"))
        n = w_rec["i"].shape[0]
        n_in = w_in["i"].shape[1]
        for g in GATES:
            if w_rec[g].shape != (n, n) or w_in[g].shape != (n, n_in):
                raise ConfigurationError(f"gate {g} weights have inconsistent shapes")
        if self.theta_out.shape[1] != n or self.b_out.shape != (self.theta_out.shape[0],):
            raise ConfigurationError("readout shapes do not match the LSTM size")

    @property
    def n_rec(self):
        return self.w_rec["i"].shape[0]

    @property
    def n_in(self):
        return self.w_in["i"].shape[1]

    @property
    def n_out(self):
        return self.theta_out.shape[0]

    def blocks(self) -> dict:
        out = {}
        for g in GATES:
            out[f"in_{g}"] = self.w_in[g]
            out[f"rec_{g}"] = self.w_rec[g]
        out["out"] = self.theta_out
        out["b_out"] = self.b_out
        return out

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, np.ndarray]) -> "LstmWeights":
        return cls(
            {g: blocks[f"in_{g}"] for g in GATES},
            {g: blocks[f"rec_{g}"] for g in GATES},
            blocks["out"],
            blocks["b_out"],
        )


def weights_from_blocks(model: CellModel, blocks):
    if isinstance(model, LSTM):
        return LstmWeights.from_blocks(blocks)
    return NetworkWeights.from_blocks(blocks)


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkState:
    """State of a LIF/ALIF/sigmoid network after one step.

    For the sigmoid RNN ``v`` holds the activation ``s`` and ``h`` holds
    ``sigma'(s)``; ``a`` and ``refrac`` stay at zero.
    """

    v: np.ndarray
    a: np.ndarray
    z: np.ndarray
    refrac: np.ndarray
    y: np.ndarray
    h: np.ndarray = None

    @classmethod
    def zeros(cls, n: int, n_out: int, adaptive: bool = False) -> "NetworkState":
        return cls(
            v=np.zeros(n),
            a=np.zeros(n if adaptive else 0),
            z=np.zeros(n),
            refrac=np.zeros(n, dtype=np.int64),
            y=np.zeros(n_out),
            h=np.zeros(n),
        )


@dataclass(frozen=True)
class LstmState:
    c: np.ndarray
    h: np.ndarray
    y: np.ndarray
    i: np.ndarray = None
    f: np.ndarray = None
    o: np.ndarray = None
    c_tilde: np.ndarray = None

    @classmethod
    def zeros(cls, n: int, n_out: int) -> "LstmState":
        z = np.zeros(n)
        return cls(c=z, h=z.copy(), y=np.zeros(n_out), i=z.copy(), f=z.copy(), o=z.copy(), c_tilde=z.copy())


def zero_state(model: CellModel, n: int, n_out: int):
    if isinstance(model, LSTM):
        return LstmState.zeros(n, n_out)
    return NetworkState.zeros(n, n_out, adaptive=isinstance(model, ALIF))


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def _check_input(x_t, w):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (w.n_in,):
        raise ConfigurationError(f"input has shape {x_t.shape}, expected ({w.n_in},)")
    return x_t


def _check_finite(arr, what, step):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}", step=step)


def pseudo_derivative(v, A, params: LifParams, refractory=None):
    """Piecewise-linear surrogate ``gamma * max(0, 1 - |v - A| / v_th)``.

    Zero wherever ``refractory`` is true.
    """
    h = params.gamma * np.maximum(0.0, 1.0 - np.abs((np.asarray(v) - A) / params.v_th))
    if refractory is not None:
        h = np.where(refractory, 0.0, h)
    return h


def effective_threshold(a, params: AlifParams):
    return params.lif.v_th + params.beta_vector(np.shape(a)[0]) * a


def _spike(v, A, refrac_prev, params: LifParams):
    blocked = refrac_prev > 0
    z = ((v >= A) & ~blocked).astype(np.float64)
    h = pseudo_derivative(v, A, params, blocked)
    refrac = np.where(z > 0, params.refractory_steps, np.maximum(refrac_prev - 1, 0)).astype(np.int64)
    return z, h, refrac


def lif_step(state: NetworkState, x_t, params: LifParams, w: NetworkWeights, step=None) -> NetworkState:
    x_t = _check_input(x_t, w)
    if state.v.shape != (w.n_rec,):
        raise ConfigurationError("state does not match the network size")
    v = params.alpha * state.v + w.theta_rec @ state.z + w.theta_in @ x_t - params.v_th * state.z
    _check_finite(v, "membrane voltage", step)
    z, h, refrac = _spike(v, params.v_th, state.refrac, params)
    return NetworkState(v=v, a=state.a, z=z, refrac=refrac, y=state.y, h=h)


def alif_step(state: NetworkState, x_t, params: AlifParams, w: NetworkWeights, step=None) -> NetworkState:
    x_t = _check_input(x_t, w)
    if state.v.shape != (w.n_rec,) or state.a.shape != (w.n_rec,):
        raise ConfigurationError("ALIF state needs v and a vectors matching the network size")
    lif = params.lif
    v = lif.alpha * state.v + w.theta_rec @ state.z + w.theta_in @ x_t - lif.v_th * state.z
    a = params.rho * state.a + state.z
    _check_finite(v, "membrane voltage", step)
    _check_finite(a, "threshold adaptation", step)
    A = effective_threshold(a, params)
    z, h, refrac = _spike(v, A, state.refrac, lif)
    return NetworkState(v=v, a=a, z=z, refrac=refrac, y=state.y, h=h)


def readout_step(y_prev, z, w, kappa: float):
    """Leaky readout ``y = kappa*y_prev + W_out z + b_out``."""
    if not 0.0 <= kappa < 1.0:
        raise ConfigurationError("kappa must lie in [0, 1)")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (w.theta_out.shape[1],) or np.shape(y_prev) != (w.n_out,):
        raise ConfigurationError("readout dimensions do not match")
    return kappa * np.asarray(y_prev) + w.theta_out @ z + w.b_out


def sigmoid_rnn_step(state: NetworkState, x_t, w: NetworkWeights, alpha: float, step=None) -> NetworkState:
    x_t = _check_input(x_t, w)
    s = alpha * state.v + w.theta_rec @ state.z + w.theta_in @ x_t
    _check_finite(s, "activation", step)
    z = sigmoid(s)
    return NetworkState(v=s, a=state.a, z=z, refrac=state.refrac, y=state.y, h=z * (1.0 - z))


def lstm_step(state: LstmState, x_t, w: LstmWeights, step=None) -> LstmState:
    x_t = _check_input(x_t, w)
    net = {g: w.w_rec[g] @ state.h + w.w_in[g] @ x_t for g in GATES}
    i, f, o = sigmoid(net["i"]), sigmoid(net["f"]), sigmoid(net["o"])
    c_tilde = np.tanh(net["c"])
    c = f * state.c + i * c_tilde
    _check_finite(c, "cell state", step)
    # output gate acts on c directly, without a tanh on the cell output
    h = o * c
    return LstmState(c=c, h=h, y=state.y, i=i, f=f, o=o, c_tilde=c_tilde)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Record of a simulated trial; arrays are read-only.

    ``states`` holds per-step series keyed by name: ``v, a, A, h,
    refractory`` for spiking models, ``s, h`` for the sigmoid RNN and
    ``c, i, f, o, c_tilde`` for LSTMs.  ``init`` is the state before the
    first step and ``final`` the state after the last one.
    """

    model: object
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    states: Mapping[str, np.ndarray] = field(default_factory=dict)
    init: object = None
    final: object = None
    kappa: float = 0.0

    def __post_init__(self):
        for arr in [self.x, self.z, self.y, *self.states.values()]:
            arr.setflags(write=False)

    def __len__(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[0]

    @property
    def h(self):
        return self.states.get("h")

    def z_prev(self) -> np.ndarray:
        """``z[t-1]`` for every step, using the initial state at ``t = 0``."""
        z0 = self.init.h if isinstance(self.model, LSTM) else self.init.z
        return np.vstack([z0[None, :], self.z[:-1]])


def simulate_trial(model: CellModel, w, inputs, *, kappa: float = 0.0, init_state=None, record=True) -> Trajectory:
    """Run the model for ``len(inputs)`` steps and record the trial."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ConfigurationError("inputs must be a non-empty [T x n_in] array")
    if inputs.shape[1] != w.n_in:
        raise ConfigurationError(f"inputs have {inputs.shape[1]} channels, network expects {w.n_in}")
    if not 0.0 <= kappa < 1.0:
        raise ConfigurationError("kappa must lie in [0, 1)")
    T = inputs.shape[0]
    n, n_out = w.n_rec, w.n_out
    state = zero_state(model, n, n_out) if init_state is None else init_state
    init = state

    if isinstance(model, LSTM):
        keys = ("c", "i", "f", "o", "c_tilde")
    elif isinstance(model, SigmoidRNN):
        keys = ("s", "h")
    else:
        keys = ("v", "a", "A", "h", "refractory")
    rec = {k: np.zeros((T, n)) for k in keys} if record else {}
    if record and "refractory" in rec:
        rec["refractory"] = np.zeros((T, n), dtype=bool)
    z_out = np.zeros((T, n))
    y_out = np.zeros((T, n_out))

    for t in range(T):
        x_t = inputs[t]
        if isinstance(model, LIF):
            blocked = state.refrac > 0
            state = lif_step(state, x_t, model.params, w, step=t)
            obs = state.z
            if record:
                rec["v"][t], rec["A"][t], rec["h"][t] = state.v, model.params.v_th, state.h
                rec["refractory"][t] = blocked
        elif isinstance(model, ALIF):
            blocked = state.refrac > 0
            state = alif_step(state, x_t, model.params, w, step=t)
            obs = state.z
            if record:
                rec["v"][t], rec["a"][t], rec["h"][t] = state.v, state.a, state.h
                rec["A"][t] = effective_threshold(state.a, model.params)
                rec["refractory"][t] = blocked
        elif isinstance(model, SigmoidRNN):
            state = sigmoid_rnn_step(state, x_t, w, model.alpha, step=t)
            obs = state.z
            if record:
                rec["s"][t], rec["h"][t] = state.v, state.h
        elif isinstance(model, LSTM):
            state = lstm_step(state, x_t, w, step=t)
            obs = state.h
            if record:
                for k in keys:
                    rec[k][t] = getattr(state, k)
        else:
            raise ConfigurationError(f"unknown cell model {model!r}")
        y = readout_step(state.y, obs, w, kappa)
        state = replace(state, y=y)
        z_out[t] = obs
        y_out[t] = y

    return Trajectory(model=model, x=inputs.copy(), z=z_out, y=y_out, states=rec, init=init, final=state, kappa=kappa)
