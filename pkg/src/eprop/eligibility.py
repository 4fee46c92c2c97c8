"""Forward-in-time eligibility vectors and traces.

Each weight block (input or recurrent) keeps one :class:`EligibilityState`.
``pre`` always denotes the presynaptic signal that reaches the postsynaptic
neuron at the current step: ``x[t]`` for input weights and ``z[t-1]`` for
recurrent weights.  With that convention the LIF eligibility vector is the
filtered presynaptic train ``zhat = alpha*zhat + pre`` and the trace is
``e[t] = h[t] * zhat[t]``.

Updates depend only on presynaptic activity, postsynaptic state and model
constants, never on errors.  Storage per synapse is at most two scalars
besides the trace itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dynamics import ALIF, GATES, LIF, LSTM, AlifParams, SigmoidRNN
from .errors import ConfigurationError


@dataclass(frozen=True)
class EligibilityState:
    zhat: np.ndarray  # [n_pre] presynaptic trace
    trace: np.ndarray  # [n_post x n_pre] current e_ji
    filtered: np.ndarray  # [n_post x n_pre] kappa-filtered trace
    eps: Optional[np.ndarray] = None  # [n_post x n_pre] second eligibility component
    h_prev: Optional[np.ndarray] = None  # [n_post] postsynaptic factor of the previous step

    @classmethod
    def zeros(cls, n_post: int, n_pre: int, with_eps: bool = False) -> "EligibilityState":
        return cls(
            zhat=np.zeros(n_pre),
            trace=np.zeros((n_post, n_pre)),
            filtered=np.zeros((n_post, n_pre)),
            eps=np.zeros((n_post, n_pre)) if with_eps else None,
            h_prev=np.zeros(n_post),
        )

    @property
    def shape(self):
        return self.trace.shape


def _check(es: EligibilityState, pre, post):
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if es.trace.shape != (post.shape[0], pre.shape[0]) or es.zhat.shape != pre.shape:
        raise ConfigurationError(
            f"eligibility state {es.trace.shape} does not match post {post.shape} / pre {pre.shape}"
        )
    return pre, post


def elig_update_lif(es: EligibilityState, pre, h_post, alpha: float, truncate: bool = False):
    pre, h = _check(es, pre, h_post)
    zhat = alpha * es.zhat + pre
    trace = np.outer(h, pre if truncate else zhat)
    return replace(es, zhat=zhat, trace=trace, h_prev=h)


def elig_update_alif(es: EligibilityState, pre, h_post, params: AlifParams, truncate: bool = False):
    """Two-component update of an adaptive neuron.

    ``eps_a[t] = h[t-1]*zhat[t-1] + (rho - beta*h[t-1]) * eps_a[t-1]`` and
    ``e[t] = h[t] * (zhat[t] - beta*eps_a[t])``.  In truncated mode the
    adaptation component is dropped and ``e[t] = h[t]*pre[t]``.
    """
    pre, h = _check(es, pre, h_post)
    if es.eps is None or es.h_prev is None:
        raise ConfigurationError("ALIF eligibility needs the adaptation component allocated")
    beta = params.beta_vector(h.shape[0])
    alpha = params.lif.alpha
    if truncate:
        zhat = alpha * es.zhat + pre
        return replace(es, zhat=zhat, trace=np.outer(h, pre), eps=np.zeros_like(es.eps), h_prev=h)
    hp = es.h_prev
    eps = hp[:, None] * es.zhat[None, :] + (params.rho - beta * hp)[:, None] * es.eps
    zhat = alpha * es.zhat + pre
    trace = h[:, None] * (zhat[None, :] - beta[:, None] * eps)
    return replace(es, zhat=zhat, trace=trace, eps=eps, h_prev=h)


def sigmoid_prime(s):
    z = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(s, dtype=np.float64)))
    return z * (1.0 - z)


def elig_update_sigmoid(es: EligibilityState, pre, s_post, alpha: float, truncate: bool = False):
    pre, s = _check(es, pre, s_post)
    zhat = alpha * es.zhat + pre
    hp = sigmoid_prime(s)
    return replace(es, zhat=zhat, trace=np.outer(hp, pre if truncate else zhat), h_prev=hp)


def lstm_local_factor(gate: str, cache) -> np.ndarray:
    """``d(state or output)/d(net input of gate)`` for one unit.

    For ``i``, ``f`` and ``c`` this is the derivative of the cell state, for
    ``o`` the derivative of the output ``h = o*c``.
    """
    i, f, o, ct = cache["i"], cache["f"], cache["o"], cache["c_tilde"]
    if gate == "i":
        return ct * i * (1.0 - i)
    if gate == "f":
        return cache["c_prev"] * f * (1.0 - f)
    if gate == "c":
        return i * (1.0 - ct**2)
    if gate == "o":
        return cache["c"] * o * (1.0 - o)
    raise ConfigurationError(f"unknown gate {gate!r}")


def elig_update_lstm(es: EligibilityState, gate: str, cache, pre, truncate: bool = False):
    """One LSTM weight block; ``cache`` holds ``i, f, o, c_tilde, c, c_prev`` of step t.

    Blocks of the input/forget gate and the candidate carry history through
    the forget gate: ``eps = f*eps + u*pre`` and ``e = o*eps``.  The output
    gate has no history: ``e = c*o*(1-o)*pre``.
    """
    u = lstm_local_factor(gate, cache)
    pre, u = _check(es, pre, u)
    if gate == "o":
        trace = np.outer(u, pre)
        return replace(es, trace=trace, eps=trace, h_prev=u)
    direct = np.outer(u, pre)
    eps = direct if (truncate or es.eps is None) else cache["f"][:, None] * es.eps + direct
    return replace(es, eps=eps, trace=cache["o"][:, None] * eps, h_prev=u)


def elig_filter(es: EligibilityState, kappa: float) -> EligibilityState:
    """``filtered = kappa*filtered + trace``."""
    if not 0.0 <= kappa < 1.0:
        raise ConfigurationError("kappa must lie in [0, 1)")
    return replace(es, filtered=kappa * es.filtered + es.trace)


# ---------------------------------------------------------------------------
# whole-trial helpers
# ---------------------------------------------------------------------------


def block_inputs(model, traj):
    """Map block name to its ``[T x n_pre]`` presynaptic series."""
    x = np.asarray(traj.x)
    zp = traj.z_prev()
    if isinstance(model, LSTM):
        out = {}
        for g in GATES:
            out[f"in_{g}"] = x
            out[f"rec_{g}"] = zp
        return out
    return {"in": x, "rec": zp}


def initial_states(model, traj, w):
    n = w.n_rec
    states = {}
    for name, pre in block_inputs(model, traj).items():
        states[name] = EligibilityState.zeros(n, pre.shape[1], with_eps=isinstance(model, (ALIF, LSTM)))
    if isinstance(model, ALIF):
        h0 = traj.init.h if traj.init.h is not None else np.zeros(n)
        states = {k: replace(v, h_prev=np.array(h0, dtype=np.float64)) for k, v in states.items()}
    return states


def trial_traces(model, traj, w, *, truncate=False, kappa=None, init=None):
    """Run the forward recursions over a recorded trial.

    Returns ``(traces, final)``: ``traces[name]`` is ``[T x n x n_pre]``
    with ``e^t`` (or the kappa-filtered trace if ``kappa`` is given) and
    ``final`` the eligibility states after the last step, which can seed
    the next interval.
    """
    pres = block_inputs(model, traj)
    states = initial_states(model, traj, w) if init is None else dict(init)
    T = traj.T
    out = {name: np.zeros((T,) + states[name].shape) for name in pres}
    st = traj.states
    c_prev_series = None
    if isinstance(model, LSTM):
        c_prev_series = np.vstack([traj.init.c[None, :], st["c"][:-1]])
    for t in range(T):
        for name, pre in pres.items():
            es = states[name]
            if isinstance(model, LIF):
                es = elig_update_lif(es, pre[t], st["h"][t], model.params.alpha, truncate)
            elif isinstance(model, ALIF):
                es = elig_update_alif(es, pre[t], st["h"][t], model.params, truncate)
            elif isinstance(model, SigmoidRNN):
                es = elig_update_sigmoid(es, pre[t], st["s"][t], model.alpha, truncate)
            elif isinstance(model, LSTM):
                cache = {k: st[k][t] for k in ("i", "f", "o", "c_tilde", "c")}
                cache["c_prev"] = c_prev_series[t]
                es = elig_update_lstm(es, name.split("_")[1], cache, pre[t], truncate)
            else:
                raise ConfigurationError(f"unknown model {model!r}")
            if kappa is not None:
                es = elig_filter(es, kappa)
                out[name][t] = es.filtered
            else:
                out[name][t] = es.trace
            states[name] = es
    return out, states


@dataclass(frozen=True)
class EligibilityMode:
    """Switches of the forward recursions.

    truncate: drop the carry through the neuron dynamics, keeping only the
    instantaneous ``ds/dtheta`` term.
    carry: keep the states across trial or interval boundaries instead of
    resetting them to zero.
    """

    truncate: bool = False
    carry: bool = False


def elig_truncate_mode(flag: bool = True, carry: bool = False) -> EligibilityMode:
    return EligibilityMode(truncate=bool(flag), carry=bool(carry))
