"""Exact gradients: BPTT, exact learning signals, finite differences and the
factorization verifier.

Every cell model is first reduced to a common linearized form along a
recorded trajectory (:func:`linearize`).  With ``s`` the hidden state of a
neuron (``d`` components) and ``z`` its output:

* ``D[t]``        ``ds^t/ds^{t-1}`` of one neuron, ``[T x n x d x d]``
* ``dz_ds[t]``    ``dz^t/ds^t``, ``[T x n x d]``
* state blocks    ``ds_j^t/dtheta_ji = u[t, j] * pre[t, i]``
* output blocks   ``dz_j^t/dtheta_ji = u[t, j] * pre[t, i]`` (LSTM output gate)
* ``self_z``      explicit dependence of ``s_j^{t+1}`` on the neuron's own ``z_j^t``

Paths between neurons run only through the recurrent blocks.  The backward
pass below is then model independent and serves as the reference that the
forward-in-time eligibility recursions are checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import eligibility as elig
from .dynamics import (
    ALIF,
    GATES,
    LIF,
    LSTM,
    AlifParams,
    LifParams,
    LstmWeights,
    NetworkWeights,
    SigmoidRNN,
    simulate_trial,
)
from .errors import ConfigurationError, UnsupportedModelError
from .signals import LossSpec, grad_output_weights, output_error, readout_backward

GradientSet = Dict[str, np.ndarray]

REL_EPS = 1e-30


@dataclass(frozen=True)
class Block:
    u: np.ndarray  # [T x n x d] (state block) or [T x n] (output block)
    pre: np.ndarray  # [T x n_pre]
    W: np.ndarray  # [n x n_pre]
    recurrent: bool


@dataclass
class Linearization:
    D: np.ndarray
    dz_ds: np.ndarray
    blocks: Dict[str, Block]
    zblocks: Dict[str, Block] = field(default_factory=dict)
    self_z: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.dz_ds.shape


def _require_records(traj, keys):
    missing = [k for k in keys if k not in traj.states]
    if missing:
        raise ConfigurationError(f"trajectory lacks records {missing}; simulate with record=True")


def linearize(model, traj, w) -> Linearization:
    """Local derivatives of the model along a recorded trial."""
    T, n = traj.z.shape
    x = np.asarray(traj.x)
    zp = traj.z_prev()
    if isinstance(model, LIF):
        _require_records(traj, ("h",))
        p = model.params
        D = np.full((T, n, 1, 1), p.alpha)
        dz_ds = np.asarray(traj.states["h"])[:, :, None].copy()
        ones = np.ones((T, n, 1))
        blocks = {"in": Block(ones, x, w.theta_in, False), "rec": Block(ones, zp, w.theta_rec, True)}
        return Linearization(D, dz_ds, blocks, self_z=np.full((n, 1), -p.v_th))
    if isinstance(model, ALIF):
        _require_records(traj, ("h",))
        p = model.params
        beta = p.beta_vector(n)
        h = np.asarray(traj.states["h"])
        h0 = np.zeros(n) if traj.init.h is None else np.asarray(traj.init.h, dtype=np.float64)
        hp = np.vstack([h0[None, :], h[:-1]])
        D = np.zeros((T, n, 2, 2))
        D[:, :, 0, 0] = p.lif.alpha
        # the threshold variable integrates the previous spike, which itself
        # depends on the previous voltage and threshold
        D[:, :, 1, 0] = hp
        D[:, :, 1, 1] = p.rho - beta[None, :] * hp
        dz_ds = np.stack([h, -beta[None, :] * h], axis=-1)
        u = np.zeros((T, n, 2))
        u[:, :, 0] = 1.0
        blocks = {"in": Block(u, x, w.theta_in, False), "rec": Block(u, zp, w.theta_rec, True)}
        self_z = np.zeros((n, 2))
        self_z[:, 0] = -p.lif.v_th
        return Linearization(D, dz_ds, blocks, self_z=self_z)
    if isinstance(model, SigmoidRNN):
        _require_records(traj, ("h",))
        D = np.full((T, n, 1, 1), model.alpha)
        dz_ds = np.asarray(traj.states["h"])[:, :, None].copy()
        ones = np.ones((T, n, 1))
        blocks = {"in": Block(ones, x, w.theta_in, False), "rec": Block(ones, zp, w.theta_rec, True)}
        return Linearization(D, dz_ds, blocks, self_z=np.zeros((n, 1)))
    if isinstance(model, LSTM):
        _require_records(traj, ("c", "i", "f", "o", "c_tilde"))
        st = traj.states
        c_prev = np.vstack([np.asarray(traj.init.c)[None, :], st["c"][:-1]])
        cache = {k: np.asarray(st[k]) for k in ("i", "f", "o", "c_tilde", "c")}
        cache["c_prev"] = c_prev
        D = np.asarray(st["f"])[:, :, None, None].copy()
        dz_ds = np.asarray(st["o"])[:, :, None].copy()
        blocks, zblocks = {}, {}
        for g in GATES:
            u = elig.lstm_local_factor(g, cache)
            target = zblocks if g == "o" else blocks
            uu = u if g == "o" else u[:, :, None]
            target[f"in_{g}"] = Block(uu, x, w.w_in[g], False)
            target[f"rec_{g}"] = Block(uu, zp, w.w_rec[g], True)
        return Linearization(D, dz_ds, blocks, zblocks, self_z=np.zeros((n, 1)))
    raise ConfigurationError(f"unknown cell model {model!r}")


def backprop_to_previous(lin: Linearization, t: int, L_t, G_t) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients reaching ``z^{t-1}`` and ``s^{t-1}`` through step ``t``.

    Given total ``dE/dz^t`` (``L_t``) and ``dE/ds^t`` (``G_t``), returns
    ``(g_z, g_s)``: the contribution of steps ``>= t`` to ``dE/dz^{t-1}``
    and to ``dE/ds^{t-1}`` along explicit paths.
    """
    g_s = np.einsum("jk,jkl->jl", G_t, lin.D[t])
    g_z = (G_t * lin.self_z).sum(axis=-1) if lin.self_z is not None else np.zeros(G_t.shape[0])
    for b in lin.blocks.values():
        if b.recurrent:
            g_z = g_z + (G_t * b.u[t]).sum(axis=-1) @ b.W
    for b in lin.zblocks.values():
        if b.recurrent:
            g_z = g_z + (L_t * b.u[t]) @ b.W
    return g_z, g_s


def backward_pass(lin: Linearization, dEdz_partial, boundary=None):
    """Reverse recursion for ``L = dE/dz`` and ``G = dE/ds``.

    ``boundary`` is ``(g_z, g_s)`` describing how the future beyond the last
    step depends on the last output and hidden state; ``None`` means the
    trial ends there.  Returns ``(L, G, previous)`` where ``previous`` is the
    ``(g_z, g_s)`` pair for the state before the first step.
    """
    T, n, d = lin.dz_ds.shape
    dEdz_partial = np.asarray(dEdz_partial, dtype=np.float64)
    if dEdz_partial.shape != (T, n):
        raise ConfigurationError(f"dE/dz has shape {dEdz_partial.shape}, expected {(T, n)}")
    if boundary is None:
        g_z, g_s = np.zeros(n), np.zeros((n, d))
    else:
        g_z = np.asarray(boundary[0], dtype=np.float64).reshape(n)
        g_s = np.asarray(boundary[1], dtype=np.float64).reshape(n, d)
    L = np.zeros((T, n))
    G = np.zeros((T, n, d))
    for t in range(T - 1, -1, -1):
        L[t] = dEdz_partial[t] + g_z
        G[t] = L[t][:, None] * lin.dz_ds[t] + g_s
        g_z, g_s = backprop_to_previous(lin, t, L[t], G[t])
    return L, G, (g_z, g_s)


def parameter_gradients(lin: Linearization, L, G) -> GradientSet:
    """``sum_t dE/ds^t * ds^t/dtheta`` (plus output-gate blocks)."""
    grads = {}
    for name, b in lin.blocks.items():
        grads[name] = np.einsum("tj,ti->ji", (G * b.u).sum(axis=-1), b.pre)
    for name, b in lin.zblocks.items():
        grads[name] = np.einsum("tj,ti->ji", L * b.u, b.pre)
    return grads


@dataclass
class BpttResult:
    loss: float
    grads: GradientSet
    dEdz: np.ndarray  # total dE/dz^t, the exact learning signals
    dEds: np.ndarray  # total dE/ds^t
    dEdz_partial: np.ndarray
    previous: Tuple[np.ndarray, np.ndarray]


def bptt_gradients(traj, loss: LossSpec, model, w, *, boundary=None, extra_dEdz=None) -> BpttResult:
    """Full backpropagation through time along a recorded trial.

    Spiking models use the recorded pseudo-derivative in place of the
    derivative of the step function.  ``extra_dEdz`` adds a partial
    derivative on the outputs (for instance a rate regularizer).
    """
    if model is not traj.model and model != traj.model:
        raise ConfigurationError("model does not match the trajectory")
    lin = linearize(model, traj, w)
    rb = readout_backward(traj.z, traj.y, w.theta_out, traj.kappa, loss)
    partial = rb.dEdz if extra_dEdz is None else rb.dEdz + np.asarray(extra_dEdz)
    L, G, prev = backward_pass(lin, partial, boundary)
    grads = parameter_gradients(lin, L, G)
    grads["out"] = rb.grad_out
    grads["b_out"] = rb.grad_b
    return BpttResult(rb.loss, grads, L, G, partial, prev)


def exact_learning_signals(traj, loss: LossSpec, w, *, boundary=None) -> np.ndarray:
    """``L_j^t = dE/dz_j^t`` including every future path."""
    return bptt_gradients(traj, loss, traj.model, w, boundary=boundary).dEdz


def eprop_exact_gradient(
    traj, loss: LossSpec, w, traces: Optional[Mapping[str, np.ndarray]] = None, *, signals=None, truncate=False
) -> GradientSet:
    """Factorized gradient ``sum_t L_j^t e_ji^t`` with exact learning signals.

    ``traces`` are the unfiltered eligibility traces of
    :func:`eprop.eligibility.trial_traces`; they are computed on the fly if
    omitted.  Readout gradients are exact and computed in forward form.
    """
    model = traj.model
    if traces is None:
        traces, _ = elig.trial_traces(model, traj, w, truncate=truncate)
    expected = set(elig.block_inputs(model, traj))
    if set(traces) != expected:
        raise ConfigurationError(f"traces cover blocks {sorted(traces)}, model needs {sorted(expected)}")
    if signals is None:
        signals = exact_learning_signals(traj, loss, w)
    T, n = traj.z.shape
    grads = {}
    for name, e in traces.items():
        e = np.asarray(e)
        if e.shape[:2] != (T, n):
            raise ConfigurationError(f"trace {name} has shape {e.shape}, trajectory is {(T, n)}")
        grads[name] = np.einsum("tj,tji->ji", signals, e)
    grads.update(grad_output_weights(traj.y, loss, traj.z, traj.kappa))
    return grads


def generic_eligibility(lin: Linearization, truncate: bool = False) -> Dict[str, np.ndarray]:
    """Eligibility traces from the full ``d x d`` recursion ``eps = D eps + u pre``.

    Model independent counterpart of the hand-specialized updates in
    :mod:`eprop.eligibility`; memory ``T x n x n_pre x d``.
    """
    T, n, d = lin.dz_ds.shape
    out = {}
    for name, b in lin.blocks.items():
        n_pre = b.pre.shape[1]
        eps = np.zeros((n, n_pre, d))
        tr = np.zeros((T, n, n_pre))
        for t in range(T):
            direct = b.u[t][:, None, :] * b.pre[t][None, :, None]
            eps = direct if truncate else np.einsum("jkl,jil->jik", lin.D[t], eps) + direct
            tr[t] = np.einsum("jik,jk->ji", eps, lin.dz_ds[t])
        out[name] = tr
    for name, b in lin.zblocks.items():
        out[name] = b.u[:, :, None] * b.pre[:, None, :]
    return out


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def trial_loss(model, w, inputs, loss: LossSpec, kappa=0.0) -> float:
    traj = simulate_trial(model, w, inputs, kappa=kappa, record=False)
    return output_error(traj.y, loss)[0]


def finite_difference_gradient(model, w, inputs, loss: LossSpec, h_step: float = 1e-5, *, kappa=0.0) -> GradientSet:
    """Central differences for every parameter of a smooth model.

    The diagonal of the recurrent matrix of a sigmoid RNN is constrained to
    zero and reported as NaN.
    """
    if getattr(model, "spiking", False):
        raise UnsupportedModelError(
            "finite differences are undefined for spiking models: the step nonlinearity is discontinuous"
        )
    if h_step <= 0:
        raise ConfigurationError("h_step must be positive")
    blocks = {k: np.array(v, dtype=np.float64) for k, v in w.blocks().items()}
    cls = type(w)
    grads = {}
    for name, arr in blocks.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            if name == "rec" and isinstance(w, NetworkWeights) and idx[0] == idx[1]:
                g[idx] = np.nan
                continue
            old = arr[idx]
            arr[idx] = old + h_step
            e_plus = trial_loss(model, cls.from_blocks(blocks), inputs, loss, kappa)
            arr[idx] = old - h_step
            e_minus = trial_loss(model, cls.from_blocks(blocks), inputs, loss, kappa)
            arr[idx] = old
            g[idx] = (e_plus - e_minus) / (2.0 * h_step)
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# randomized instances and the verifier
# ---------------------------------------------------------------------------

MODEL_KINDS = ("lif", "alif", "sigmoid", "lstm")


@dataclass
class Instance:
    model: object
    w: object
    inputs: np.ndarray
    loss: LossSpec
    kappa: float

    def simulate(self):
        return simulate_trial(self.model, self.w, self.inputs, kappa=self.kappa)


def _gauss(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


def random_instance(kind: str, rng: np.random.Generator, n=None, T=None, n_in=None, n_out=None) -> Instance:
    """Random network, input trial and loss for the oracle suites.

    Weights are Gaussian with standard deviation ``gain/sqrt(fan_in)``, inputs
    are Bernoulli spike trains with a per-step probability in ``[0.05, 0.3]``.
    The gain is drawn per instance so that both quiet and busy regimes occur.
    """
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    n = int(rng.integers(2, 9)) if n is None else n
    T = int(rng.integers(5, 51)) if T is None else T
    n_in = int(rng.integers(1, 6)) if n_in is None else n_in
    n_out = int(rng.integers(1, 4)) if n_out is None else n_out
    p_in = rng.uniform(0.05, 0.3)
    inputs = (rng.random((T, n_in)) < p_in).astype(np.float64)
    kappa = float(rng.uniform(0.0, 0.9))
    gain = float(rng.uniform(0.5, 3.0))

    if kind in ("lif", "alif"):
        lif = LifParams(
            alpha=float(np.exp(-1.0 / rng.uniform(5.0, 40.0))),
            v_th=float(rng.uniform(0.3, 1.0)),
            gamma=0.3,
            refractory_steps=int(rng.integers(0, 3)),
        )
        if kind == "lif":
            model = LIF(lif)
        else:
            beta = rng.uniform(0.0, 1.5, size=n) * (rng.random(n) < 0.8)
            model = ALIF(AlifParams(lif, beta=beta, rho=float(np.exp(-1.0 / rng.uniform(10.0, 200.0)))))
    elif kind == "sigmoid":
        model = SigmoidRNN(alpha=float(rng.uniform(0.0, 0.95)))
        inputs = inputs + rng.normal(0.0, 0.5, size=inputs.shape)
    else:
        model = LSTM()
        inputs = inputs + rng.normal(0.0, 0.5, size=inputs.shape)

    if kind == "lstm":
        w = LstmWeights(
            {g: _gauss(rng, (n, n_in), n_in, gain) for g in GATES},
            {g: _gauss(rng, (n, n), n, gain) for g in GATES},
            _gauss(rng, (n_out, n), n),
            rng.normal(0.0, 0.1, size=n_out),
        )
    else:
        w_rec = _gauss(rng, (n, n), n, gain)
        np.fill_diagonal(w_rec, 0.0)
        w = NetworkWeights(_gauss(rng, (n, n_in), n_in, gain), w_rec, _gauss(rng, (n_out, n), n), rng.normal(0.0, 0.1, n_out))

    mask = (rng.random(T) < 0.7).astype(np.float64)
    mask[-1] = 1.0
    if n_out > 1 and rng.random() < 0.4:
        labels = rng.integers(0, n_out, size=T)
        loss = LossSpec("ce", np.eye(n_out)[labels], mask)
    else:
        loss = LossSpec("mse", rng.normal(0.0, 1.0, size=(T, n_out)), mask)
    return Instance(model, w, inputs, loss, kappa)


def relative_error(a, b, eps: float = REL_EPS) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / (np.abs(b) + eps)


def max_relative_error(est: Mapping[str, np.ndarray], ref: Mapping[str, np.ndarray], eps: float = REL_EPS) -> float:
    worst = 0.0
    for name, r in ref.items():
        if name not in est:
            raise ConfigurationError(f"estimate lacks block {name}")
        e = np.asarray(est[name])
        keep = ~np.isnan(e)
        if np.any(keep):
            worst = max(worst, float(np.max(relative_error(e[keep], np.asarray(r)[keep], eps))))
    return worst


@dataclass
class VerifierReport:
    tolerance: float
    results: Dict[str, dict]

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.results.values())

    def to_json(self) -> str:
        return json.dumps({"tolerance": self.tolerance, "passed": self.passed, "models": self.results}, indent=2, sort_keys=True)


def verify_factorization(
    models: Sequence[str] = MODEL_KINDS, n_instances: int = 200, seed: int = 0, *, truncate=False, tolerance=1e-10
) -> VerifierReport:
    """Compare factorized and BPTT gradients on random instances.

    ``truncate=True`` injects truncated traces as a negative control; a
    working verifier then reports the identity as violated.
    """
    results = {}
    for k, kind in enumerate(models):
        if kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}")
        rng = np.random.default_rng([seed, k])
        worst, n_spiking = 0.0, 0
        for _ in range(n_instances):
            inst = random_instance(kind, rng)
            traj = inst.simulate()
            ref = bptt_gradients(traj, inst.loss, inst.model, inst.w)
            est = eprop_exact_gradient(traj, inst.loss, inst.w, signals=ref.dEdz, truncate=truncate)
            worst = max(worst, max_relative_error(est, ref.grads))
            n_spiking += int(traj.z.sum() > 0) if getattr(inst.model, "spiking", False) else 1
        ok = worst < tolerance
        results[kind] = {
            "instances": n_instances,
            "max_rel_error": worst,
            "instances_with_activity": n_spiking,
            "passed": bool(ok),
        }
    return VerifierReport(tolerance, results)
