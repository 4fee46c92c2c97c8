"""Training on truncated intervals with synthetic-gradient boundaries.

A sequence is cut into intervals of ``delta_t`` steps.  Gradients are
backpropagated only inside an interval; what the future beyond the interval
contributes is either ignored (zero boundary) or predicted by a small
feedforward network, the synthetic gradient (SG).  Every scheme below is a
combination of two switches:

==================  ==================  ======================
mode                boundary            credit for the past
==================  ==================  ======================
``truncated-bptt``  zero                inside the interval
``bptt+sg``         ``eta_sg * SG``     inside the interval
``truncated+elig``  zero                eligibility traces
``eprop3``          ``eta_sg * SG``     eligibility traces
``eprop1``          none (``dE/dz``)    eligibility traces
``bptt``            whole sequence is one interval
==================  ==================  ======================

Boundaries are passed as a pair ``(g_z, g_s)``: the gradient that reaches the
last output ``z^{t_m}`` and the last hidden state ``s^{t_m}`` of an interval
from all later steps.  For an LSTM both are needed, because the next output
gate reads ``z^{t_m}`` without passing through the next cell state.

Two engines share these conventions.  :func:`interval_gradient_sum` handles
one trial of any cell model through the generic linearization and serves as
the reference; :class:`LstmIntervalEngine` is the batched LSTM version used
for training on copy-repeat.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import eligibility as elig
from . import tasks
from .dynamics import GATES, LstmWeights, sigmoid, simulate_trial
from .errors import ConfigurationError, CurriculumCeilingError, NumericError
from .optim import AdamState, adam_update, gaussian, init_lstm_weights
from .oracle import backprop_to_previous, backward_pass, linearize, parameter_gradients
from .signals import LossSpec, output_error, readout_backward

GradientSet = Dict[str, np.ndarray]
Boundary = Tuple[np.ndarray, np.ndarray]

INTERVAL_MODES = ("truncated-bptt", "bptt+sg", "truncated+elig", "eprop3", "eprop1", "bptt")
SG_MODES = ("bptt+sg", "eprop3")
ELIG_MODES = ("truncated+elig", "eprop3", "eprop1")


@dataclass(frozen=True)
class TruncationConfig:
    delta_t: int = 4
    eta_sg: float = 0.1
    mode: str = "eprop3"

    def __post_init__(self):
        if self.mode not in INTERVAL_MODES:
            raise ConfigurationError(f"unknown interval mode {self.mode!r}", field="experiment.mode")
        if int(self.delta_t) != self.delta_t or self.delta_t < 1:
            raise ConfigurationError("delta_t must be a positive integer", field="truncation.delta_t")
        if not np.isfinite(self.eta_sg) or self.eta_sg < 0:
            raise ConfigurationError("eta_sg must be a non-negative number", field="truncation.eta_sg")

    @property
    def uses_sg(self) -> bool:
        return self.mode in SG_MODES

    @property
    def uses_elig(self) -> bool:
        return self.mode in ELIG_MODES

    def intervals(self, T: int) -> List[Tuple[int, int]]:
        """``[start, stop)`` step ranges covering ``T`` steps."""
        if self.mode == "bptt":
            return [(0, T)]
        return [(a, min(a + self.delta_t, T)) for a in range(0, T, self.delta_t)]


# ---------------------------------------------------------------------------
# synthetic gradient network
# ---------------------------------------------------------------------------


@dataclass
class SyntheticGradientNet:
    """One ReLU hidden layer and a linear output of ``n_rec * (state_dim + 1)`` units.

    The output is read as ``(g_z, g_s)``: one value for the observable output
    of each neuron followed by ``state_dim`` values for its hidden state.
    """

    w1: np.ndarray  # [hidden x n_rec]
    b1: np.ndarray
    w2: np.ndarray  # [n_rec*(d+1) x hidden]
    b2: np.ndarray
    state_dim: int = 1

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        hidden, n = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape != (n * (self.state_dim + 1), hidden):
            raise ConfigurationError("synthetic gradient weights have inconsistent shapes")
        if self.b2.shape != (self.w2.shape[0],):
            raise ConfigurationError("synthetic gradient output bias has the wrong size")

    @property
    def n_rec(self) -> int:
        return self.w1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, n_rec: int, n_hidden: int, seed, state_dim: int = 1, scale: float = 1.0) -> "SyntheticGradientNet":
        """Gaussian first layer; the output layer starts at zero so that SG is 0."""
        rng = np.random.default_rng(seed)
        out = n_rec * (state_dim + 1)
        return cls(
            gaussian(rng, (n_hidden, n_rec), n_rec, scale),
            np.zeros(n_hidden),
            np.zeros((out, n_hidden)),
            np.zeros(out),
            state_dim,
        )

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_params(self, p) -> "SyntheticGradientNet":
        return SyntheticGradientNet(p["w1"], p["b1"], p["w2"], p["b2"], self.state_dim)


def _split_sg(out, n, d):
    g_z = out[..., :n]
    g_s = out[..., n:].reshape(out.shape[:-1] + (n, d))
    return g_z, g_s


def sg_forward(z_tm, net: SyntheticGradientNet) -> Boundary:
    """Predicted boundary ``(g_z, g_s)`` for the observable state ``z_tm``.

    ``z_tm`` is ``[n]`` or ``[B x n]``; ``g_s`` gets a trailing state axis.
    """
    z = np.asarray(z_tm, dtype=np.float64)
    if z.shape[-1] != net.n_rec:
        raise ConfigurationError(f"SG input has {z.shape[-1]} units, network expects {net.n_rec}")
    hid = np.maximum(0.0, z @ net.w1.T + net.b1)
    return _split_sg(hid @ net.w2.T + net.b2, net.n_rec, net.state_dim)


def sg_loss_and_grads(net: SyntheticGradientNet, z_tm, target: Boundary):
    """``E_SG = 1/2 sum ||SG(z) - target||^2`` averaged over the batch axis.

    Returns ``(E_SG, grads)`` with gradients with respect to the SG weights
    only; the target and the input are treated as constants.
    """
    z = np.atleast_2d(np.asarray(z_tm, dtype=np.float64))
    B, n = z.shape
    tz = np.asarray(target[0], dtype=np.float64).reshape(B, n)
    ts = np.asarray(target[1], dtype=np.float64).reshape(B, n * net.state_dim)
    pre = z @ net.w1.T + net.b1
    hid = np.maximum(0.0, pre)
    out = hid @ net.w2.T + net.b2
    diff = out - np.concatenate([tz, ts], axis=1)
    loss = 0.5 * float(np.sum(diff**2)) / B
    d_out = diff / B
    d_hid = (d_out @ net.w2) * (pre > 0)
    grads = {"w2": d_out.T @ hid, "b2": d_out.sum(axis=0), "w1": d_hid.T @ z, "b1": d_hid.sum(axis=0)}
    return loss, grads


# ---------------------------------------------------------------------------
# generic single-trial interval engine (any cell model)
# ---------------------------------------------------------------------------


def _check_kappa(kappa):
    if kappa != 0.0:
        raise ConfigurationError(
            "interval training needs a memoryless readout (kappa = 0): with a leaky readout the "
            "error of one interval depends on outputs of the previous one",
            field="model.kappa",
        )


def _slice_loss(loss: LossSpec, a, b):
    return LossSpec(loss.kind, loss.target[a:b], loss.mask[a:b])


def interval_backward(lin, dEdz_partial, boundary: Optional[Boundary], eta_sg: float = 1.0):
    """Learning signals inside one interval.

    ``boundary`` (scaled by ``eta_sg``) is the gradient arriving from beyond
    the interval; ``None`` means the future is ignored.  Returns
    ``(L, G, previous)`` as :func:`eprop.oracle.backward_pass`.
    """
    if boundary is not None:
        boundary = (eta_sg * np.asarray(boundary[0]), eta_sg * np.asarray(boundary[1]))
    return backward_pass(lin, dEdz_partial, boundary)


def eprop3_interval_gradient(signals, traces) -> GradientSet:
    """``sum_t L_t e_t`` over one interval, with traces carried from earlier intervals."""
    signals = np.asarray(signals)
    out = {}
    for name, e in traces.items():
        e = np.asarray(e)
        if e.shape[:2] != signals.shape:
            raise ConfigurationError(f"trace {name} covers {e.shape[:2]}, signals cover {signals.shape}")
        out[name] = np.einsum("tj,tji->ji", signals, e)
    return out


def _add(total, part):
    for k, v in part.items():
        total[k] = total[k] + v if k in total else np.array(v, dtype=np.float64)
    return total


@dataclass
class IntervalRecord:
    start: int
    stop: int
    grads: GradientSet
    boundary: Optional[Boundary]
    previous: Boundary
    last_output: np.ndarray


def oracle_boundaries(model, w, inputs, loss: LossSpec, cfg: TruncationConfig, kappa=0.0) -> List[Optional[Boundary]]:
    """Exact boundaries ``(dE/dz, dE/ds)`` from later steps, from one full backward pass."""
    _check_kappa(kappa)
    traj = simulate_trial(model, w, inputs, kappa=0.0)
    lin = linearize(model, traj, w)
    rb = readout_backward(traj.z, traj.y, w.theta_out, 0.0, loss)
    L, G, _ = backward_pass(lin, rb.dEdz)
    out = []
    for a, b in cfg.intervals(traj.T):
        out.append(None if b >= traj.T else backprop_to_previous(lin, b, L[b], G[b]))
    return out


def interval_gradient_sum(
    model,
    w,
    inputs,
    loss: LossSpec,
    cfg: TruncationConfig,
    boundaries=None,
    *,
    kappa: float = 0.0,
    return_records: bool = False,
):
    """Sum of the per-interval gradient estimates along one trial (fixed weights).

    ``boundaries`` is a list with one entry per interval (``None`` for no
    boundary), a callable ``(z_tm) -> (g_z, g_s)`` such as a bound
    :func:`sg_forward`, or ``None`` for zero boundaries everywhere.  The
    final interval of the trial never gets a boundary.  Boundaries are
    multiplied by ``cfg.eta_sg``; modes without SG ignore them.
    """
    _check_kappa(kappa)
    inputs = np.asarray(inputs, dtype=np.float64)
    T = inputs.shape[0]
    spans = cfg.intervals(T)
    if isinstance(boundaries, (list, tuple)) and len(boundaries) != len(spans):
        raise ConfigurationError(f"{len(boundaries)} boundaries for {len(spans)} intervals")
    state = None
    traces_state = None
    total: GradientSet = {}
    records = []
    for m, (a, b) in enumerate(spans):
        traj = simulate_trial(model, w, inputs[a:b], kappa=0.0, init_state=state)
        seg_loss = _slice_loss(loss, a, b)
        rb = readout_backward(traj.z, traj.y, w.theta_out, 0.0, seg_loss)
        lin = linearize(model, traj, w)
        boundary = None
        if cfg.uses_sg and b < T:
            if callable(boundaries):
                boundary = boundaries(traj.z[-1])
            elif boundaries is not None:
                boundary = boundaries[m]
        L, G, prev = interval_backward(lin, rb.dEdz, boundary, cfg.eta_sg)
        if cfg.uses_elig:
            traces, traces_state = elig.trial_traces(model, traj, w, init=traces_state)
            signals = rb.dEdz if cfg.mode == "eprop1" else L
            grads = eprop3_interval_gradient(signals, traces)
        else:
            grads = parameter_gradients(lin, L, G)
        grads["out"] = rb.grad_out
        grads["b_out"] = rb.grad_b
        _add(total, grads)
        records.append(IntervalRecord(a, b, grads, boundary, prev, traj.z[-1].copy()))
        state = traj.final
    return (total, records) if return_records else total


# ---------------------------------------------------------------------------
# batched LSTM engine
# ---------------------------------------------------------------------------


@dataclass
class LstmSegment:
    """Forward record of one interval for a batch, arrays ``[B x T x n]``."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    c_tilde: np.ndarray
    c: np.ndarray
    h: np.ndarray
    y: np.ndarray

    @property
    def final(self):
        return self.c[:, -1].copy(), self.h[:, -1].copy()


def lstm_forward_segment(w: LstmWeights, X, c0, h0) -> LstmSegment:
    """Simulate ``[B x T x n_in]`` inputs from cell states ``c0`` and outputs ``h0``."""
    X = np.asarray(X, dtype=np.float64)
    B, T, _ = X.shape
    n = w.n_rec
    drive = {g: X @ w.w_in[g].T for g in GATES}
    rec_t = {g: np.ascontiguousarray(w.w_rec[g].T) for g in GATES}
    arr = {k: np.empty((B, T, n)) for k in ("h_prev", "c_prev", "i", "f", "o", "c_tilde", "c", "h")}
    c, h = np.asarray(c0, dtype=np.float64), np.asarray(h0, dtype=np.float64)
    for t in range(T):
        arr["h_prev"][:, t], arr["c_prev"][:, t] = h, c
        i = sigmoid(drive["i"][:, t] + h @ rec_t["i"])
        f = sigmoid(drive["f"][:, t] + h @ rec_t["f"])
        o = sigmoid(drive["o"][:, t] + h @ rec_t["o"])
        ct = np.tanh(drive["c"][:, t] + h @ rec_t["c"])
        c = f * c + i * ct
        h = o * c
        arr["i"][:, t], arr["f"][:, t], arr["o"][:, t], arr["c_tilde"][:, t] = i, f, o, ct
        arr["c"][:, t], arr["h"][:, t] = c, h
    if not np.all(np.isfinite(c)):
        raise NumericError("non-finite LSTM cell state")
    y = arr["h"] @ w.theta_out.T + w.b_out
    return LstmSegment(x=X, y=y, **arr)


def _local_factors(seg: LstmSegment):
    return {
        "i": seg.c_tilde * seg.i * (1.0 - seg.i),
        "f": seg.c_prev * seg.f * (1.0 - seg.f),
        "c": seg.i * (1.0 - seg.c_tilde**2),
        "o": seg.c * seg.o * (1.0 - seg.o),
    }


def lstm_backward_segment(w: LstmWeights, seg: LstmSegment, dEdy, boundary: Optional[Boundary]):
    """Batched backward pass; returns ``(L, G, dnet, previous, dEdz_partial)``.

    ``dnet[g]`` is ``dE/d(net input of gate g)`` for every step.
    """
    B, T, n = seg.h.shape
    u = _local_factors(seg)
    partial = dEdy @ w.theta_out
    g_z = np.zeros((B, n)) if boundary is None else np.asarray(boundary[0], dtype=np.float64).reshape(B, n)
    g_s = np.zeros((B, n)) if boundary is None else np.asarray(boundary[1], dtype=np.float64).reshape(B, n)
    L = np.empty((B, T, n))
    G = np.empty((B, T, n))
    dnet = {g: np.empty((B, T, n)) for g in GATES}
    for t in range(T - 1, -1, -1):
        L[:, t] = partial[:, t] + g_z
        G[:, t] = L[:, t] * seg.o[:, t] + g_s
        for g in ("i", "f", "c"):
            dnet[g][:, t] = G[:, t] * u[g][:, t]
        dnet["o"][:, t] = L[:, t] * u["o"][:, t]
        g_z = sum(dnet[g][:, t] @ w.w_rec[g] for g in GATES)
        g_s = G[:, t] * seg.f[:, t]
    return L, G, dnet, (g_z, g_s[:, :, None]), partial


class LstmIntervalEngine:
    """Batched forward, backward and gradient estimates on LSTM intervals.

    Eligibility vectors are kept per sequence of the batch for the
    input/forget/candidate blocks over the concatenated presynaptic signal
    ``[x, h_prev]``.  :meth:`reset` clears them at sequence starts.
    """

    def __init__(self, cfg: TruncationConfig, batch: int, n_in: int, n_rec: int):
        self.cfg = cfg
        self.batch, self.n_in, self.n_rec = batch, n_in, n_rec
        self.reset()

    def reset(self):
        B, n = self.batch, self.n_rec
        self.c = np.zeros((B, n))
        self.h = np.zeros((B, n))
        self.eps = {g: np.zeros((B, n, self.n_in + n)) for g in ("i", "f", "c")} if self.cfg.uses_elig else None

    def snapshot(self):
        eps = None if self.eps is None else {g: e.copy() for g, e in self.eps.items()}
        return self.c.copy(), self.h.copy(), eps

    def restore(self, snap):
        self.c, self.h, eps = snap[0].copy(), snap[1].copy(), snap[2]
        self.eps = None if eps is None else {g: e.copy() for g, e in eps.items()}

    def forward(self, w: LstmWeights, X) -> LstmSegment:
        return lstm_forward_segment(w, X, self.c, self.h)

    def gradients(self, w: LstmWeights, seg: LstmSegment, dEdy, boundary, advance: bool = True):
        """Gradient estimate of one interval (summed over the batch).

        ``advance`` moves the carried cell state and eligibility vectors to
        the end of the interval.  Returns ``(grads, previous)``.
        """
        cfg = self.cfg
        bnd = None
        if boundary is not None and cfg.uses_sg:
            bnd = (cfg.eta_sg * boundary[0], cfg.eta_sg * boundary[1][..., 0])
        L, G, dnet, prev, partial = lstm_backward_segment(w, seg, dEdy, bnd)
        pre = np.concatenate([seg.x, seg.h_prev], axis=2)
        n_in = self.n_in
        grads = {}
        if cfg.uses_elig:
            signals = partial if cfg.mode == "eprop1" else L
            u = _local_factors(seg)
            eps = {g: e.copy() for g, e in self.eps.items()}
            acc = {g: np.zeros((self.n_rec, pre.shape[2])) for g in eps}
            for t in range(seg.h.shape[1]):
                p_t = pre[:, t, None, :]
                w_t = (signals[:, t] * seg.o[:, t])[:, :, None]
                for g in eps:
                    eps[g] *= seg.f[:, t, :, None]
                    eps[g] += u[g][:, t, :, None] * p_t
                    acc[g] += np.einsum("bji,bj->ji", eps[g], w_t[:, :, 0])
            # the output gate has no history: its trace is the direct term
            acc["o"] = np.einsum("btj,bti->ji", signals * u["o"], pre)
            if advance:
                self.eps = eps
        else:
            acc = {g: np.einsum("btj,bti->ji", dnet[g], pre) for g in GATES}
        for g in GATES:
            grads[f"in_{g}"] = acc[g][:, :n_in]
            grads[f"rec_{g}"] = acc[g][:, n_in:]
        grads["out"] = np.einsum("bto,btj->oj", dEdy, seg.h)
        grads["b_out"] = dEdy.sum(axis=(0, 1))
        if advance:
            self.c, self.h = seg.final
        return grads, prev


def batch_bce(y, targets, mask):
    """Per-sequence bits and ``dE/dy`` for ``[B x T x k]`` logistic outputs."""
    B = y.shape[0]
    E = np.zeros(B)
    dEdy = np.zeros_like(y)
    for b in range(B):
        E[b], dEdy[b] = output_error(y[b], LossSpec("bce", targets[b], mask[b]))
    return E, dEdy


def sequence_interval_gradients(w: LstmWeights, X, Y, M, cfg: TruncationConfig, sg: Optional[SyntheticGradientNet] = None):
    """Batched counterpart of :func:`interval_gradient_sum` (fixed weights, summed over intervals and batch)."""
    B, T, n_in = X.shape
    eng = LstmIntervalEngine(cfg, B, n_in, w.n_rec)
    total: GradientSet = {}
    for a, b in cfg.intervals(T):
        seg = eng.forward(w, X[:, a:b])
        _, dEdy = batch_bce(seg.y, Y[:, a:b], M[:, a:b])
        bnd = sg_forward(seg.h[:, -1], sg) if (sg is not None and cfg.uses_sg and b < T) else None
        grads, _ = eng.gradients(w, seg, dEdy, bnd)
        _add(total, grads)
    return total


# ---------------------------------------------------------------------------
# interval training loop with synthetic gradients
# ---------------------------------------------------------------------------


def _mean(grads, B):
    return {k: v / B for k, v in grads.items()}


def sg_train_step(eng: LstmIntervalEngine, w: LstmWeights, net, X, Y, M, span, next_span, T):
    """Forward/backward on interval ``span`` plus the look-ahead pass on ``next_span``.

    Returns ``(theta_grads, sg_grads, interval_bits, E_SG)``: the mean
    per-sequence gradient for the network weights, the SG gradient (or
    ``None`` without SG), the bits accumulated on the interval and the SG
    loss.  The engine advances to the end of ``span``.
    """
    cfg = eng.cfg
    B = X.shape[0]
    a, b = span
    seg = eng.forward(w, X[:, a:b])
    E, dEdy = batch_bce(seg.y, Y[:, a:b], M[:, a:b])
    z_tm = seg.h[:, -1].copy()
    use_sg = cfg.uses_sg and net is not None
    bnd = sg_forward(z_tm, net) if use_sg and b < T else None
    grads, _ = eng.gradients(w, seg, dEdy, bnd, advance=True)
    sg_grads, e_sg = None, 0.0
    if use_sg and next_span is not None:
        # look-ahead: the next interval, with its own boundary, yields the
        # bootstrapped target for SG(z^{t_m}); the carried state is untouched
        snap = eng.snapshot()
        a2, b2 = next_span
        seg2 = eng.forward(w, X[:, a2:b2])
        _, dEdy2 = batch_bce(seg2.y, Y[:, a2:b2], M[:, a2:b2])
        bnd2 = sg_forward(seg2.h[:, -1], net) if b2 < T else None
        _, target = eng.gradients(w, seg2, dEdy2, bnd2, advance=False)
        eng.restore(snap)
        e_sg, sg_grads = sg_loss_and_grads(net, z_tm, target)
    return _mean(grads, B), sg_grads, E, e_sg


@dataclass
class CopyRepeatSetup:
    mode: str = "eprop3"
    n_rec: int = 64
    delta_t: int = 4
    eta_sg: float = 0.1
    batch: int = 32
    lr: float = 0.003
    sg_lr: Optional[float] = None
    sg_hidden: int = 128
    budget: int = 1000  # sequence batches
    seed: int = 0
    threshold_bits: float = 0.15
    input_scale: float = 1.0
    forget_bias: float = 1.0

    def truncation(self) -> TruncationConfig:
        return TruncationConfig(self.delta_t, self.eta_sg, self.mode)


@dataclass
class CopyRepeatRow:
    iteration: int
    wall_ms: float
    loss: float
    metric: float
    lr: float
    level: int
    sg_loss: float


@dataclass
class CopyRepeatResult:
    rows: List[CopyRepeatRow]
    weights: LstmWeights
    sg: Optional[SyntheticGradientNet]
    summary: dict


def with_bias_channel(X):
    """Append a constant input channel; its weights act as gate biases."""
    X = np.asarray(X, dtype=np.float64)
    return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)


def init_copy_repeat_weights(setup: CopyRepeatSetup, n_in: int, n_out: int) -> LstmWeights:
    w = init_lstm_weights(n_in + 1, setup.n_rec, n_out, [setup.seed, 1], setup.input_scale)
    w_in = {g: w.w_in[g].copy() for g in GATES}
    for g in GATES:
        w_in[g][:, -1] = 0.0
    w_in["f"][:, -1] = setup.forget_bias
    return LstmWeights(w_in, w.w_rec, w.theta_out, w.b_out)


def train_copy_repeat(
    setup: CopyRepeatSetup, on_row: Optional[Callable[[CopyRepeatRow], None]] = None, clock=time.perf_counter
) -> CopyRepeatResult:
    """Curriculum training on copy-repeat, one parameter update per interval.

    Each row covers one batch of sequences: ``loss`` is the mean error in
    bits per sequence before the curriculum check, ``metric`` the same
    quantity and ``level`` the number of curriculum increments so far.
    """
    cfg = setup.truncation()
    n_in = tasks.N_BITS + 1
    w = init_copy_repeat_weights(setup, n_in, n_in)
    net = (
        SyntheticGradientNet.init(setup.n_rec, setup.sg_hidden, [setup.seed, 2]) if cfg.uses_sg else None
    )
    params = w.blocks()
    opt = AdamState.zeros_like(params)
    sg_opt = AdamState.zeros_like(net.params()) if net is not None else None
    sg_lr = setup.lr if setup.sg_lr is None else setup.sg_lr
    cur = tasks.CurriculumState()
    rows: List[CopyRepeatRow] = []
    history = [(0, 0, cur.sequence_length)]
    t0 = clock()
    ceiling = False
    solved = 0
    for it in range(setup.budget):
        samples = [tasks.gen_copy_repeat(cur, tasks.split_seed(setup.seed, it, k)) for k in range(setup.batch)]
        X = with_bias_channel(np.stack([s.inputs for s in samples]))
        Y = np.stack([s.targets for s in samples])
        M = np.stack([s.mask for s in samples])
        T = X.shape[1]
        spans = cfg.intervals(T)
        eng = LstmIntervalEngine(cfg, setup.batch, n_in + 1, setup.n_rec)
        bits = np.zeros(setup.batch)
        sg_losses = []
        for m, span in enumerate(spans):
            nxt = spans[m + 1] if m + 1 < len(spans) else None
            grads, sg_grads, E, e_sg = sg_train_step(eng, w, net, X, Y, M, span, nxt, T)
            bits += E
            params, opt = adam_update(params, grads, opt, setup.lr)
            w = LstmWeights.from_blocks(params)
            if sg_grads is not None:
                sg_params, sg_opt = adam_update(net.params(), sg_grads, sg_opt, sg_lr)
                net = net.with_params(sg_params)
                sg_losses.append(e_sg)
        err = float(bits.mean())
        if not math.isfinite(err):
            raise NumericError("non-finite copy-repeat error", step=it)
        row = CopyRepeatRow(
            it, (clock() - t0) * 1000.0, err, err, setup.lr, cur.level, float(np.mean(sg_losses)) if sg_losses else 0.0
        )
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if err < setup.threshold_bits:
            solved = max(solved, cur.sequence_length)
            try:
                nxt_cur = cur.advance()
                tasks.gen_copy_repeat(nxt_cur, 0)
            except CurriculumCeilingError:
                ceiling = True
                break
            cur = nxt_cur
            history.append((it + 1, cur.level, cur.sequence_length))
    summary = {
        "task": "copy_repeat",
        "mode": setup.mode,
        "seed": setup.seed,
        "iterations_run": len(rows),
        "final_level": cur.level,
        "final_sequence_length": cur.sequence_length,
        "solved_sequence_length": solved,
        "curriculum": history,
        "ceiling_reached": ceiling,
        "final_metric": rows[-1].metric if rows else float("nan"),
        "wall_s": clock() - t0,
    }
    return CopyRepeatResult(rows, w, net, summary)


def copy_repeat_setup(seed=0, mode="eprop3", **overrides) -> CopyRepeatSetup:
    """Reduced-size preset: 64 LSTM units, intervals of 4 steps, 4000 batches of 32."""
    base = dict(mode=mode, seed=seed, lr=0.01, budget=4000)
    base.update(overrides)
    return CopyRepeatSetup(**base)
