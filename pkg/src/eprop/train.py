"""Batched e-prop 1 (and BPTT) training of recurrent spiking networks.

The batched estimator evaluates exactly the online e-prop 1 sum
``sum_t L_j^t ebar_ji^t`` but in reverse order: since weights are held
fixed within a trial, the kappa filter can be moved from the traces onto the
learning signals and the adaptation component of ALIF traces onto a
per-neuron adjoint recursion.  The result is identical to the online form
(:func:`eprop1_online_reference`), only the work is expressed as matrix
products over the time axis.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import kernels, tasks
from .dynamics import ALIF, LIF, AlifParams, LifParams, NetworkWeights, decay_factor, simulate_trial
from .eligibility import trial_traces
from .errors import ConfigurationError, NumericError
from .optim import AdamState, Schedule, adam_update, init_weights, mask_recurrent_diagonal
from .signals import (
    CLOPATH_TAU_MS,
    FeedbackMatrix,
    LossSpec,
    RegularizationSpec,
    clopath_post_factor,
    firing_rates,
    grad_eprop1,
    grad_output_weights,
    grad_regularization,
    learning_signal_classification,
    learning_signal_regression,
    regularization_dEdz,
    regularization_loss,
)

SPIKING_MODES = (
    "eprop1",
    "eprop1-symmetric",
    "eprop1-global",
    "eprop1-clopath",
    "eprop1-truncated-elig",
    "bptt",
)


def _model_constants(model):
    if isinstance(model, LIF):
        return model.params, None, 0.5
    if isinstance(model, ALIF):
        return model.params.lif, model.params, model.params.rho
    raise ConfigurationError(f"spiking trainer needs a LIF or ALIF model, got {model!r}")


def batch_forward(model, w: NetworkWeights, X, kappa: float):
    """Simulate a batch ``X [B x T x n_in]``; returns the recorded arrays and outputs."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != w.n_in:
        raise ConfigurationError(f"inputs must be [B x T x {w.n_in}], got {X.shape}")
    lif, alif, rho = _model_constants(model)
    beta = alif.beta_vector(w.n_rec) if alif is not None else np.zeros(w.n_rec)
    current = np.ascontiguousarray(X @ w.theta_in.T)
    z, v, a, h, blocked = kernels.spiking_forward(
        current, np.ascontiguousarray(w.theta_rec), lif.alpha, lif.v_th, lif.gamma, int(lif.refractory_steps), beta, rho
    )
    if not np.all(np.isfinite(v)):
        bad = int(np.argwhere(~np.isfinite(v))[0][1])
        raise NumericError("non-finite membrane voltage", step=bad)
    y = kernels.leaky_filter(np.ascontiguousarray(z @ w.theta_out.T + w.b_out), kappa)
    return {"z": z, "v": v, "a": a, "h": h, "blocked": blocked, "beta": beta}, y


def batch_output_error(y, targets, mask, kind):
    """Summed loss and per-step ``dE/dy`` for a batch."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    if kind == "mse":
        diff = y - targets
        return 0.5 * float(np.sum(m * diff**2)), m * diff
    if kind == "ce":
        logp = y - y.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        return -float(np.sum(m * targets * logp)), m * (np.exp(logp) - targets)
    raise ConfigurationError(f"spiking trainer supports mse and ce losses, not {kind!r}")


def _signal_to_neurons(err, feedback_mats, period):
    """``err @ B^T`` with a possibly time-dependent feedback sequence."""
    if not period:
        return err @ feedback_mats[0].T
    out = np.empty(err.shape[:2] + (feedback_mats.shape[1],))
    T = err.shape[1]
    for p in range(feedback_mats.shape[0]):
        sl = slice(p * period, min((p + 1) * period, T))
        out[:, sl] = err[:, sl] @ feedback_mats[p].T
    return out


def _contract(coef, pre):
    """``sum_{b,t} coef[b,t,j] * pre[b,t,i]`` as one matrix product."""
    B, T, n = coef.shape
    return coef.reshape(B * T, n).T @ pre.reshape(B * T, pre.shape[2])


def postsynaptic_factor(rec, lif: LifParams, post: str):
    if post == "pseudo":
        return rec["h"]
    if post == "clopath":
        d = decay_factor(CLOPATH_TAU_MS, lif.dt_ms)
        v = rec["v"]
        vhat = kernels.leaky_filter(np.ascontiguousarray((1.0 - d) * v), d)
        psi = clopath_post_factor(v, vhat, lif.v_th)
        return np.where(rec["blocked"] > 0, 0.0, psi)
    raise ConfigurationError(f"unknown postsynaptic factor {post!r}")


@dataclass
class BatchResult:
    grads: Dict[str, np.ndarray]
    loss: float
    task_loss: float
    y: np.ndarray
    z: np.ndarray
    spike_counts: np.ndarray


def eprop1_batch_gradients(
    model,
    w: NetworkWeights,
    X,
    targets,
    mask,
    loss_kind: str,
    feedback: FeedbackMatrix,
    kappa: float,
    *,
    post: str = "pseudo",
    truncate: bool = False,
    reg: Optional[RegularizationSpec] = None,
    recurrent: bool = True,
) -> BatchResult:
    """e-prop 1 estimate of ``dE/dtheta`` summed over a batch of trials.

    Readout gradients are exact.  ``reg`` adds the rate regularizer, whose
    learning signal is applied to the unfiltered traces.
    """
    lif, alif, rho = _model_constants(model)
    X = np.ascontiguousarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    rec, y = batch_forward(model, w, X, kappa)
    B, T, n = rec["z"].shape
    task_loss, err = batch_output_error(y, targets, mask, loss_kind)
    mats, period = feedback.sequence(w.theta_out)
    # err @ B^T is minus the learning signal L = B (y* - y)
    neg_L = _signal_to_neurons(err, mats, period)
    K = kernels.leaky_filter(np.ascontiguousarray(neg_L), kappa, True)
    counts = rec["z"].sum(axis=(0, 1))
    loss = task_loss
    if reg is not None:
        K = K + regularization_dEdz(counts, reg, B, T)[None, None, :]
        loss += regularization_loss(counts, reg, B, T)
    psi = postsynaptic_factor(rec, lif, post)
    coef = np.ascontiguousarray(K * psi)
    z_prev = np.concatenate([np.zeros((B, 1, n)), rec["z"][:, :-1]], axis=1)
    grads = {}
    adaptive = alif is not None and np.any(rec["beta"] > 0) and not truncate
    q = None
    if adaptive:
        q = kernels.adaptation_adjoint(coef * rec["beta"], np.ascontiguousarray(rec["h"]), rec["beta"], rho)
    for name, pre in (("in", X), ("rec", z_prev)):
        if name == "rec" and not recurrent:
            grads[name] = np.zeros((n, n))
            continue
        zhat = pre if truncate else kernels.leaky_filter(np.ascontiguousarray(pre), lif.alpha)
        g = _contract(coef, zhat)
        if q is not None:
            g -= _contract(q, zhat)
        grads[name] = g
    delta = kernels.leaky_filter(np.ascontiguousarray(err), kappa, True)
    grads["out"] = _contract(delta, rec["z"])
    grads["b_out"] = delta.sum(axis=(0, 1))
    grads = mask_recurrent_diagonal(grads)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return BatchResult(grads, loss, task_loss, y, rec["z"], counts)


def bptt_batch_gradients(model, w, X, targets, mask, loss_kind, kappa, *, reg=None, recurrent=True) -> BatchResult:
    """Exact BPTT (pseudo-derivative surrogate) through the oracle, trial by trial."""
    from .oracle import bptt_gradients

    X = np.asarray(X, dtype=np.float64)
    B, T = X.shape[:2]
    trajs = [simulate_trial(model, w, X[b], kappa=kappa) for b in range(B)]
    counts = sum(tr.z.sum(axis=0) for tr in trajs)
    extra = None
    loss = 0.0
    if reg is not None:
        extra = np.broadcast_to(regularization_dEdz(counts, reg, B, T), (T, w.n_rec))
        loss += regularization_loss(counts, reg, B, T)
    total = None
    task_loss = 0.0
    for b, tr in enumerate(trajs):
        res = bptt_gradients(tr, LossSpec(loss_kind, targets[b], mask[b]), model, w, extra_dEdz=extra)
        task_loss += res.loss
        total = res.grads if total is None else {k: total[k] + res.grads[k] for k in total}
    if not recurrent:
        total["rec"] = np.zeros_like(total["rec"])
    y = np.stack([tr.y for tr in trajs])
    z = np.stack([tr.z for tr in trajs])
    return BatchResult(mask_recurrent_diagonal(total), loss + task_loss, task_loss, y, z, counts)


def eprop1_online_reference(model, w, x, loss: LossSpec, B_mat, kappa, *, truncate=False, reg=None, post="pseudo"):
    """Single-trial e-prop 1 evaluated strictly forward in time.

    Uses the per-synapse eligibility updates and kappa filters of
    :mod:`eprop.eligibility`; serves as the reference the batched estimator
    is tested against.
    """
    traj = simulate_trial(model, w, x, kappa=kappa)
    lif, _, _ = _model_constants(model)
    if post == "clopath":
        rec = {"v": np.asarray(traj.states["v"])[None], "blocked": np.asarray(traj.states["refractory"])[None]}
        psi = postsynaptic_factor(rec, lif, "clopath")[0]
        zp = traj.z_prev()
        filt, raw = {}, {}
        for name, pre in (("in", traj.x), ("rec", zp)):
            zhat = np.zeros(pre.shape[1])
            f = np.zeros((w.n_rec, pre.shape[1]))
            fl, rw = [], []
            for t in range(traj.T):
                zhat = lif.alpha * zhat + pre[t]
                e = np.outer(psi[t], pre[t] if truncate else zhat)
                f = kappa * f + e
                fl.append(f.copy())
                rw.append(e)
            filt[name], raw[name] = np.array(fl), np.array(rw)
    else:
        filt, _ = trial_traces(model, traj, w, truncate=truncate, kappa=kappa)
        raw, _ = trial_traces(model, traj, w, truncate=truncate)
    if loss.kind == "mse":
        L = learning_signal_regression(traj.y, loss.target, B_mat, loss.mask)
    else:
        L = learning_signal_classification(traj.y, loss.target, B_mat, loss.mask)
    grads = {name: grad_eprop1(L, filt[name], filter_kappa=kappa, readout_kappa=traj.kappa) for name in filt}
    if reg is not None:
        counts = traj.z.sum(axis=0)
        extra = grad_regularization(counts, reg, {k: v.sum(axis=0) for k, v in raw.items()}, 1, traj.T)
        grads = {k: grads[k] + extra[k] for k in grads}
    grads.update(grad_output_weights(traj.y, loss, traj.z, kappa))
    return mask_recurrent_diagonal(grads)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class SpikingSetup:
    """Everything the spiking training loop needs, resolved from a config."""

    task: str
    mode: str
    model: object
    n_in: int
    n_rec: int
    n_out: int
    kappa: float
    loss_kind: str
    metric_kind: str
    iterations: int
    batch: int
    seed: int
    schedule: Schedule
    reg: Optional[RegularizationSpec] = None
    recurrent: bool = True
    input_scale: float = 1.0
    rec_scale: float = 1.0
    out_scale: float = 1.0
    feedback_variance: Optional[float] = None
    resample_steps: Optional[int] = None
    eval_batch: int = 64
    stop_below: Optional[float] = None
    task_kwargs: dict = field(default_factory=dict)


@dataclass
class Row:
    iteration: int
    wall_ms: float
    loss: float
    metric: float
    lr: float
    firing_rate_hz: float


@dataclass
class RunResult:
    rows: List[Row]
    weights: NetworkWeights
    summary: dict


def _sample_batch(setup: SpikingSetup, iteration: int, n: int, stream: int):
    if setup.task == "pattern":
        s = tasks.gen_pattern_task(setup.seed, **setup.task_kwargs)
        return [s] * n
    if setup.task == "store_recall":
        return [
            tasks.gen_store_recall(tasks.split_seed([setup.seed, stream], iteration, k), **setup.task_kwargs)
            for k in range(n)
        ]
    raise ConfigurationError(f"task {setup.task!r} is not a spiking task", field="experiment.task")


def _stack(samples):
    return (
        np.stack([s.inputs for s in samples]),
        np.stack([s.targets for s in samples]),
        np.stack([s.mask for s in samples]),
    )


def _metric(setup, y, targets, mask):
    if setup.metric_kind == "nmse":
        return float(np.mean([tasks.nmse(y[b], targets[b], mask[b]) for b in range(y.shape[0])]))
    period = int(round(setup.task_kwargs.get("d_ms", 200) / setup.task_kwargs.get("dt_ms", 1.0)))
    wrong = total = 0
    for b in range(y.shape[0]):
        w_, t_ = tasks.count_errors(y[b], targets[b], mask[b], period)
        wrong += w_
        total += t_
    if total == 0:
        return float("nan")
    return wrong / total


def train_spiking(setup: SpikingSetup, on_row: Optional[Callable[[Row], None]] = None, clock=time.perf_counter) -> RunResult:
    """Run the training loop; ``on_row`` receives each metrics row as it is produced."""
    if setup.mode not in SPIKING_MODES:
        raise ConfigurationError(f"mode {setup.mode!r} is not available for spiking models", field="experiment.mode")
    rng = np.random.default_rng([setup.seed, 7])
    w = init_weights(setup.n_in, setup.n_rec, setup.n_out, [setup.seed, 1], 1.0, recurrent=setup.recurrent)
    w = NetworkWeights(w.theta_in * setup.input_scale, w.theta_rec * setup.rec_scale, w.theta_out * setup.out_scale, w.b_out)
    T = _sample_batch(setup, 0, 1, 0)[0].T
    if setup.mode == "eprop1-global":
        feedback = FeedbackMatrix.uniform(setup.n_rec, setup.n_out)
    elif setup.mode == "eprop1-symmetric":
        feedback = FeedbackMatrix.symmetric()
    else:
        feedback = FeedbackMatrix.random(
            setup.n_rec, setup.n_out, rng, setup.feedback_variance, setup.resample_steps, T if setup.resample_steps else None
        )
    params = w.blocks()
    opt = AdamState.zeros_like(params)
    rows: List[Row] = []
    dt_ms = _model_constants(setup.model)[0].dt_ms
    t_start = clock()
    first_hit = None
    val = None
    if setup.task == "store_recall":
        val = _stack(_sample_batch(setup, 0, setup.eval_batch, 1))

    def emit(i, res, metric):
        rate = float(firing_rates(res.spike_counts, res.z.shape[0], res.z.shape[1], dt_ms).mean())
        row = Row(i, (clock() - t_start) * 1000.0, res.loss, metric, setup.schedule.at(i), rate)
        rows.append(row)
        if on_row is not None:
            on_row(row)
        return row

    stopped = False
    for i in range(setup.iterations + 1):
        X, Y, M = _stack(_sample_batch(setup, i, setup.batch, 0))
        res = _gradients(setup, w, X, Y, M, feedback)
        if val is not None:
            yv = batch_forward(setup.model, w, val[0], setup.kappa)[1]
            metric = _metric(setup, yv, val[1], val[2])
        else:
            metric = _metric(setup, res.y, Y, M)
        emit(i, res, metric)
        if setup.stop_below is not None and metric < setup.stop_below:
            first_hit = i if first_hit is None else first_hit
            stopped = True
            break
        if i == setup.iterations:
            break
        params, opt = adam_update(params, res.grads, opt, setup.schedule.at(i))
        if not setup.recurrent:
            params["rec"] = np.zeros_like(params["rec"])
        w = NetworkWeights.from_blocks(params)
    summary = {
        "task": setup.task,
        "mode": setup.mode,
        "seed": setup.seed,
        "iterations_run": rows[-1].iteration,
        "final_metric": rows[-1].metric,
        "final_loss": rows[-1].loss,
        "final_rate_hz": rows[-1].firing_rate_hz,
        "best_metric": float(np.nanmin([r.metric for r in rows])),
        "first_below_threshold": first_hit,
        "early_stopped": stopped,
        "feedback_digest": feedback.digest(),
        "wall_s": clock() - t_start,
        "backend": kernels.BACKEND,
    }
    return RunResult(rows, w, summary)


def _gradients(setup, w, X, Y, M, feedback) -> BatchResult:
    if setup.mode == "bptt":
        return bptt_batch_gradients(setup.model, w, X, Y, M, setup.loss_kind, setup.kappa, reg=setup.reg, recurrent=setup.recurrent)
    return eprop1_batch_gradients(
        setup.model,
        w,
        X,
        Y,
        M,
        setup.loss_kind,
        feedback,
        setup.kappa,
        post="clopath" if setup.mode == "eprop1-clopath" else "pseudo",
        truncate=setup.mode == "eprop1-truncated-elig",
        reg=setup.reg,
        recurrent=setup.recurrent,
    )


# ---------------------------------------------------------------------------
# task presets
# ---------------------------------------------------------------------------


def pattern_setup(seed=0, mode="eprop1", *, n_rec=200, iterations=500, recurrent=True, **overrides) -> SpikingSetup:
    """Pattern generation with LIF neurons (tau_m 20 ms, 5 ms refractory, v_th 0.61)."""
    lif = LifParams.from_tau(20.0, 1.0, v_th=0.61, refractory_steps=5)
    base = dict(
        task="pattern",
        mode=mode,
        model=LIF(lif),
        n_in=20,
        n_rec=n_rec,
        n_out=3,
        kappa=decay_factor(20.0),
        loss_kind="mse",
        metric_kind="nmse",
        iterations=iterations,
        batch=1,
        seed=seed,
        schedule=Schedule(0.006, 0.7, 100),
        reg=RegularizationSpec(10.0, 5.0),
        recurrent=recurrent,
    )
    base.update(overrides)
    return SpikingSetup(**base)


def store_recall_setup(seed=0, mode="eprop1", *, iterations=300, batch=128, **overrides) -> SpikingSetup:
    """Store-recall with an LSNN of 10 LIF and 10 ALIF neurons.

    Input and readout weights start smaller than the default Gaussian
    (scales 0.3 and 0.05): voltages and readouts integrate their drive
    without a ``1 - decay`` factor, so the default scales give initial
    readout logits of several units and drive the network into a
    high-rate regime that saturates the threshold adaptation.
    """
    lif = LifParams.from_tau(20.0, 1.0, v_th=0.5, refractory_steps=5)
    alif = AlifParams.from_tau(lif, 1200.0, np.concatenate([np.zeros(10), np.full(10, 0.03)]))
    base = dict(
        task="store_recall",
        mode=mode,
        model=ALIF(alif),
        n_in=100,
        n_rec=20,
        n_out=2,
        kappa=decay_factor(20.0),
        loss_kind="ce",
        metric_kind="misclassification",
        iterations=iterations,
        batch=batch,
        seed=seed,
        schedule=Schedule(0.01, 0.3, 100, max_decays=1),
        reg=RegularizationSpec(10.0, 0.5),
        input_scale=0.3,
        out_scale=0.05,
        eval_batch=128,
        stop_below=0.05,
    )
    base.update(overrides)
    return SpikingSetup(**base)
