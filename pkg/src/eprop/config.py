"""Flat ``section.key = value`` experiment configuration.

Example::

    # store-recall with e-prop 1
    experiment.task = store_recall
    experiment.mode = eprop1
    experiment.seed = 1
    optimizer.lr = 0.01
    output.dir = runs/sr1

Blank lines and ``#`` comments are ignored.  Every key must be listed in
:data:`SCHEMA`; anything else is rejected with the offending field path.
Keys left out fall back to the task preset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Dict, Mapping, Optional

from .dynamics import LIF, LifParams, decay_factor, lsnn
from .eprop3 import INTERVAL_MODES, CopyRepeatSetup, copy_repeat_setup
from .errors import ConfigurationError
from .optim import Schedule
from .signals import RegularizationSpec
from .train import SPIKING_MODES, SpikingSetup, pattern_setup, store_recall_setup

TASKS = ("pattern", "store_recall", "copy_repeat")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("none", "") else int(text)


# key -> parser
SCHEMA = {
    "experiment.task": str,
    "experiment.mode": str,
    "experiment.seed": int,
    "experiment.iterations": int,
    "experiment.batch": int,
    "experiment.eval_batch": int,
    "experiment.stop_below": _opt_float,
    "experiment.verify": _bool,
    "model.n_rec": int,
    "model.n_lif": int,
    "model.n_alif": int,
    "model.tau_m_ms": float,
    "model.v_th": float,
    "model.gamma": float,
    "model.refractory_ms": int,
    "model.tau_a_ms": float,
    "model.beta": float,
    "model.tau_out_ms": float,
    "model.recurrent": _bool,
    "model.input_scale": float,
    "model.rec_scale": float,
    "model.out_scale": float,
    "optimizer.lr": float,
    "optimizer.decay_factor": float,
    "optimizer.decay_period": int,
    "optimizer.max_decays": _opt_int,
    "optimizer.sg_lr": _opt_float,
    "regularization.enabled": _bool,
    "regularization.f_target_hz": float,
    "regularization.lam": float,
    "regularization.reduction": str,
    "feedback.variance": _opt_float,
    "feedback.resample_steps": _opt_int,
    "truncation.delta_t": int,
    "truncation.eta_sg": float,
    "truncation.sg_hidden": int,
    "task.threshold_bits": float,
    "task.p_command": float,
    "task.d_ms": int,
    "task.trial_ms": int,
    "output.dir": str,
    "output.wall_clock": _bool,
    "output.save_weights": _bool,
}


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse and type-check config text into a ``{key: value}`` dict."""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(out, key, value)
    return out


def set_value(cfg: Dict[str, Any], key: str, value: str) -> None:
    if key not in SCHEMA:
        raise ConfigurationError("unknown configuration key", field=key)
    try:
        cfg[key] = SCHEMA[key](value)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {value!r}: {exc}", field=key) from None


def load_config(path, overrides=()) -> Dict[str, Any]:
    """Read a config file and apply ``key=value`` override strings."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v.strip())
    return cfg


@dataclass
class Experiment:
    task: str
    setup: object  # SpikingSetup or CopyRepeatSetup
    output_dir: Optional[str]
    wall_clock: bool
    save_weights: bool
    verify: bool
    raw: Mapping[str, Any]


def _spiking_model(cfg, task):
    g = cfg.get
    kwargs = {}
    if "model.gamma" in cfg:
        kwargs["gamma"] = g("model.gamma")
    if task == "pattern":
        lif = LifParams.from_tau(
            g("model.tau_m_ms", 20.0), 1.0, v_th=g("model.v_th", 0.61), refractory_steps=g("model.refractory_ms", 5), **kwargs
        )
        for k in ("model.n_lif", "model.n_alif", "model.tau_a_ms", "model.beta"):
            if k in cfg:
                raise ConfigurationError("adaptive neurons are not used in the pattern task", field=k)
        return LIF(lif), g("model.n_rec", 200)
    lif = LifParams.from_tau(
        g("model.tau_m_ms", 20.0), 1.0, v_th=g("model.v_th", 0.5), refractory_steps=g("model.refractory_ms", 5), **kwargs
    )
    n_lif, n_alif = g("model.n_lif", 10), g("model.n_alif", 10)
    if "model.n_rec" in cfg and cfg["model.n_rec"] != n_lif + n_alif:
        raise ConfigurationError("n_rec must equal n_lif + n_alif", field="model.n_rec")
    if n_lif < 0 or n_alif < 0 or n_lif + n_alif < 1:
        raise ConfigurationError("neuron counts must be non-negative with at least one neuron", field="model.n_alif")
    return lsnn(n_lif, n_alif, lif, g("model.tau_a_ms", 1200.0), g("model.beta", 0.03)), n_lif + n_alif


def _spiking_setup(cfg, task, mode) -> SpikingSetup:
    g = cfg.get
    seed = g("experiment.seed", 0)
    model, n_rec = _spiking_model(cfg, task)
    if task == "pattern":
        base = pattern_setup(seed, mode, n_rec=n_rec)
    else:
        base = store_recall_setup(seed, mode)
    over = {"model": model, "n_rec": n_rec}
    simple = {
        "experiment.iterations": "iterations",
        "experiment.batch": "batch",
        "experiment.eval_batch": "eval_batch",
        "experiment.stop_below": "stop_below",
        "model.recurrent": "recurrent",
        "model.input_scale": "input_scale",
        "model.rec_scale": "rec_scale",
        "model.out_scale": "out_scale",
        "feedback.variance": "feedback_variance",
        "feedback.resample_steps": "resample_steps",
    }
    for key, name in simple.items():
        if key in cfg:
            over[name] = cfg[key]
    if "model.tau_out_ms" in cfg:
        over["kappa"] = decay_factor(cfg["model.tau_out_ms"])
    s = base.schedule
    over["schedule"] = Schedule(
        g("optimizer.lr", s.rate),
        g("optimizer.decay_factor", s.factor),
        g("optimizer.decay_period", s.period),
        g("optimizer.max_decays", s.max_decays),
    )
    if not g("regularization.enabled", True):
        over["reg"] = None
    else:
        r = base.reg or RegularizationSpec()
        over["reg"] = RegularizationSpec(
            g("regularization.f_target_hz", r.f_target),
            g("regularization.lam", r.lam),
            r.dt_ms,
            g("regularization.reduction", r.reduction),
        )
    task_kwargs = dict(base.task_kwargs)
    for key in ("task.p_command", "task.d_ms", "task.trial_ms"):
        if key in cfg:
            if task != "store_recall":
                raise ConfigurationError("only used by the store_recall task", field=key)
            task_kwargs[key.split(".", 1)[1]] = cfg[key]
    over["task_kwargs"] = task_kwargs
    for key in ("truncation.delta_t", "truncation.eta_sg", "truncation.sg_hidden", "optimizer.sg_lr", "task.threshold_bits"):
        if key in cfg:
            raise ConfigurationError("only used by the copy_repeat task", field=key)
    setup = replace(base, **over)
    if setup.iterations < 0 or setup.batch < 1 or setup.eval_batch < 1:
        raise ConfigurationError("iterations must be >= 0 and batch sizes >= 1", field="experiment.batch")
    return setup


def _copy_repeat_setup(cfg, mode) -> CopyRepeatSetup:
    for key in cfg:
        if key.startswith(("regularization.", "feedback.")) or key in (
            "model.n_lif", "model.n_alif", "model.tau_m_ms", "model.v_th", "model.gamma", "model.refractory_ms",
            "model.tau_a_ms", "model.beta", "model.tau_out_ms", "model.recurrent", "model.rec_scale", "model.out_scale",
            "experiment.eval_batch", "experiment.stop_below", "optimizer.decay_factor", "optimizer.decay_period",
            "optimizer.max_decays", "task.p_command", "task.d_ms", "task.trial_ms",
        ):
            raise ConfigurationError("not used by the copy_repeat task", field=key)
    names = {
        "experiment.iterations": "budget",
        "experiment.batch": "batch",
        "model.n_rec": "n_rec",
        "model.input_scale": "input_scale",
        "optimizer.lr": "lr",
        "optimizer.sg_lr": "sg_lr",
        "truncation.delta_t": "delta_t",
        "truncation.eta_sg": "eta_sg",
        "truncation.sg_hidden": "sg_hidden",
        "task.threshold_bits": "threshold_bits",
    }
    over = {name: cfg[key] for key, name in names.items() if key in cfg}
    setup = copy_repeat_setup(cfg.get("experiment.seed", 0), mode, **over)
    setup.truncation()  # validates delta_t, eta_sg and the mode
    if setup.budget < 0 or setup.batch < 1 or setup.n_rec < 1 or setup.sg_hidden < 1:
        raise ConfigurationError("budget must be >= 0, sizes >= 1", field="experiment.iterations")
    return setup


def build_experiment(cfg: Mapping[str, Any]) -> Experiment:
    """Resolve a parsed config into a runnable experiment."""
    cfg = dict(cfg)
    task = cfg.get("experiment.task")
    if task is None:
        raise ConfigurationError("a task is required", field="experiment.task")
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; choose from {TASKS}", field="experiment.task")
    if task == "copy_repeat":
        mode = cfg.get("experiment.mode", "eprop3")
        if mode not in INTERVAL_MODES:
            raise ConfigurationError(
                f"mode {mode!r} needs a spiking model; copy_repeat uses an LSTM ({', '.join(INTERVAL_MODES)})",
                field="experiment.mode",
            )
        setup = _copy_repeat_setup(cfg, mode)
    else:
        mode = cfg.get("experiment.mode", "eprop1")
        if mode not in SPIKING_MODES:
            raise ConfigurationError(
                f"mode {mode!r} is not available for spiking networks ({', '.join(SPIKING_MODES)})",
                field="experiment.mode",
            )
        setup = _spiking_setup(cfg, task, mode)
    return Experiment(
        task,
        setup,
        cfg.get("output.dir"),
        cfg.get("output.wall_clock", False),
        cfg.get("output.save_weights", True),
        cfg.get("experiment.verify", False),
        cfg,
    )
