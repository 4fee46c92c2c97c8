"""Seedable benchmark tasks and their metrics.

Every generator is a pure function of its arguments.  ``seed`` may be an int
or a sequence of ints; :func:`split_seed` derives the per-trial seed of
batch element ``index`` at training ``iteration`` as
``SeedSequence([seed, iteration, index])``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, CurriculumCeilingError, UndefinedMetricError
from .signals import LossSpec, output_error


@dataclass(frozen=True)
class TaskSample:
    """One trial: inputs ``[T x n_in]``, targets ``[T x n_out]`` and a mask ``[T]``.

    ``loss_kind`` says how targets are read: ``mse`` real series, ``ce``
    one-hot class labels, ``bce`` binary strings.
    """

    task: str
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    loss_kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or m.shape != (x.shape[0],):
            raise ConfigurationError("inputs, targets and mask must share the time axis")
        if np.any(m < 0):
            raise ConfigurationError("mask must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "mask", m)

    @property
    def T(self):
        return self.inputs.shape[0]

    def loss(self) -> LossSpec:
        return LossSpec(self.loss_kind, self.targets, self.mask)

    # -- columnar text format -------------------------------------------------

    def to_tsv(self) -> str:
        """Tab separated columns ``t, mask, x0.., y0..`` after ``#`` header lines."""
        buf = io.StringIO()
        buf.write(f"# task\t{self.task}\n")
        buf.write(f"# loss_kind\t{self.loss_kind}\n")
        buf.write(f"# n_in\t{self.inputs.shape[1]}\n")
        buf.write(f"# n_out\t{self.targets.shape[1]}\n")
        buf.write(f"# meta\t{json.dumps(self.meta, sort_keys=True)}\n")
        cols = ["t", "mask"] + [f"x{i}" for i in range(self.inputs.shape[1])] + [f"y{k}" for k in range(self.targets.shape[1])]
        buf.write("\t".join(cols) + "\n")
        for t in range(self.T):
            row = [str(t), repr(float(self.mask[t]))]
            row += [repr(float(v)) for v in self.inputs[t]]
            row += [repr(float(v)) for v in self.targets[t]]
            buf.write("\t".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "TaskSample":
        header = {}
        rows = []
        lines = text.splitlines()
        for line in lines:
            if line.startswith("# "):
                key, _, val = line[2:].partition("\t")
                header[key] = val
        data = [ln for ln in lines if ln and not ln.startswith("#")]
        if not data:
            raise ConfigurationError("empty task file")
        for ln in data[1:]:
            rows.append([float(v) for v in ln.split("\t")])
        arr = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
        n_in, n_out = int(header["n_in"]), int(header["n_out"])
        return cls(
            task=header["task"],
            inputs=arr[:, 2 : 2 + n_in],
            targets=arr[:, 2 + n_in : 2 + n_in + n_out],
            mask=arr[:, 1],
            loss_kind=header["loss_kind"],
            meta=json.loads(header.get("meta", "{}")),
        )


def split_seed(seed, iteration: int, index: int) -> np.random.SeedSequence:
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return np.random.SeedSequence(base + [int(iteration), int(index)])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    if isinstance(seed, (list, tuple)):
        return np.random.default_rng([int(s) for s in seed])
    return np.random.default_rng(int(seed))


# ---------------------------------------------------------------------------
# pattern generation
# ---------------------------------------------------------------------------

PATTERN_FREQS_HZ = (1.0, 2.0, 3.0, 5.0)


def pattern_targets(seed, T=1000, n_out=3, dt_ms=1.0, freqs=PATTERN_FREQS_HZ):
    """Sums of sinusoids; returns ``(targets, amplitudes, phases)``."""
    rng = _rng(seed)
    amps = rng.uniform(0.5, 2.0, size=(n_out, len(freqs)))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(n_out, len(freqs)))
    t_s = np.arange(T) * dt_ms / 1000.0
    arg = 2.0 * math.pi * np.asarray(freqs)[None, None, :] * t_s[:, None, None] + phases[None, :, :]
    return (amps[None, :, :] * np.sin(arg)).sum(axis=-1), amps, phases


def clock_inputs(T=1000, n_inputs=20, n_groups=5, rate_hz=100.0, dt_ms=1.0):
    """Group ``i`` fires regular spikes at ``rate_hz`` during its window only."""
    if n_inputs % n_groups:
        raise ConfigurationError("n_inputs must be a multiple of n_groups")
    x = np.zeros((T, n_inputs))
    window = T // n_groups
    per = n_inputs // n_groups
    isi = max(1, int(round(1000.0 / (rate_hz * dt_ms))))
    for g in range(n_groups):
        start = g * window
        stop = T if g == n_groups - 1 else start + window
        x[start:stop:isi, g * per : (g + 1) * per] = 1.0
    return x


def gen_pattern_task(seed, T=1000, n_inputs=20, n_groups=5, n_out=3, dt_ms=1.0) -> TaskSample:
    targets, amps, phases = pattern_targets(seed, T, n_out, dt_ms)
    return TaskSample(
        "pattern",
        clock_inputs(T, n_inputs, n_groups, 100.0, dt_ms),
        targets,
        np.ones(T),
        "mse",
        {"amplitudes": amps.tolist(), "phases": phases.tolist(), "freqs_hz": list(PATTERN_FREQS_HZ)},
    )


# ---------------------------------------------------------------------------
# store-recall
# ---------------------------------------------------------------------------

VALUE0, VALUE1, STORE, RECALL = range(4)


def store_recall_schedule(rng, n_periods, p_command):
    """Per-period ``(bits, commands)``; commands: 0 none, 1 STORE, 2 RECALL.

    In every period STORE is drawn with probability ``p_command`` and, if it
    was not drawn, RECALL with the same probability, so the two never
    coincide.  A RECALL drawn before the first STORE of the trial is dropped.
    A later STORE overwrites the stored value and one STORE may be recalled
    several times.
    """
    if 2 * p_command > 1.0:
        raise ConfigurationError("p_command must not exceed 1/2")
    bits = rng.integers(0, 2, size=n_periods)
    draws = rng.random(n_periods)
    cmds = np.zeros(n_periods, dtype=np.int64)
    stored = False
    for k in range(n_periods):
        if draws[k] < p_command:
            cmds[k] = 1
            stored = True
        elif draws[k] < 2 * p_command and stored:
            cmds[k] = 2
    return bits, cmds


def gen_store_recall(
    seed, d_ms=200, p_command=1.0 / 6.0, trial_ms=2400, n_per_group=25, rate_hz=50.0, dt_ms=1.0
) -> TaskSample:
    """Store-recall trial with four Poisson input groups.

    Inputs are ordered VALUE0, VALUE1, STORE, RECALL, each ``n_per_group``
    channels.  One value group is active in every period; the mask is 1
    during RECALL periods, where the target is the bit shown at the most
    recent STORE.
    """
    if not 0.0 < p_command <= 0.5:
        raise ConfigurationError("p_command must lie in (0, 1/2]")
    if d_ms <= 0 or trial_ms % d_ms:
        raise ConfigurationError("trial length must be a positive multiple of the period")
    rng = _rng(seed)
    steps = int(round(d_ms / dt_ms))
    n_periods = int(trial_ms // d_ms)
    T = steps * n_periods
    bits, cmds = store_recall_schedule(rng, n_periods, p_command)
    active = np.zeros((T, 4), dtype=bool)
    for k in range(n_periods):
        sl = slice(k * steps, (k + 1) * steps)
        active[sl, VALUE0 + bits[k]] = True
        if cmds[k] == 1:
            active[sl, STORE] = True
        elif cmds[k] == 2:
            active[sl, RECALL] = True
    p_spike = rate_hz * dt_ms / 1000.0
    spikes = rng.random((T, 4 * n_per_group)) < p_spike
    x = (spikes & np.repeat(active, n_per_group, axis=1)).astype(np.float64)

    targets = np.zeros((T, 2))
    mask = np.zeros(T)
    windows = []
    stored = None
    for k in range(n_periods):
        if cmds[k] == 1:
            stored = int(bits[k])
        elif cmds[k] == 2:
            sl = slice(k * steps, (k + 1) * steps)
            targets[sl, stored] = 1.0
            mask[sl] = 1.0
            windows.append([k * steps, (k + 1) * steps, stored])
    meta = {"bits": bits.tolist(), "commands": cmds.tolist(), "windows": windows, "period_steps": steps}
    return TaskSample("store_recall", x, targets, mask, "ce", meta)


# ---------------------------------------------------------------------------
# copy-repeat
# ---------------------------------------------------------------------------

N_BITS = 8
MAX_REPETITIONS = 9


@dataclass(frozen=True)
class CurriculumState:
    """Pattern length and repetition count; increments alternate, pattern first."""

    n_pattern: int = 1
    n_repetitions: int = 1
    next_is_pattern: bool = True
    level: int = 0

    def __post_init__(self):
        if self.n_pattern < 1 or self.n_repetitions < 1:
            raise ConfigurationError("n_pattern and n_repetitions must be at least 1")

    def advance(self) -> "CurriculumState":
        if self.next_is_pattern:
            return CurriculumState(self.n_pattern + 1, self.n_repetitions, False, self.level + 1)
        return CurriculumState(self.n_pattern, self.n_repetitions + 1, True, self.level + 1)

    @property
    def sequence_length(self) -> int:
        """Number of pattern characters the network has to produce."""
        return self.n_pattern * self.n_repetitions


def gen_copy_repeat(cur: CurriculumState, seed) -> TaskSample:
    """Copy-repeat sequence over 9 binary channels (8 bits plus stop).

    Input: ``n_pattern`` random 8-bit characters, a stop character (channel
    8), then the repetition count one-hot over the 9 channels.  Output phase:
    the pattern repeated ``n_repetitions`` times followed by a stop
    character.  Only the output phase is scored.
    """
    if cur.n_repetitions > MAX_REPETITIONS:
        raise CurriculumCeilingError(
            f"{cur.n_repetitions} repetitions cannot be encoded one-hot on {MAX_REPETITIONS} channels"
        )
    rng = _rng(seed)
    n_p, n_r = cur.n_pattern, cur.n_repetitions
    n_ch = N_BITS + 1
    pattern = rng.integers(0, 2, size=(n_p, N_BITS)).astype(np.float64)
    t_in = n_p + 2
    t_out = n_p * n_r + 1
    T = t_in + t_out
    x = np.zeros((T, n_ch))
    x[:n_p, :N_BITS] = pattern
    x[n_p, N_BITS] = 1.0
    x[n_p + 1, n_r - 1] = 1.0
    y = np.zeros((T, n_ch))
    y[t_in : t_in + n_p * n_r, :N_BITS] = np.tile(pattern, (n_r, 1))
    y[T - 1, N_BITS] = 1.0
    mask = np.zeros(T)
    mask[t_in:] = 1.0
    meta = {"n_pattern": n_p, "n_repetitions": n_r, "output_start": t_in}
    return TaskSample("copy_repeat", x, y, mask, "bce", meta)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def nmse(outputs, targets, mask=None) -> float:
    """Masked squared error normalized by the masked target variance per channel."""
    y = np.asarray(outputs, dtype=np.float64)
    ys = np.asarray(targets, dtype=np.float64)
    m = np.ones(ys.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.sum() <= 0:
        raise UndefinedMetricError("nmse needs at least one scored step")
    w = m[:, None]
    mean = (w * ys).sum(axis=0) / m.sum()
    den = float((w * (ys - mean) ** 2).sum())
    if den <= 0:
        raise UndefinedMetricError("targets are constant on the scored steps")
    return float((w * (y - ys) ** 2).sum()) / den


def recall_windows(mask, period=None):
    """Contiguous runs of positive mask as ``(start, stop)`` pairs.

    With ``period`` a run is also cut at multiples of ``period``, so that
    back-to-back RECALL periods count as separate windows.
    """
    m = np.asarray(mask) > 0
    edges = np.flatnonzero(np.diff(np.concatenate([[0], m.astype(np.int8), [0]])))
    runs = list(zip(edges[::2].tolist(), edges[1::2].tolist()))
    if not period:
        return runs
    out = []
    for a, b in runs:
        cuts = [a] + list(range((a // period + 1) * period, b, period)) + [b]
        out.extend(zip(cuts[:-1], cuts[1:]))
    return out


def misclassification(outputs, targets, mask, windows=None, period=None) -> float:
    """Fraction of recall windows where the readout with the highest mean
    activation differs from the target class (ties go to the lower index)."""
    y = np.asarray(outputs, dtype=np.float64)
    ys = np.asarray(targets, dtype=np.float64)
    wins = recall_windows(mask, period) if windows is None else [(w[0], w[1]) for w in windows]
    if not wins:
        raise UndefinedMetricError("no recall window in the mask")
    wrong = 0
    for a, b in wins:
        pred = int(np.argmax(y[a:b].mean(axis=0)))
        wrong += int(pred != int(np.argmax(ys[a:b].mean(axis=0))))
    return wrong / len(wins)


def count_errors(outputs, targets, mask, period=None):
    """``(wrong, total)`` recall windows, for pooling over a batch."""
    wins = recall_windows(mask, period)
    if not wins:
        return 0, 0
    return int(round(misclassification(outputs, targets, mask, wins) * len(wins))), len(wins)


def bits_per_sequence(outputs, targets, mask) -> float:
    """Base-2 cross-entropy of logistic outputs summed over the scored steps."""
    m = np.asarray(mask, dtype=np.float64)
    if m.sum() <= 0:
        raise UndefinedMetricError("no scored step")
    return output_error(outputs, LossSpec("bce", targets, m))[0]


def metric(kind: str, outputs, targets, mask) -> float:
    if kind == "nmse":
        return nmse(outputs, targets, mask)
    if kind == "misclassification":
        return misclassification(outputs, targets, mask)
    if kind == "bits":
        return bits_per_sequence(outputs, targets, mask)
    raise ConfigurationError(f"unknown metric {kind!r}")


TASK_GENERATORS = {
    "pattern": lambda seed, **kw: gen_pattern_task(seed, **kw),
    "store_recall": lambda seed, **kw: gen_store_recall(seed, **kw),
    "copy_repeat": lambda seed, **kw: gen_copy_repeat(
        CurriculumState(kw.pop("n_pattern", 1), kw.pop("n_repetitions", 1)), seed
    ),
}
