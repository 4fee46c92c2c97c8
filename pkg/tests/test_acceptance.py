"""Acceptance criteria of the training engine.

Every criterion prints a single ``PASS`` or ``FAIL`` line; the lines are
collected and repeated in the pytest terminal summary.  Running this file
directly (``python tests/test_acceptance.py``) evaluates all criteria
without pytest.

The training criteria (4 to 8) run full desk-scale experiments and take
a long time on one core.
"""

import functools
import statistics
import time

import numpy as np
import pytest

from eprop import cli
from eprop.dynamics import simulate_trial
from eprop.eprop3 import TruncationConfig, copy_repeat_setup, interval_gradient_sum, oracle_boundaries, train_copy_repeat
from eprop.oracle import (
    MODEL_KINDS,
    bptt_gradients,
    finite_difference_gradient,
    max_relative_error,
    random_instance,
    verify_factorization,
)
from eprop.signals import LossSpec
from eprop.train import pattern_setup, store_recall_setup, train_spiking

SEEDS = (0, 1, 2)
RESULTS = []

pytestmark = pytest.mark.acceptance


def report(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return passed


def fd_relative_error(fd, ref, floor=1e-5):
    scale = max(float(np.abs(r).max()) for r in ref.values())
    worst = 0.0
    for k, r in ref.items():
        keep = ~np.isnan(fd[k])
        denom = np.maximum(np.abs(r[keep]), floor * scale + 1e-30)
        worst = max(worst, float(np.max(np.abs(fd[k][keep] - r[keep]) / denom)))
    return worst


# ---------------------------------------------------------------- runs
# Training runs are shared between criteria, so each one is computed once.


@functools.lru_cache(maxsize=None)
def pattern_run(seed, variant):
    mode = {"eprop1": "eprop1", "global": "eprop1-global", "clopath": "eprop1-clopath", "feedforward": "eprop1"}[variant]
    setup = pattern_setup(seed, mode, recurrent=variant != "feedforward")
    return train_spiking(setup)


@functools.lru_cache(maxsize=None)
def store_recall_run(seed, mode):
    return train_spiking(store_recall_setup(seed, mode))


@functools.lru_cache(maxsize=None)
def copy_repeat_run(seed, mode):
    return train_copy_repeat(copy_repeat_setup(seed, mode))


def final_nmse(res):
    return res.summary["final_metric"]


# ---------------------------------------------------------------- criteria


def criterion_1():
    t0 = time.perf_counter()
    rep = verify_factorization(MODEL_KINDS, n_instances=200, seed=0, tolerance=1e-10)
    dt = time.perf_counter() - t0
    worst = max(r["max_rel_error"] for r in rep.results.values())
    ok = rep.passed and dt < 60.0
    return report(1, "factorization identity", ok, f"200 instances x {len(MODEL_KINDS)} models, max rel err {worst:.2e} < 1e-10, {dt:.1f} s < 60 s")


def criterion_2():
    worst = {}
    for kind in ("sigmoid", "lstm"):
        rng = np.random.default_rng([2, len(kind)])
        w = 0.0
        for _ in range(50):
            inst = random_instance(kind, rng, n=int(rng.integers(2, 6)), T=int(rng.integers(5, 26)))
            ref = bptt_gradients(inst.simulate(), inst.loss, inst.model, inst.w).grads
            fd = finite_difference_gradient(inst.model, inst.w, inst.inputs, inst.loss, 1e-5, kappa=inst.kappa)
            w = max(w, fd_relative_error(fd, ref))
        worst[kind] = w
    ok = all(v < 1e-5 for v in worst.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    return report(2, "finite differences", ok, f"50 instances each, max rel err {detail} < 1e-5")


def criterion_3():
    worst = 0.0
    count = 0
    for k, kind in enumerate(MODEL_KINDS):
        rng = np.random.default_rng([3, k])
        for delta_t in (2, 3, 5):
            for _ in range(10):
                inst = random_instance(kind, rng, n=int(rng.integers(2, 7)), T=3 * delta_t)
                loss = LossSpec(inst.loss.kind, inst.loss.target, inst.loss.mask)
                traj = simulate_trial(inst.model, inst.w, inst.inputs, kappa=0.0)
                ref = bptt_gradients(traj, loss, inst.model, inst.w).grads
                for mode in ("bptt+sg", "eprop3"):
                    cfg = TruncationConfig(delta_t, 1.0, mode)
                    bnd = oracle_boundaries(inst.model, inst.w, inst.inputs, loss, cfg)
                    got = interval_gradient_sum(inst.model, inst.w, inst.inputs, loss, cfg, bnd)
                    worst = max(worst, max_relative_error(got, ref))
                    count += 1
    return report(3, "e-prop 3 with oracle boundaries", worst < 1e-9, f"{count} estimates, max rel err {worst:.2e} < 1e-9")


def criterion_4():
    parts, ok = [], True
    for s in SEEDS:
        e1 = final_nmse(pattern_run(s, "eprop1"))
        gl = final_nmse(pattern_run(s, "global"))
        ff = final_nmse(pattern_run(s, "feedforward"))
        ok &= e1 <= 0.05 and e1 < gl and e1 < ff
        parts.append(f"seed {s}: e-prop1 {e1:.3f}, global {gl:.3f}, no-rec {ff:.3f}")
    return report(4, "pattern generation", ok, "; ".join(parts) + " (need e-prop1 <= 0.05 and lowest)")


def criterion_5():
    ratios = []
    for s in SEEDS:
        ratios.append(final_nmse(pattern_run(s, "clopath")) / final_nmse(pattern_run(s, "eprop1")))
    ok = all(r <= 3.0 for r in ratios)
    txt = ", ".join(f"{r:.2f}" for r in ratios)
    return report(5, "Clopath variant", ok, f"nmse ratio per seed {txt} (mean {statistics.mean(ratios):.2f}), need <= 3")


def criterion_6():
    def first(res):
        return res.summary["first_below_threshold"]

    solved = [first(store_recall_run(s, "eprop1")) for s in SEEDS]
    control = [first(store_recall_run(s, "eprop1-truncated-elig")) for s in SEEDS]
    n_ok = sum(f is not None for f in solved)
    ok = n_ok >= 2 and all(f is None for f in control)
    fmt = lambda v: ", ".join("-" if f is None else str(f) for f in v)
    best = ", ".join(f"{store_recall_run(s, 'eprop1').summary['best_metric']:.3f}" for s in SEEDS)
    return report(
        6,
        "store-recall",
        ok,
        f"e-prop1 first iteration below 5%: [{fmt(solved)}] (best {best}), need >= 2 of 3; truncated control: [{fmt(control)}], need none",
    )


COPY_MODES = ("eprop3", "truncated+elig", "bptt+sg", "truncated-bptt")


def criterion_7():
    levels = {m: [copy_repeat_run(s, m).summary["final_level"] for s in SEEDS] for m in COPY_MODES}
    med = [statistics.median(levels[m]) for m in COPY_MODES]
    ordered = all(med[i] >= med[i + 1] for i in range(len(med) - 1))
    ties = sum(med[i] == med[i + 1] for i in range(len(med) - 1))
    ok = ordered and ties <= 1
    detail = ", ".join(f"{m} {statistics.median(levels[m]):g} {levels[m]}" for m in COPY_MODES)
    return report(7, "copy-repeat ordering", ok, f"median final level: {detail}; ordered={ordered}, ties {ties} (at most 1)")


def criterion_8():
    rates = [pattern_run(s, "eprop1").rows[-1].firing_rate_hz for s in SEEDS]
    ok = all(abs(r - 10.0) <= 5.0 for r in rates)
    return report(8, "firing-rate regularization", ok, "final rate per seed " + ", ".join(f"{r:.1f} Hz" for r in rates) + ", need 10 +- 5 Hz")


def criterion_9(tmp_dir):
    cfg = tmp_dir / "repro.cfg"
    cfg.write_text("experiment.task = store_recall\nexperiment.seed = 4\nexperiment.iterations = 5\nexperiment.batch = 8\n")
    outs = []
    for name in ("first", "second"):
        assert cli.main(["run", str(cfg), "--out", str(tmp_dir / name)]) == 0
        outs.append((tmp_dir / name / "metrics.csv").read_bytes())
    same = outs[0] == outs[1]
    return report(9, "reproducibility", same, f"two runs of the same config, metrics.csv {'byte-identical' if same else 'differs'} ({len(outs[0])} bytes)")


# ---------------------------------------------------------------- pytest


def test_criterion_1_factorization():
    assert criterion_1()


def test_criterion_2_finite_differences():
    assert criterion_2()


def test_criterion_3_eprop3_oracle_boundaries():
    assert criterion_3()


def test_criterion_4_pattern_generation():
    assert criterion_4()


def test_criterion_5_clopath_variant():
    assert criterion_5()


def test_criterion_6_store_recall():
    assert criterion_6()


def test_criterion_7_copy_repeat_ordering():
    assert criterion_7()


def test_criterion_8_firing_rate():
    assert criterion_8()


def test_criterion_9_reproducibility(tmp_path):
    assert criterion_9(tmp_path)


if __name__ == "__main__":
    import pathlib
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        for fn in (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8):
            fn()
        criterion_9(pathlib.Path(d))
