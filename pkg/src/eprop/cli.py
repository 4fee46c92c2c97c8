"""Command line entry point: ``eprop run | verify | gen-task``.

Exit codes: 0 success, 1 configuration error, 2 verification failure,
3 numeric error.  ``EPROP_THREADS`` caps the threads of the linear-algebra
backend; it has to be set before numpy is imported, which is why it is
handled at the top of this module.
"""

import os

_threads = os.environ.get("EPROP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__, kernels, tasks  # noqa: E402
from .config import build_experiment, load_config  # noqa: E402
from .errors import ConfigurationError, EpropError, NumericError  # noqa: E402
from .oracle import MODEL_KINDS, verify_factorization  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
CSV_HEADER = ["iteration", "wall_ms", "loss", "metric", "lr", "firing_rate_hz"]


class MetricsWriter:
    """Append-only CSV writer; every row is flushed so a crash leaves a parseable prefix."""

    def __init__(self, path, wall_clock=False):
        self.path = Path(path)
        self.wall_clock = wall_clock
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(CSV_HEADER)
        self._fh.flush()

    def write(self, iteration, wall_ms, loss, metric, lr, rate):
        wall = repr(float(wall_ms)) if self.wall_clock else "0"
        self._csv.writerow([iteration, wall, repr(float(loss)), repr(float(metric)), repr(float(lr)), repr(float(rate))])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def run_experiment(cfg, out_dir=None) -> dict:
    """Run a parsed config; writes metrics.csv, summary.json and weights.npz."""
    from .eprop3 import train_copy_repeat
    from .train import train_spiking

    exp = build_experiment(cfg)
    out = Path(out_dir or exp.output_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv", exp.wall_clock)
    try:
        if exp.task == "copy_repeat":
            res = train_copy_repeat(
                exp.setup, on_row=lambda r: writer.write(r.iteration, r.wall_ms, r.loss, r.metric, r.lr, float("nan"))
            )
            weights = res.weights.blocks()
            if res.sg is not None:
                weights.update({f"sg_{k}": v for k, v in res.sg.params().items()})
        else:
            res = train_spiking(
                exp.setup,
                on_row=lambda r: writer.write(r.iteration, r.wall_ms, r.loss, r.metric, r.lr, r.firing_rate_hz),
            )
            weights = res.weights.blocks()
    finally:
        writer.close()
    summary = dict(res.summary)
    summary["version"] = __version__
    if not exp.wall_clock:
        summary.pop("wall_s", None)
    summary["backend"] = kernels.BACKEND
    if exp.verify:
        report = verify_factorization(MODEL_KINDS, n_instances=50, seed=summary.get("seed", 0))
        (out / "verify.json").write_text(report.to_json() + "\n", encoding="utf-8")
        summary["verify_passed"] = report.passed
    if exp.save_weights:
        np.savez(out / "weights.npz", **weights)
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    summary = run_experiment(cfg, args.out)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def _cmd_verify(args) -> int:
    report = verify_factorization(
        args.models, n_instances=args.instances, seed=args.seed, truncate=args.truncate, tolerance=args.tolerance
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report.passed else EXIT_VERIFY


def _cmd_gen_task(args) -> int:
    if args.task == "copy_repeat":
        sample = tasks.gen_copy_repeat(tasks.CurriculumState(args.n_pattern, args.n_repetitions), args.seed)
    elif args.task == "store_recall":
        sample = tasks.gen_store_recall(args.seed)
    elif args.task == "pattern":
        sample = tasks.gen_pattern_task(args.seed)
    else:
        raise ConfigurationError(f"unknown task {args.task!r}", field="task")
    text = sample.to_tsv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eprop", description="e-prop training engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train according to a config file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", help="check the factorization identity against BPTT")
    v.add_argument("--models", nargs="+", default=list(MODEL_KINDS), choices=MODEL_KINDS)
    v.add_argument("--instances", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-10)
    v.add_argument("--truncate", action="store_true", help="use truncated traces (must be reported as a violation)")
    v.add_argument("--out")
    v.set_defaults(func=_cmd_verify)

    g = sub.add_parser("gen-task", help="write one task sample as TSV")
    g.add_argument("task", choices=["pattern", "store_recall", "copy_repeat"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--n-pattern", type=int, default=1)
    g.add_argument("--n-repetitions", type=int, default=1)
    g.set_defaults(func=_cmd_gen_task)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, EpropError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
