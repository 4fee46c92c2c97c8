import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from eprop import cli, tasks
from eprop.config import build_experiment, load_config, parse_config_text
from eprop.errors import ConfigurationError

SMALL = """\
# tiny pattern run
experiment.task = pattern
experiment.mode = eprop1
experiment.seed = 2
experiment.iterations = 2
model.n_rec = 12
"""


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parser_skips_comments_and_types_values():
    cfg = parse_config_text("# c\n\nexperiment.seed = 4\nmodel.recurrent = off\noptimizer.max_decays = none\n")
    assert cfg == {"experiment.seed": 4, "model.recurrent": False, "optimizer.max_decays": None}


def test_unknown_key_is_rejected_with_field_path():
    with pytest.raises(ConfigurationError) as info:
        parse_config_text("optimizer.learning_rate = 0.1\n")
    assert "optimizer.learning_rate" in str(info.value)


def test_key_for_another_task_is_rejected(tmp_path):
    cfg = load_config(_write(tmp_path, SMALL), ["task.threshold_bits=0.2"])
    with pytest.raises(ConfigurationError):
        build_experiment(cfg)


def test_overrides_take_precedence(tmp_path):
    cfg = load_config(_write(tmp_path, SMALL), ["experiment.seed=9"])
    assert cfg["experiment.seed"] == 9
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, SMALL), ["experiment.seed"])


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(_write(tmp_path, SMALL + "bogus.key = 1\n")), "--out", str(tmp_path / "a")]) == 1
    assert cli.main(["run", str(_write(tmp_path, SMALL.replace("eprop1", "eprop7"))), "--out", str(tmp_path / "b")]) == 1
    assert cli.main(["verify", "--models", "sigmoid", "--instances", "5"]) == 0
    capsys.readouterr()
    assert cli.main(["verify", "--models", "lif", "--instances", "5", "--truncate"]) == 2
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is False


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_dynamics_gives_numeric_exit(tmp_path):
    path = _write(tmp_path, SMALL + "model.input_scale = 1e308\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "n")]) == 3


def test_run_writes_metrics_summary_and_weights(tmp_path, capsys):
    out = tmp_path / "r"
    assert cli.main(["run", str(_write(tmp_path, SMALL)), "--out", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "wall_ms", "loss", "metric", "lr", "firing_rate_hz"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations_run"] == 2
    w = np.load(out / "weights.npz")
    assert w["rec"].shape == (12, 12)


def test_metrics_file_is_byte_identical_across_runs(tmp_path):
    path = _write(tmp_path, SMALL)
    for d in ("x", "y"):
        assert cli.main(["run", str(path), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "metrics.csv").read_bytes() == (tmp_path / "y" / "metrics.csv").read_bytes()
    assert (tmp_path / "x" / "summary.json").read_bytes() == (tmp_path / "y" / "summary.json").read_bytes()


def test_metrics_rows_are_flushed_as_written(tmp_path):
    writer = cli.MetricsWriter(tmp_path / "m.csv")
    writer.write(0, 1.5, 2.0, 0.5, 0.01, 12.0)
    # readable before close, which is what a crash would leave behind
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,0,2.0,0.5")
    writer.close()


def test_copy_repeat_run(tmp_path):
    text = "experiment.task = copy_repeat\nexperiment.mode = eprop3\nexperiment.iterations = 2\nmodel.n_rec = 4\n"
    out = tmp_path / "c"
    assert cli.main(["run", str(_write(tmp_path, text)), "--out", str(out)]) == 0
    assert len((out / "metrics.csv").read_text().splitlines()) >= 2


def test_gen_task_writes_parseable_tsv(tmp_path):
    out = tmp_path / "s.tsv"
    assert cli.main(["gen-task", "copy_repeat", "--seed", "3", "--n-pattern", "2", "--n-repetitions", "3", "--out", str(out)]) == 0
    back = tasks.TaskSample.from_tsv(out.read_text())
    ref = tasks.gen_copy_repeat(tasks.CurriculumState(2, 3), 3)
    np.testing.assert_array_equal(back.inputs, ref.inputs)


def test_thread_override_reaches_blas_environment(tmp_path):
    code = "import os, eprop.cli; print(os.environ['OPENBLAS_NUM_THREADS'])"
    env = {"EPROP_THREADS": "1", "PATH": "/usr/bin:/bin"}
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert res.stdout.strip() == "1"


def test_shipped_configs_are_valid():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))
    assert len(paths) == 3
    assert {build_experiment(load_config(p)).task for p in paths} == {"pattern", "store_recall", "copy_repeat"}
