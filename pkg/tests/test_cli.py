import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from residual_lens.cli import SCHEMA_PATH, derive_seeds, main

GEN = ["synth", "gen", "--seed", "7", "--plant", "L1.head2:0:1", "--train", "96", "--val", "48", "--test", "48"]
FAST = ["--max-epochs", "3", "--lr", "0.05"]

COMMANDS = [
    ("profile", "id"),
    ("pursuit", "run"),
    ("similarity", "grid"),
    ("select", "coarse", *FAST),
    ("residual", "fit", *FAST),
    ("residual", "eval"),
    ("report", "base"),
]


def _read(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(Path(path).rglob("*"))
            if p.is_file() and p.name != "timing.json"}


@pytest.fixture(scope="module")
def trace_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "trace"
    assert main([*GEN, "--out", str(out)]) == 0
    return out


def _schema():
    return json.loads(SCHEMA_PATH.read_text())


def test_synth_gen_is_byte_identical(tmp_path, trace_dir):
    assert main([*GEN, "--out", str(tmp_path / "again")]) == 0
    assert _read(trace_dir) == _read(tmp_path / "again")


@pytest.mark.parametrize("command", COMMANDS, ids=lambda c: " ".join(c[:2]))
def test_command_deterministic_and_schema_valid(tmp_path, trace_dir, command):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main([*command, "--trace", str(trace_dir), "--out", str(out), "--seed", "3"]) == 0
        outs.append(_read(out))
    assert outs[0] == outs[1]
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    jsonschema.validate(report, _schema())
    assert report["command"] == " ".join(command[:2])
    assert (tmp_path / "a" / "metrics.csv").exists()
    assert "wall_time_s" in json.loads((tmp_path / "a" / "timing.json").read_text())


def test_report_summary(tmp_path, trace_dir):
    assert main(["report", "base", "--trace", str(trace_dir), "--out", str(tmp_path / "b")]) == 0
    assert main(["report", "summary", "--inputs", str(tmp_path / "b"), "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "metrics.csv")))
    assert {r["metric"] for r in rows} >= {"splits.test.B", "splits.train.H"}


def test_eval_ones_equals_base(tmp_path, trace_dir):
    assert main(["residual", "eval", "--trace", str(trace_dir), "--lambda", "ones", "--split", "test",
                 "--out", str(tmp_path / "e")]) == 0
    assert main(["report", "base", "--trace", str(trace_dir), "--split", "test", "--out", str(tmp_path / "b")]) == 0
    ev = json.loads((tmp_path / "e" / "report.json").read_text())["metrics"]
    base = json.loads((tmp_path / "b" / "report.json").read_text())["metrics"]
    assert ev["accuracy"] == base["accuracy"]


def test_eval_with_fitted_lambdas(tmp_path, trace_dir):
    assert main(["residual", "fit", "--trace", str(trace_dir), "--variant", "RD", *FAST,
                 "--out", str(tmp_path / "f")]) == 0
    assert main(["residual", "eval", "--trace", str(trace_dir), "--lambda", str(tmp_path / "f" / "lambdas_RD"),
                 "--out", str(tmp_path / "e")]) == 0
    fit = json.loads((tmp_path / "f" / "report.json").read_text())["metrics"]["RD"]
    ev = json.loads((tmp_path / "e" / "report.json").read_text())["metrics"]
    assert ev["accuracy"] == pytest.approx(fit["test"], abs=1e-6)


def test_topk_on_384_heads(tmp_path):
    trace = tmp_path / "big"
    assert main(["synth", "gen", "--n-layers", "24", "--heads", "16", "--d-model", "64", "--d-out", "16",
                 "--train", "24", "--val", "12", "--test", "12", "--out", str(trace)]) == 0
    assert main(["select", "coarse", "--trace", str(trace), "--fraction", "0.05", "--skip-optimized",
                 "--random-draws", "2", "--out", str(tmp_path / "sel")]) == 0
    report = json.loads((tmp_path / "sel" / "report.json").read_text())
    assert report["metrics"]["n_heads"] == 384
    assert report["metrics"]["k"] == 20


def test_config_file_and_flag_precedence(tmp_path, trace_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"threshold": 0.5, "discard": 0.2, "trace": str(trace_dir)}))
    assert main(["profile", "id", "--config", str(cfg), "--threshold", "0.9", "--out", str(tmp_path / "p")]) == 1
    assert main(["profile", "id", "--config", str(cfg), "--trace", str(trace_dir), "--threshold", "0.9",
                 "--out", str(tmp_path / "p")]) == 0
    echoed = json.loads((tmp_path / "p" / "report.json").read_text())["config"]
    assert echoed["threshold"] == 0.9 and echoed["discard"] == 0.2


def test_unknown_config_key(tmp_path, trace_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"treshold": 0.5}))
    assert main(["profile", "id", "--trace", str(trace_dir), "--config", str(cfg), "--out", str(tmp_path / "p")]) == 1


@pytest.mark.parametrize("argv", [
    ["profile", "id", "--out", "x", "--trace", "t", "--bogus"],
    ["nothing"],
    ["profile", "id", "--out", "x"],
    ["residual", "fit", "--out", "x", "--trace", "t", "--lr", "fast"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_validation_errors_exit_1(tmp_path, trace_dir):
    assert main(["profile", "id", "--trace", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "gen", "--plant", "L0.mlp", "--out", str(tmp_path / "o")]) == 1
    assert main(["profile", "id", "--trace", str(trace_dir), "--threads", "0", "--out", str(tmp_path / "o")]) == 1


def test_runtime_error_exit_2(tmp_path, trace_dir):
    broken = tmp_path / "broken"
    broken.mkdir()
    for f in trace_dir.iterdir():
        if f.is_file():
            (broken / f.name).write_bytes(f.read_bytes())
    (broken / "train").mkdir()
    assert main(["report", "base", "--trace", str(broken), "--out", str(tmp_path / "o")]) == 2


def test_threads_do_not_change_results(tmp_path, trace_dir):
    for threads in ("1", "4"):
        assert main(["similarity", "grid", "--trace", str(trace_dir), "--threads", threads,
                     "--out", str(tmp_path / threads)]) == 0
    assert (tmp_path / "1" / "grid.csv").read_bytes() == (tmp_path / "4" / "grid.csv").read_bytes()


def test_derived_seeds_are_fixed():
    assert derive_seeds(0, 3) == derive_seeds(0, 3)
    assert len(set(derive_seeds(0, 10))) == 10
    assert derive_seeds(0, 2) != derive_seeds(1, 2)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "residual_lens.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
