import hashlib
import json
import subprocess
import sys

import pytest

from conftest import FIXTURES
from deferral.cli import run
from pipeline import run_pipeline

PIPELINE_LOG = FIXTURES / "pipeline_log.jsonl"
OVERCONFIDENT_LOG = FIXTURES / "overconfident_log.jsonl"


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_validate_reports_line_number(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(
        '{"id":"a","task":"classification","logits":[1,0],"label_correct":true}\n'
        '{"id":"b","task":"generation","token_logprobs":[0.5],"label_correct":true}\n'
    )
    assert run(["validate", "--input", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "token_logprobs[0]" in err


def test_validate_clean_file(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert run(["validate", "--input", str(PIPELINE_LOG), "--output", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_records"] == 240 and rep["violations"] == []


def test_config_echoed_as_one_json_line(capsys):
    run(["validate", "--input", str(PIPELINE_LOG), "--output", "/dev/null"])
    first = capsys.readouterr().err.splitlines()[0]
    cfg = json.loads(first)["config"]
    assert cfg["command"] == "validate" and cfg["seed"] == 0


def test_full_pipeline_is_byte_identical(tmp_path):
    before = _digest(PIPELINE_LOG)
    a = run_pipeline(PIPELINE_LOG, tmp_path / "a")
    b = run_pipeline(PIPELINE_LOG, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert len(a) > 30
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    assert _digest(PIPELINE_LOG) == before


def test_seed_changes_split(tmp_path):
    for seed in (0, 1):
        assert run(["apply", "--input", str(PIPELINE_LOG), "--base", "--seed", str(seed), "--output", str(tmp_path / f"s{seed}.jsonl")]) == 0
    a = [json.loads(line)["split"] for line in (tmp_path / "s0.jsonl").read_text().splitlines()]
    b = [json.loads(line)["split"] for line in (tmp_path / "s1.jsonl").read_text().splitlines()]
    assert a != b


def test_weighted_platt_on_overconfident_fixture(tmp_path, capsys):
    out = tmp_path / "wp.json"
    argv = ["fit", "--input", str(OVERCONFIDENT_LOG), "--method", "weighted_platt", "--metric", "mean_token_logprob", "--neg-weight", "auto", "--output", str(out)]
    assert run(argv) == 0
    cal = json.loads(out.read_text())
    assert cal["kind"] == "weighted_platt" and cal["input_spec"] == "mean_token_logprob"
    assert cal["parameters"]["neg_weight"] > 1
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["converged"] is True and diag["exit_reason"] == "gradient tolerance"


def test_fit_requires_metric_for_platt(tmp_path, capsys):
    assert run(["fit", "--input", str(PIPELINE_LOG), "--method", "platt", "--output", str(tmp_path / "x.json")]) == 1
    assert "--metric is required" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_missing_input_exits_1(tmp_path, capsys):
    assert run(["score", "--input", str(tmp_path / "nope.jsonl")]) == 1
    assert "nope.jsonl" in capsys.readouterr().err


def test_corrupt_calibrator_exits_1(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text('{"kind": "platt"}')
    assert run(["apply", "--input", str(PIPELINE_LOG), "--calibrator", str(bad)]) == 1


def test_invariant_breach_exits_2(tmp_path, monkeypatch):
    import deferral.cli as cli

    def boom(args):
        raise AssertionError("broken")

    monkeypatch.setattr(cli, "cmd_validate", boom)
    assert cli.run(["validate", "--input", str(PIPELINE_LOG)]) == 2


def test_report_formats_agree(tmp_path):
    files = run_pipeline(PIPELINE_LOG, tmp_path / "p")
    by_name = {p.name: p for p in files}
    rows = json.loads(by_name["report.json"].read_text())
    csv = by_name["report.csv"].read_text().splitlines()
    assert csv[0] == "method,brier,ece,auroc,sel@0.7,sel@0.8,sel@0.9"
    assert [r["method"] for r in rows] == ["base", "temperature", "platt", "weighted_platt", "isotonic", "logit_feature", "variance_aware"]
    for line, row in zip(csv[1:], rows):
        assert float(line.split(",")[1]) == row["brier"]
    table = by_name["report.table"].read_text()
    assert table.count("*") == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "deferral.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("deferral ")


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2
