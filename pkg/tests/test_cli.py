"""Command-line behaviour of each subcommand, including exit statuses."""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from dsprover import __version__
from dsprover.cli import main

E2E = Path(__file__).parent / "fixtures" / "e2e"

SKETCH = """\
theorem t (x : ℕ) (h0 : x = 2) : x + x = 4 := by
  have h1 : x = oops := by
    prove_with[h0]
  have h2 : x + x = 4 := by
    prove_with[h0]
  exact h2
"""

EXPECTED_MASKED = """\
theorem t (x : ℕ) (h0 : x = 2) : x + x = 4 := by
  -- have h1 : x = oops := by
    -- prove_with[h0]
  have h2 : x + x = 4 := by
    prove_with[h0]
  exact h2
"""


@pytest.fixture
def sketch_file(tmp_path):
    p = tmp_path / "s.lean"
    p.write_text(SKETCH, encoding="utf-8")
    return p


def test_mask_with_diagnostic_list(sketch_file, tmp_path, capsys):
    diags = tmp_path / "d.json"
    diags.write_text(json.dumps([
        {"line": 2, "column": 17, "severity": "error", "message": "unknown identifier 'oops'"},
        {"line": 6, "column": 2, "severity": "warning", "message": "unused"},
    ]))
    assert main(["mask", str(sketch_file), "--diagnostics", str(diags)]) == 0
    out = capsys.readouterr().out
    assert out == EXPECTED_MASKED + "-- translation rate: 0.600\n"


def test_mask_with_checker_response(sketch_file, tmp_path, capsys):
    resp = tmp_path / "r.json"
    resp.write_text(json.dumps({"messages": [
        {"severity": "error", "pos": {"line": 2, "column": 17}, "endPos": None, "data": "unknown identifier 'oops'"},
    ]}))
    assert main(["mask", str(sketch_file), "--diagnostics", str(resp)]) == 0
    assert capsys.readouterr().out.startswith(EXPECTED_MASKED)


def test_mask_verify_runs_repair_loop(sketch_file, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "configs": {"c": {"sketch_model": "s"}},
        "verifier": {"kind": "mock", "fixture": {"error_rules": [{"pattern": "oops", "message": "unknown identifier"}]}},
    }))
    assert main(["mask", str(sketch_file), "--verify", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "  -- have h1 : x = oops := by\n    -- sorry\n" in out
    assert "  have h2 : x + x = 4 := by\n    sorry\n" in out


def test_mask_verify_reports_failure(tmp_path, capsys):
    p = tmp_path / "bad.lean"
    p.write_text("theorem t (x : ℕ) (h : x = oops) : x = x := by\n  rfl\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "configs": {"c": {"sketch_model": "s"}},
        "verifier": {"kind": "mock", "fixture": {"error_rules": [{"pattern": "oops", "message": "unknown"}]}},
    }))
    assert main(["mask", str(p), "--verify", "--config", str(cfg)]) == 1
    assert "repair failed" in capsys.readouterr().err


def test_prove_then_report(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["--config", str(E2E / "config.yaml"), "--benchmark", str(E2E / "benchmark.jsonl")]
    assert main(["prove", *args, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "done: 5/10 proved in this run, 15 attempts" in printed
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["mode"] == "replay" and manifest["plan"]["stages"][0]["k"] == 2

    rep = tmp_path / "rep"
    assert main(["report", "--store", str(out / "attempts.jsonl"), "--benchmark", str(E2E / "benchmark.jsonl"),
                 "--out", str(rep)]) == 0
    text = (rep / "report.txt").read_text()
    assert "dsp: 5/10 solved (50.0%) within pass@2, 15 attempts" in text
    assert capsys.readouterr().out.startswith(text)
    assert json.loads((rep / "report.json").read_text())["ensemble"]["accumulative"] == 5


def test_prove_k_override(tmp_path):
    out = tmp_path / "k1"
    assert main(["prove", "--config", str(E2E / "config.yaml"), "--benchmark", str(E2E / "benchmark.jsonl"),
                 "--out", str(out), "--k", "1"]) == 0
    assert len((out / "attempts.jsonl").read_text().splitlines()) == 10


@pytest.mark.parametrize(
    "argv, code, needle",
    [
        (["prove", "--config", "{cfg}", "--benchmark", "{tmp}/missing.jsonl", "--out", "{tmp}/o"], 2, "not found"),
        (["prove", "--config", "{tmp}/nope.yaml", "--benchmark", "{bench}", "--out", "{tmp}/o"], 1, "not found"),
        (["prove", "--config", "{cfg}", "--benchmark", "{bench}", "--out", "{tmp}/o", "--deadline-secs", "0"], 2, "> 0"),
        (["prove", "--config", "{cfg}", "--benchmark", "{bench}", "--out", "{tmp}/o",
          "--transcripts", "{tmp}/none.jsonl"], 2, "transcript store"),
        (["prove", "--config", "{cfg}", "--benchmark", "{bench}", "--out", "{tmp}/o", "--plan", "zzz"], 1, "zzz"),
        (["report", "--store", "{tmp}/none.jsonl", "--benchmark", "{bench}", "--out", "{tmp}/o"], 1, "does not exist"),
        (["mask", "{tmp}/missing.lean", "--diagnostics", "{tmp}/d.json"], 1, "missing.lean"),
    ],
)
def test_error_exit_codes(tmp_path, capsys, argv, code, needle):
    subs = {"cfg": str(E2E / "config.yaml"), "bench": str(E2E / "benchmark.jsonl"), "tmp": str(tmp_path)}
    assert main([a.format(**subs) for a in argv]) == code
    assert needle in capsys.readouterr().err


def test_usage_errors_from_argparse(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["mask", "x.lean"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out


def test_console_entry_point_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dsprover.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout
