import json
import subprocess
import sys

import pytest

from conftest import FIXTURES, StubTransport, rule_oracle
from ebike_agents.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, fit_models, main, simulate_records
from ebike_agents.ingest import read_structured, write_structured
from ebike_agents.llm_gateway import HttpResponse
from ebike_agents.rules import load_rules


def run(*argv, transport=None):
    return main([str(a) for a in argv], transport=transport)


def test_extract_rules(tmp_path, narratives_csv, capsys):
    assert run("extract", "--input", narratives_csv, "--out", tmp_path) == EXIT_OK
    records = read_structured(tmp_path / "structured.jsonl")
    assert len(records) == 40
    summary = json.loads((tmp_path / "run_summary.json").read_text())
    assert summary["run"]["ebike_yes"] == 32 and summary["run"]["extraction_errors"] == 0
    assert "total=40" in capsys.readouterr().out


def test_extract_needs_input(tmp_path):
    assert run("extract", "--out", tmp_path) == EXIT_CONFIG


def test_bad_flags(tmp_path, narratives_csv):
    assert run("extract", "--input", narratives_csv, "--out", tmp_path, "--jobs", "0") == EXIT_CONFIG


def test_missing_input_file(tmp_path):
    assert run("extract", "--input", tmp_path / "nope.csv", "--out", tmp_path) == EXIT_DATA


def test_llm_without_key(tmp_path, narratives_csv, monkeypatch):
    monkeypatch.delenv("EBIKE_LLM_API_KEY", raising=False)
    assert run("extract", "--backend", "llm", "--input", narratives_csv, "--out", tmp_path) == EXIT_CONFIG


def test_llm_warm_cache_identical(tmp_path, narratives_csv, monkeypatch, capsys):
    monkeypatch.setenv("EBIKE_LLM_API_KEY", "test")
    cache = tmp_path / "cache.jsonl"
    a, b = tmp_path / "a", tmp_path / "b"
    live = StubTransport(rule_oracle)
    assert run("extract", "--backend", "llm", "--input", narratives_csv, "--out", a,
               "--cache", cache, "--rpm", "1e9", transport=live) == EXIT_OK
    assert live.calls
    offline = StubTransport(lambda body: HttpResponse(503, "offline"))
    assert run("extract", "--backend", "llm", "--input", narratives_csv, "--out", b,
               "--cache", cache, "--jobs", "2", transport=offline) == EXIT_OK
    assert offline.calls == []
    assert (a / "structured.jsonl").read_bytes() == (b / "structured.jsonl").read_bytes()
    assert "misses=0" in capsys.readouterr().out


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--out", out, "--n", "1500", "--seed", "3") == EXIT_OK
    return out


def test_fit_on_simulation(simulated, tmp_path, capsys):
    assert run("fit", "--input", simulated / "structured.jsonl", "--out", tmp_path) == EXIT_OK
    text = capsys.readouterr().out
    assert "LR chi2(3) = " in text and "Pseudo R2" in text
    payload = json.loads((tmp_path / "fit_report.json").read_text())
    assert payload["models"]["full"]["n"] == 1500
    truth = json.loads((simulated / "simulation.json").read_text())
    for row in payload["models"]["full"]["coefficients"]:
        if row["kind"] == "coefficient":
            assert abs(row["estimate"] - truth["beta"][row["name"]]) < 4 * row["se"], row


def test_fit_dummy_coding_note(simulated, tmp_path, capsys):
    assert run("fit", "--input", simulated / "structured.jsonl", "--out", tmp_path, "--dummy-coding") == EXIT_OK
    assert "dummy coded" in capsys.readouterr().out


def test_single_severity_level(tmp_path):
    records = simulate_records(50, 0)
    for r in records:
        r.severity_code = 2
    write_structured(records, tmp_path / "s.jsonl")
    assert run("fit", "--input", tmp_path / "s.jsonl", "--out", tmp_path) == EXIT_DATA


def test_severity_levels_renumbered():
    records = simulate_records(400, 1)
    for r in records:
        r.severity_code = {1: 1, 2: 3, 3: 3, 4: 4}[r.severity_code]
    fits, lr, notes = fit_models(records, load_rules())
    assert fits["full"].K == 3
    assert any("renumbered" in n for n in notes)


def test_evaluate_fixture(tmp_path, capsys):
    code = run("evaluate", "--input", FIXTURES / "evaluation_structured.jsonl",
               "--truth", FIXTURES / "evaluation_truth.csv", "--out", tmp_path)
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "Weighted F1 Score: 0.87" in out
    payload = json.loads((tmp_path / "evaluation.json").read_text())
    assert payload["weighted_f1"] == pytest.approx(0.8682, abs=1e-4)


def truth_from(records, path):
    lines = ["record_id,component"]
    for r in records:
        lines += [f"{r.record_id},{c}" for c in r.components_caused] or [f"{r.record_id},"]
    path.write_text("\n".join(lines) + "\n")


def test_evaluate_perfect(tmp_path, capsys):
    records = [r for r in read_structured(FIXTURES / "evaluation_structured.jsonl")]
    truth_from(records, tmp_path / "t.csv")
    assert run("evaluate", "--input", FIXTURES / "evaluation_structured.jsonl",
               "--truth", tmp_path / "t.csv", "--out", tmp_path) == EXIT_OK
    assert "Weighted F1 Score: 1.00" in capsys.readouterr().out


def test_evaluate_empty_truth(tmp_path):
    (tmp_path / "t.csv").write_text("record_id,component\n")
    assert run("evaluate", "--input", FIXTURES / "evaluation_structured.jsonl",
               "--truth", tmp_path / "t.csv", "--out", tmp_path) == EXIT_DATA


def test_evaluate_id_mismatch(tmp_path):
    (tmp_path / "t.csv").write_text("record_id,component\nZZZ,Frame\n")
    assert run("evaluate", "--input", FIXTURES / "evaluation_structured.jsonl",
               "--truth", tmp_path / "t.csv", "--out", tmp_path) == EXIT_DATA


def test_evaluate_bad_truth_schema(tmp_path):
    (tmp_path / "t.csv").write_text("id,part\nE001,Frame\n")
    assert run("evaluate", "--input", FIXTURES / "evaluation_structured.jsonl",
               "--truth", tmp_path / "t.csv", "--out", tmp_path) == EXIT_DATA


def test_report_and_all(tmp_path, narratives_csv, capsys):
    out = tmp_path / "all"
    assert run("all", "--input", narratives_csv, "--out", out) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    names = {e["path"] for e in manifest["files"]}
    assert {"causes_by_age_gender.csv", "component_links.svg"} <= names
    again = tmp_path / "again"
    assert run("report", "--input", out / "structured.jsonl", "--out", again) == EXIT_OK
    assert (again / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_report_without_model(tmp_path, capsys):
    records = simulate_records(20, 0)
    for r in records:
        r.severity_code = 1
    write_structured(records, tmp_path / "s.jsonl")
    assert run("report", "--input", tmp_path / "s.jsonl", "--out", tmp_path) == EXIT_OK
    assert "model not fitted" in capsys.readouterr().err
    assert not (tmp_path / "fit_report.json").exists()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "ebike_agents.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("extract", "fit", "evaluate", "report", "all", "simulate"):
        assert cmd in proc.stdout
