from __future__ import annotations

import json
import subprocess
import sys

import pytest

from builders import two_domain_raw
from fedslice.cli import EXIT_CHECK, EXIT_INPUT, EXIT_OK, main
from fedslice.runner import run
from fedslice.scenario import load_bundled


@pytest.fixture
def scenario_file(tmp_path):
    def write(raw):
        f = tmp_path / "s.json"
        f.write_text(json.dumps(raw))
        return str(f)
    return write


class TestRun:
    def test_bundled_name_runs(self, capsys):
        assert main(["run", "figure2_three_domains"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "pattern figure4: ok" in out
        assert "instantiated=1" in out

    def test_trace_and_metrics_files(self, tmp_path):
        trace, metrics = tmp_path / "t.jsonl", tmp_path / "m.json"
        code = main(["run", "scenario1_scale", "--trace", str(trace), "--metrics", str(metrics)])
        assert code == EXIT_OK
        expected = run(load_bundled("scenario1_scale"))
        assert trace.read_text() == expected.trace_text
        assert json.loads(metrics.read_text()) == expected.metrics

    def test_trace_to_stdout(self, capsys):
        assert main(["run", "single_domain_degenerate", "--trace", "-"]) == EXIT_OK
        first = capsys.readouterr().out.splitlines()[0]
        assert json.loads(first)["kind"] == "SliceRequest"

    def test_seed_override_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "scenario2_remap", "--seed", "5", "--trace", str(a)])
        main(["run", "scenario2_remap", "--seed", "5", "--trace", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_check_all_green(self, capsys):
        assert main(["run", "scenario2_remap", "--check"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "check conservation: ok" in out and "FAIL" not in out

    def test_exact_embedding_flag(self, capsys):
        assert main(["run", "figure2_three_domains", "--exact-embedding", "--check"]) == EXIT_OK
        assert "check completeness: ok" in capsys.readouterr().out

    def test_failing_pattern_exits_one(self, scenario_file, capsys):
        raw = two_domain_raw(patterns=["figure5b"])  # no modification, so no anchor
        assert main(["run", scenario_file(raw)]) == EXIT_CHECK
        assert "pattern figure5b: FAIL" in capsys.readouterr().out

    def test_tick_budget_exits_one(self, scenario_file, capsys):
        assert main(["run", scenario_file(two_domain_raw(max_ticks=10))]) == EXIT_CHECK
        assert "tick" in capsys.readouterr().err


class TestValidate:
    def test_valid(self, scenario_file, capsys):
        assert main(["validate", scenario_file(two_domain_raw())]) == EXIT_OK
        assert "ok (2 domains, 2 timeline entries)" in capsys.readouterr().out

    def test_schema_violation_lists_path(self, scenario_file, capsys):
        raw = two_domain_raw()
        raw["domains"][0]["slates"][0]["node"] = "A.ghost"
        assert main(["validate", scenario_file(raw)]) == EXIT_INPUT
        assert "schema-violation /domains/0/slates/0/node" in capsys.readouterr().err

    def test_empty_file(self, tmp_path, capsys):
        f = tmp_path / "empty.json"
        f.write_text("")
        assert main(["validate", str(f)]) == EXIT_INPUT
        assert capsys.readouterr().err.startswith("parse-error")

    def test_missing_file(self, capsys):
        assert main(["validate", "/nonexistent/s.json"]) == EXIT_INPUT


class TestOracle:
    def test_modify_event(self, capsys):
        assert main(["oracle", "scenario1_scale", "--event", "1"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["minimal_level"] == 0

    def test_not_a_question(self, capsys):
        assert main(["oracle", "figure2_three_domains", "--event", "1"]) == EXIT_INPUT
        assert "no-oracle-question" in capsys.readouterr().err

    def test_event_required(self, capsys):
        assert main(["oracle", "figure2_three_domains"]) == EXIT_INPUT


def test_usage_error_exits_two(capsys):
    assert main(["frobnicate"]) == EXIT_INPUT


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedslice.cli", "validate", "figure2_three_domains"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "3 domains" in proc.stdout
