import importlib.util
import json
import logging
from pathlib import Path

import numpy as np
import pytest
import yaml

from implicit_herd.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from implicit_herd.trace import read_trace


@pytest.fixture
def write_config(tmp_path):
    """Factory writing a pinned single-evader document, with section overrides, to disk."""

    def write(name: str = "scenario.yaml", **sections) -> str:
        doc = {
            "simulation": {"name": "pinned", "horizon": 0.2},
            "evaders": [{"position": [0.0, 0.0], "params": {"theta": 1.0}}],
            "herders": [[-2.0, 0.0], [2.0, 0.0]],
            "output": {"dir": str(tmp_path / "out")},
        }
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key] = {**doc[key], **value}
            else:
                doc[key] = value
        path = tmp_path / name
        path.write_text(yaml.safe_dump(doc))
        return str(path)

    return write


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_INVALID
    assert "usage" in capsys.readouterr().out


def test_validate_gains_accepts_defaults(write_config, capsys):
    assert main(["validate-gains", write_config()]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Gain validation for pinned" in out
    assert "NOT negative definite" not in out.split("K_bar")[0]


def test_run_writes_trace_and_metrics(write_config, tmp_path, capsys):
    assert main(["run", write_config()]) == EXIT_OK
    trace = read_trace(tmp_path / "out" / "trace.csv")
    assert len(trace) == 20
    for row in trace.data:
        np.testing.assert_array_equal(row[2:10], trace.data[0][2:10])
    summary = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert summary["name"] == "pinned"
    assert summary["failure"] is None
    assert "steady_state_error" in capsys.readouterr().out


def test_config_flag_matches_positional(write_config, tmp_path):
    assert main(["run", "--config", write_config(), "--out-dir", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "trace.csv").exists()


def test_missing_config_is_invalid(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.yaml")]) == EXIT_INVALID
    assert "Error:" in capsys.readouterr().err


def test_invalid_document_is_invalid(write_config):
    assert main(["run", write_config(gains={"k_f": -1.0})]) == EXIT_INVALID


def test_guard_violation_is_a_run_failure(write_config, capsys):
    path = write_config(herders=[[-5e-4, 0.0]])
    assert main(["run", path]) == EXIT_FAILED
    assert "guard" in capsys.readouterr().err


def test_compare_trace_with_itself(write_config, tmp_path, capsys):
    main(["run", write_config()])
    trace = str(tmp_path / "out" / "trace.csv")
    plots = tmp_path / "plots"
    assert main(["compare", trace, trace, "--after", "0.1", "--plot-dir", str(plots)]) == EXIT_OK
    assert "max evader gap: 0 m" in capsys.readouterr().out
    assert (plots / "input-diff.csv").exists()


def test_plotdata_theta_needs_adaptive_trace(write_config, tmp_path):
    main(["run", write_config()])
    trace = str(tmp_path / "out" / "trace.csv")
    args = ["plotdata", trace, "--kind", "theta", "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_INVALID


def test_plotdata_error_curves(write_config, tmp_path, capsys):
    main(["run", write_config()])
    trace = str(tmp_path / "out" / "trace.csv")
    assert main(["plotdata", trace, "--kind", "error-curves", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("error-curves.csv")


def test_replay_reproduces_estimator_output(write_config, tmp_path, capsys):
    path = write_config(simulation={"horizon": 0.3}, estimator={"kind": "dkf"})
    assert main(["run", path]) == EXIT_OK
    trace = str(tmp_path / "out" / "trace.csv")
    assert (tmp_path / "out" / "packets.csv").exists()
    assert main(["replay-estimator", trace, "--config", path]) == EXIT_OK
    assert "estimator output matches" in capsys.readouterr().out


def test_replay_rejects_another_scenario(write_config, tmp_path):
    path = write_config(simulation={"horizon": 0.3}, estimator={"kind": "dkf"})
    assert main(["run", path, "--seed", "1"]) == EXIT_OK
    trace = str(tmp_path / "out" / "trace.csv")
    assert main(["replay-estimator", trace, "--config", path]) == EXIT_INVALID


def test_logging_is_configured_once_by_the_cli(monkeypatch, capsys):
    root = logging.getLogger()
    monkeypatch.setattr(root, "handlers", [])
    spec = importlib.util.spec_from_file_location("entry", Path(__file__).parent.parent / "main.py")
    entry = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(entry)
    assert root.handlers == []
    main([])
    assert len(root.handlers) == 1
