from pathlib import Path

import pytest

from implicit_herd.config import load_config, parse_config
from implicit_herd.errors import ConfigError
from implicit_herd.sweep import THREADS_ENV, SweepRow, render_report, run_sweep, set_param, sweep_workers

SCENARIOS = Path(__file__).parent.parent / "scenarios"


@pytest.fixture
def pinned():
    """One evader held still between two herders, short horizon."""
    return parse_config(
        {
            "simulation": {"name": "pinned", "horizon": 0.1},
            "evaders": [{"position": [0.0, 0.0]}],
            "herders": [[-2.0, 0.0], [2.0, 0.0]],
        }
    )


def test_set_param_replaces_one_field(pinned):
    doc = set_param(pinned, "estimator.r", 0.3)
    assert doc.estimator.r == 0.3
    assert pinned.estimator.r == 0.07
    assert doc.simulation == pinned.simulation


def test_set_param_revalidates(pinned):
    with pytest.raises(ConfigError):
        set_param(pinned, "simulation.T", -1.0)


@pytest.mark.parametrize("dotted", ["estimator.rr", "nowhere.r", "simulation.seed.value"])
def test_set_param_rejects_unknown_fields(pinned, dotted):
    with pytest.raises(ConfigError):
        set_param(pinned, dotted, 1)


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    assert sweep_workers() == 2


@pytest.mark.parametrize("raw", ["abc", "0"])
def test_bad_worker_count_is_rejected(monkeypatch, raw):
    monkeypatch.setenv(THREADS_ENV, raw)
    with pytest.raises(ConfigError):
        sweep_workers()


def test_worker_count_defaults_to_cpus(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert sweep_workers() >= 1


def test_report_lists_every_row():
    rows = [
        SweepRow(value=0.07, settling_time=12.0, steady_state_error=0.01, rmse_final=0.05, trace="a"),
        SweepRow(
            value=0.3,
            settling_time=float("nan"),
            steady_state_error=0.2,
            rmse_final=0.4,
            failure="rank deficient",
            trace="b",
        ),
    ]
    report = render_report("estimator.r", "dkf", rows)
    assert report.startswith("# Sweep over `estimator.r`")
    assert "| 0.07 | 12.000 | 0.0100 | 0.0500 | ok |" in report
    assert "rank deficient" in report


@pytest.mark.asyncio
async def test_sweep_over_seeds(pinned, tmp_path):
    rows = await run_sweep(pinned, "simulation.seed", [0, 1], tmp_path, max_workers=1)
    assert [row.value for row in rows] == [0, 1]
    assert all(row.failure is None for row in rows)
    assert all((tmp_path / row.trace).exists() for row in rows)
    report = (tmp_path / "sweep_report.md").read_text()
    assert report.count("| ok |") == 2


@pytest.mark.slow
@pytest.mark.asyncio
async def test_noisier_sensing_never_herds_better(tmp_path):
    doc = load_config(SCENARIOS / "dkf.yaml")
    rows = await run_sweep(doc, "estimator.r", [0.07, 0.15, 0.30], tmp_path)
    assert all(row.failure is None for row in rows)
    errors = [row.steady_state_error for row in rows]
    rmse = [row.rmse_final for row in rows]
    assert errors == sorted(errors)
    assert rmse == sorted(rmse)
