import numpy as np
import pytest

from implicit_herd.errors import EmptyData, GridMismatch, TraceSchemaError, UnknownKind
from implicit_herd.estimator import rmse_from_means
from implicit_herd.trace import (
    Trace,
    TraceHeader,
    TraceRecord,
    emit_plotdata,
    read_packets,
    read_trace,
    write_packets,
    write_trace,
)


@pytest.fixture
def header():
    """Header for a two-evader, one-herder run."""
    return TraceHeader(scenario_hash="abc123", seed=4, m=2, n=1, name="unit")


def _record(k: int, **extra) -> TraceRecord:
    t = 0.01 * k
    return TraceRecord(
        t=t,
        phase=1,
        x=np.array([1.0 - 0.1 * t, 0.0, 0.0, 2.0 + t]),
        x_star=np.array([0.0, 0.0, 0.0, 2.0]),
        u=np.array([-1.0, 0.5 * t]),
        h=np.array([1e-3, 0.0, 0.0, -1e-3]) / (k + 1),
        rank=2,
        cond=3.5,
        k_margin=0.249,
        **extra,
    )


@pytest.fixture
def trace(header):
    """Ten rows with a known error on every evader."""
    return Trace.from_records(header, [_record(k) for k in range(10)])


def test_trace_survives_a_file(trace, tmp_path):
    path = write_trace(trace, tmp_path / "nested" / "trace.csv")
    back = read_trace(path, expected_hash="abc123")
    assert back.header == trace.header
    assert back.columns == trace.columns
    np.testing.assert_array_equal(back.data, trace.data)


def test_rows_are_newline_terminated(trace, tmp_path):
    text = write_trace(trace, tmp_path / "trace.csv").read_text(encoding="utf-8")
    assert text.endswith("\n")
    assert "\r" not in text
    assert text.startswith("# schema_version=1\n")


def test_hash_mismatch_is_rejected(trace, tmp_path):
    path = write_trace(trace, tmp_path / "trace.csv")
    with pytest.raises(TraceSchemaError):
        read_trace(path, expected_hash="other")


def test_short_row_is_rejected(trace, tmp_path):
    path = write_trace(trace, tmp_path / "trace.csv")
    with open(path, "a", encoding="utf-8") as f:
        f.write("0.5,1\n")
    with pytest.raises(TraceSchemaError):
        read_trace(path)


def test_unknown_schema_version_is_rejected(trace, tmp_path):
    path = write_trace(trace, tmp_path / "trace.csv")
    path.write_text(path.read_text().replace("schema_version=1", "schema_version=9"))
    with pytest.raises(TraceSchemaError):
        read_trace(path)


def test_optional_columns_follow_the_record(header):
    plain = Trace.from_records(header, [_record(0)])
    assert not plain.has("theta0")
    adaptive = Trace.from_records(
        header, [_record(0, theta_hat=np.array([0.7, 0.8]), h_tilde=np.zeros(4))]
    )
    assert adaptive.has("theta1") and adaptive.has("ht1_y")
    np.testing.assert_array_equal(adaptive.theta()[0], [0.7, 0.8])


def test_error_curves_have_one_column_per_evader(trace, tmp_path):
    path = emit_plotdata(trace, "error-curves", tmp_path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (10, 3)
    expected = np.linalg.norm(trace.evaders() - trace.targets(), axis=-1)
    np.testing.assert_allclose(data[:, 1:], expected)


def test_theta_plot_needs_an_adaptive_trace(trace, tmp_path):
    with pytest.raises(EmptyData):
        emit_plotdata(trace, "theta", tmp_path)


def test_unknown_plot_kind(trace, tmp_path):
    with pytest.raises(UnknownKind):
        emit_plotdata(trace, "heatmap", tmp_path)


def test_input_diff_needs_a_shared_grid(trace, header, tmp_path):
    shorter = Trace.from_records(header, [_record(k) for k in range(5)])
    with pytest.raises(GridMismatch):
        emit_plotdata(trace, "input-diff", tmp_path, other=shorter)
    path = emit_plotdata(trace, "input-diff", tmp_path, other=trace)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert not np.any(data[:, 1:])


def test_rmse_plot_matches_recorded_beliefs(header, tmp_path):
    rng = np.random.default_rng(0)
    records = []
    for k in range(6):
        base = _record(k)
        truth = np.concatenate([base.x, base.u])
        means = truth + 0.1 * rng.normal(size=(1, 6))
        report = rmse_from_means(means, truth, 2)
        records.append(_record(k, rmse=(report.evaders, report.herders), beliefs=means))
    trace = Trace.from_records(header, records)

    data = np.loadtxt(emit_plotdata(trace, "rmse", tmp_path), delimiter=",", skiprows=1)
    recomputed = [
        rmse_from_means(b, truth, 2).evaders for b, truth in zip(trace.beliefs(), trace.truth())
    ]
    np.testing.assert_allclose(data[:, 1], recomputed, rtol=1e-12)


def test_packet_log_round_trip(tmp_path):
    entries = [(10, 0, b"\x00\x01\xff"), (10, 1, bytes(range(16)))]
    path = write_packets(tmp_path / "packets.csv", "abc123", entries)
    assert read_packets(path) == ("abc123", entries)


def test_empty_trace_writes_and_reads(header, tmp_path):
    empty = Trace.from_records(header, [])
    back = read_trace(write_trace(empty, tmp_path / "empty.csv"))
    assert len(back) == 0
    with pytest.raises(EmptyData):
        emit_plotdata(back, "error-curves", tmp_path)
