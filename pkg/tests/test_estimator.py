from pathlib import Path

import numpy as np
import pytest

from implicit_herd.estimator import (
    EstimatorBelief,
    EstimatorSettings,
    MeasurementPacket,
    absorb,
    fuse,
    initial_beliefs,
    neighbors,
    predict,
    propagate_covariance,
    propagate_mean,
    relinearize,
    rmse_from_means,
    sense,
    stream_rng,
)
from implicit_herd.config import build_scenario, load_config
from implicit_herd.controller import GainSet, ImplicitController, ReferenceSignal
from implicit_herd.simulation import run

from conftest import INVERSE

# two evaders followed by two herders
TRUTH = np.array([0.0, 0.0, 3.0, 0.0, 0.0, -2.5, 3.0, -2.5])
M = 2
SCENARIOS = Path(__file__).parent.parent / "scenarios"


@pytest.fixture
def prior():
    """Factory for a belief with covariance 0.7 I around a fixed offset of the truth."""

    def build(owner: int, d_m: float = 100.0, d_c: float = 100.0) -> EstimatorBelief:
        dim = TRUTH.size
        xi = TRUTH + 0.1 * np.sin(np.arange(dim) + owner)
        return EstimatorBelief(
            owner, xi, np.eye(dim) / 0.7, 0.02 * np.eye(dim), 0.07 * np.eye(dim), d_m, d_c
        )

    return build


def _herders(truth=TRUTH):
    return truth[2 * M :]


def test_packet_wire_layout():
    rng = stream_rng(0, 1, 10)
    packet = sense(TRUTH, 1, M, 0.07 * np.eye(8), 3.0, rng, tick=10)
    payload = packet.to_bytes()
    assert len(payload) == 8 * 8 + 1 + 6
    decoded = MeasurementPacket.from_bytes(payload, 8)
    np.testing.assert_array_equal(decoded.values, packet.values)
    np.testing.assert_array_equal(decoded.seen, packet.seen)
    assert decoded.key == (1, 10)


def test_truncated_packet_is_rejected():
    packet = sense(TRUTH, 0, M, 0.07 * np.eye(8), 10.0, stream_rng(0, 0, 0))
    with pytest.raises(ValueError):
        MeasurementPacket.from_bytes(packet.to_bytes()[:-1], 8)


def test_unbounded_sensing_sees_everything():
    packet = sense(TRUTH, 0, M, 0.07 * np.eye(8), 1e9, stream_rng(0, 0, 0))
    assert packet.seen.all()


def test_zero_sensing_radius_sees_only_self():
    packet = sense(TRUTH, 1, M, 0.07 * np.eye(8), 0.0, stream_rng(0, 1, 0))
    expected = np.zeros(8, dtype=bool)
    expected[6:8] = True
    np.testing.assert_array_equal(packet.seen, expected)
    assert not np.any(packet.values[~expected])


def test_sensing_radius_matches_distances():
    packet = sense(TRUTH, 0, M, 0.07 * np.eye(8), 3.0, stream_rng(0, 0, 0))
    pts = TRUTH.reshape(-1, 2)
    dist = np.linalg.norm(pts - pts[M], axis=1)
    np.testing.assert_array_equal(packet.seen, np.repeat(dist <= 3.0, 2))


def test_streams_are_keyed_not_ordered():
    a = stream_rng(4, 2, 30).standard_normal(3)
    stream_rng(4, 1, 30).standard_normal(100)
    np.testing.assert_array_equal(stream_rng(4, 2, 30).standard_normal(3), a)
    assert not np.array_equal(stream_rng(4, 2, 31).standard_normal(3), a)


def test_neighbors_include_self():
    assert neighbors(_herders(), 0.0) == [[0], [1]]
    assert neighbors(_herders(), 3.0) == [[0, 1], [0, 1]]


def test_lone_herder_runs_a_standalone_filter(prior):
    belief = prior(0, d_c=0.0)
    packet = sense(TRUTH, 0, M, belief.R, 100.0, stream_rng(1, 0, 0))
    (fused,) = fuse([belief], [packet], _herders()[:2])
    R_inv = np.linalg.inv(belief.R)
    Y = belief.Y + R_inv
    np.testing.assert_allclose(fused.Y, Y)
    np.testing.assert_allclose(
        fused.xi, np.linalg.solve(Y, belief.Y @ belief.xi + R_inv @ packet.values), atol=1e-12
    )


def test_duplicate_packets_count_once(prior):
    beliefs = [prior(0), prior(1)]
    packets = [sense(TRUTH, i, M, beliefs[0].R, 100.0, stream_rng(2, i, 5), 5) for i in range(2)]
    once = fuse(beliefs, packets, _herders())
    twice = fuse(beliefs, packets + packets[:1], _herders())
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a.xi, b.xi)
        np.testing.assert_array_equal(a.Y, b.Y)


def test_all_to_all_fusion_matches_centralized_update(prior):
    beliefs = [prior(0), prior(0)]
    beliefs[1].owner = 1
    R = beliefs[0].R
    packets = [sense(TRUTH, i, M, R, 100.0, stream_rng(3, i, 0)) for i in range(2)]
    fused = fuse(beliefs, packets, _herders())

    # batch Kalman update with both full-state measurements
    P = np.linalg.inv(beliefs[0].Y)
    H = np.vstack([np.eye(8), np.eye(8)])
    z = np.concatenate([p.values for p in packets])
    S = H @ P @ H.T + np.kron(np.eye(2), R)
    K = P @ H.T @ np.linalg.inv(S)
    xi = beliefs[0].xi + K @ (z - H @ beliefs[0].xi)
    P_post = (np.eye(8) - K @ H) @ P
    for belief in fused:
        np.testing.assert_allclose(belief.xi, xi, atol=1e-10)
        np.testing.assert_allclose(belief.covariance, P_post, atol=1e-10)


def test_fusion_never_loses_information(prior):
    beliefs = [prior(0, d_m=3.0, d_c=3.0), prior(1, d_m=3.0, d_c=3.0)]
    packets = [sense(TRUTH, i, M, beliefs[0].R, 3.0, stream_rng(0, i, 0)) for i in range(2)]
    for before, after in zip(beliefs, fuse(beliefs, packets, _herders())):
        assert np.trace(after.Y) >= np.trace(before.Y)
        assert np.linalg.eigvalsh(after.Y - before.Y)[0] >= -1e-12


def test_prediction_with_static_field_adds_process_noise(prior):
    belief = prior(0)

    def still(xi, t):
        return np.zeros_like(xi)

    moved = predict(belief, still, 0.0, 0.1)
    np.testing.assert_array_equal(moved.xi, belief.xi)
    np.testing.assert_allclose(moved.covariance, belief.covariance + 0.1 * belief.Q, atol=1e-12)


def test_prediction_rejects_nonpositive_step(prior):
    with pytest.raises(ValueError):
        predict(prior(0), lambda xi, t: xi, 0.0, 0.0)


def test_mean_at_rest_stays_put():
    ctl = ImplicitController([INVERSE], GainSet.isotropic(2), ReferenceSignal.static([0.0, 0.0]))
    xi = np.array([0.0, 0.0, -2.0, 0.0, 2.0, 0.0])
    belief = EstimatorBelief(0, xi, np.eye(6), np.eye(6), np.eye(6), 6.5, 6.5)
    moved = propagate_mean(belief, lambda z, t: ctl.expanded_field(z, t), 0.0, 0.1)
    np.testing.assert_array_equal(moved.xi, xi)


def test_initial_beliefs_are_seeded():
    settings = EstimatorSettings()
    a = initial_beliefs(TRUTH, 2, settings, seed=5)
    b = initial_beliefs(TRUTH, 2, settings, seed=5)
    c = initial_beliefs(TRUTH, 2, settings, seed=6)
    np.testing.assert_array_equal(a[1].xi, b[1].xi)
    assert not np.array_equal(a[1].xi, c[1].xi)
    assert not np.array_equal(a[0].xi, a[1].xi)
    np.testing.assert_allclose(a[0].covariance, 0.7 * np.eye(8))


def test_rmse_of_exact_beliefs_is_zero():
    report = rmse_from_means(np.vstack([TRUTH, TRUTH]), TRUTH, M)
    assert (report.evaders, report.herders) == (0.0, 0.0)


def test_rmse_of_uniform_offset():
    shifted = TRUTH + np.tile([0.1, 0.0], 4)
    report = rmse_from_means(np.vstack([shifted, shifted]), TRUTH, M)
    assert report.evaders == pytest.approx(0.1)
    assert report.herders == pytest.approx(0.1)


def test_estimated_run_reduces_belief_error(pentagon_scenario):
    scenario = pentagon_scenario(horizon=1.0, estimator=EstimatorSettings(), seed=3)
    result = run(scenario)
    assert result.ok
    rmse = result.trace.column("rmse_evaders")
    assert rmse[-1] < rmse[0]
    # every herder senses on every tick
    assert len(result.packets) == 5 * 100


def test_local_update_then_exchange_matches_one_fusion(prior):
    beliefs = [prior(0), prior(1)]
    packets = [sense(TRUTH, i, M, beliefs[0].R, 100.0, stream_rng(4, i, 0)) for i in range(2)]
    local = [absorb(b, [p]) for b, p in zip(beliefs, packets)]
    staged = fuse(local, packets, _herders(), include_own=False)
    joint = fuse(beliefs, packets, _herders())
    for a, b in zip(staged, joint):
        np.testing.assert_allclose(a.xi, b.xi, atol=1e-10)
        np.testing.assert_allclose(a.Y, b.Y, rtol=1e-12)


def test_exchange_without_neighbors_leaves_belief_alone(prior):
    belief = prior(0, d_c=0.0)
    packet = sense(TRUTH, 0, M, belief.R, 100.0, stream_rng(5, 0, 0))
    (same,) = fuse([belief], [packet], _herders()[:2], include_own=False)
    np.testing.assert_allclose(same.xi, belief.xi, atol=1e-12)
    np.testing.assert_allclose(same.Y, belief.Y)


def test_covariance_step_without_transition_adds_process_noise(prior):
    belief = prior(0)
    moved = propagate_covariance(belief, 0.01)
    np.testing.assert_allclose(moved.covariance, belief.covariance + 0.01 * belief.Q, atol=1e-12)


def test_cached_transition_drives_later_covariance_steps(prior):
    belief = relinearize(prior(0), lambda xi, t: -2.0 * xi, 0.0, 0.01)
    F = np.exp(-0.02) * np.eye(8)
    np.testing.assert_allclose(belief.F, F, atol=1e-9)
    once = propagate_covariance(belief, 0.01)
    twice = propagate_covariance(once, 0.01)
    P = F @ (F @ belief.covariance @ F.T + 0.01 * belief.Q) @ F.T + 0.01 * belief.Q
    np.testing.assert_allclose(twice.covariance, P, atol=1e-9)


@pytest.mark.slow
def test_filter_converges_within_four_exchange_rounds():
    doc = load_config(SCENARIOS / "dkf.yaml")
    at = []
    for seed in range(10):
        scenario = build_scenario(doc)
        scenario.seed = seed
        scenario.horizon = 0.41
        result = run(scenario)
        assert result.ok
        row = int(np.argmin(np.abs(result.trace.column("t") - 0.4)))
        at.append(
            (result.trace.column("rmse_evaders")[row], result.trace.column("rmse_herders")[row])
        )
    evaders, herders = np.mean(at, axis=0)
    assert evaders < 0.1
    assert herders < 0.1
