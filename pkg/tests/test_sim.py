import math

import pytest
from hypothesis import given, strategies as st

from diffdeg.attack import FixedDelay, FrameDrop
from diffdeg.sim import (CovertChannelModel, analytic_frame_loss, degradation_label, differential_ratio,
                         monte_carlo_frame_loss, ratio_of, simulate, sweep, write_windows_csv)


@given(st.integers(1, 50))
def test_analytic_edges(n):
    assert analytic_frame_loss(0.0, n) == 0.0
    assert analytic_frame_loss(1.0, n) == 1.0


def test_analytic_against_sampling():
    assert analytic_frame_loss(0.10, 10) == pytest.approx(0.6513, abs=1e-4)
    assert abs(monte_carlo_frame_loss(0.10, 10, seed=1) - analytic_frame_loss(0.10, 10)) < 0.005


@given(st.floats(0, 1), st.integers(1, 30))
def test_analytic_monotone_in_frame_length(q, n):
    assert analytic_frame_loss(q, n) <= analytic_frame_loss(q, n + 1) + 1e-15


def test_analytic_rejects_bad_input():
    with pytest.raises(ValueError):
        analytic_frame_loss(1.2, 3)
    with pytest.raises(ValueError):
        analytic_frame_loss(0.2, 0)


def test_ratio_arithmetic():
    assert ratio_of(0.5, 0.25) == 2.0
    assert ratio_of(0.0, 0.0) == 1.0
    assert ratio_of(0.3, 0.0) == math.inf
    # Reference figures at 25% frame loss: 151.0 -> 4.7 KB/s and 24.0 -> 13.4 fps.
    assert ratio_of(1 - 4.7 / 151.0, 1 - 13.4 / 24.0) == pytest.approx(2.19, abs=0.01)


@pytest.fixture(scope="module")
def baseline():
    return simulate(policy=FrameDrop(0.0), duration_s=60, seed=1)


def test_no_attack_baseline(baseline):
    assert baseline.covert_goodput_bytes_per_s == baseline.covert_offered_load_bytes_per_s > 0
    assert baseline.video_final_profile == "1080p"
    assert baseline.video_delivered_fps == baseline.video_source_fps == pytest.approx(24.0, abs=0.05)
    assert differential_ratio(baseline, baseline) == 1.0
    assert degradation_label(baseline, baseline) == "no degradation"


def test_total_blockage():
    r = simulate(policy=FrameDrop(1.0), duration_s=20, seed=1)
    assert r.covert_goodput_bytes_per_s == 0
    assert r.video_delivered_fps == 0


def test_quarter_frame_loss_is_differential(baseline):
    r = simulate(policy=FrameDrop(0.25), duration_s=60, seed=1)
    assert differential_ratio(r, baseline) > 1
    assert degradation_label(r, baseline) == "differential"
    assert r.video_final_profile == "540p"
    assert 0.2 < r.frame_loss_achieved < 0.3


def test_simulation_is_deterministic():
    a = simulate(policy=FrameDrop(0.15), duration_s=20, seed=3)
    b = simulate(policy=FrameDrop(0.15), duration_s=20, seed=3)
    c = simulate(policy=FrameDrop(0.15), duration_s=20, seed=4)
    assert a == b
    assert a != c


def test_recovery_helps_the_covert_channel():
    plain = simulate(policy=FrameDrop(0.25), duration_s=30, seed=2)
    recovered = simulate(policy=FrameDrop(0.25), duration_s=30, seed=2, qos_recovery=1.0)
    assert recovered.carrier_frame_loss < plain.carrier_frame_loss
    assert recovered.covert_goodput_bytes_per_s > plain.covert_goodput_bytes_per_s


def test_delay_raises_covert_latency():
    fast = simulate(policy=FrameDrop(0.0), duration_s=20, seed=2)
    slow = simulate(policy=[FrameDrop(0.0), FixedDelay(150)], duration_s=20, seed=2)
    assert slow.covert_ack_latency_ms > fast.covert_ack_latency_ms + 100


def test_sweep_gives_one_report_per_rate(tmp_path):
    reports = sweep([0, 0.05, 0.15, 0.25], duration_s=10, seed=0)
    assert len(reports) == 4
    assert [r.policy[0]["rate"] for r in reports] == [0, 0.05, 0.15, 0.25]
    write_windows_csv(reports[-1], tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0].startswith("window,") and len(lines) == 1 + 5


def test_covert_model_validation():
    with pytest.raises(ValueError):
        CovertChannelModel(window_messages=0)
    with pytest.raises(ValueError):
        CovertChannelModel(rto_backoff=0.5)
    assert CovertChannelModel().rto_ms(10) == 60_000
    assert CovertChannelModel().rto_ms(1) == 2000
