import numpy as np
import pytest

from cidc import engine, mac
from cidc.params import ArrivalSchedule, ProtocolParams, draw_offsets


def test_window_of_one_always_zero():
    rng = np.random.default_rng(0)
    assert {mac.draw_initial_counter(1, rng) for _ in range(200)} == {0}


def test_uniform_counter_mean():
    rng = np.random.default_rng(1)
    draws = [mac.draw_initial_counter(64, rng) for _ in range(1_000_000)]
    assert min(draws) == 0 and max(draws) == 63
    assert abs(np.mean(draws) - 31.5) < 0.1


def test_rejects_empty_window():
    with pytest.raises(ValueError):
        mac.draw_initial_counter(0, np.random.default_rng(0))


def test_lone_vehicle_mean_delay():
    p = ProtocolParams(n_vehicles=1, w_window=64, n_cycles=4000)
    recs, _ = mac.run_round_dcf(p, np.random.default_rng(2))
    assert all(r.outcome == "sent" for r in recs)
    d_c = np.mean([r.d_c for r in recs])
    expected = (p.w_window - 1) / 2 * p.t_slot + p.t_difs
    # standard error of the mean is about 18.5 / sqrt(4000) slots
    assert d_c == pytest.approx(expected, abs=4 * 18.5 / np.sqrt(4000) * p.t_slot)


def _pair(p, first, second):
    slots = np.array([first, second])
    return ArrivalSchedule(slots * p.t_slot, slots, p.cycle_minis)


def test_window_one_sends_on_arrival_and_overlap_collides():
    p = ProtocolParams(n_vehicles=2, w_window=1, n_cycles=5)
    # second arrival lands inside the first one's busy slot: it waits one slot, no collision
    recs, _ = mac.run_round_dcf(p, np.random.default_rng(0), schedule=_pair(p, 100, 110))
    assert {r.outcome for r in recs} == {"sent"}
    for r in recs[::2]:
        assert r.start_tx == r.generation
    # far apart: both transmit immediately
    recs, _ = mac.run_round_dcf(p, np.random.default_rng(0), schedule=_pair(p, 100, 3000))
    assert all(r.start_tx == r.generation for r in recs)


def test_shared_counters_give_identical_outcomes():
    p = ProtocolParams(n_vehicles=120, w_window=32, n_cycles=15)
    sched = draw_offsets(p, np.random.default_rng(3))
    a = engine.simulate(p, sched, "dcf", np.random.default_rng(9))
    b = engine.simulate(p, sched, "dcf", np.random.default_rng(9))
    assert np.array_equal(a.outcome, b.outcome) and np.array_equal(a.start_mini, b.start_mini)


def test_balance_holds_for_dcf_trace():
    p = ProtocolParams(n_vehicles=200, w_window=32, n_cycles=20)
    res = engine.simulate(p, draw_offsets(p, np.random.default_rng(4)), "dcf", np.random.default_rng(5))
    c = 0
    for j in range(len(res.tr_slot)):
        assert res.tr_c[j] == c
        c = res.tr_c[j] + res.tr_arrivals[j] - res.tr_expired[j] - res.tr_no[j]
    assert c == 0


def test_smaller_window_collides_more_at_n150():
    p = ProtocolParams(n_vehicles=150, n_cycles=80)
    col = {}
    for w in (32, 128):
        tot = 0
        for seed in range(4):
            sched = draw_offsets(p, np.random.default_rng(seed))
            _, res = mac.run_round_dcf(p.with_(w_window=w), np.random.default_rng(50 + seed), schedule=sched)
            tot += (res.outcome == engine.COLLIDED).sum() / (res.outcome != engine.EXPIRED).sum()
        col[w] = tot / 4
    assert col[32] > col[128]


def test_dcf_collides_far_more_than_cidc_near_saturation():
    p = ProtocolParams(n_vehicles=250, t_tx=332e-6, w_window=32, n_cycles=40)
    sched = draw_offsets(p, np.random.default_rng(6))
    _, cidc = mac.run_round_cidc(p, np.random.default_rng(7), schedule=sched)
    _, dcf = mac.run_round_dcf(p, np.random.default_rng(7), schedule=sched)
    rate = lambda r: (r.outcome == engine.COLLIDED).sum() / (r.outcome != engine.EXPIRED).sum()  # noqa: E731
    assert rate(dcf) > 5 * rate(cidc)
