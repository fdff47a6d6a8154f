import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cidc import harness
from cidc.harness import ConfigError, MetricsRow


def test_empty_config_gives_defaults():
    cfg = harness.parse_config("")
    assert cfg.n_values == list(range(25, 251, 25))
    b = cfg.base
    assert (b.lam, b.t_slot, b.t_difs, b.m_param, b.n_rounds, b.n_cycles) == (10.0, 13e-6, 58e-6, 2, 10, 160)
    assert cfg.tx_pairs == [(254e-6, 24), (332e-6, 30)]
    assert cfg.protocols == ["cidc", "dcf"]


def test_non_integral_k_is_rejected():
    with pytest.raises(ConfigError, match="t_tx"):
        harness.parse_config("tx_pairs = 333us\n")


def test_k_must_match_t_tx():
    with pytest.raises(ConfigError, match="K=24"):
        harness.parse_config("tx_pairs = 254us:30\n")


def test_dcf_only_selection():
    cfg = harness.parse_config("protocols = dcf\nw_values = 32, 64, 128\ntx_pairs = 254us:24\n"
                               "n_values = 50\n")
    grid = cfg.grid()
    assert [p for p, _ in grid] == ["dcf"] * 3
    assert [params.w_window for _, params in grid] == [32, 64, 128]


@pytest.mark.parametrize("text,needle", [
    ("colour = blue\n", "colour"),
    ("n_values = \n", "n_values"),
    ("protocols = cidc, aloha\n", "aloha"),
    ("m_param = two\n", "m_param"),
    ("warmup_cycles = 160\n", "warmup_cycles"),
])
def test_bad_documents_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        harness.parse_config(text)


def test_durations_and_units():
    cfg = harness.parse_config("t_slot = 0.013ms\nt_difs = 58us\ntx_pairs = 0.000332:30\n")
    assert cfg.base.t_slot == pytest.approx(13e-6)
    assert cfg.tx_pairs == [(0.000332, 30)]


def _row(**kw):
    base = dict(protocol="cidc", N=100, W=None, delta=0.0, K=24, rounds=10, p_col_mean=0.0123456789123,
                p_col_stderr=0.001, d_c_mean_us=120.5, d_o_mean_us=300.25, expiry_rate=0.0,
                upsilon_avg=0.31, saturated=False, c_s_model=0.9, d_c_model_us=118.0, p_col_ub=0.2)
    base.update(kw)
    return MetricsRow(**base)


def test_one_row_csv_has_two_lines(tmp_path):
    path = harness.write_csv([_row()], tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == harness.CSV_COLUMNS
    assert "0.0123456789" in lines[1]


def test_empty_rows_rejected(tmp_path):
    with pytest.raises(ValueError):
        harness.write_csv([], tmp_path / "m.csv")


finite = st.floats(min_value=-1e9, max_value=1e9, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0, 1), se=st.floats(0, 1), d=finite, o=finite, model=st.none() | finite,
       sat=st.booleans(), w=st.none() | st.integers(1, 1024))
def test_csv_round_trip_is_exact(tmp_path_factory, p, se, d, o, model, sat, w):
    row = _row(p_col_mean=p, p_col_stderr=se, d_c_mean_us=d, d_o_mean_us=o, d_c_model_us=model,
               saturated=sat, W=w, protocol="dcf" if w else "cidc")
    path = harness.write_csv([row], tmp_path_factory.mktemp("csv") / "m.csv")
    back = harness.read_csv(path)[0]
    assert harness.row_values(back) == harness.row_values(row)
    assert back.p_col_mean == float(f"{p:.9g}")


def test_full_collision_grid_has_forty_rows():
    cfg = harness.parse_config("tx_pairs = 254us:24\n")
    grid = cfg.grid()
    assert len(grid) == 40
    curves = {(p, params.w_window if p == "dcf" else None) for p, params in grid}
    assert curves == {("cidc", None), ("dcf", 32), ("dcf", 64), ("dcf", 128)}


def test_seed_derivation_is_injective():
    cfg = harness.parse_config("delta_values = 0, 1, 3\n")
    seen = set()
    for proto, params in cfg.grid():
        for r in range(params.n_rounds):
            ss = harness.protocol_seed(params.rng_seed, r, proto, params)
            key = tuple(ss.generate_state(4))
            assert key not in seen
            seen.add(key)
    offsets = {tuple(harness.offset_seed(1, r, n).generate_state(4))
               for r, n in itertools.product(range(10), cfg.n_values)}
    assert len(offsets) == 10 * len(cfg.n_values)


def test_offsets_shared_across_protocols():
    cfg = harness.parse_config("n_values = 30\ntx_pairs = 254us:24\nn_cycles = 12\nn_rounds = 2\n"
                               "warmup_cycles = 2\nw_values = 32\n")
    a = harness.offset_seed(cfg.base.rng_seed, 0, 30).generate_state(2)
    b = harness.offset_seed(cfg.base.rng_seed, 0, 30).generate_state(2)
    assert np.array_equal(a, b)


SMALL = ("n_values = 25, 250\ntx_pairs = 332us:30\nw_values = 32\nn_cycles = 40\nn_rounds = 2\n"
         "warmup_cycles = 10\n")


@pytest.fixture(scope="module")
def small_rows():
    return harness.run_experiment(harness.parse_config(SMALL))


def test_small_sweep_rows(small_rows):
    assert [(r.protocol, r.N) for r in small_rows] == [("cidc", 25), ("dcf", 25), ("cidc", 250), ("dcf", 250)]
    for r in small_rows:
        assert 0 <= r.p_col_mean <= 1 and r.p_col_stderr >= 0
        assert r.generated == r.outcome_total == r.N * 40 * 2
    low = small_rows[0]
    assert low.p_col_mean < 0.01 and low.d_c_mean_us < 200
    assert low.model_status == "ok" and low.p_col_ub is not None
    high = small_rows[2]
    assert high.saturated
    assert high.model_status == "beyond_saturation" and high.d_c_model_us is None
    assert small_rows[1].c_s_model is None


def test_single_point_csv_is_byte_identical(tmp_path):
    text = "n_values = 100\ntx_pairs = 254us:24\nprotocols = dcf\nw_values = 64\nn_cycles = 30\n" \
           "n_rounds = 1\n"
    a = harness.write_csv(harness.run_experiment(harness.parse_config(text)), tmp_path / "a.csv")
    b = harness.write_csv(harness.run_experiment(harness.parse_config(text)), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_parallel_workers_match_serial():
    cfg = harness.parse_config("n_values = 60\ntx_pairs = 254us:24\nw_values = 32\nn_cycles = 20\n"
                               "n_rounds = 2\nanalytics = false\n")
    serial = [harness.row_values(r) for r in harness.run_experiment(cfg)]
    parallel = [harness.row_values(r) for r in harness.run_experiment(cfg, workers=2)]
    assert serial == parallel


def test_stderr_across_rounds():
    p = harness.parse_config("").base.with_(n_vehicles=3)
    mk = lambda col, sent: harness.RoundSummary(  # noqa: E731
        generated=3, sent=sent, collided=col, expired=0, measured=3, measured_sent=sent,
        measured_collided=col, measured_expired=0, d_c_mean=1e-4, d_o_mean=2e-4, upsilon_avg=0.1,
        cycle_c=np.zeros(8), ratio_violations=0, collision_violations=0)
    row = harness.aggregate("dcf", p, [mk(0, 4), mk(2, 2)], with_model=False)
    assert row.p_col_mean == pytest.approx(0.25)
    assert row.p_col_stderr == pytest.approx(np.std([0, 0.5], ddof=1) / math.sqrt(2))
    assert row.d_c_mean_us == pytest.approx(100.0)


@pytest.mark.parametrize("series,expiry,expected", [
    (np.zeros(160), 0.0, False),
    (np.concatenate([np.zeros(120), np.linspace(0, 8, 40)]), 0.0, True),
    (np.concatenate([np.zeros(120), np.linspace(0, 0.5, 40)]), 0.0, False),
    (np.concatenate([np.zeros(120), np.linspace(8, 0, 40)]), 0.0, False),
    (np.zeros(160), 0.06, True),
    (np.zeros(2), 0.0, False),
])
def test_saturation_detector(series, expiry, expected):
    assert harness.is_saturated(series, expiry) is expected


def _pair_rows(n, c_col, d_col, bound=0.5):
    return [_row(N=n, p_col_mean=c_col, p_col_stderr=0.001, d_c_mean_us=100.0, d_c_model_us=100.0,
                 p_col_ub=bound),
            _row(protocol="dcf", N=n, W=64, p_col_mean=d_col, p_col_stderr=0.001, d_c_mean_us=200.0,
                 d_c_model_us=None, p_col_ub=None, c_s_model=None)]


def test_report_clean_grid_has_empty_lists():
    rows = _pair_rows(100, 0.01, 0.1) + _pair_rows(200, 0.02, 0.2)
    text = harness.compare_report(rows)
    for title in ("collision ordering failures", "bound violations", "model delay mismatches"):
        assert f"== {title} (0) ==" in text
    assert "FAIL" not in text


def test_report_lists_injected_bound_violation():
    rows = _pair_rows(100, 0.01, 0.1) + _pair_rows(200, 0.3, 0.4, bound=0.25)
    text = harness.compare_report(rows)
    assert "== bound violations (1) ==" in text
    assert "N=200" in text and "bound validity: FAIL" in text


def test_report_missing_counterpart_warns():
    rows = _pair_rows(100, 0.01, 0.1)[:1]
    text = harness.compare_report(rows + [_row(protocol="dcf", N=150, W=64)])
    assert "missing counterpart" in text


def test_report_churn_ordering():
    rows = []
    for n in (50, 100, 150):
        for d, v in ((0.0, 0.001), (1.0, 0.01), (3.0, 0.02)):
            rows.append(_row(N=n, delta=d, p_col_mean=v * n / 50))
    assert "churn ordering: PASS" in harness.compare_report(rows)
    rows[-1] = _row(N=150, delta=3.0, p_col_mean=0.0)
    assert "churn ordering: FAIL" in harness.compare_report(rows)


def test_report_is_a_pure_function():
    rows = _pair_rows(100, 0.01, 0.1) + _pair_rows(200, 0.3, 0.4, bound=0.25)
    assert harness.compare_report(rows) == harness.compare_report(list(rows))


def test_analyze_flags_saturation_per_row():
    cfg = harness.parse_config("n_values = 100, 250\n")
    recs = harness.analyze(cfg)
    by = {(r["K"], r["N"]): r for r in recs}
    assert by[(24, 100)]["status"] == "ok"
    assert by[(30, 250)]["status"].startswith("beyond_saturation")
    assert by[(24, 100)]["p_col"] <= by[(24, 100)]["p_col_ub"]
