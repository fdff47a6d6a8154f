"""Parameter sweeps: config parsing, seeded Monte Carlo rounds, aggregation and reports."""
from __future__ import annotations

import configparser
import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analytics, engine
from .engine import CIDC, COLLIDED, DCF, EXPIRED, SENT
from .params import ParameterError, ProtocolParams, derive_k, draw_offsets

CSV_COLUMNS = [
    "protocol", "N", "W", "delta", "K", "rounds", "p_col_mean", "p_col_stderr",
    "d_c_mean_us", "d_o_mean_us", "expiry_rate", "upsilon_avg", "saturated",
    "c_s_model", "d_c_model_us", "p_col_ub",
]
PROTOCOL_CODES = {CIDC: 1, DCF: 2}


class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""


@dataclass
class ExperimentConfig:
    base: ProtocolParams = field(default_factory=ProtocolParams)
    n_values: list[int] = field(default_factory=lambda: list(range(25, 251, 25)))
    w_values: list[int] = field(default_factory=lambda: [32, 64, 128])
    delta_values: list[float] = field(default_factory=lambda: [0.0])
    tx_pairs: list[tuple[float, int]] = field(default_factory=lambda: [(254e-6, 24), (332e-6, 30)])
    protocols: list[str] = field(default_factory=lambda: [CIDC, DCF])
    out_dir: str = "results"
    analytics: bool = True
    warmup_cycles: int = 10
    delay_includes_collided: bool = True

    def grid(self) -> list[tuple[str, ProtocolParams]]:
        """(protocol, params) for every sweep point, in a fixed order."""
        points = []
        for t_tx, _ in self.tx_pairs:
            for n in self.n_values:
                for proto in self.protocols:
                    if proto == CIDC:
                        for delta in self.delta_values:
                            points.append((proto, self.base.with_(t_tx=t_tx, n_vehicles=n,
                                                                  delta_churn=delta)))
                    else:
                        for w in self.w_values:
                            points.append((proto, self.base.with_(t_tx=t_tx, n_vehicles=n,
                                                                  w_window=w, delta_churn=0.0)))
        return points


_PARAM_KEYS = {"lam", "m_param", "t_slot", "t_difs", "n_cycles", "n_rounds", "rng_seed"}
_UNIT = {"s": 1.0, "ms": 1e-3, "us": 1e-6}


def _seconds(text: str) -> float:
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*(s|ms|us)?\s*", text)
    if not m:
        raise ValueError(f"not a duration: {text!r}")
    return float(m.group(1)) * _UNIT[m.group(2) or "s"]


def _split(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse a flat ``key = value`` document; lists are comma separated.

    Durations accept an ``s``, ``ms`` or ``us`` suffix. ``tx_pairs`` lists
    ``t_tx:K`` entries and each K must match the one derived from t_tx.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = dict(parser["experiment"])
    cfg = ExperimentConfig()
    base: dict = {}
    known = {f.name for f in fields(ExperimentConfig)} - {"base"}
    for key, value in raw.items():
        try:
            if key in _PARAM_KEYS:
                if key in ("t_slot", "t_difs"):
                    base[key] = _seconds(value)
                elif key == "lam":
                    base[key] = float(value)
                else:
                    base[key] = int(value)
            elif key not in known:
                raise ConfigError(f"unknown key {key!r}")
            elif key == "n_values":
                cfg.n_values = [int(x) for x in _split(value)]
            elif key == "w_values":
                cfg.w_values = [int(x) for x in _split(value)]
            elif key == "delta_values":
                cfg.delta_values = [float(x) for x in _split(value)]
            elif key == "tx_pairs":
                pairs = []
                for item in _split(value):
                    t_tx, sep, k = item.partition(":")
                    pairs.append((_seconds(t_tx), int(k) if sep else 0))
                cfg.tx_pairs = pairs
            elif key == "protocols":
                cfg.protocols = [x.lower() for x in _split(value)]
            elif key == "out_dir":
                cfg.out_dir = value.strip()
            elif key in ("analytics", "delay_includes_collided"):
                setattr(cfg, key, _bool(value))
            elif key == "warmup_cycles":
                cfg.warmup_cycles = int(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: {exc}") from exc
    for name, values in (("n_values", cfg.n_values), ("w_values", cfg.w_values),
                         ("delta_values", cfg.delta_values), ("tx_pairs", cfg.tx_pairs),
                         ("protocols", cfg.protocols)):
        if not values:
            raise ConfigError(f"sweep {name!r} is empty")
    bad = set(cfg.protocols) - {CIDC, DCF}
    if bad:
        raise ConfigError(f"key 'protocols': unknown protocol(s) {sorted(bad)}")
    try:
        cfg.base = ProtocolParams(**base)
        pairs = []
        for t_tx, k in cfg.tx_pairs:
            derived = derive_k(t_tx, cfg.base.t_difs, cfg.base.t_slot)
            if k and k != derived:
                raise ConfigError(f"key 'tx_pairs': t_tx={t_tx!r} gives K={derived}, not {k}")
            pairs.append((t_tx, derived))
        cfg.tx_pairs = pairs
        for t_tx, _ in pairs:
            for n in cfg.n_values:
                for w in cfg.w_values:
                    for d in cfg.delta_values:
                        cfg.base.with_(t_tx=t_tx, n_vehicles=n, w_window=w, delta_churn=d)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= cfg.warmup_cycles < cfg.base.n_cycles:
        raise ConfigError("key 'warmup_cycles' must lie in [0, n_cycles)")
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# seeds


def _delta_key(delta: float) -> int:
    return int(round(delta * 1_000_000))


def offset_seed(seed: int, round_index: int, n_vehicles: int) -> np.random.SeedSequence:
    """Offsets are shared by every protocol and window at the same (round, N)."""
    return np.random.SeedSequence([seed, 0, round_index, n_vehicles])


def protocol_seed(seed: int, round_index: int, protocol: str, params: ProtocolParams) -> np.random.SeedSequence:
    return np.random.SeedSequence([
        seed, 1, round_index, params.n_vehicles, params.k_busy, PROTOCOL_CODES[protocol],
        params.w_window if protocol == DCF else 0, _delta_key(params.delta_churn),
    ])


# ---------------------------------------------------------------------------
# rounds


@dataclass
class RoundSummary:
    generated: int
    sent: int
    collided: int
    expired: int
    measured: int
    measured_sent: int
    measured_collided: int
    measured_expired: int
    d_c_mean: float
    d_o_mean: float
    upsilon_avg: float
    cycle_c: np.ndarray
    ratio_violations: int
    collision_violations: int
    trace_dir: str | None = None


def run_round(protocol: str, params: ProtocolParams, round_index: int, warmup_cycles: int = 10,
              delay_includes_collided: bool = True, trace_dir: str | None = None,
              check_collisions: bool = False) -> RoundSummary:
    rng_offsets = np.random.default_rng(offset_seed(params.rng_seed, round_index, params.n_vehicles))
    schedule = draw_offsets(params, rng_offsets)
    rng = np.random.default_rng(protocol_seed(params.rng_seed, round_index, protocol, params))
    res = engine.simulate(params, schedule, protocol, rng)
    out = res.outcome
    cut = warmup_cycles * schedule.cycle_minis
    keep = res.gen_mini >= cut
    o = out[keep]
    delay_set = (o == SENT) | (o == COLLIDED) if delay_includes_collided else (o == SENT)
    d_o, d_c = res.delays()
    d_o, d_c = d_o[keep][delay_set], d_c[keep][delay_set]
    cycle_c = np.divide(res.cycle_c_sum, res.cycle_slots,
                        out=np.zeros(len(res.cycle_slots)), where=res.cycle_slots > 0)
    bad_collisions = 0
    if check_collisions:
        from .mac import collision_violations
        bad_collisions = len(collision_violations(res))
    if trace_dir is not None:
        from .traces import write_round
        write_round(res, trace_dir)
    return RoundSummary(
        generated=res.n_packets,
        sent=int((out == SENT).sum()),
        collided=int((out == COLLIDED).sum()),
        expired=int((out == EXPIRED).sum()),
        measured=int(keep.sum()),
        measured_sent=int((o == SENT).sum()),
        measured_collided=int((o == COLLIDED).sum()),
        measured_expired=int((o == EXPIRED).sum()),
        d_c_mean=float(d_c.mean()) if d_c.size else math.nan,
        d_o_mean=float(d_o.mean()) if d_o.size else math.nan,
        upsilon_avg=res.upsilon_sum / res.n_slots if res.n_slots else 0.0,
        cycle_c=cycle_c,
        ratio_violations=res.ratio_violations,
        collision_violations=bad_collisions,
        trace_dir=trace_dir,
    )


def _round_task(args):
    return run_round(*args)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsRow:
    protocol: str
    N: int
    W: int | None
    delta: float
    K: int
    rounds: int
    p_col_mean: float
    p_col_stderr: float
    d_c_mean_us: float
    d_o_mean_us: float
    expiry_rate: float
    upsilon_avg: float
    saturated: bool
    c_s_model: float | None = None
    d_c_model_us: float | None = None
    p_col_ub: float | None = None
    # audit fields, not written to the CSV
    generated: int = 0
    outcome_total: int = 0
    collided_total: int = 0
    ratio_violations: int = 0
    collision_violations: int = 0
    model_status: str = ""


def is_saturated(cycle_c: np.ndarray, expiry_rate: float, n_blocks: int = 4,
                 min_rise: float = 1.0, expiry_limit: float = 0.05) -> bool:
    """Contention keeps rising over the final quarter of cycles, or too many packets expire.

    The final quarter is split into ``n_blocks`` blocks; the block means must
    increase strictly and rise by at least ``min_rise`` packets overall.
    """
    if expiry_rate > expiry_limit:
        return True
    n = len(cycle_c)
    tail = cycle_c[n - max(n_blocks, n // 4):]
    if len(tail) < n_blocks:
        return False
    means = np.array([b.mean() for b in np.array_split(tail, n_blocks)])
    return bool(np.all(np.diff(means) > 0) and means[-1] - means[0] >= min_rise)


def model_columns(params: ProtocolParams) -> tuple[float | None, float | None, float | None, str]:
    """(c_s, d_c in us, collision bound, status) from the closed-form model."""
    try:
        sol = analytics.solve_delay_system(params)
        d_c = analytics.contention_delay(sol.d_o, params)
        ub = analytics.collision_upper_bound(params, sol.p_ck0)
    except analytics.BeyondSaturation:
        return None, None, None, "beyond_saturation"
    except (analytics.NumericFailure, ParameterError) as exc:
        return None, None, None, f"numeric_failure: {exc}"
    return sol.c_s, d_c * 1e6, ub, "ok"


def aggregate(protocol: str, params: ProtocolParams, summaries: list[RoundSummary],
              with_model: bool) -> MetricsRow:
    p_col = np.array([
        s.measured_collided / (s.measured_sent + s.measured_collided)
        if s.measured_sent + s.measured_collided else 0.0 for s in summaries
    ])
    r = len(summaries)
    stderr = float(p_col.std(ddof=1) / math.sqrt(r)) if r > 1 else 0.0
    measured = sum(s.measured for s in summaries)
    expiry = sum(s.measured_expired for s in summaries) / measured if measured else 0.0
    d_c = np.array([s.d_c_mean for s in summaries])
    d_o = np.array([s.d_o_mean for s in summaries])
    cycle_c = np.mean([s.cycle_c for s in summaries], axis=0)
    row = MetricsRow(
        protocol=protocol,
        N=params.n_vehicles,
        W=params.w_window if protocol == DCF else None,
        delta=params.delta_churn,
        K=params.k_busy,
        rounds=r,
        p_col_mean=float(p_col.mean()),
        p_col_stderr=stderr,
        d_c_mean_us=float(np.nanmean(d_c)) * 1e6 if np.isfinite(d_c).any() else math.nan,
        d_o_mean_us=float(np.nanmean(d_o)) * 1e6 if np.isfinite(d_o).any() else math.nan,
        expiry_rate=expiry,
        upsilon_avg=float(np.mean([s.upsilon_avg for s in summaries])),
        saturated=is_saturated(cycle_c, expiry),
        generated=sum(s.generated for s in summaries),
        outcome_total=sum(s.sent + s.collided + s.expired for s in summaries),
        collided_total=sum(s.collided for s in summaries),
        ratio_violations=sum(s.ratio_violations for s in summaries),
        collision_violations=sum(s.collision_violations for s in summaries),
    )
    if with_model and protocol == CIDC:
        row.c_s_model, row.d_c_model_us, row.p_col_ub, row.model_status = model_columns(params)
    return row


def run_experiment(config: ExperimentConfig, workers: int = 1, traces: bool = False,
                   check_collisions: bool = False) -> list[MetricsRow]:
    """Run every grid point for ``n_rounds`` rounds and aggregate in grid order."""
    grid = config.grid()
    tasks = []
    for gi, (proto, params) in enumerate(grid):
        for r in range(params.n_rounds):
            tdir = None
            if traces:
                w = f"_W{params.w_window}" if proto == DCF else ""
                tdir = str(Path(config.out_dir) / "traces" /
                           f"{proto}_K{params.k_busy}_N{params.n_vehicles}{w}"
                           f"_d{params.delta_churn:g}" / f"round{r:02d}")
            tasks.append((proto, params, r, config.warmup_cycles,
                          config.delay_includes_collided, tdir, check_collisions))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_round_task, tasks, chunksize=1))
    else:
        results = [_round_task(t) for t in tasks]
    rows = []
    i = 0
    for proto, params in grid:
        rows.append(aggregate(proto, params, results[i:i + params.n_rounds], config.analytics))
        i += params.n_rounds
    return rows


# ---------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.9g}"
    return str(value)


def row_values(row: MetricsRow) -> list[str]:
    return [_fmt(getattr(row, c)) for c in CSV_COLUMNS]


def write_csv(rows: list[MetricsRow], path: str | Path) -> Path:
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row_values(row))
    return path


def read_csv(path: str | Path) -> list[MetricsRow]:
    def opt(x, cast):
        return None if x == "" else cast(x)

    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            missing = set(CSV_COLUMNS) - set(rec)
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            rows.append(MetricsRow(
                protocol=rec["protocol"], N=int(rec["N"]), W=opt(rec["W"], int),
                delta=float(rec["delta"]), K=int(rec["K"]), rounds=int(rec["rounds"]),
                p_col_mean=float(rec["p_col_mean"]), p_col_stderr=float(rec["p_col_stderr"]),
                d_c_mean_us=float(rec["d_c_mean_us"]), d_o_mean_us=float(rec["d_o_mean_us"]),
                expiry_rate=float(rec["expiry_rate"]), upsilon_avg=float(rec["upsilon_avg"]),
                saturated=rec["saturated"] == "true",
                c_s_model=opt(rec["c_s_model"], float), d_c_model_us=opt(rec["d_c_model_us"], float),
                p_col_ub=opt(rec["p_col_ub"], float),
            ))
    return rows


# ---------------------------------------------------------------------------
# analytics table


ANALYSIS_COLUMNS = ["N", "K", "c_s", "c_s_small_n", "c_s_large_n", "d_o_us", "d_c_us", "p_ck0",
                    "upsilon_s", "p_col", "p_col_ub", "n_sat", "status"]


def analyze(config: ExperimentConfig) -> list[dict]:
    """Model outputs for every (t_tx, N) of the sweep; failures are reported per row."""
    out = []
    for t_tx, _ in config.tx_pairs:
        for n in config.n_values:
            params = config.base.with_(t_tx=t_tx, n_vehicles=n)
            rec = {c: None for c in ANALYSIS_COLUMNS}
            rec.update(N=n, K=params.k_busy)
            for regime, key in (("small_n", "c_s_small_n"), ("large_n", "c_s_large_n")):
                try:
                    rec[key] = analytics.approx_cs(params, regime)
                except analytics.BeyondSaturation:
                    pass
            try:
                s = analytics.steady_state(params)
            except analytics.BeyondSaturation as exc:
                rec["status"] = f"beyond_saturation: {exc}"
            except analytics.NumericFailure as exc:
                rec["status"] = f"numeric_failure: {exc}"
            else:
                rec.update(c_s=s.c_s, d_o_us=s.d_o * 1e6, d_c_us=s.d_c * 1e6, p_ck0=s.p_ck0,
                           upsilon_s=s.upsilon_s, p_col=s.p_col, p_col_ub=s.p_col_ub,
                           n_sat=s.n_sat, status="ok")
            out.append(rec)
    return out


def write_analysis_csv(records: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANALYSIS_COLUMNS)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in ANALYSIS_COLUMNS])
    return path


# ---------------------------------------------------------------------------
# comparison report


@dataclass
class Thresholds:
    model_gap_medium: float = 0.10
    model_gap_large: float = 0.20
    medium_n: int = 150
    large_n: int = 225
    ordering_sigmas: float = 2.0
    ordering_strict_from_n: int = 100


def compare_report(rows: list[MetricsRow], thresholds: Thresholds | None = None) -> str:
    """Plain-text comparison of CIDC against DCF rows and against the model columns."""
    th = thresholds or Thresholds()
    lines: list[str] = []
    warnings: list[str] = []
    cidc = {(r.K, r.N, r.delta): r for r in rows if r.protocol == CIDC}
    dcf = {(r.K, r.N, r.W): r for r in rows if r.protocol == DCF}
    ks = sorted({r.K for r in rows})
    windows = sorted({r.W for r in rows if r.protocol == DCF})
    deltas = sorted({r.delta for r in rows if r.protocol == CIDC})

    ordering_fail: list[str] = []
    delay_fail: list[str] = []
    lines.append("== CIDC (delta=0) vs DCF per N ==")
    lines.append(f"{'K':>3} {'N':>4} {'W':>4} {'p_col cidc':>11} {'p_col dcf':>11} {'ratio':>8} "
                 f"{'d_c diff us':>12}")
    for k in ks:
        for n in sorted({r.N for r in rows if r.K == k}):
            c = cidc.get((k, n, 0.0))
            for w in windows:
                d = dcf.get((k, n, w))
                if c is None or d is None:
                    warnings.append(f"missing counterpart for K={k} N={n} W={w}")
                    continue
                ratio = c.p_col_mean / d.p_col_mean if d.p_col_mean > 0 else math.nan
                diff = c.d_c_mean_us - d.d_c_mean_us
                lines.append(f"{k:>3} {n:>4} {w:>4} {c.p_col_mean:>11.4g} {d.p_col_mean:>11.4g} "
                             f"{ratio:>8.3g} {diff:>12.4g}")
                gap = d.p_col_mean - c.p_col_mean
                pooled = math.hypot(c.p_col_stderr, d.p_col_stderr)
                need = th.ordering_sigmas * pooled if n >= th.ordering_strict_from_n else 0.0
                if not gap > need:
                    ordering_fail.append(f"K={k} N={n} W={w}: gap {gap:.4g} <= {need:.4g}")
                if not c.saturated and not diff < 0:
                    delay_fail.append(f"K={k} N={n} W={w}: d_c cidc - dcf = {diff:.4g} us")

    bound_viol = [f"K={r.K} N={r.N} delta={r.delta:g}: p_col {r.p_col_mean:.4g} > bound {r.p_col_ub:.4g}"
                  for r in rows if r.protocol == CIDC and r.delta == 0 and r.p_col_ub is not None
                  and r.p_col_mean > r.p_col_ub]
    model_mismatch = []
    for r in rows:
        if r.protocol != CIDC or r.delta != 0 or r.d_c_model_us is None:
            continue
        limit = (th.model_gap_medium if r.N <= th.medium_n
                 else th.model_gap_large if r.N <= th.large_n else None)
        if limit is None:
            continue
        gap = abs(r.d_c_mean_us - r.d_c_model_us) / r.d_c_model_us
        if gap > limit:
            model_mismatch.append(f"K={r.K} N={r.N}: |sim - model|/model = {gap:.3f} > {limit}")

    churn_fail = []
    if len(deltas) > 1:
        for k in ks:
            for n in sorted({r.N for r in rows if r.K == k}):
                seq = [cidc.get((k, n, dl)) for dl in deltas]
                if any(s is None for s in seq):
                    warnings.append(f"missing churn rows for K={k} N={n}")
                    continue
                vals = [s.p_col_mean for s in seq]
                if n >= th.ordering_strict_from_n and not all(a < b for a, b in zip(vals, vals[1:])):
                    churn_fail.append(f"K={k} N={n}: p_col by delta {vals}")

    saturated = [f"{r.protocol} K={r.K} N={r.N}" + (f" W={r.W}" if r.W else "")
                 for r in rows if r.saturated]

    def section(title, items):
        lines.append("")
        lines.append(f"== {title} ({len(items)}) ==")
        lines.extend(items)

    section("collision ordering failures", ordering_fail)
    section("delay ordering failures (unsaturated points)", delay_fail)
    section("bound violations", bound_viol)
    section("model delay mismatches", model_mismatch)
    section("churn ordering failures", churn_fail)
    section("saturated points", saturated)
    section("warnings", warnings)
    lines.append("")
    lines.append("== summary ==")
    for name, items in (("collision ordering", ordering_fail), ("delay ordering", delay_fail),
                        ("bound validity", bound_viol), ("model delay", model_mismatch),
                        ("churn ordering", churn_fail)):
        lines.append(f"{name}: {'PASS' if not items else 'FAIL'}")
    return "\n".join(lines) + "\n"
