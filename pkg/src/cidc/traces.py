"""Per-round trace files and invariant replay over them.

A round directory holds ``packets.csv`` (one row per generated packet, in
generation order), ``slots.jsonl`` (one record per busy slot or slot with an
arrival) and ``meta.json`` (parameters and engine counters).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import CIDC, COLLIDED, EXPIRED, OUTCOME_CODES, OUTCOME_NAMES, SENT, RoundResult
from .mac import TraceError, collision_violations
from .params import ProtocolParams

PACKET_COLUMNS = [
    "protocol", "vehicle", "gen_mini", "entry", "outcome", "start_mini", "d_o_us", "d_c_us",
    "arrival_slot", "target", "estimate", "partners",
]
META_FIELDS = ["ratio_max", "ratio_violations", "ratio_checks", "upsilon_sum", "n_slots"]
PARAM_FIELDS = [
    "lam", "n_vehicles", "m_param", "t_slot", "t_tx", "t_difs", "w_window",
    "delta_churn", "n_cycles", "n_rounds", "rng_seed",
]


def _us(x: float) -> str:
    return "" if np.isnan(x) else repr(round(float(x) * 1e6, 6))


def write_round(result: RoundResult, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    d_o, d_c = result.delays()
    with open(out / "packets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PACKET_COLUMNS)
        for i in range(result.n_packets):
            start = int(result.start_mini[i])
            w.writerow([
                result.protocol, int(result.vehicle[i]), int(result.gen_mini[i]), int(result.entry[i]),
                OUTCOME_NAMES[int(result.outcome[i])], start if start >= 0 else "",
                _us(d_o[i]), _us(d_c[i]), int(result.arrival_slot[i]), int(result.target[i]),
                int(result.estimate[i]), int(result.partners[i]),
            ])
    with open(out / "slots.jsonl", "w") as fh:
        for j in range(len(result.tr_slot)):
            fh.write(json.dumps({
                "slot": int(result.tr_slot[j]), "mini": int(result.tr_mini[j]),
                "h": int(result.tr_h[j]), "n_o": int(result.tr_no[j]),
                "c": int(result.tr_c[j]), "b_max": int(result.tr_bmax[j]),
                "arrivals": int(result.tr_arrivals[j]), "expired": int(result.tr_expired[j]),
            }) + "\n")
    meta = {
        "protocol": result.protocol,
        "params": {k: getattr(result.params, k) for k in PARAM_FIELDS},
        **{k: getattr(result, k) for k in META_FIELDS},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out


def read_round(directory: str | Path) -> RoundResult:
    """Rebuild a round result from its trace files (per-cycle sums are left empty)."""
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    params = ProtocolParams(**meta["params"])
    with open(src / "packets.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise TraceError(f"{src / 'packets.csv'} has no packets")

    def col(name, default=-1):
        return np.array([int(r[name]) if r[name] != "" else default for r in rows], dtype=np.int64)

    outcome = np.array([OUTCOME_CODES[r["outcome"]] for r in rows], dtype=np.int8)
    start = col("start_mini")
    target = col("target")
    slots = [json.loads(line) for line in (src / "slots.jsonl").read_text().splitlines() if line]

    def tr(key):
        return np.array([s[key] for s in slots], dtype=np.int64)

    return RoundResult(
        protocol=meta["protocol"], params=params,
        vehicle=col("vehicle"), gen_mini=col("gen_mini"), arrival_slot=col("arrival_slot"),
        entry=col("entry"), estimate=col("estimate"), true_count=np.full(len(rows), -1),
        target=target, tx_slot=np.where(start >= 0, target, -1), start_mini=start,
        outcome=outcome, partners=col("partners"),
        tr_slot=tr("slot"), tr_mini=tr("mini"), tr_h=tr("h").astype(np.int8), tr_no=tr("n_o"),
        tr_c=tr("c"), tr_bmax=tr("b_max"), tr_arrivals=tr("arrivals"), tr_expired=tr("expired"),
        cycle_c_sum=np.zeros(0), cycle_slots=np.zeros(0, dtype=np.int64),
        **{k: meta[k] for k in META_FIELDS},
    )


@dataclass
class ReplayReport:
    packets: int = 0
    collisions_checked: int = 0
    failures: dict[str, list[str]] = field(default_factory=dict)

    def fail(self, check: str, message: str) -> None:
        self.failures.setdefault(check, []).append(message)

    @property
    def ok(self) -> bool:
        return not self.failures

    def as_dict(self) -> dict:
        return asdict(self)


def _next_same_vehicle(result: RoundResult) -> np.ndarray:
    """Index of each packet's successor from the same vehicle, -1 for the last one."""
    nxt = np.full(result.n_packets, -1, dtype=np.int64)
    last: dict[int, int] = {}
    for pid in range(result.n_packets - 1, -1, -1):
        v = int(result.vehicle[pid])
        nxt[pid] = last.get(v, -1)
        last[v] = pid
    return nxt


def replay(result: RoundResult, check_collisions: bool | None = None) -> ReplayReport:
    """Re-derive the trace invariants from packet and slot records.

    Checks packet conservation, the slot-to-slot contention balance, the
    contention count and maximum counter per recorded slot, the packet-to-slot
    bound at every arrival (CIDC only), expiry consistency, and, for CIDC
    without churn, the collision condition for every colliding pair.
    """
    p = result.params
    M = p.m_param
    rep = ReplayReport(packets=result.n_packets)
    outcome = result.outcome
    counts = {name: int((outcome == code).sum()) for code, name in OUTCOME_NAMES.items()}
    if counts["pending"] or counts["sent"] + counts["collided"] + counts["expired"] != result.n_packets:
        rep.fail("conservation", f"outcome counts {counts} do not cover {result.n_packets} packets")
    if result.n_packets != p.n_vehicles * p.n_cycles:
        rep.fail("conservation", f"{result.n_packets} packets, expected {p.n_vehicles * p.n_cycles}")

    # slot-to-slot balance: c(next) = c + arrivals - expired - transmitted
    c_next = 0
    for j in range(len(result.tr_slot)):
        if result.tr_c[j] != c_next:
            rep.fail("balance", f"slot {result.tr_slot[j]}: c={result.tr_c[j]}, expected {c_next}")
            break
        c_next = int(result.tr_c[j] + result.tr_arrivals[j] - result.tr_expired[j] - result.tr_no[j])
    if c_next != 0:
        rep.fail("balance", f"channel ends with {c_next} contending packets")

    # contention count and b_max from packet lifetimes
    nxt = _next_same_vehicle(result)
    arr = result.arrival_slot
    end = result.target.copy()
    exp = outcome == EXPIRED
    if (exp & (nxt < 0)).any():
        rep.fail("expiry", "an expired packet has no successor that replaced it")
    end[exp] = arr[np.where(nxt[exp] >= 0, nxt[exp], 0)]
    slots = result.tr_slot
    order = np.argsort(arr, kind="stable")
    arr_sorted = arr[order]
    for j in range(len(slots)):
        k = int(slots[j])
        hi = np.searchsorted(arr_sorted, k, side="left")
        alive = order[:hi]
        alive = alive[end[alive] >= k]
        if len(alive) != result.tr_c[j]:
            rep.fail("occupancy", f"slot {k}: {len(alive)} live packets, trace says {result.tr_c[j]}")
            break
        bmax = int((result.target[alive] - k).max()) if len(alive) else 0
        if bmax != result.tr_bmax[j]:
            rep.fail("b_max", f"slot {k}: max counter {bmax}, trace says {result.tr_bmax[j]}")
            break

    # expiry consistency
    for pid in range(result.n_packets):
        n = int(nxt[pid])
        if n < 0:
            continue
        replaced = result.target[pid] > arr[n]
        if replaced != bool(exp[pid]):
            rep.fail("expiry", f"packet {pid}: expired={bool(exp[pid])} but successor arrived in "
                               f"slot {arr[n]} with target {result.target[pid]}")
            break
    for pid in np.flatnonzero(outcome == COLLIDED):
        if result.partners[pid] < 1:
            rep.fail("partners", f"collided packet {pid} lists no partner")
            break
    for pid in np.flatnonzero(outcome == SENT):
        if result.partners[pid] != 0:
            rep.fail("partners", f"sent packet {pid} lists partners")
            break

    # packet-to-slot bound at every arrival
    if result.protocol == CIDC:
        row_of = {int(s): j for j, s in enumerate(slots)}
        seen: dict[int, int] = {}
        for pid in range(result.n_packets):
            k = int(arr[pid])
            j = row_of.get(k)
            if j is None:
                rep.fail("trace", f"arrival slot {k} of packet {pid} missing from slot records")
                break
            prior = seen.get(k, 0)
            seen[k] = prior + 1
            c_k, bmax = int(result.tr_c[j]), int(result.tr_bmax[j])
            den = max(bmax, M * (c_k + prior + 1))
            if M * (c_k + prior + 1) > den:
                rep.fail("ratio", f"packet {pid} in slot {k}: ratio {(c_k + prior + 1) / den:.4f} > 1/M")

    if check_collisions is None:
        check_collisions = result.protocol == CIDC and p.delta_churn == 0
    if check_collisions:
        groups = np.flatnonzero(outcome == COLLIDED)
        rep.collisions_checked = int(len(groups))
        for a, b, w in collision_violations(result):
            rep.fail("collision", f"packets {a},{b}: alpha={w.alpha} tau={w.tau} eta={w.eta}")
    return rep
