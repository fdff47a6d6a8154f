"""Per-vehicle estimation, entry rules and a literal slot-by-slot reference channel.

The reference channel keeps one live back-off counter per packet and steps a
single slot at a time. It is slow but follows the channel rules directly, so
it serves as the oracle for the event-skipping engine and for scripted traces.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import engine
from .engine import CIDC, COLLIDED, DCF, EXPIRED, OUTCOME_NAMES, PENDING, SENT, RoundResult
from .params import ArrivalSchedule, ProtocolParams, draw_offsets


class TraceError(ValueError):
    """A trace or collision event is internally inconsistent."""


# ---------------------------------------------------------------------------
# application-layer view of one vehicle


@dataclass
class VehicleView:
    """What one vehicle knows: neighbor offsets and which messages it heard this cycle."""

    vehicle_id: int
    own_offset: float
    neighbor_offsets: dict[int, float] = field(default_factory=dict)
    heard_this_cycle: set[int] = field(default_factory=set)

    def start_cycle(self) -> None:
        self.heard_this_cycle.clear()

    def hear(self, neighbor: int, offset: float) -> None:
        """Record a received message; an unknown sender's offset is learned from it."""
        if neighbor == self.vehicle_id:
            return
        self.neighbor_offsets[neighbor] = offset
        self.heard_this_cycle.add(neighbor)


def full_views(schedule: ArrivalSchedule) -> list[VehicleView]:
    """Every vehicle knows every other vehicle's offset."""
    offsets = schedule.offsets.tolist()
    n = len(offsets)
    return [
        VehicleView(v, offsets[v], {j: offsets[j] for j in range(n) if j != v})
        for v in range(n)
    ]


def estimate_intensity(view: VehicleView, now_mini: int, cycle_start_mini: int,
                       t_slot: float) -> int:
    """Neighbor messages generated since the cycle start and not yet heard.

    A neighbor's message counts when its offset falls in a mini-slot between
    ``cycle_start_mini`` and ``now_mini`` inclusive. The vehicle's own packet
    is not included.
    """
    elapsed = now_mini - cycle_start_mini
    count = 0
    for j, offset in view.neighbor_offsets.items():
        if j in view.heard_this_cycle:
            continue
        if int(math.floor(offset / t_slot)) <= elapsed:
            count += 1
    return count


def inject_churn(views: list[VehicleView], params: ProtocolParams,
                 rng: np.random.Generator) -> np.ndarray:
    """Forget ``ceil(delta*(N-1)/100)`` random neighbors per vehicle.

    Forgotten neighbors come back once their next message is heard. Returns
    the chosen neighbor ids, one row per vehicle.
    """
    n = len(views)
    count = engine.churn_count(params.delta_churn, n)
    if count == 0:
        return np.zeros((n, 0), dtype=np.int64)
    choices = engine.churn_choices(rng, n, count)
    for view, row in zip(views, choices.tolist()):
        for j in row:
            view.neighbor_offsets.pop(j, None)
            view.heard_this_cycle.discard(j)
    return choices


# ---------------------------------------------------------------------------
# entry rules and per-mini-slot quantities


def entry_point(estimated_existing: int, m_param: int) -> int:
    """Initial back-off counter: M times the contending packets including this one."""
    if m_param < 1:
        raise ValueError(f"m_param must be >= 1, got {m_param}")
    if estimated_existing < 0:
        raise ValueError("estimate must be nonnegative")
    return m_param * (estimated_existing + 1)


def virtual_entry(c_k: int, m_param: int, prior_arrivals: int = 0) -> int:
    """Entry point a packet would get at a mini-slot after ``prior_arrivals`` in-slot arrivals."""
    return m_param * (c_k + prior_arrivals + 1)


def packet_to_slot_ratio(c_k: int, b_max: int, m_param: int,
                         arrivals_through: int = 0, prior_arrivals: int = 0) -> float:
    """Contending packets over the span of slots holding their counters.

    ``arrivals_through`` counts in-slot arrivals up to and including the
    mini-slot, ``prior_arrivals`` those strictly before it. An empty channel
    has ratio 0.
    """
    num = c_k + arrivals_through
    if num == 0:
        return 0.0
    return num / max(b_max, virtual_entry(c_k, m_param, prior_arrivals))


def draw_initial_counter(w_window: int, rng: np.random.Generator) -> int:
    """Uniform DCF back-off counter in 0..W-1."""
    if w_window < 1:
        raise ValueError(f"w_window must be >= 1, got {w_window}")
    return int(rng.integers(0, w_window))


# ---------------------------------------------------------------------------
# reference channel


@dataclass
class ContendingPacket:
    pid: int
    vehicle: int
    counter: int


@dataclass
class ChannelState:
    slot: int = 0
    mini: int = 0
    contending: list[ContendingPacket] = field(default_factory=list)

    @property
    def c_k(self) -> int:
        return len(self.contending)

    @property
    def b_max(self) -> int:
        return max((p.counter for p in self.contending), default=0)

    @property
    def busy_schedule(self) -> dict[int, int]:
        """Future slot index -> number of packets that will transmit in it."""
        out: dict[int, int] = {}
        for p in self.contending:
            t = self.slot + p.counter
            out[t] = out.get(t, 0) + 1
        return dict(sorted(out.items()))

    @property
    def n_o(self) -> int:
        return sum(1 for p in self.contending if p.counter == 0)

    @property
    def h(self) -> int:
        return int(self.n_o > 0)


@dataclass
class Arrival:
    mini: int
    vehicle: int
    pid: int


@dataclass
class ArrivalEvent:
    pid: int
    vehicle: int
    mini: int
    estimate: int
    entry: int
    expired_pid: int  # -1 when no packet was replaced


@dataclass
class SlotEvents:
    slot: int
    start_mini: int
    busy: bool
    n_o: int
    c_k: int
    b_max: int
    transmitted: list[int]
    arrivals: list[ArrivalEvent]
    max_ratio: float
    ratio_violations: int

    @property
    def collided(self) -> bool:
        return self.n_o >= 2


class CidcRule:
    """Entry point M*(estimate + 1); the estimate counts contending packets the vehicle knows of."""

    def __init__(self, m_param: int, views: list[VehicleView] | None = None):
        self.m_param = m_param
        self.views = views

    def __call__(self, state: ChannelState, vehicle: int, busy: bool) -> tuple[int, int]:
        if self.views is None:
            est = state.c_k
        else:
            known = self.views[vehicle].neighbor_offsets
            est = sum(1 for p in state.contending if p.vehicle == vehicle or p.vehicle in known)
        return est, entry_point(est, self.m_param)


class DcfRule:
    """Entry point taken from a stream of uniform counters."""

    def __init__(self, counters: Iterable[int]):
        self.counters = iter(counters)

    def __call__(self, state: ChannelState, vehicle: int, busy: bool) -> tuple[int, int]:
        return state.c_k, int(next(self.counters))


EntryRule = Callable[[ChannelState, int, bool], "tuple[int, int]"]


def advance_slot(state: ChannelState, arrivals: deque, rule: EntryRule, params: ProtocolParams,
                 on_success: Callable[[int], None] | None = None) -> tuple[ChannelState, SlotEvents]:
    """Play one slot: admit arrivals in its mini-slots, transmit, decrement counters.

    ``arrivals`` is a deque of :class:`Arrival` in mini-slot order; the ones
    falling inside this slot are consumed. ``on_success`` is called with each
    vehicle whose packet went through alone.
    """
    K, M = params.k_busy, params.m_param
    k, m = state.slot, state.mini
    c_k, b_max = state.c_k, state.b_max
    busy = any(p.counter == 0 for p in state.contending)
    width = K if busy else 1
    events: list[ArrivalEvent] = []
    max_ratio = packet_to_slot_ratio(c_k, b_max, M)
    violations = 0
    n_arr = 0
    s = m
    while s < m + width:
        here = []
        while arrivals and arrivals[0].mini == s:
            here.append(arrivals.popleft())
        if arrivals and arrivals[0].mini < s:
            raise TraceError(f"arrival at mini-slot {arrivals[0].mini} precedes slot start {m}")
        prior = n_arr
        for a in here:
            expired = -1
            for p in state.contending:
                if p.vehicle == a.vehicle and p.counter > 0:
                    expired = p.pid
                    state.contending.remove(p)
                    break
            est, e = rule(state, a.vehicle, busy)
            counter = e
            if e == 0 and busy:
                counter = 1  # the running slot is already taken
            state.contending.append(ContendingPacket(a.pid, a.vehicle, counter))
            events.append(ArrivalEvent(a.pid, a.vehicle, s, est, e, expired))
            n_arr += 1
            if counter == 0 and not busy:
                # a zero counter seizes the idle slot
                busy = True
                width = K
        ratio = packet_to_slot_ratio(c_k, b_max, M, n_arr, prior)
        if M * (c_k + n_arr) > max(b_max, virtual_entry(c_k, M, prior)):
            violations += 1
        max_ratio = max(max_ratio, ratio)
        s += 1
    tx = [p for p in state.contending if p.counter == 0]
    if on_success is not None and len(tx) == 1:
        on_success(tx[0].vehicle)
    state.contending = [
        ContendingPacket(p.pid, p.vehicle, p.counter - 1) for p in state.contending if p.counter > 0
    ]
    ev = SlotEvents(
        slot=k, start_mini=m, busy=busy, n_o=len(tx), c_k=c_k, b_max=b_max,
        transmitted=[p.pid for p in tx], arrivals=events,
        max_ratio=max_ratio, ratio_violations=violations,
    )
    state.slot = k + 1
    state.mini = m + width
    return state, ev


@dataclass
class PacketRecord:
    pid: int
    vehicle_id: int
    generation: int
    arrival_slot: int
    estimate: int
    entry_point: int
    start_tx: int | None
    outcome: str
    d_o: float | None
    d_c: float | None
    collision_partner_count: int


def run_reference(params: ProtocolParams, schedule: ArrivalSchedule, protocol: str,
                  rng: np.random.Generator | None = None) -> tuple[list[PacketRecord], list[SlotEvents]]:
    """Slot-by-slot simulation of one round, consuming ``rng`` exactly like the engine."""
    minis, owners = schedule.round_arrivals(params.n_cycles)
    pending = deque(Arrival(int(mi), int(v), pid) for pid, (mi, v) in enumerate(zip(minis, owners)))
    n_pk = len(pending)
    N, L = params.n_vehicles, schedule.cycle_minis
    churn = protocol == CIDC and engine.churn_count(params.delta_churn, N) > 0
    views = None
    if protocol == CIDC:
        if churn:
            views = full_views(schedule)
        rule: EntryRule = CidcRule(params.m_param, views)
    elif protocol == DCF:
        rule = DcfRule(rng.integers(0, params.w_window, size=n_pk).tolist())
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    offsets = schedule.offsets.tolist()

    def relearn(v: int) -> None:
        for view in views:
            view.hear(v, offsets[v])

    state = ChannelState()
    slots: list[SlotEvents] = []
    next_boundary = L
    while pending or state.contending:
        if churn:
            while state.mini >= next_boundary and next_boundary <= params.n_cycles * L:
                for view in views:
                    view.neighbor_offsets = {j: offsets[j] for j in range(N) if j != view.vehicle_id}
                    view.start_cycle()
                inject_churn(views, params, rng)
                next_boundary += L
        state, ev = advance_slot(state, pending, rule, params, relearn if churn else None)
        slots.append(ev)

    K, T = params.k_busy, params.t_slot
    info: dict[int, dict] = {}
    for ev in slots:
        for a in ev.arrivals:
            info[a.pid] = {"slot": ev.slot, "est": a.estimate, "entry": a.entry, "start": None,
                           "outcome": PENDING, "partners": 0}
            if a.expired_pid >= 0:
                info[a.expired_pid]["outcome"] = EXPIRED
        for pid in ev.transmitted:
            rec = info[pid]
            rec["start"] = ev.start_mini
            rec["outcome"] = SENT if ev.n_o == 1 else COLLIDED
            rec["partners"] = ev.n_o - 1
    records = []
    for pid in range(n_pk):
        rec = info[pid]
        gen = int(minis[pid])
        start = rec["start"]
        d_o = d_c = None
        if start is not None:
            d_o = (start + K - gen) * T
            d_c = (start - gen) * T + params.t_difs
        records.append(PacketRecord(
            pid=pid, vehicle_id=int(owners[pid]), generation=gen, arrival_slot=rec["slot"],
            estimate=rec["est"], entry_point=rec["entry"], start_tx=start,
            outcome=OUTCOME_NAMES[rec["outcome"]], d_o=d_o, d_c=d_c,
            collision_partner_count=rec["partners"],
        ))
    return records, slots


# ---------------------------------------------------------------------------
# rounds on the fast engine


def records_from_result(result: RoundResult) -> list[PacketRecord]:
    d_o, d_c = result.delays()
    out = []
    for pid in range(result.n_packets):
        start = int(result.start_mini[pid])
        done = start >= 0
        out.append(PacketRecord(
            pid=pid,
            vehicle_id=int(result.vehicle[pid]),
            generation=int(result.gen_mini[pid]),
            arrival_slot=int(result.arrival_slot[pid]),
            estimate=int(result.estimate[pid]),
            entry_point=int(result.entry[pid]),
            start_tx=start if done else None,
            outcome=OUTCOME_NAMES[int(result.outcome[pid])],
            d_o=float(d_o[pid]) if done else None,
            d_c=float(d_c[pid]) if done else None,
            collision_partner_count=int(result.partners[pid]),
        ))
    return out


def run_round_cidc(params: ProtocolParams, rng: np.random.Generator,
                   schedule: ArrivalSchedule | None = None) -> tuple[list[PacketRecord], RoundResult]:
    """One CIDC round; offsets are drawn from ``rng`` unless a schedule is given."""
    if schedule is None:
        schedule = draw_offsets(params, rng)
    result = engine.simulate(params, schedule, CIDC, rng)
    return records_from_result(result), result


def run_round_dcf(params: ProtocolParams, rng: np.random.Generator,
                  schedule: ArrivalSchedule | None = None) -> tuple[list[PacketRecord], RoundResult]:
    """One DCF broadcast round with a single back-off stage."""
    if schedule is None:
        schedule = draw_offsets(params, rng)
    result = engine.simulate(params, schedule, DCF, rng)
    return records_from_result(result), result


# ---------------------------------------------------------------------------
# collision condition


@dataclass(frozen=True)
class CollisionWitness:
    alpha: int
    tau: int
    eta: int


def verify_collision_condition(result: RoundResult, pid_a: int, pid_b: int) -> tuple[bool, CollisionWitness]:
    """Check M*(tau - eta) == alpha for two packets that collided with each other.

    ``alpha`` is the arrival-slot gap, ``eta`` the arrivals after the earlier
    packet up to and including the later one, and ``tau`` the departures in
    between: transmissions in slots [k1, k2) plus packets expired by arrivals
    in the same window.
    """
    n = result.n_packets
    if not (0 <= pid_a < n and 0 <= pid_b < n) or pid_a == pid_b:
        raise TraceError(f"invalid packet pair ({pid_a}, {pid_b})")
    if pid_a > pid_b:
        pid_a, pid_b = pid_b, pid_a
    if (result.outcome[pid_a] != COLLIDED or result.outcome[pid_b] != COLLIDED
            or result.start_mini[pid_a] != result.start_mini[pid_b]):
        raise TraceError(f"packets {pid_a} and {pid_b} did not collide with each other")
    k1 = int(result.arrival_slot[pid_a])
    k2 = int(result.arrival_slot[pid_b])
    g1 = int(result.gen_mini[pid_a])
    g2 = int(result.gen_mini[pid_b])
    alpha = k2 - k1
    eta = pid_b - pid_a
    tx = result.tx_slot
    sent = (tx >= k1) & (tx < k2) & (result.outcome != EXPIRED)
    # a packet expires when its vehicle generates the next one, one cycle later
    expired_at = result.gen_mini + result.params.cycle_minis
    gone = (result.outcome == EXPIRED) & (expired_at > g1) & (expired_at <= g2)
    tau = int(sent.sum() + gone.sum())
    return result.params.m_param * (tau - eta) == alpha, CollisionWitness(alpha, tau, eta)


def collision_groups(result: RoundResult) -> list[np.ndarray]:
    """Packet ids grouped by the busy slot in which they collided."""
    idx = np.flatnonzero(result.outcome == COLLIDED)
    if idx.size == 0:
        return []
    order = idx[np.argsort(result.start_mini[idx], kind="stable")]
    starts = result.start_mini[order]
    cuts = np.flatnonzero(np.diff(starts)) + 1
    return np.split(order, cuts)


def collision_violations(result: RoundResult) -> list[tuple[int, int, CollisionWitness]]:
    """Colliding pairs that break the condition or the slot-gap divisibility."""
    M = result.params.m_param
    bad = []
    for group in collision_groups(result):
        g = sorted(int(p) for p in group)
        for i in range(len(g)):
            for j in range(i + 1, len(g)):
                ok, w = verify_collision_condition(result, g[i], g[j])
                if not ok or w.alpha % M != 0:
                    bad.append((g[i], g[j], w))
    return bad


def witness_from_slots(slots: list[SlotEvents], pid_a: int, pid_b: int,
                       m_param: int) -> tuple[bool, CollisionWitness]:
    """Collision condition computed from reference slot events instead of a round result."""
    order: list[tuple[int, ArrivalEvent]] = [(ev.slot, a) for ev in slots for a in ev.arrivals]
    pos = {a.pid: i for i, (_, a) in enumerate(order)}
    if pid_a not in pos or pid_b not in pos:
        raise TraceError(f"packets {pid_a}, {pid_b} not in trace")
    if pos[pid_a] > pos[pid_b]:
        pid_a, pid_b = pid_b, pid_a
    i, j = pos[pid_a], pos[pid_b]
    k1, k2 = order[i][0], order[j][0]
    later = [a for _, a in order[i + 1: j + 1]]
    eta = len(later)
    expired = sum(1 for a in later if a.expired_pid >= 0)
    sent = sum(ev.n_o for ev in slots if k1 <= ev.slot < k2)
    tau = sent + expired
    return m_param * (tau - eta) == k2 - k1, CollisionWitness(k2 - k1, tau, eta)
