"""Event-skipping slot engine shared by the CIDC and DCF access rules.

A packet that arrives in slot ``k`` with initial counter ``e`` transmits in
slot ``k + e`` because every slot, idle or busy, decrements the counter once.
The engine therefore stores absolute target slots instead of live counters and
jumps over runs of idle slots in which nothing happens.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .params import ArrivalSchedule, ProtocolParams

PENDING, SENT, COLLIDED, EXPIRED = 0, 1, 2, 3
OUTCOME_NAMES = {PENDING: "pending", SENT: "sent", COLLIDED: "collided", EXPIRED: "expired"}
OUTCOME_CODES = {v: k for k, v in OUTCOME_NAMES.items()}

CIDC, DCF = "cidc", "dcf"


@dataclass
class RoundResult:
    """Everything one round produces; packet and trace columns are numpy arrays."""

    protocol: str
    params: ProtocolParams
    # one entry per generated packet, in generation order
    vehicle: np.ndarray
    gen_mini: np.ndarray
    arrival_slot: np.ndarray
    entry: np.ndarray
    estimate: np.ndarray
    true_count: np.ndarray
    target: np.ndarray
    tx_slot: np.ndarray
    start_mini: np.ndarray
    outcome: np.ndarray
    partners: np.ndarray
    # one entry per slot that was busy or saw an arrival
    tr_slot: np.ndarray
    tr_mini: np.ndarray
    tr_h: np.ndarray
    tr_no: np.ndarray
    tr_c: np.ndarray
    tr_bmax: np.ndarray
    tr_arrivals: np.ndarray
    tr_expired: np.ndarray
    # per-cycle slot-averaged contention intensity
    cycle_c_sum: np.ndarray
    cycle_slots: np.ndarray
    ratio_max: float
    ratio_violations: int
    ratio_checks: int
    upsilon_sum: float
    n_slots: int

    @property
    def n_packets(self) -> int:
        return len(self.vehicle)

    def delays(self) -> tuple[np.ndarray, np.ndarray]:
        """(d_o, d_c) in seconds; NaN for expired packets."""
        p = self.params
        d_o = np.full(self.n_packets, np.nan)
        d_c = np.full(self.n_packets, np.nan)
        done = self.start_mini >= 0
        d_o[done] = (self.start_mini[done] + p.k_busy - self.gen_mini[done]) * p.t_slot
        d_c[done] = (self.start_mini[done] - self.gen_mini[done]) * p.t_slot + p.t_difs
        return d_o, d_c


def _harmonic(n: int) -> np.ndarray:
    h = np.zeros(n + 1)
    h[1:] = np.cumsum(1.0 / np.arange(1, n + 1))
    return h


def churn_count(delta: float, n_vehicles: int) -> int:
    """Neighbors replaced per vehicle per cycle, ceil(delta * (N - 1) / 100)."""
    return int(math.ceil(delta * (n_vehicles - 1) / 100.0 - 1e-9))


def churn_choices(rng: np.random.Generator, n_vehicles: int, count: int) -> np.ndarray:
    """Row ``v`` lists ``count`` distinct neighbors of ``v`` drawn uniformly, never ``v`` itself."""
    keys = rng.random((n_vehicles, n_vehicles))
    np.fill_diagonal(keys, 2.0)
    return np.argpartition(keys, count - 1, axis=1)[:, :count]


def simulate(params: ProtocolParams, schedule: ArrivalSchedule, protocol: str,
             rng: np.random.Generator | None = None) -> RoundResult:
    """Run ``params.n_cycles`` message cycles and drain every remaining packet.

    ``rng`` drives the DCF counter draws and the churn choices; it may be None
    for CIDC without churn.
    """
    if protocol not in (CIDC, DCF):
        raise ValueError(f"unknown protocol {protocol!r}")
    K = params.k_busy
    M = params.m_param
    W = params.w_window
    N = params.n_vehicles
    L = schedule.cycle_minis
    n_cycles = params.n_cycles
    is_cidc = protocol == CIDC
    churn = is_cidc and churn_count(params.delta_churn, N) > 0
    if (churn or not is_cidc) and rng is None:
        raise ValueError("an rng is required for DCF or churn runs")

    minis_arr, owners_arr = schedule.round_arrivals(n_cycles)
    minis = minis_arr.tolist()
    owners = owners_arr.tolist()
    n_pk = len(minis)
    INF = 1 << 62
    minis.append(INF)

    arr_slot = [0] * n_pk
    entry = [0] * n_pk
    est_of = [0] * n_pk
    true_of = [0] * n_pk
    target = [-1] * n_pk
    start_mini = [-1] * n_pk
    outcome = [PENDING] * n_pk
    partners = [0] * n_pk

    if not is_cidc:
        # pre-drawn uniform counters, consumed in arrival order
        draws = rng.integers(0, W, size=n_pk).tolist()

    pending_of = [-1] * N
    # contending packets per vehicle; two while an old one is still on air
    owner_count = [0] * N
    pending_owners: set[int] = set()
    sched: dict[int, list[int]] = {}
    heap: list[int] = []
    c = 0
    max_target = -1

    r_churn = churn_count(params.delta_churn, N) if churn else 0
    ones = bytes([1]) * N
    # knows[j][v] == 1 when vehicle v knows the offset of vehicle j
    knows = [bytearray(ones) for _ in range(N)] if churn else []
    next_boundary = L
    last_boundary = n_cycles * L

    tr_slot: list[int] = []
    tr_mini: list[int] = []
    tr_h: list[int] = []
    tr_no: list[int] = []
    tr_c: list[int] = []
    tr_bmax: list[int] = []
    tr_arr: list[int] = []
    tr_exp: list[int] = []

    n_cyc_buckets = n_cycles + 1
    cyc_sum = [0.0] * n_cyc_buckets
    cyc_cnt = [0] * n_cyc_buckets

    H = _harmonic(M * (N + 2) + W + 2)
    ratio_max = 0.0
    violations = 0
    checks = 0
    ups_sum = 0.0
    n_slots = 0

    def account_run(m0: int, n: int, cval: int) -> None:
        # n consecutive idle slots of width 1 starting at mini m0
        while n > 0:
            cyc = m0 // L
            take = min(n, (cyc + 1) * L - m0)
            b = cyc if cyc < n_cyc_buckets else n_cyc_buckets - 1
            cyc_sum[b] += cval * take
            cyc_cnt[b] += take
            m0 += take
            n -= take

    def expire(old: int) -> None:
        nonlocal max_target
        t = target[old]
        lst = sched[t]
        lst.remove(old)
        if not lst:
            del sched[t]
            if t == max_target:
                max_target = max(sched) if sched else -1
        outcome[old] = EXPIRED

    def admit(pid: int, k: int, busy: bool, tx_now: list[int] | None) -> int:
        """Place packet ``pid`` arriving in slot ``k``; returns 1 if it expired its predecessor."""
        nonlocal c, max_target
        v = owners[pid]
        expired = 0
        old = pending_of[v]
        if old >= 0 and target[old] > k:
            expire(old)
            owner_count[v] -= 1
            if not owner_count[v]:
                pending_owners.discard(v)
            c -= 1
            expired = 1
        if is_cidc:
            if churn:
                est = 0
                for j in pending_owners:
                    if j == v or knows[j][v]:
                        est += owner_count[j]
            else:
                est = c
            e = M * (est + 1)
            t = k + e
        else:
            est = c
            e = draws[pid]
            if e == 0:
                if busy:
                    t = k + 1
                else:
                    t = k
            else:
                t = k + e
        est_of[pid] = est
        true_of[pid] = c
        entry[pid] = e
        arr_slot[pid] = k
        target[pid] = t
        pending_of[v] = pid
        owner_count[v] += 1
        pending_owners.add(v)
        c += 1
        if t == k:
            tx_now.append(pid)
        else:
            lst = sched.get(t)
            if lst is None:
                sched[t] = [pid]
                heapq.heappush(heap, t)
            else:
                lst.append(pid)
            if t > max_target:
                max_target = t
        return expired

    def cross_boundaries(at_mini: int) -> None:
        # churn is applied at the first slot starting at or after a cycle boundary
        nonlocal knows, next_boundary
        while at_mini >= next_boundary and next_boundary <= last_boundary:
            # replaced neighbors stay unknown for this cycle only
            knows = [bytearray(ones) for _ in range(N)]
            for v, row in enumerate(churn_choices(rng, N, r_churn).tolist()):
                for j in row:
                    knows[j][v] = 0
            next_boundary += L

    k = 0
    m = 0
    ai = 0
    while True:
        if churn:
            cross_boundaries(m)
        while heap and heap[0] not in sched:
            heapq.heappop(heap)
        nb = heap[0] if heap else INF
        nxt = minis[ai]
        if nb != k:
            if nb == INF and nxt == INF:
                break
            run = nb - k
            if nxt >= m + run:
                # idle run k..nb-1 with no arrivals
                if c:
                    bmax0 = max_target - k
                    E = M * (c + 1)
                    last_b = bmax0 - (run - 1)
                    den = last_b if last_b > E else E
                    r = c / den
                    checks += 1
                    if M * c > den:
                        violations += 1
                    if r > ratio_max:
                        ratio_max = r
                    if is_cidc:
                        j1 = min(max(bmax0 - E, 0), run)
                        ups_sum += c * ((H[bmax0] - H[bmax0 - j1]) + (run - j1) / E)
                    else:
                        ups_sum += c * run / W
                    account_run(m, run, c)
                else:
                    account_run(m, run, 0)
                n_slots += run
                k = nb
                m += run
                continue
            d = nxt - m
            if d > 0:
                if c:
                    bmax0 = max_target - k
                    E = M * (c + 1)
                    last_b = bmax0 - (d - 1)
                    den = last_b if last_b > E else E
                    checks += 1
                    if M * c > den:
                        violations += 1
                    if c / den > ratio_max:
                        ratio_max = c / den
                    if is_cidc:
                        j1 = min(max(bmax0 - E, 0), d)
                        ups_sum += c * ((H[bmax0] - H[bmax0 - j1]) + (d - j1) / E)
                    else:
                        ups_sum += c * d / W
                account_run(m, d, c)
                n_slots += d
                k += d
                m += d
            if churn:
                cross_boundaries(m)
            # slot k starts idle and receives an arrival at its only mini-slot
            c_k = c
            bmax_k = max_target - k if max_target > k else 0
            pid = ai
            ai += 1
            tx_now: list[int] = []
            exp = admit(pid, k, False, tx_now)
            num = c_k + 1
            den = max(bmax_k, M * (c_k + 1))
            checks += 1
            if M * num > den:
                violations += 1
            if num / den > ratio_max:
                ratio_max = num / den
            if not tx_now:
                tr_slot.append(k)
                tr_mini.append(m)
                tr_h.append(0)
                tr_no.append(0)
                tr_c.append(c_k)
                tr_bmax.append(bmax_k)
                tr_arr.append(1)
                tr_exp.append(exp)
                ups_sum += (num / den) if is_cidc else c_k / W
                account_run(m, 1, c_k)
                n_slots += 1
                k += 1
                m += 1
                continue
            # a DCF packet with counter 0 turned the slot busy
            txs = tx_now
            n_arr = 1
            n_exp = exp
        else:
            c_k = c
            bmax_k = max_target - k if max_target > k else 0
            txs = sched.pop(k)
            n_arr = 0
            n_exp = 0
        # busy slot k spanning minis m .. m+K-1
        end = m + K
        E_prev = c_k + n_arr
        last_mini_arrival = 0
        while minis[ai] < end:
            if minis[ai] == end - 1:
                last_mini_arrival = 1
            pid = ai
            ai += 1
            n_exp += admit(pid, k, True, txs)
            n_arr += 1
            num = c_k + n_arr
            den = max(bmax_k, M * (E_prev + 1))
            checks += 1
            if M * num > den:
                violations += 1
            if num / den > ratio_max:
                ratio_max = num / den
            E_prev = c_k + n_arr
        n_o = len(txs)
        status = SENT if n_o == 1 else COLLIDED
        for pid in txs:
            outcome[pid] = status
            partners[pid] = n_o - 1
            start_mini[pid] = m
            v = owners[pid]
            if pending_of[v] == pid:
                pending_of[v] = -1
            owner_count[v] -= 1
            if not owner_count[v]:
                pending_owners.discard(v)
            if churn and status == SENT:
                knows[v] = bytearray(ones)
        c -= n_o
        if max_target <= k:
            max_target = -1
        tr_slot.append(k)
        tr_mini.append(m)
        tr_h.append(1)
        tr_no.append(n_o)
        tr_c.append(c_k)
        tr_bmax.append(bmax_k)
        tr_arr.append(n_arr)
        tr_exp.append(n_exp)
        if is_cidc:
            num = c_k + n_arr
            den = max(bmax_k, M * (c_k + n_arr - last_mini_arrival + 1))
            ups_sum += num / den
        else:
            ups_sum += c_k / W
        cyc = m // L
        b = cyc if cyc < n_cyc_buckets else n_cyc_buckets - 1
        cyc_sum[b] += c_k
        cyc_cnt[b] += 1
        n_slots += 1
        k += 1
        m = end

    i64 = np.int64
    return RoundResult(
        protocol=protocol,
        params=params,
        vehicle=owners_arr.astype(i64),
        gen_mini=minis_arr.astype(i64),
        arrival_slot=np.array(arr_slot, dtype=i64),
        entry=np.array(entry, dtype=i64),
        estimate=np.array(est_of, dtype=i64),
        true_count=np.array(true_of, dtype=i64),
        target=np.array(target, dtype=i64),
        tx_slot=np.where(np.array(start_mini) >= 0, np.array(target, dtype=i64), -1),
        start_mini=np.array(start_mini, dtype=i64),
        outcome=np.array(outcome, dtype=np.int8),
        partners=np.array(partners, dtype=i64),
        tr_slot=np.array(tr_slot, dtype=i64),
        tr_mini=np.array(tr_mini, dtype=i64),
        tr_h=np.array(tr_h, dtype=np.int8),
        tr_no=np.array(tr_no, dtype=i64),
        tr_c=np.array(tr_c, dtype=i64),
        tr_bmax=np.array(tr_bmax, dtype=i64),
        tr_arrivals=np.array(tr_arr, dtype=i64),
        tr_expired=np.array(tr_exp, dtype=i64),
        cycle_c_sum=np.array(cyc_sum[:n_cycles]),
        cycle_slots=np.array(cyc_cnt[:n_cycles], dtype=i64),
        ratio_max=ratio_max,
        ratio_violations=violations,
        ratio_checks=checks,
        upsilon_sum=ups_sum,
        n_slots=n_slots,
    )
