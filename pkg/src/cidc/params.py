"""Scenario constants, slot/mini-slot arithmetic and periodic arrival schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class ParameterError(ValueError):
    """Raised when a scenario is internally inconsistent."""


def derive_k(t_tx: float, t_difs: float, t_slot: float, rtol: float = 1e-9) -> int:
    """Number of mini-slots occupied by one busy slot, (t_tx + t_difs) / t_slot.

    The quotient must be an integer up to a relative tolerance ``rtol``.
    """
    if t_slot <= 0 or t_tx <= 0 or t_difs < 0:
        raise ParameterError(
            f"durations must be positive: t_tx={t_tx!r}, t_difs={t_difs!r}, t_slot={t_slot!r}"
        )
    ratio = (t_tx + t_difs) / t_slot
    k = round(ratio)
    if k < 1 or abs(ratio - k) > rtol * ratio:
        raise ParameterError(
            f"(t_tx + t_difs) / t_slot is not an integer: t_tx={t_tx!r}, "
            f"t_difs={t_difs!r}, t_slot={t_slot!r} give {ratio!r}"
        )
    return int(k)


@dataclass(frozen=True)
class ProtocolParams:
    lam: float = 10.0
    n_vehicles: int = 100
    m_param: int = 2
    t_slot: float = 13e-6
    t_tx: float = 254e-6
    t_difs: float = 58e-6
    w_window: int = 64
    delta_churn: float = 0.0
    n_cycles: int = 160
    n_rounds: int = 10
    rng_seed: int = 0
    k_busy: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "k_busy", derive_k(self.t_tx, self.t_difs, self.t_slot))
        if self.m_param < 1:
            raise ParameterError(f"m_param must be >= 1, got {self.m_param}")
        if self.n_vehicles < 1:
            raise ParameterError(f"n_vehicles must be >= 1, got {self.n_vehicles}")
        if not self.lam > 0:
            raise ParameterError(f"lam must be positive, got {self.lam}")
        if not 0 <= self.delta_churn <= 100:
            raise ParameterError(f"delta_churn must lie in [0, 100], got {self.delta_churn}")
        if self.lam * self.t_slot >= 1:
            raise ParameterError("lam * t_slot must be < 1 (one message per mini-slot at most)")
        if self.w_window < 1:
            raise ParameterError(f"w_window must be >= 1, got {self.w_window}")
        if self.n_cycles < 1 or self.n_rounds < 1:
            raise ParameterError("n_cycles and n_rounds must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise ParameterError("rng_seed must be an unsigned 64-bit integer")

    @property
    def cycle_minis(self) -> int:
        """Whole mini-slots in one message cycle, floor((1/lam) / t_slot)."""
        return int(math.floor(1.0 / (self.lam * self.t_slot) + 1e-9))

    def with_(self, **changes) -> "ProtocolParams":
        changes.pop("k_busy", None)
        return replace(self, **changes)


@dataclass(frozen=True)
class TimeIndex:
    """Absolute slot ``slot`` and 1-based mini-slot ``mini`` inside it."""

    slot: int
    mini: int = 1

    def check(self, busy: bool, k_busy: int) -> None:
        upper = k_busy if busy else 1
        if not 1 <= self.mini <= upper:
            raise ParameterError(
                f"mini-slot {self.mini} outside 1..{upper} for a {'busy' if busy else 'idle'} slot"
            )


@dataclass(frozen=True)
class ArrivalSchedule:
    """Fixed per-vehicle offsets and their mini-slot positions inside a cycle.

    ``cycle_slots[i]`` is the 0-based mini-slot (within every cycle) at which
    vehicle ``i`` generates its message; the global mini-slot of the message
    in cycle ``c`` is ``c * cycle_minis + cycle_slots[i]``.
    """

    offsets: np.ndarray
    cycle_slots: np.ndarray
    cycle_minis: int

    @property
    def n_vehicles(self) -> int:
        return len(self.cycle_slots)

    def arrivals_in_window(self, from_mini: int, to_mini: int) -> list[tuple[int, int]]:
        """All (vehicle, global mini-slot) arrivals with from_mini <= index <= to_mini."""
        if from_mini > to_mini:
            raise ValueError("from_mini must not exceed to_mini")
        L = self.cycle_minis
        order = np.argsort(self.cycle_slots, kind="stable")
        out = []
        for cyc in range(max(from_mini, 0) // L, to_mini // L + 1):
            for v in order:
                idx = cyc * L + int(self.cycle_slots[v])
                if from_mini <= idx <= to_mini:
                    out.append((int(v), idx))
        return out

    def round_arrivals(self, n_cycles: int) -> tuple[np.ndarray, np.ndarray]:
        """Sorted global arrival mini-slots and owners for ``n_cycles`` cycles."""
        order = np.argsort(self.cycle_slots, kind="stable")
        base = self.cycle_slots[order].astype(np.int64)
        cyc = np.arange(n_cycles, dtype=np.int64)[:, None] * self.cycle_minis
        minis = (cyc + base[None, :]).ravel()
        owners = np.tile(order.astype(np.int64), n_cycles)
        return minis, owners


def draw_offsets(params: ProtocolParams, rng: np.random.Generator) -> ArrivalSchedule:
    """Uniform offsets in [0, 1/lam), redrawn until every vehicle has its own mini-slot."""
    L = params.cycle_minis
    n = params.n_vehicles
    if n > L:
        raise ParameterError(f"{n} vehicles cannot occupy distinct mini-slots of a {L}-slot cycle")
    period = 1.0 / params.lam
    offsets = np.empty(n)
    slots = np.empty(n, dtype=np.int64)
    taken: set[int] = set()
    for i in range(n):
        while True:
            sigma = rng.uniform(0.0, period)
            q = int(math.floor(sigma / params.t_slot))
            # the sliver [L * t_slot, 1/lam) has no whole mini-slot
            if q < L and q not in taken:
                break
        taken.add(q)
        offsets[i] = sigma
        slots[i] = q
    return ArrivalSchedule(offsets=offsets, cycle_slots=slots, cycle_minis=L)
