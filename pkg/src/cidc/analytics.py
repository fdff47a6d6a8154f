"""Steady-state models of the contention-intensity MAC.

Covers the packet-to-slot ratio and saturation threshold, the one-slot Markov
chain of the contention intensity, the delay fixed point with its small/large-N
approximations, the numeric collision probability and its closed-form bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import optimize, stats

from .params import ParameterError, ProtocolParams


class BeyondSaturation(ArithmeticError):
    """The load admits no steady state; the model does not apply."""


class NumericFailure(ArithmeticError):
    """An iterative or algebraic evaluation did not produce a valid answer."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class AmbiguityError(NumericFailure):
    """The stationary distribution is not unique."""


@dataclass
class SteadyState:
    upsilon_s: float
    n_s: float
    c_s: float
    d_o: float
    d_c: float
    p_ck0: float
    p_col: float
    p_col_ub: float
    n_sat: float
    c_dist: np.ndarray


class DelaySolution(NamedTuple):
    c_s: float
    d_o: float
    p_ck0: float


def _load(params: ProtocolParams) -> float:
    return params.lam * params.n_vehicles * params.t_slot


def steady_ratio(n_s: float, p_ck0: float, params: ProtocolParams) -> float:
    """Expected packet-to-slot ratio in steady state."""
    if not 0 <= p_ck0 < 1:
        raise ParameterError(f"p_ck0 must lie in [0, 1), got {p_ck0}")
    b1 = _load(params)
    den = n_s - b1 * (params.k_busy - 1)
    if den <= 0:
        raise BeyondSaturation(
            f"n_s={n_s} does not exceed lam*N*(K-1)*T_s={b1 * (params.k_busy - 1):.6g}"
        )
    return b1 / ((1.0 - p_ck0) * den)


def saturation_threshold(n_s: float, p_ck0: float, params: ProtocolParams) -> float:
    """Real-valued vehicle count at which the steady ratio reaches 1/M."""
    if not 0 <= p_ck0 < 1:
        raise ParameterError(f"p_ck0 must lie in [0, 1), got {p_ck0}")
    per_vehicle = params.lam * (params.m_param / (1.0 - p_ck0) + params.k_busy - 1) * params.t_slot
    return n_s / per_vehicle


def arrival_kernels(params: ProtocolParams) -> tuple[np.ndarray, np.ndarray]:
    """Binomial arrival-count pmfs over 0..N for an idle and a busy slot."""
    n = params.n_vehicles
    q_idle = params.lam * params.t_slot
    q_busy = params.lam * params.k_busy * params.t_slot
    if q_busy >= 1:
        raise ParameterError("lam * K * T_s must be < 1")
    x = np.arange(n + 1)
    return stats.binom.pmf(x, n, q_idle), stats.binom.pmf(x, n, q_busy)


def transition_matrix(params: ProtocolParams, upsilon_s: float, p_col: float) -> np.ndarray:
    """Column-stochastic one-slot transition matrix of c(k) over states 0..N.

    ``P[i, j]`` is the probability of moving from ``c(k) = j`` to ``c(k+1) = i``.
    Every slot is busy with probability ``upsilon_s``. Transitions that would
    leave 0..N are clipped to the nearest boundary state.
    """
    if not 0 <= upsilon_s <= 1:
        raise ParameterError(f"upsilon_s must lie in [0, 1], got {upsilon_s}")
    if not 0 <= p_col <= 1:
        raise ParameterError(f"p_col must lie in [0, 1], got {p_col}")
    pi, pb = arrival_kernels(params)
    n = params.n_vehicles
    size = n + 1
    P = np.zeros((size, size))
    cols = np.broadcast_to(np.arange(size)[None, :], (size, size))
    # shifted[x, j] = j + x: state reached from j with x arrivals before departures
    shifted = np.arange(size)[:, None] + np.arange(size)[None, :]
    for drop, weight in ((0, (1.0 - upsilon_s) * pi),
                         (1, upsilon_s * (1.0 - p_col) * pb),
                         (2, upsilon_s * p_col * pb)):
        rows = np.clip(shifted - drop, 0, n)
        np.add.at(P, (rows, cols), np.broadcast_to(weight[:, None], (size, size)))
    return P / P.sum(axis=0, keepdims=True)


def steady_distribution(matrix: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Stationary vector of a column-stochastic matrix.

    One balance equation is replaced by the normalization constraint and the
    resulting square system is solved directly.
    """
    P = np.asarray(matrix, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValueError("matrix must be square")
    A = P - np.eye(n)
    if n > 1:
        sv = np.linalg.svd(A, compute_uv=False)
        rank = int((sv > max(n, 1) * np.finfo(float).eps * max(sv[0], 1.0)).sum())
        if rank < n - 1:
            raise AmbiguityError(
                f"null space of P - I has dimension {n - rank}", residual=float(sv[-2])
            )
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        p = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise AmbiguityError(f"singular balance system: {exc}") from exc
    if p.min() < -tol:
        raise NumericFailure("stationary vector has negative entries", residual=float(-p.min()))
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    residual = float(np.abs(P @ p - p).max())
    if residual > tol:
        raise NumericFailure("stationary residual above tolerance", residual=residual)
    return p


def _delay_equation(c: float, params: ProtocolParams) -> float:
    n = params.n_vehicles
    K, M, T = params.k_busy, params.m_param, params.t_slot
    p0 = (1.0 - c / n) ** n
    d_o = (c + 1.0 - (1.0 - p0) / 2.0) * K * T + (M * (c + 1.0) - c) * T
    return n * params.lam * d_o - c


def _overall_delay(c: float, p0: float, params: ProtocolParams) -> float:
    K, M, T = params.k_busy, params.m_param, params.t_slot
    return (c + 1.0 - (1.0 - p0) / 2.0) * K * T + (M * (c + 1.0) - c) * T


def solve_delay_system(params: ProtocolParams) -> DelaySolution:
    """Average contention intensity, overall delay and P(c(k) = 0) at the fixed point.

    The residual ``g(c) = N*lam*d_o(c) - c`` is convex in ``c`` and positive at
    zero, so the operating point is its smallest root in (0, N). No root means
    the load is beyond saturation.
    """
    n = params.n_vehicles
    g = lambda c: _delay_equation(c, params)  # noqa: E731
    if g(n) <= 0:
        lo, hi = 0.0, float(n)
    else:
        res = optimize.minimize_scalar(g, bounds=(0.0, float(n)), method="bounded",
                                       options={"xatol": 1e-12})
        if res.fun > 0:
            raise BeyondSaturation(
                f"no contention intensity in (0, {n}) keeps the delay below 1/lam"
            )
        lo, hi = 0.0, float(res.x)
    c_s = optimize.brentq(g, lo, hi, xtol=1e-300, rtol=1e-12, maxiter=500)
    p0 = (1.0 - c_s / n) ** n
    d_o = _overall_delay(c_s, p0, params)
    if d_o >= 1.0 / params.lam:
        raise BeyondSaturation("overall delay reaches the message period")
    return DelaySolution(c_s, d_o, p0)


def contention_delay(d_o: float, params: ProtocolParams) -> float:
    """Delay until the transmission starts, from the overall delay."""
    d_c = d_o - params.k_busy * params.t_slot + params.t_difs
    if d_c < 0:
        raise ParameterError(f"overall delay {d_o} is shorter than one transmission")
    return d_c


def approx_cs(params: ProtocolParams, regime: str) -> float:
    """Small-N ("small_n") or large-N ("large_n") closed form for c_s."""
    b = _load(params)
    K, M = params.k_busy, params.m_param
    den = 1.0 - b * (K + M - 1)
    if den <= 0:
        raise BeyondSaturation("N*lam*(K+M-1)*T_s >= 1")
    if regime == "small_n":
        return b * (K + M) / den
    if regime == "large_n":
        return b * (K / 2.0 + M) / den
    raise ValueError(f"unknown regime {regime!r}")


def collision_upper_bound(params: ProtocolParams, p_ck0: float) -> float:
    """Closed-form upper bound on the collision probability."""
    if not 0 <= p_ck0 < 1:
        raise ParameterError(f"p_ck0 must lie in [0, 1), got {p_ck0}")
    n, K, T, lam = params.n_vehicles, params.k_busy, params.t_slot, params.lam
    if lam * K * T >= 1:
        raise ParameterError("lam * K * T_s must be < 1")
    b1 = lam * n * T
    bk1 = lam * n * (K - 1) * T
    a1 = (1.0 - p_ck0) * (1.0 - (1.0 - lam * T) ** n)
    ak = (1.0 - p_ck0) * (1.0 - (1.0 - lam * K * T) ** n)
    s = a1 + 1.0 + bk1
    disc = s * s / 4.0 + b1 * (ak - a1) / (1.0 - p_ck0) - (a1 + 1.0) * bk1
    if disc < 0:
        raise NumericFailure("negative discriminant in the collision bound", residual=disc)
    return math.sqrt(disc) + s / 2.0 - 1.0


def forward_collision_sum(params: ProtocolParams, upsilon_s: float, c_dist: np.ndarray) -> float:
    """Collision probability from the forward-collision decomposition.

    Transmissions over ``alpha`` slots are Binomial(alpha, upsilon_s); arrivals
    over the same span are Binomial(N, lam*alpha*T_bar) with T_bar the mean slot
    length; the two are taken as independent. ``P(c1')`` is read as
    ``P(c(k) = c1' + 1)`` because c1 counts the target packet itself.
    """
    n, M, K, T, lam = params.n_vehicles, params.m_param, params.k_busy, params.t_slot, params.lam
    t_bar = (1.0 - upsilon_s) * T + upsilon_s * K * T
    p_arrival_slot = ((1.0 - upsilon_s) * (1.0 - (1.0 - lam * T) ** n)
                      + upsilon_s * (1.0 - (1.0 - lam * K * T) ** n))
    weights = np.zeros(n + 1)  # weights[c'] = P(c(k) = c' + 1)
    weights[: n] = c_dist[1:]
    tails = np.cumsum(weights[::-1])[::-1]
    betas = np.arange(1, n + 1)
    betas = betas[tails[betas] >= 1e-300]
    if betas.size == 0:
        return 0.0
    taus = np.arange(n + 1)[None, :]
    alpha = (M * betas)[:, None]
    p_t = stats.binom.pmf(taus, alpha, upsilon_s)
    q = np.minimum(1.0, lam * alpha * t_bar)
    p_a = stats.binom.pmf(taus - betas[:, None], n, q)
    term = p_t * p_a
    term[taus < betas[:, None]] = 0.0
    # inner[beta, c'] = sum_{tau=beta}^{c'} term[beta, tau]
    inner = np.cumsum(term, axis=1)
    inner[taus < betas[:, None]] = 0.0
    total = float((inner * weights[None, :]).sum())
    return min(1.0, 2.0 * p_arrival_slot * total)


class NumericCollision(NamedTuple):
    p_col: float
    upsilon_s: float
    n_s: float
    c_dist: np.ndarray
    iterations: int


def collision_probability_numeric(params: ProtocolParams, tol: float = 1e-8,
                                  max_iter: int = 10_000, damping: float = 0.5) -> NumericCollision:
    """Jointly solve for p_col, upsilon_s, n_s and the c(k) distribution."""
    p_ck0 = solve_delay_system(params).p_ck0
    p_col, n_s = 0.0, 1.0
    step = float("inf")
    for it in range(1, max_iter + 1):
        ups = steady_ratio(n_s, p_ck0, params)
        if ups > 1:
            raise BeyondSaturation(f"steady ratio {ups:.4g} exceeds 1")
        c_dist = steady_distribution(transition_matrix(params, ups, p_col))
        p_ck0 = float(c_dist[0])
        if p_ck0 >= 1:
            p_ck0 = 1.0 - 1e-15
        target = forward_collision_sum(params, ups, c_dist)
        step = abs(target - p_col)
        p_col = (1.0 - damping) * p_col + damping * target
        n_s = 1.0 + p_col
        if step < tol:
            return NumericCollision(p_col, ups, n_s, c_dist, it)
    raise NumericFailure(f"collision fixed point did not converge in {max_iter} iterations",
                         residual=step)


def steady_state(params: ProtocolParams) -> SteadyState:
    """All model outputs for one parameter point (raises BeyondSaturation)."""
    sol = solve_delay_system(params)
    num = collision_probability_numeric(params)
    p0 = sol.p_ck0
    return SteadyState(
        upsilon_s=num.upsilon_s,
        n_s=num.n_s,
        c_s=sol.c_s,
        d_o=sol.d_o,
        d_c=contention_delay(sol.d_o, params),
        p_ck0=p0,
        p_col=num.p_col,
        p_col_ub=collision_upper_bound(params, p0),
        n_sat=saturation_threshold(num.n_s, p0, params),
        c_dist=num.c_dist,
    )
