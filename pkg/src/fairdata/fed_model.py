"""Federated mean estimation with a three-level privacy choice.

Level 2 sends a user's local estimate to the platform, level 1 adds it to a
securely averaged pool, level 0 sends nothing. For each user ``i`` the
platform forms ``w0 * pool_mean + sum_j w_j * local_j`` over direct users
and is scored on the expected squared error in estimating that user's mean.

Errors are analytic; only the between-user variance ``s2`` and the mean
within-user variance ``r2`` enter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import CoalitionUtility, PrivacySpace

__all__ = [
    "FED_SPACE",
    "UserProfile",
    "FedParams",
    "WeightScheme",
    "AggregateStats",
    "DegenerateProfileError",
    "aggregate_stats",
    "optimal_weights",
    "weighted_error",
    "emse",
    "fed_utility",
    "as_coalition_utility",
]

FED_SPACE = PrivacySpace((0.0, 1.0, 2.0))


class DegenerateProfileError(ValueError):
    """Nobody shares anything, so estimator weights are undefined."""


@dataclass(frozen=True)
class UserProfile:
    """Sample count, importance weight and per-level privacy cost.

    ``c[k]`` is the cost of choosing the k-th level of the privacy space;
    ``c[0]`` must be 0.
    """

    n: int = 1
    a: float = 1.0
    c: tuple[float, ...] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"sample count must be a positive integer, got {self.n}")
        if not self.a > 0:
            raise ValueError(f"importance weight must be positive, got {self.a}")
        if not self.c or self.c[0] != 0.0:
            raise ValueError("sensitivity at the zero level must be 0")
        if any(not math.isfinite(x) or x < 0 for x in self.c):
            raise ValueError(f"sensitivities must be finite and non-negative: {self.c}")

    def cost(self, level_index: int) -> float:
        return self.c[level_index]


@dataclass(frozen=True)
class FedParams:
    s2: float
    r2: float
    users: tuple[UserProfile, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        if self.s2 < 0:
            raise ValueError("between-user variance s2 must be >= 0")
        if not self.r2 > 0:
            raise ValueError("within-user variance r2 must be > 0")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def prior_error(self) -> float:
        return self.r2 + 2.0 * self.s2


@dataclass(frozen=True)
class WeightScheme:
    """Estimator weights for one target user.

    ``direct`` maps each level-2 user to its weight (the target included
    when it is itself at level 2). ``pool`` lists the level-1 users that
    share ``fed_weight`` equally.
    """

    target: int
    fed_weight: float
    direct: dict[int, float]
    pool: tuple[int, ...]

    def total(self) -> float:
        return self.fed_weight + math.fsum(self.direct.values())

    def per_user(self, n_users: int) -> np.ndarray:
        """Weight placed on each user's local estimate."""
        v = np.zeros(n_users)
        for j in self.pool:
            v[j] = self.fed_weight / len(self.pool)
        for j, w in self.direct.items():
            v[j] = w
        return v


@dataclass(frozen=True)
class AggregateStats:
    n_bar: float | None
    v0: float | None
    v: dict[int, float]
    v_bar: float | None


def _split(rho: Sequence[float]) -> tuple[list[int], list[int]]:
    pool = [j for j, x in enumerate(rho) if x == 1]
    direct = [j for j, x in enumerate(rho) if x == 2]
    if any(x not in (0, 1, 2) for x in rho):
        raise ValueError(f"federated levels must be 0, 1 or 2: {tuple(rho)}")
    return pool, direct


def aggregate_stats(params: FedParams, rho: Sequence[float]) -> AggregateStats:
    pool, direct = _split(rho)
    r2, s2 = params.r2, params.s2
    n_bar = v0 = v_bar = None
    if pool:
        n_bar = len(pool) / math.fsum(1.0 / params.users[j].n for j in pool)
        v0 = r2 / n_bar + s2
    v = {k: r2 / params.users[k].n + s2 for k in direct}
    if direct:
        v_bar = len(direct) / math.fsum(1.0 / x for x in v.values())
    return AggregateStats(n_bar, v0, v, v_bar)


def optimal_weights(params: FedParams, rho: Sequence[float], target: int) -> WeightScheme:
    """Error-minimising weights for estimating ``target``'s mean.

    The three cases follow the target's own level. Everything is written
    with the total precision ``N1/V0 + N2/V_bar`` (each term dropped when its
    pool is empty), which equals the usual ``N1 + N2*V0/V_bar`` denominator
    divided by ``V0`` and stays defined when either pool is empty.
    """
    if len(rho) != params.n_users:
        raise ValueError(f"profile has {len(rho)} entries for {params.n_users} users")
    pool, direct = _split(rho)
    if not pool and not direct:
        raise DegenerateProfileError("all users are at level 0; estimator weights are undefined")
    st = aggregate_stats(params, rho)
    s2 = params.s2
    pool_prec = len(pool) / st.v0 if pool else 0.0
    direct_prec = {k: 1.0 / vk for k, vk in st.v.items()}
    total_prec = pool_prec + math.fsum(direct_prec.values())

    level = rho[target]
    if level == 0:
        fed = pool_prec / total_prec
        dw = {k: p / total_prec for k, p in direct_prec.items()}
    elif level == 1:
        shrink = 1.0 - s2 / st.v0
        fed = (pool_prec + (total_prec - pool_prec) * s2 / st.v0) / total_prec
        dw = {k: p * shrink / total_prec for k, p in direct_prec.items()}
    else:
        v_i = st.v[target]
        shrink = 1.0 - s2 / v_i
        fed = pool_prec * shrink / total_prec
        dw = {k: p * shrink / total_prec for k, p in direct_prec.items()}
        dw[target] += s2 / v_i
    return WeightScheme(target, fed, dw, tuple(pool))


def weighted_error(params: FedParams, target: int, v: Sequence[float]) -> float:
    """Expected squared error of ``sum_j v_j * local_j`` as an estimate of ``target``'s mean.

    ``r2 * sum(v_j**2 / n_j) + s2 * (sum_{j != i} v_j**2 + (sum_{j != i} v_j)**2)``.
    """
    v = np.asarray(v, dtype=float)
    n = np.array([u.n for u in params.users], dtype=float)
    others = np.delete(v, target)
    return float(params.r2 * np.sum(v**2 / n) + params.s2 * (np.sum(others**2) + np.sum(others) ** 2))


def emse(params: FedParams, rho: Sequence[float], target: int) -> float:
    """Expected squared error of the platform's estimate of ``target``'s mean.

    The all-zero profile returns ``r2 + 2*s2`` by convention.
    """
    try:
        scheme = optimal_weights(params, rho, target)
    except DegenerateProfileError:
        return params.prior_error
    return weighted_error(params, target, scheme.per_user(params.n_users))


def fed_utility(params: FedParams, rho: Sequence[float]) -> float:
    """``sum_i a_i * log((r2 + 2*s2) / EMSE_i(rho))``; zero when nobody shares."""
    if all(x == 0 for x in rho):
        return 0.0
    prior = params.prior_error
    return math.fsum(u.a * math.log(prior / emse(params, rho, i)) for i, u in enumerate(params.users))


def symmetry_groups(params: FedParams) -> list[list[int]]:
    """Users with equal ``(n, a)`` are interchangeable in the utility."""
    keyed: dict[tuple, list[int]] = {}
    for j, u in enumerate(params.users):
        keyed.setdefault((u.n, u.a), []).append(j)
    return list(keyed.values())


def as_coalition_utility(params: FedParams) -> CoalitionUtility:
    return CoalitionUtility(
        lambda rho: fed_utility(params, rho),
        params.n_users,
        space=FED_SPACE,
        groups=symmetry_groups(params),
    )
