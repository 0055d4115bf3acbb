"""Fair allocation of utility generated from private data.

Two allocations are provided:

* ``shapley_with_platform`` treats the platform as an extra coalition member
  whose absence zeroes the utility. Users and platform share the whole
  utility.
* ``shapley_users_only`` values users among themselves. Payments add up to a
  fraction ``alpha`` of the utility and the platform keeps the rest.

Both are exact subset sums. ``grouped_shapley`` computes the same numbers
when users fall into declared symmetry groups, by summing over per-group
subset counts instead of all ``2**N`` subsets.

Coalitions are encoded through the privacy vector itself: a user outside the
coalition ``S`` is moved to the zero level, so ``U(rho_S)`` is simply the
utility evaluated at the restricted vector.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

__all__ = [
    "EXACT_MAX_USERS",
    "AXIOM_TOL",
    "PrivacySpace",
    "CoalitionUtility",
    "TabulatedUtility",
    "Allocation",
    "DimensionError",
    "TooLargeError",
    "SymmetryError",
    "restrict",
    "shapley_with_platform",
    "shapley_users_only",
    "grouped_shapley",
]

EXACT_MAX_USERS = 20
AXIOM_TOL = 1e-9

Level = float


class DimensionError(ValueError):
    """Privacy vector length does not match the utility's user count."""


class TooLargeError(ValueError):
    """Exact subset enumeration requested for too many users."""


class SymmetryError(ValueError):
    """A declared symmetry group is not honoured by the utility."""

    def __init__(self, group: Sequence[int], message: str):
        self.group = tuple(group)
        super().__init__(message)


@dataclass(frozen=True)
class PrivacySpace:
    """Ordered set of privacy levels; ``levels[0]`` is the no-sharing level.

    ``math.inf`` stands for the top level "no privacy at all".
    """

    levels: tuple[Level, ...]

    def __post_init__(self):
        levels = tuple(float(x) for x in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 2:
            raise ValueError("a privacy space needs at least 2 levels")
        if levels[0] != 0.0:
            raise ValueError("the first privacy level must be the zero level")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"privacy levels must be strictly increasing: {levels}")
        if any(x < 0 or math.isnan(x) for x in levels):
            raise ValueError("privacy levels must be non-negative")

    @property
    def zero(self) -> Level:
        return self.levels[0]

    @property
    def top(self) -> Level:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)

    def __contains__(self, level) -> bool:
        return float(level) in self.levels

    def index(self, level: Level) -> int:
        return self.levels.index(float(level))

    def validate(self, rho: Sequence[Level]) -> tuple[Level, ...]:
        out = tuple(float(x) for x in rho)
        for i, x in enumerate(out):
            if x not in self.levels:
                raise ValueError(f"user {i}: level {x} is not in {self.levels}")
        return out


def restrict(rho: Sequence[Level], members: Iterable[int], zero: Level = 0.0) -> tuple[Level, ...]:
    """``rho_S``: entries outside ``members`` set to the zero level."""
    keep = set(members)
    return tuple(x if i in keep else zero for i, x in enumerate(rho))


class CoalitionUtility:
    """Platform utility ``U(rho)`` with memoised evaluation.

    ``groups`` optionally partitions the users so that permuting levels
    inside a group never changes ``U``. Evaluations are cached by a canonical
    key in which levels are sorted within each group, so equal-by-symmetry
    profiles share one cached float.
    """

    def __init__(
        self,
        func: Callable[[tuple[Level, ...]], float],
        n_users: int,
        *,
        space: PrivacySpace | None = None,
        groups: Sequence[Sequence[int]] | None = None,
        zero: Level = 0.0,
    ):
        if n_users < 1:
            raise ValueError("need at least one user")
        self._func = func
        self.n_users = int(n_users)
        self.space = space
        self.zero = space.zero if space is not None else float(zero)
        self.groups: tuple[tuple[int, ...], ...] | None = None
        if groups is not None:
            self.groups = _check_partition(groups, self.n_users)
        self._cache: dict[tuple, float] = {}
        self._symmetry_checked = False

    @property
    def levels(self) -> tuple[Level, ...] | None:
        return None if self.space is None else self.space.levels

    def canonical(self, rho: Sequence[Level]) -> tuple[Level, ...]:
        rho = tuple(float(x) for x in rho)
        if self.groups is None:
            return rho
        out = list(rho)
        for g in self.groups:
            for pos, level in zip(g, sorted(rho[j] for j in g)):
                out[pos] = level
        return tuple(out)

    def __call__(self, rho: Sequence[Level]) -> float:
        if len(rho) != self.n_users:
            raise DimensionError(f"privacy vector has {len(rho)} entries, utility expects {self.n_users}")
        key = self.canonical(rho)
        value = self._cache.get(key)
        if value is None:
            value = float(self._func(key))
            self._cache[key] = value
        return value

    def clear_cache(self) -> None:
        self._cache.clear()

    def group_of(self) -> list[int]:
        """Group index per user (singletons when no groups are declared)."""
        if self.groups is None:
            return list(range(self.n_users))
        out = [0] * self.n_users
        for k, g in enumerate(self.groups):
            for j in g:
                out[j] = k
        return out

    def __add__(self, other: "CoalitionUtility") -> "CoalitionUtility":
        if other.n_users != self.n_users:
            raise DimensionError("cannot add utilities over different user counts")
        return CoalitionUtility(
            lambda rho: self(rho) + other(rho),
            self.n_users,
            space=self.space,
            zero=self.zero,
        )

    def check_symmetry(self, *, trials: int = 16, seed: int = 0, tol: float = 1e-12) -> None:
        """Randomised swap test of the declared groups.

        Raises ``SymmetryError`` naming the first group whose swap changes
        the raw evaluator output.
        """
        if self.groups is None:
            return
        rng = np.random.default_rng(seed)
        levels = self.levels if self.levels is not None else (self.zero, 1.0)
        for g in self.groups:
            if len(g) < 2:
                continue
            for _ in range(trials):
                rho = [levels[k] for k in rng.integers(0, len(levels), size=self.n_users)]
                a, b = rng.choice(g, size=2, replace=False)
                if rho[a] == rho[b]:
                    rho[a] = levels[(levels.index(rho[a]) + 1) % len(levels)]
                swapped = list(rho)
                swapped[a], swapped[b] = rho[b], rho[a]
                u1 = float(self._func(tuple(rho)))
                u2 = float(self._func(tuple(swapped)))
                if abs(u1 - u2) > tol * max(1.0, abs(u1), abs(u2)):
                    raise SymmetryError(
                        g,
                        f"symmetry group {list(g)} violated: swapping users {a} and {b} "
                        f"changes U from {u1!r} to {u2!r}",
                    )
        self._symmetry_checked = True


class TabulatedUtility(CoalitionUtility):
    """Utility stored densely over ``space.levels ** N``.

    ``table`` is an array of shape ``(|levels|,) * N`` indexed by level
    positions, e.g. ``table[i1, i2]`` for two users.
    """

    def __init__(self, space: PrivacySpace, table, *, groups=None):
        arr = np.asarray(table, dtype=float)
        n = arr.ndim
        if arr.shape != (len(space),) * n:
            raise DimensionError(f"table shape {arr.shape} does not match {len(space)} levels")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tabulated utility must be finite")
        self.table = arr
        index = {lv: k for k, lv in enumerate(space.levels)}

        def lookup(rho):
            return arr[tuple(index[x] for x in rho)]

        super().__init__(lookup, n, space=space, groups=groups)

    def __add__(self, other):
        if isinstance(other, TabulatedUtility) and other.table.shape == self.table.shape:
            return TabulatedUtility(self.space, self.table + other.table)
        return super().__add__(other)


@dataclass
class Allocation:
    """Fair payments for one privacy profile.

    ``platform_value`` is set only for the platform-as-member allocation;
    ``alpha`` only for the users-only allocation.
    """

    user_values: np.ndarray
    total_utility: float
    platform_value: float | None = None
    alpha: float | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_values)

    def paid(self) -> float:
        return math.fsum(self.user_values)

    def efficiency_gap(self, base_utility: float = 0.0) -> float:
        """Signed gap in the efficiency (or pseudo-efficiency) identity."""
        if self.platform_value is not None:
            return self.platform_value + self.paid() - self.total_utility
        alpha = 1.0 if self.alpha is None else self.alpha
        return self.paid() - alpha * (self.total_utility - base_utility)


def _check_partition(groups, n):
    groups = tuple(tuple(int(j) for j in g) for g in groups)
    seen = sorted(j for g in groups for j in g)
    if seen != list(range(n)):
        raise ValueError(f"symmetry groups must partition users 0..{n - 1}, got {groups}")
    if any(len(g) == 0 for g in groups):
        raise ValueError("empty symmetry group")
    return groups


def _prepare(u: CoalitionUtility, rho) -> tuple[Level, ...]:
    if len(rho) != u.n_users:
        raise DimensionError(f"privacy vector has {len(rho)} entries, utility expects {u.n_users}")
    if u.space is not None:
        return u.space.validate(rho)
    return tuple(float(x) for x in rho)


def _subset_values(u: CoalitionUtility, rho: tuple[Level, ...]) -> np.ndarray:
    n = len(rho)
    values = np.empty(1 << n)
    zero = u.zero
    for mask in range(1 << n):
        vec = tuple(rho[i] if (mask >> i) & 1 else zero for i in range(n))
        values[mask] = u(vec)
    return values


def _popcounts(n: int) -> np.ndarray:
    counts = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        counts[1 << i : 1 << (i + 1)] = counts[: 1 << i] + 1
    return counts


def _weighted_marginals(values, popcount, n, i, weight: Callable[[int], float]) -> float:
    # fsum per coalition size keeps the result independent of user labels
    all_masks = np.arange(1 << n)
    bit = 1 << i
    without = all_masks[(all_masks & bit) == 0]
    diff = values[without | bit] - values[without]
    sizes = popcount[without]
    parts = []
    for s in range(n):
        terms = diff[sizes == s]
        if terms.size:
            parts.append(math.fsum(terms) * weight(s))
    return math.fsum(parts)


def _check_exact_size(u: CoalitionUtility, max_exact: int):
    if u.n_users > max_exact:
        raise TooLargeError(
            f"{u.n_users} users is too large for exact mode (cap {max_exact}); "
            "declare symmetry groups or raise max_exact"
        )


def shapley_with_platform(
    u: CoalitionUtility,
    rho: Sequence[Level],
    z: int = 1,
    *,
    max_exact: int = EXACT_MAX_USERS,
) -> Allocation:
    """Split ``U(z, rho)`` between the platform and the users.

    The platform is a distinguished coalition member: any coalition without
    it is worth zero. With ``z == 0`` every value is zero.
    """
    rho = _prepare(u, rho)
    n = u.n_users
    if z not in (0, 1):
        raise ValueError("platform participation flag must be 0 or 1")
    if z == 0:
        return Allocation(np.zeros(n), 0.0, platform_value=0.0)
    if n > max_exact:
        if u.groups is None:
            _check_exact_size(u, max_exact)
        return _grouped(u, rho, mode="platform")

    values = _subset_values(u, rho)
    popcount = _popcounts(n)
    by_size = defaultdict(list)
    for mask, s in enumerate(popcount):
        by_size[int(s)].append(values[mask])
    platform = math.fsum(math.fsum(v) / math.comb(n, s) for s, v in by_size.items()) / (n + 1)

    users = np.array(
        [
            _weighted_marginals(values, popcount, n, i, lambda s: 1.0 / ((n + 1) * math.comb(n, s + 1)))
            for i in range(n)
        ]
    )
    return Allocation(users, float(values[-1]), platform_value=platform)


def shapley_users_only(
    u: CoalitionUtility,
    rho: Sequence[Level],
    alpha: float = 1.0,
    *,
    max_exact: int = EXACT_MAX_USERS,
) -> Allocation:
    """Users-only fair values scaled by the payment fraction ``alpha``.

    Payments sum to ``alpha * (U(rho) - U(0))``; utilities in this package
    satisfy ``U(0) = 0`` so this is ``alpha * U(rho)``.
    """
    alpha = _check_alpha(alpha)
    rho = _prepare(u, rho)
    n = u.n_users
    if n > max_exact:
        if u.groups is None:
            _check_exact_size(u, max_exact)
        return grouped_shapley(u, rho, alpha)

    values = _subset_values(u, rho)
    popcount = _popcounts(n)
    base = np.array(
        [_weighted_marginals(values, popcount, n, i, lambda s: 1.0 / (n * math.comb(n - 1, s))) for i in range(n)]
    )
    return Allocation(alpha * base, float(values[-1]), alpha=alpha)


def grouped_shapley(u: CoalitionUtility, rho: Sequence[Level], alpha: float = 1.0) -> Allocation:
    """Users-only fair values using the declared symmetry groups.

    Sums over how many users of each (group, level) type join a coalition,
    weighted by binomial counts, so the cost depends on the number of type
    configurations rather than on ``2**N``.
    """
    alpha = _check_alpha(alpha)
    if u.groups is None:
        raise ValueError("grouped_shapley needs a utility with symmetry groups")
    rho = _prepare(u, rho)
    if not u._symmetry_checked:
        u.check_symmetry()
    alloc = _grouped(u, rho, mode="users")
    alloc.user_values = alpha * alloc.user_values
    alloc.alpha = alpha
    return alloc


def _check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def _grouped(u: CoalitionUtility, rho: tuple[Level, ...], mode: str) -> Allocation:
    n = u.n_users
    group_of = u.group_of()
    members: dict[Hashable, list[int]] = defaultdict(list)
    for j in range(n):
        members[(group_of[j], rho[j])].append(j)
    types = sorted(members)

    def coalition(counts):
        vec = [u.zero] * n
        for t, k in zip(types, counts):
            for j in members[t][:k]:
                vec[j] = rho[j]
        return tuple(vec)

    # U depends on a coalition only through its per-type counts
    by_counts: dict[tuple[int, ...], float] = {}

    def u_of(counts):
        v = by_counts.get(counts)
        if v is None:
            v = by_counts[counts] = u(coalition(counts))
        return v

    def configurations(sizes):
        for counts in itertools.product(*(range(m + 1) for m in sizes)):
            mult = 1
            for m, k in zip(sizes, counts):
                mult *= math.comb(m, k)
            yield counts, mult, sum(counts)

    user_values = np.zeros(n)
    for ti, t in enumerate(types):
        sizes = [len(members[s]) - (1 if s == t else 0) for s in types]
        terms = []
        for counts, mult, size in configurations(sizes):
            with_i = counts[:ti] + (counts[ti] + 1,) + counts[ti + 1 :]
            diff = u_of(with_i) - u_of(counts)
            if mode == "users":
                weight = mult / (n * math.comb(n - 1, size))
            else:
                weight = mult / ((n + 1) * math.comb(n, size + 1))
            terms.append(diff * weight)
        value = math.fsum(terms)
        for j in members[t]:
            user_values[j] = value

    total = u(rho)
    if mode == "users":
        return Allocation(user_values, total)

    sizes = [len(members[s]) for s in types]
    terms = [
        u_of(counts) * (mult / ((n + 1) * math.comb(n, size))) for counts, mult, size in configurations(sizes)
    ]
    return Allocation(user_values, total, platform_value=math.fsum(terms))
