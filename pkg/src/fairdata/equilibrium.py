"""User equilibria under fair payments.

A user at level ``l`` receives ``alpha * phi_i`` (users-only fair value) and
pays ``c_i(l)``. This module finds:

* pure Nash equilibria of the finite game, by enumerating per-group level
  counts and searching user assignments with best-response pruning;
* the symmetric mixed equilibrium ``p*(alpha)`` of the binary game with
  identical users, through the expected relative payoff ``gamma(p)``;
* all equilibria of the binary game with two users of different
  sensitivities.

In the binary games ``p`` is the probability of the MORE private level.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .core import EXACT_MAX_USERS, CoalitionUtility, grouped_shapley, shapley_users_only

__all__ = [
    "TIE_TOL",
    "BISECTION_STEPS",
    "PaymentTable",
    "PureEquilibrium",
    "MixedSymmetricStrategy",
    "MixedPair",
    "NeResult",
    "GammaProfile",
    "AssumptionReport",
    "best_response",
    "find_pure_ne",
    "NeSearch",
    "count_values",
    "low_privacy_payment",
    "symmetric_gamma",
    "expected_count_utility",
    "p_star",
    "p_star_array",
    "symmetric_ne_residual",
    "asym_two_player_ne",
    "validate_assumptions",
]

TIE_TOL = 1e-9
BISECTION_STEPS = 80


def _costs(profiles) -> list[tuple[float, ...]]:
    return [tuple(getattr(p, "c", p)) for p in profiles]


def _partition_key(u: CoalitionUtility, rho) -> tuple:
    levels = u.levels
    groups = u.groups or tuple((j,) for j in range(u.n_users))
    return tuple(tuple(sum(1 for j in g if rho[j] == lv) for lv in levels) for g in groups)


class PaymentTable:
    """Users-only fair values at ``alpha = 1``, cached per level-count partition.

    Values depend on a profile only through how many users of each symmetry
    group sit at each level, so one computation serves every profile in the
    same partition.
    """

    def __init__(self, u: CoalitionUtility, *, max_exact: int = EXACT_MAX_USERS):
        if u.levels is None:
            raise ValueError("equilibrium search needs a utility with a finite privacy space")
        self.u = u
        self.levels = u.levels
        self.groups = u.groups or tuple((j,) for j in range(u.n_users))
        self.group_of = u.group_of()
        self.max_exact = max_exact
        self._cache: dict[tuple, dict[tuple[int, float], float]] = {}

    def key(self, rho) -> tuple:
        return _partition_key(self.u, rho)

    def representative(self, key) -> tuple[float, ...]:
        rho = [self.levels[0]] * self.u.n_users
        for g, counts in zip(self.groups, key):
            expanded = [lv for lv, k in zip(self.levels, counts) for _ in range(k)]
            for j, lv in zip(g, expanded):
                rho[j] = lv
        return tuple(rho)

    def type_values(self, key) -> dict[tuple[int, float], float]:
        tv = self._cache.get(key)
        if tv is None:
            rho = self.representative(key)
            if self.u.groups is not None:
                alloc = grouped_shapley(self.u, rho, 1.0)
            else:
                alloc = shapley_users_only(self.u, rho, 1.0, max_exact=self.max_exact)
            tv = {(self.group_of[j], rho[j]): float(alloc.user_values[j]) for j in range(self.u.n_users)}
            self._cache[key] = tv
        return tv

    def user_values(self, rho) -> np.ndarray:
        tv = self.type_values(self.key(rho))
        return np.array([tv[(self.group_of[j], float(rho[j]))] for j in range(self.u.n_users)])

    def value(self, rho, user: int) -> float:
        tv = self.type_values(self.key(rho))
        return tv[(self.group_of[user], float(rho[user]))]


@dataclass(frozen=True)
class PureEquilibrium:
    profile: tuple[float, ...]
    certificate: float
    utility: float


@dataclass(frozen=True)
class MixedSymmetricStrategy:
    """Every user plays the more private level with probability ``p``.

    ``any_p`` marks the degenerate case where every ``p`` is an equilibrium.
    """

    p: float
    any_p: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"probability out of range: {self.p}")


@dataclass(frozen=True)
class MixedPair:
    """Two-player binary-game strategies: probabilities of the more private level."""

    p: float
    q: float
    certificate: float = 0.0


@dataclass
class NeResult:
    alpha: float
    equilibria: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    @property
    def profiles(self) -> list:
        return [e.profile if isinstance(e, PureEquilibrium) else (e.p, e.q) for e in self.equilibria]

    def max_certificate(self) -> float:
        return max((e.certificate for e in self.equilibria), default=0.0)

    def __len__(self) -> int:
        return len(self.equilibria)


def _payoff(payments: PaymentTable, costs, rho, alpha, user) -> float:
    k = payments.levels.index(float(rho[user]))
    return alpha * payments.value(rho, user) - costs[user][k]


def _deviation_payoffs(payments: PaymentTable, costs, rho, alpha, user) -> list[float]:
    out = []
    for lv in payments.levels:
        dev = list(rho)
        dev[user] = lv
        out.append(_payoff(payments, costs, dev, alpha, user))
    return out


def best_response(
    u: CoalitionUtility,
    profiles,
    rho: Sequence[float],
    alpha: float,
    user: int,
    *,
    payments: PaymentTable | None = None,
    tol: float = TIE_TOL,
) -> set[float]:
    """All levels maximising ``alpha * phi_user - c_user`` given the others' levels.

    ``rho[user]`` is ignored. Levels within ``tol`` of the best payoff are
    returned together.
    """
    payments = payments or PaymentTable(u)
    payoffs = _deviation_payoffs(payments, _costs(profiles), rho, alpha, user)
    best = max(payoffs)
    return {lv for lv, x in zip(payments.levels, payoffs) if x >= best - tol}


def certificate(payments: PaymentTable, costs, rho, alpha) -> float:
    """Largest gain any single user gets by deviating from ``rho``."""
    gain = 0.0
    for i in range(len(rho)):
        payoffs = _deviation_payoffs(payments, costs, rho, alpha, i)
        current = payoffs[payments.levels.index(float(rho[i]))]
        gain = max(gain, max(payoffs) - current)
    return gain


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class NeSearch:
    """Pure-equilibrium search over level-count partitions.

    For one partition and one ``alpha`` the payment a user gets at each
    level, and after any deviation, is known from the partition alone; a
    user may hold level ``l`` iff no deviation beats it given their own
    costs. Users of each group are then assigned depth-first, cheapest
    first, pruning as soon as the remaining users cannot fill the remaining
    level counts.
    """

    def __init__(
        self,
        u: CoalitionUtility,
        profiles,
        *,
        payments: PaymentTable | None = None,
        strict: bool = False,
        tol: float = TIE_TOL,
    ):
        self.u = u
        self.payments = payments or PaymentTable(u)
        self.levels = self.payments.levels
        self.groups = self.payments.groups
        self.costs = _costs(profiles)
        if len(self.costs) != u.n_users:
            raise ValueError(f"{len(self.costs)} user profiles for {u.n_users} users")
        for i, c in enumerate(self.costs):
            if len(c) != len(self.levels):
                raise ValueError(f"user {i}: {len(c)} costs for {len(self.levels)} levels")
        self.strict = strict
        self.tol = tol
        # cheapest first, by cost of the top level
        self.order = [sorted(g, key=lambda j: (self.costs[j][-1], j)) for g in self.groups]

    def partitions(self) -> list[tuple]:
        per_group = [list(_compositions(len(g), len(self.levels))) for g in self.groups]
        return [tuple(p) for p in itertools.product(*per_group)]

    def partition_utility(self, key) -> float:
        return self.u(self.payments.representative(key))

    def _moved(self, key, g, src, dst):
        counts = list(key[g])
        counts[src] -= 1
        counts[dst] += 1
        return key[:g] + (tuple(counts),) + key[g + 1 :]

    def acceptable(self, key, alpha) -> list[dict[int, set[int]]]:
        """Per group: user -> level indices the user may hold in this partition."""
        tv = self.payments.type_values(key)
        out = []
        for g, counts in enumerate(key):
            allowed: dict[int, set[int]] = {j: set() for j in self.groups[g]}
            for src, k in enumerate(counts):
                if k == 0:
                    continue
                stay = alpha * tv[(g, self.levels[src])]
                moves = []
                for dst in range(len(self.levels)):
                    if dst != src:
                        tv2 = self.payments.type_values(self._moved(key, g, src, dst))
                        moves.append((dst, alpha * tv2[(g, self.levels[dst])]))
                for j in self.groups[g]:
                    c = self.costs[j]
                    here = stay - c[src]
                    if self.strict:
                        ok = all(here > pay - c[dst] + self.tol for dst, pay in moves)
                    else:
                        ok = all(here >= pay - c[dst] - self.tol for dst, pay in moves)
                    if ok:
                        allowed[j].add(src)
            out.append(allowed)
        return out

    def _assign_group(self, order, counts, allowed, first_only) -> list[dict[int, int]]:
        found: list[dict[int, int]] = []
        remaining = list(counts)
        current: dict[int, int] = {}

        def feasible(pos):
            rest = order[pos:]
            return all(
                remaining[lv] <= sum(1 for j in rest if lv in allowed[j]) for lv in range(len(remaining))
            )

        def dfs(pos):
            if first_only and found:
                return
            if pos == len(order):
                found.append(dict(current))
                return
            j = order[pos]
            for lv in sorted(allowed[j]):
                if remaining[lv] == 0:
                    continue
                remaining[lv] -= 1
                current[j] = lv
                if feasible(pos + 1):
                    dfs(pos + 1)
                del current[j]
                remaining[lv] += 1

        if feasible(0):
            dfs(0)
        return found

    def equilibria_in(self, key, alpha, *, first_only=False) -> list[tuple[float, ...]]:
        allowed = self.acceptable(key, alpha)
        per_group = []
        for g, counts in enumerate(key):
            assigned = self._assign_group(self.order[g], counts, allowed[g], first_only)
            if not assigned:
                return []
            per_group.append(assigned)
        out = []
        for combo in itertools.product(*per_group):
            rho = [0.0] * self.u.n_users
            for part in combo:
                for j, lv in part.items():
                    rho[j] = self.levels[lv]
            out.append(tuple(rho))
            if first_only:
                break
        return sorted(out)

    def exists(self, key, alpha) -> bool:
        return bool(self.equilibria_in(key, alpha, first_only=True))

    def certify(self, rho, alpha) -> float:
        return certificate(self.payments, self.costs, rho, alpha)


def find_pure_ne(
    u: CoalitionUtility,
    profiles,
    alpha: float,
    *,
    strict: bool = False,
    tol: float = TIE_TOL,
    payments: PaymentTable | None = None,
) -> NeResult:
    """Every pure Nash equilibrium at payment fraction ``alpha``, with certificates.

    Weak equilibria (ties within ``tol``) are included unless ``strict``.
    """
    search = NeSearch(u, profiles, payments=payments, strict=strict, tol=tol)
    result = NeResult(alpha)
    for key in search.partitions():
        for rho in search.equilibria_in(key, alpha):
            result.equilibria.append(PureEquilibrium(rho, search.certify(rho, alpha), u(rho)))
    result.equilibria.sort(key=lambda e: e.profile)
    return result


# --- symmetric binary game -------------------------------------------------


def count_values(count_utility, n_users: int) -> np.ndarray:
    """``U(k)`` for ``k = 0..N`` low-privacy users, from a callable or a sequence."""
    if callable(count_utility):
        vals = np.array([float(count_utility(k)) for k in range(n_users + 1)])
    else:
        vals = np.asarray(count_utility, dtype=float)
    if vals.shape != (n_users + 1,):
        raise ValueError(f"count utility needs {n_users + 1} values, got shape {vals.shape}")
    return vals


def low_privacy_payment(count_utility, n_users: int) -> np.ndarray:
    """Fair value (``alpha = 1``) of a low-privacy user when ``k`` others are low.

    The private level is the zero level, so private users are null players
    and only the low-privacy users inside a coalition count.
    """
    U = count_values(count_utility, n_users)
    n = n_users
    out = np.zeros(n)
    for k in range(n):
        terms = []
        for s in range(n):
            inv = 1.0 / (n * math.comb(n - 1, s))
            for j in range(max(0, s - (n - 1 - k)), min(k, s) + 1):
                ways = math.comb(k, j) * math.comb(n - 1 - k, s - j)
                terms.append(ways * inv * (U[j + 1] - U[j]))
        out[k] = math.fsum(terms)
    return out


def _bernstein(values: np.ndarray, p):
    """``sum_k C(m, k) (1-p)^k p^(m-k) values[k]`` for scalar or array ``p``."""
    m = len(values) - 1
    k = np.arange(m + 1)
    coef = np.array([math.comb(m, j) for j in k], dtype=float) * values
    p = np.asarray(p, dtype=float)
    q = 1.0 - p
    out = np.sum(coef * q[..., None] ** k * p[..., None] ** (m - k), axis=-1)
    return float(out) if out.ndim == 0 else out


def symmetric_gamma(count_utility, n_users: int, p: float) -> float:
    """Expected payment gain from switching to the low-privacy level.

    The other ``N-1`` users each stay private with probability ``p``; the
    number of low-privacy others is Binomial(N-1, 1-p). A private user's fair
    value is zero in the count model.
    """
    return _bernstein(low_privacy_payment(count_utility, n_users), p)


def expected_count_utility(count_utility, n_users: int, p):
    """``E[U]`` when every user is private with probability ``p``."""
    return _bernstein(count_values(count_utility, n_users), p)


@dataclass
class GammaProfile:
    """Expected relative payoff ``gamma(p)`` with its range on ``[0, 1]``.

    ``func`` must accept scalars and numpy arrays.
    """

    func: Callable
    gamma_min: float
    gamma_max: float

    def __call__(self, p):
        return self.func(p)

    @property
    def flat(self) -> bool:
        return self.gamma_max - self.gamma_min <= 1e-15

    def inverse(self, target):
        """Smallest ``p`` with ``gamma(p) = target`` by bisection (``gamma`` nondecreasing).

        Targets outside ``[gamma_min, gamma_max]`` clip to 0 or 1.
        """
        target = np.asarray(target, dtype=float)
        lo = np.zeros_like(target)
        hi = np.ones_like(target)
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            below = np.asarray(self.func(mid)) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = np.where(target <= self.gamma_min, 0.0, np.where(target >= self.gamma_max, 1.0, hi))
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_count_utility(cls, count_utility, n_users: int, *, validate: bool = True) -> "GammaProfile":
        phi_low = low_privacy_payment(count_utility, n_users)

        def gamma(p):
            return _bernstein(phi_low, p)

        if validate:
            report = validate_assumptions(count_utility, n_users)
            if not report.monotone:
                raise ValueError("count utility is not monotone: " + "; ".join(report.violations))
            vals = gamma(np.linspace(0.0, 1.0, 201))
            if np.any(vals < -1e-12) or np.any(np.diff(vals) < -1e-12):
                raise ValueError("gamma(p) is negative or decreasing for this utility")
        return cls(gamma, gamma(0.0), gamma(1.0))

    @classmethod
    def from_payment_matrix(cls, phi: np.ndarray) -> "GammaProfile":
        """Two-player form from one player's payment table ``phi[own, other]``.

        Index 0 is the private level, 1 the low-privacy level.
        """
        phi = np.asarray(phi, dtype=float)
        gain_if_other_private = phi[1, 0] - phi[0, 0]
        gain_if_other_low = phi[1, 1] - phi[0, 1]

        def gamma(q):
            return q * gain_if_other_private + (1.0 - q) * gain_if_other_low

        return cls(gamma, min(gamma(0.0), gamma(1.0)), max(gamma(0.0), gamma(1.0)))


def p_star_array(gamma: GammaProfile, c: float, alphas: np.ndarray) -> np.ndarray:
    """Vectorised ``p*(alpha)``; degenerate cases take the same representative as ``p_star``."""
    alphas = np.asarray(alphas, dtype=float)
    if c == 0.0:
        return np.zeros_like(alphas)
    with np.errstate(divide="ignore"):
        target = np.where(alphas > 0, c / np.where(alphas > 0, alphas, 1.0), np.inf)
    return np.where(target > gamma.gamma_max, 1.0, gamma.inverse(np.minimum(target, gamma.gamma_max)))


def p_star(gamma: GammaProfile, c: float, alpha: float) -> MixedSymmetricStrategy:
    """Symmetric equilibrium strategy at payment fraction ``alpha``.

    ``p = 1`` when ``alpha < c/gamma_max``, ``p = 0`` when ``alpha > c/gamma_min``,
    and ``gamma^-1(c/alpha)`` in between.
    """
    if c < 0:
        raise ValueError("sensitivity c must be non-negative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        # free participation: any p is an equilibrium; report the platform's favourite
        return MixedSymmetricStrategy(0.0, any_p=True) if c == 0.0 else MixedSymmetricStrategy(1.0)
    target = c / alpha
    if gamma.flat and abs(target - gamma.gamma_max) <= 1e-15:
        return MixedSymmetricStrategy(0.0, any_p=True)
    if target > gamma.gamma_max:
        return MixedSymmetricStrategy(1.0)
    if target < gamma.gamma_min:
        return MixedSymmetricStrategy(0.0)
    return MixedSymmetricStrategy(gamma.inverse(target))


def symmetric_ne_residual(count_utility, n_users: int, p: float, c: float, alpha: float) -> float:
    """Zero exactly at symmetric equilibria: both unilateral gains, clipped and squared."""
    g = symmetric_gamma(count_utility, n_users, p)
    return _residual(g, p, c, alpha)


def _residual(gamma_p: float, p: float, c: float, alpha: float) -> float:
    slack = c - alpha * gamma_p
    return max((1.0 - p) * slack, 0.0) ** 2 + max(-p * slack, 0.0) ** 2


@dataclass
class AssumptionReport:
    monotone: bool
    diminishing: bool
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.monotone and self.diminishing


def validate_assumptions(count_utility, n_users: int) -> AssumptionReport:
    """Strict monotonicity and strictly diminishing increments of ``U(k)``."""
    U = count_values(count_utility, n_users)
    inc = np.diff(U)
    violations = []
    for k, d in enumerate(inc):
        if not d > 0:
            violations.append(f"U({k + 1}) - U({k}) = {d:.6g} is not positive")
    for k in range(len(inc) - 1):
        if not inc[k + 1] < inc[k]:
            violations.append(f"increment at {k + 1} ({inc[k + 1]:.6g}) does not drop below {inc[k]:.6g}")
    monotone = bool(np.all(inc > 0))
    diminishing = bool(np.all(np.diff(inc) < 0))
    return AssumptionReport(monotone, diminishing, violations)


# --- two players with different sensitivities ------------------------------

_BANDS = ("below", "inside", "above")
# rows: user 2 band, columns: user 1 band; entries are (p, q)
_TABLE = {
    ("below", "below"): [(1.0, 1.0)],
    ("below", "inside"): [(0.0, 1.0)],
    ("below", "above"): [(0.0, 1.0)],
    ("inside", "below"): [(1.0, 0.0)],
    ("inside", "inside"): [(1.0, 0.0), (0.0, 1.0), "mixed"],
    ("inside", "above"): [(0.0, 1.0)],
    ("above", "below"): [(1.0, 0.0)],
    ("above", "inside"): [(1.0, 0.0)],
    ("above", "above"): [(0.0, 0.0)],
}


def _bands(c: float, alpha: float, gamma: GammaProfile, tol: float) -> list[str]:
    hi, lo = alpha * gamma.gamma_max, alpha * gamma.gamma_min
    out = []
    if c > hi - tol:
        out.append("below")
    if lo - tol <= c <= hi + tol:
        out.append("inside")
    if c < lo + tol:
        out.append("above")
    return out


def _pair_gain(p, q, c1, c2, alpha, gamma) -> float:
    # u1 = p * (c1 - alpha*gamma(q)) + const, likewise for user 2
    k1 = c1 - alpha * gamma(q)
    k2 = c2 - alpha * gamma(p)
    return float(max(max(k1, 0.0) - k1 * p, max(k2, 0.0) - k2 * q))


def asym_two_player_ne(c1: float, c2: float, alpha: float, gamma: GammaProfile, *, tol: float = TIE_TOL) -> NeResult:
    """Equilibria of the binary game with sensitivities ``c1`` and ``c2``.

    Each user's band (payment below, inside or above its participation
    window) selects a cell of the closed-form table; exact ties take the
    union of the neighbouring cells. Every candidate is re-checked by best
    response and failures are moved to ``rejected``.
    """
    result = NeResult(alpha)
    seen = set()
    for row in _bands(c2, alpha, gamma, tol):
        for col in _bands(c1, alpha, gamma, tol):
            for cand in _TABLE[(row, col)]:
                if cand == "mixed":
                    if alpha == 0.0:
                        continue
                    # user 1 is indifferent only when gamma(q) = c1/alpha, and vice versa
                    cand = (gamma.inverse(c2 / alpha), gamma.inverse(c1 / alpha))
                if cand in seen:
                    continue
                seen.add(cand)
                gain = _pair_gain(cand[0], cand[1], c1, c2, alpha, gamma)
                entry = MixedPair(cand[0], cand[1], gain)
                (result.equilibria if gain <= tol else result.rejected).append(entry)
    result.equilibria.sort(key=lambda e: (e.p, e.q))
    return result
