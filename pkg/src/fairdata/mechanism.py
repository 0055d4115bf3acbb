"""Choosing the payment fraction ``alpha`` under fair payments.

The platform keeps ``(1 - alpha) * U`` at the equilibrium its choice of
``alpha`` induces. Three solvers:

* ``optimize_alpha_grid``: any finite game, pure equilibria, grid over alpha;
* ``symmetric_solver``: identical users on a binary space, mixed symmetric
  equilibrium, three-regime analytic structure;
* ``two_group_mechanism``: two users (or groups) with different sensitivities.

Equilibrium selection inside each alpha is optimistic (the platform picks
its favourite equilibrium) unless ``pessimistic=True``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core import Allocation, CoalitionUtility
from .equilibrium import (
    TIE_TOL,
    GammaProfile,
    MixedPair,
    MixedSymmetricStrategy,
    NeSearch,
    PaymentTable,
    asym_two_player_ne,
    count_values,
    expected_count_utility,
    p_star,
    p_star_array,
    validate_assumptions,
)

__all__ = [
    "DEFAULT_GRID_POINTS",
    "REFINE_GRID_POINTS",
    "MechanismSolution",
    "RegimeBoundaries",
    "alpha_grid",
    "optimize_alpha_grid",
    "symmetric_objective",
    "threshold_sensitivity",
    "symmetric_solver",
    "two_group_mechanism",
]

log = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 401
REFINE_GRID_POINTS = 2001
CTH_TOL = 1e-6


@dataclass
class MechanismSolution:
    alpha_star: float
    equilibrium: object
    platform_net: float
    total_utility: float
    payments: Allocation | None = None
    regime: str | None = None
    certificate: float = 0.0
    landscape: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class RegimeBoundaries:
    gamma_max: float
    gamma_min: float
    c_th: float


def alpha_grid(lo: float = 0.0, hi: float = 1.0, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    if points < 2:
        raise ValueError("an alpha grid needs at least 2 points")
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"alpha grid bounds must satisfy 0 <= lo < hi <= 1, got {lo}, {hi}")
    return np.linspace(lo, hi, points)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("an alpha grid needs at least 2 points")
    if np.any(grid < 0) or np.any(grid > 1) or np.any(np.diff(grid) <= 0):
        raise ValueError("alpha grid must be strictly increasing inside [0, 1]")
    return grid


def optimize_alpha_grid(
    u: CoalitionUtility,
    profiles,
    grid: Sequence[float] | None = None,
    *,
    pessimistic: bool = False,
    strict: bool = False,
    payments: PaymentTable | None = None,
) -> MechanismSolution:
    """Grid search for the platform-optimal ``alpha`` over pure equilibria.

    For every alpha, the equilibrium utility is the best (or worst, with
    ``pessimistic``) ``U`` over partitions that contain a pure equilibrium.
    Ties go to the smaller alpha; the reported profile is the
    lexicographically smallest equilibrium of the winning partition.
    """
    grid = _check_grid(alpha_grid() if grid is None else grid)
    search = NeSearch(u, profiles, payments=payments, strict=strict)
    keys = search.partitions()
    utilities = {key: search.partition_utility(key) for key in keys}
    # best partitions first so the existence check can stop early
    ordered = sorted(keys, key=lambda k: (utilities[k], k), reverse=not pessimistic)

    best = None
    landscape = []
    for alpha in grid:
        chosen = next((key for key in ordered if search.exists(key, alpha)), None)
        if chosen is None:
            raise RuntimeError(f"no pure equilibrium found at alpha={alpha}")
        net = (1.0 - alpha) * utilities[chosen]
        landscape.append((float(alpha), net))
        if best is None or net > best[0] + 1e-12:
            best = (net, float(alpha), chosen)

    net, alpha, key = best
    rho = search.equilibria_in(key, alpha)[0]
    values = alpha * search.payments.user_values(rho)
    total = utilities[key]
    return MechanismSolution(
        alpha_star=alpha,
        equilibrium=rho,
        platform_net=net,
        total_utility=total,
        payments=Allocation(values, total, alpha=alpha),
        certificate=search.certify(rho, alpha),
        landscape=landscape,
    )


def symmetric_objective(count_utility, n_users: int, c: float, gamma: GammaProfile, alpha: float) -> float:
    """Platform share ``(1 - alpha) * U(p*(alpha))`` in the symmetric game."""
    strat = p_star(gamma, c, alpha)
    return (1.0 - alpha) * expected_count_utility(count_utility, n_users, strat.p)


def _band_argmax(count_utility, n_users, c, gamma, lo, hi, points) -> tuple[float, float]:
    """Grid maximum of the symmetric objective on ``[lo, hi]``, polished locally."""
    grid = np.linspace(lo, hi, points)
    vals = (1.0 - grid) * expected_count_utility(count_utility, n_users, p_star_array(gamma, c, grid))
    k = int(np.argmax(vals))
    best_a, best_v = float(grid[k]), float(vals[k])
    if 0 < k < points - 1:
        res = minimize_scalar(
            lambda a: -symmetric_objective(count_utility, n_users, c, gamma, a),
            bounds=(float(grid[k - 1]), float(grid[k + 1])),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if -res.fun > best_v:
            best_a, best_v = float(res.x), float(-res.fun)
    return best_a, best_v


def _endpoint_wins(count_utility, n_users, c, gamma, points) -> bool:
    # (1 - c/gamma_min) U(0) >= (1 - alpha) U(p*(alpha)) for every alpha <= c/gamma_min
    if gamma.gamma_min <= 0:
        return False
    edge = c / gamma.gamma_min
    if edge > 1.0:
        return False
    full = expected_count_utility(count_utility, n_users, 0.0)
    lhs = (1.0 - edge) * full
    lo = min(c / gamma.gamma_max, edge)
    if lo >= edge:
        return True
    _, best = _band_argmax(count_utility, n_users, c, gamma, lo, edge, points)
    # below the band everyone is private and the objective is (1 - alpha) U(1)
    private = expected_count_utility(count_utility, n_users, 1.0)
    return lhs >= best - 1e-12 and lhs >= private - 1e-12


def threshold_sensitivity(count_utility, n_users: int, gamma: GammaProfile, *, points: int = REFINE_GRID_POINTS) -> float:
    """Largest ``c`` for which paying just enough for full participation is optimal.

    Bisection on ``c`` to ``1e-6``; each test is certified on a ``points``-grid
    over alpha with local polishing.
    """
    lo, hi = 0.0, gamma.gamma_max
    if _endpoint_wins(count_utility, n_users, hi, gamma, points):
        return hi
    while hi - lo > CTH_TOL:
        mid = 0.5 * (lo + hi)
        if _endpoint_wins(count_utility, n_users, mid, gamma, points):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def symmetric_solver(
    count_utility,
    n_users: int,
    c: float,
    *,
    points: int = REFINE_GRID_POINTS,
    gamma: GammaProfile | None = None,
    c_th: float | None = None,
) -> tuple[MechanismSolution, RegimeBoundaries]:
    """Optimal ``alpha`` for ``N`` identical users with sensitivity ``c``.

    Regime 1 (``c > gamma_max``): no payment. Regime 3 (``c < c_th``): the
    smallest alpha that makes everyone share, ``c/gamma_min``. Regime 2: the
    objective's maximiser over ``[c/gamma_max, c/gamma_min]``.
    """
    if c < 0:
        raise ValueError("sensitivity c must be non-negative")
    report = validate_assumptions(count_utility, n_users)
    if not report.ok:
        raise ValueError("count utility violates the monotonicity/diminishing-returns assumptions: "
                         + "; ".join(report.violations))
    gamma = gamma or GammaProfile.from_count_utility(count_utility, n_users)
    if c_th is None:
        c_th = threshold_sensitivity(count_utility, n_users, gamma, points=points)
    bounds = RegimeBoundaries(gamma.gamma_max, gamma.gamma_min, c_th)
    U = count_values(count_utility, n_users)

    if c > gamma.gamma_max:
        regime, alpha = "regime1", 0.0
    elif c < c_th:
        regime = "regime3"
        if gamma.gamma_min <= 0:
            log.warning("gamma_min is 0: no payment fraction forces full participation; capping alpha at 1")
            alpha = 1.0
        else:
            alpha = min(1.0, c / gamma.gamma_min)
    else:
        regime = "regime2"
        lo = c / gamma.gamma_max
        hi = 1.0 if gamma.gamma_min <= 0 else min(1.0, c / gamma.gamma_min)
        alpha, best = _band_argmax(count_utility, n_users, c, gamma, lo, hi, points)
        if best <= 0.0:
            alpha = 0.0
        elif abs(alpha - lo) > 1.0 / (points - 1):
            log.info("regime 2 at c=%.6g: objective maximiser %.6g differs from the band's smallest alpha %.6g",
                     c, alpha, lo)

    strat = p_star(gamma, c, alpha)
    expected = expected_count_utility(U, n_users, strat.p)
    net = (1.0 - alpha) * expected
    share = alpha * expected / n_users
    payments = Allocation(np.full(n_users, share), expected, alpha=alpha)
    sol = MechanismSolution(
        alpha_star=alpha,
        equilibrium=strat,
        platform_net=net,
        total_utility=expected,
        payments=payments,
        regime=regime,
        certificate=_symmetric_certificate(gamma, strat, c, alpha),
    )
    return sol, bounds


def _symmetric_certificate(gamma: GammaProfile, strat: MixedSymmetricStrategy, c: float, alpha: float) -> float:
    slack = c - alpha * gamma(strat.p)
    return max((1.0 - strat.p) * slack, 0.0) ** 2 + max(-strat.p * slack, 0.0) ** 2


def two_group_mechanism(
    c1: float,
    c2: float,
    grid: Sequence[float],
    utility: np.ndarray,
    phi1: np.ndarray,
    phi2: np.ndarray,
    *,
    pessimistic: bool = False,
    tol: float = TIE_TOL,
) -> MechanismSolution:
    """Optimal ``alpha`` when two groups with sensitivities ``c1``, ``c2`` play the binary game.

    ``utility``, ``phi1`` and ``phi2`` are 2x2 tables indexed
    ``[group-1 level, group-2 level]`` with index 0 the private level;
    ``phi*`` are the fair values at ``alpha = 1``. The platform keeps
    ``(1 - alpha) * E[U]``; the reported payments are the expected
    ``alpha * phi`` for each group.
    """
    grid = _check_grid(grid)
    utility, phi1, phi2 = (np.asarray(x, dtype=float) for x in (utility, phi1, phi2))
    gamma = GammaProfile.from_payment_matrix(phi1)
    gamma2 = GammaProfile.from_payment_matrix(phi2.T)
    if abs(gamma.gamma_min - gamma2.gamma_min) > 1e-12 or abs(gamma.gamma_max - gamma2.gamma_max) > 1e-12:
        raise ValueError("the two groups must have equal marginal contributions")

    def mix(x):
        return np.array([x, 1.0 - x])

    best = None
    landscape = []
    for alpha in grid:
        ne = asym_two_player_ne(c1, c2, float(alpha), gamma, tol=tol)
        if not ne.equilibria:
            raise RuntimeError(f"no equilibrium at alpha={alpha}")
        scored = [(float(mix(e.p) @ utility @ mix(e.q)), e) for e in ne.equilibria]
        total, eq = (min if pessimistic else max)(scored, key=lambda t: (t[0], -t[1].p, -t[1].q))
        net = (1.0 - alpha) * total
        landscape.append((float(alpha), net))
        if best is None or net > best[0] + 1e-12:
            best = (net, float(alpha), eq, total)

    net, alpha, eq, total = best
    p1, p2 = mix(eq.p), mix(eq.q)
    pay = np.array([alpha * p1 @ phi1 @ p2, alpha * p1 @ phi2 @ p2])
    return MechanismSolution(
        alpha_star=alpha,
        equilibrium=MixedPair(eq.p, eq.q, eq.certificate),
        platform_net=net,
        total_utility=total,
        payments=Allocation(pay, total, alpha=alpha),
        certificate=eq.certificate,
        landscape=landscape,
    )
