"""Two-user mean estimation under heterogeneous epsilon-DP.

Each user holds ``X_i in {-1/2, +1/2}`` with ``P(X_i = 1/2) = p`` and
``p ~ Unif(0, 1)``; the target is ``mu = p - 1/2``. The platform releases a
linear-Laplace estimate ``w . X + Z`` with ``Z ~ Laplace(1/eta)``. Every
quantity below is the closed-form Bayes risk of the best such estimator, or
an affine transform of it.

Levels are ``0`` (share nothing) and ``eps`` (possibly ``math.inf``). The
``1/eps**2`` terms vanish naturally at infinity, so no special cases are
needed there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Allocation, PrivacySpace, TabulatedUtility, shapley_users_only, shapley_with_platform

__all__ = [
    "PRIOR_RISK",
    "RISK_SCALE",
    "RISK_OFFSET",
    "DpExampleParams",
    "EstimatorSpec",
    "RiskTable",
    "bayes_risk",
    "risk_table",
    "optimal_estimator",
    "estimator_risk",
    "utility_matrix",
    "fair_matrices",
]

PRIOR_RISK = 1.0 / 12.0
# U = RISK_SCALE * r + RISK_OFFSET, pinned by U(0, 0) = 0 and sup U = 1
RISK_SCALE = -24.0
RISK_OFFSET = 2.0


@dataclass(frozen=True)
class DpExampleParams:
    eps_prime: float = math.inf

    def __post_init__(self):
        eps = float(self.eps_prime)
        if not eps > 0:
            raise ValueError(f"eps_prime must be positive, got {self.eps_prime}")
        object.__setattr__(self, "eps_prime", eps)

    @property
    def space(self) -> PrivacySpace:
        return PrivacySpace((0.0, self.eps_prime))

    @property
    def inv_eps2(self) -> float:
        return 1.0 / self.eps_prime**2


@dataclass(frozen=True)
class EstimatorSpec:
    """Linear-Laplace estimator ``weights . X + Laplace(1/eta)``.

    ``eta = inf`` means no noise is added.
    """

    weights: tuple[float, ...]
    eta: float

    @property
    def noise_scale(self) -> float:
        return 0.0 if math.isinf(self.eta) else 1.0 / self.eta

    @property
    def noise_variance(self) -> float:
        return 2.0 * self.noise_scale**2


@dataclass(frozen=True)
class RiskTable:
    r00: float
    r10: float
    r11: float


def _n_sharing(params: DpExampleParams, eps_vector: Sequence[float]) -> int:
    if len(eps_vector) != 2:
        raise ValueError("the DP example has exactly two users")
    levels = params.space.levels
    for e in eps_vector:
        if float(e) not in levels:
            raise ValueError(f"level {e} is not in {levels}")
    return sum(1 for e in eps_vector if float(e) != 0.0)


def _single_weight(params: DpExampleParams) -> float:
    return 1.0 / (3.0 + 24.0 * params.inv_eps2)


def _pair_weight(params: DpExampleParams) -> float:
    return 1.0 / (4.0 + 12.0 * params.inv_eps2)


def bayes_risk(params: DpExampleParams, eps_vector: Sequence[float]) -> float:
    """Bayes risk of the optimal linear-Laplace estimator for a level pair."""
    k = _n_sharing(params, eps_vector)
    if k == 0:
        return PRIOR_RISK
    if k == 1:
        return PRIOR_RISK * (1.0 - _single_weight(params))
    return PRIOR_RISK * (1.0 - 1.0 / (2.0 + 6.0 * params.inv_eps2))


def risk_table(params: DpExampleParams) -> RiskTable:
    e = params.eps_prime
    return RiskTable(bayes_risk(params, (0, 0)), bayes_risk(params, (e, 0)), bayes_risk(params, (e, e)))


def optimal_estimator(params: DpExampleParams, eps_vector: Sequence[float]) -> EstimatorSpec:
    """Risk-minimising weights and noise; the DP constraint binds at ``eta = eps/w``."""
    k = _n_sharing(params, eps_vector)
    if k == 0:
        return EstimatorSpec((0.0, 0.0), math.inf)
    w = _single_weight(params) if k == 1 else _pair_weight(params)
    weights = tuple(w if float(e) != 0.0 else 0.0 for e in eps_vector)
    return EstimatorSpec(weights, params.eps_prime / w)


def estimator_risk(spec: EstimatorSpec) -> float:
    """Bayes risk of an arbitrary linear-Laplace estimator.

    With ``E[mu**2] = 1/12`` and ``E[Var(X_i | p)] = 1/6``:
    ``sum(w**2)/6 + (sum(w) - 1)**2/12 + 2/eta**2``.
    """
    w = np.asarray(spec.weights, dtype=float)
    return float(np.sum(w**2) / 6.0 + (np.sum(w) - 1.0) ** 2 / 12.0 + spec.noise_variance)


def utility_matrix(params: DpExampleParams) -> TabulatedUtility:
    """2x2 utility indexed ``[user-1 level, user-2 level]``; both users form one symmetry group."""
    one = 2.0 * _single_weight(params)
    both = 1.0 / (1.0 + 3.0 * params.inv_eps2)
    table = np.array([[0.0, one], [one, both]])
    # same numbers through the affine map of the risks
    rt = risk_table(params)
    affine = RISK_SCALE * np.array([[rt.r00, rt.r10], [rt.r10, rt.r11]]) + RISK_OFFSET
    if not np.allclose(table, affine, rtol=0.0, atol=1e-12):
        raise ArithmeticError(f"utility normalisation mismatch: {table} vs {affine}")
    return TabulatedUtility(params.space, table, groups=[[0, 1]])


def fair_matrices(params: DpExampleParams, mode: str = "thm2", alpha: float = 1.0) -> dict[str, np.ndarray]:
    """Per-player payment tables over both users' levels.

    ``mode="thm1"`` returns ``platform``, ``user1`` and ``user2`` tables;
    ``mode="thm2"`` returns ``user1`` and ``user2`` scaled by ``alpha``.
    Entry ``[a, b]`` is the value when user 1 plays level ``a`` and user 2
    plays level ``b`` (0 = private, 1 = ``eps``).
    """
    u = utility_matrix(params)
    levels = params.space.levels
    out = {k: np.zeros((2, 2)) for k in (("platform", "user1", "user2") if mode == "thm1" else ("user1", "user2"))}
    for a in range(2):
        for b in range(2):
            rho = (levels[a], levels[b])
            if mode == "thm1":
                alloc: Allocation = shapley_with_platform(u, rho, 1)
                out["platform"][a, b] = alloc.platform_value
            elif mode == "thm2":
                alloc = shapley_users_only(u, rho, alpha)
            else:
                raise ValueError(f"unknown mode {mode!r}; expected 'thm1' or 'thm2'")
            out["user1"][a, b] = alloc.user_values[0]
            out["user2"][a, b] = alloc.user_values[1]
    return out
