"""Fair payments for private data: valuation, equilibria and payment design."""

from .core import (
    Allocation,
    CoalitionUtility,
    DimensionError,
    PrivacySpace,
    SymmetryError,
    TabulatedUtility,
    TooLargeError,
    grouped_shapley,
    restrict,
    shapley_users_only,
    shapley_with_platform,
)
from .dp_example import DpExampleParams, bayes_risk, fair_matrices, optimal_estimator, utility_matrix
from .equilibrium import (
    GammaProfile,
    asym_two_player_ne,
    best_response,
    find_pure_ne,
    p_star,
    symmetric_gamma,
    symmetric_ne_residual,
    validate_assumptions,
)
from .fed_model import FedParams, UserProfile, as_coalition_utility, emse, fed_utility, optimal_weights
from .mechanism import MechanismSolution, optimize_alpha_grid, symmetric_solver, two_group_mechanism

__version__ = "0.1.0"
