import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_utility
from fairdata.core import (
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
from oracles import permutation_shapley, permutation_shapley_platform

TOL = 1e-9

seeds = st.integers(0, 2**31 - 1)


def _instance(seed, n_users, n_levels, groups=None):
    rng = np.random.default_rng(seed)
    u = random_utility(rng, n_users, n_levels, groups=groups)
    rho = tuple(float(x) for x in rng.integers(0, n_levels, size=n_users))
    return u, rho


def test_privacy_space_rejects_bad_levels():
    with pytest.raises(ValueError):
        PrivacySpace((1.0, 2.0))
    with pytest.raises(ValueError):
        PrivacySpace((0.0, 2.0, 1.0))
    with pytest.raises(ValueError):
        PrivacySpace((0.0,))
    space = PrivacySpace((0.0, 1.0, math.inf))
    assert space.zero == 0.0 and space.top == math.inf
    assert space.index(math.inf) == 2


def test_restrict_zeroes_outsiders():
    assert restrict((2.0, 1.0, 2.0), [0, 2]) == (2.0, 0.0, 2.0)


@given(seeds, st.integers(1, 4), st.integers(2, 3), st.floats(0.0, 1.0))
def test_users_only_matches_permutation_oracle(seed, n, levels, alpha):
    u, rho = _instance(seed, n, levels)
    alloc = shapley_users_only(u, rho, alpha)
    expected = alpha * permutation_shapley(u, rho)
    np.testing.assert_allclose(alloc.user_values, expected, atol=TOL)


@given(seeds, st.integers(1, 4), st.integers(2, 3))
def test_platform_member_matches_permutation_oracle(seed, n, levels):
    u, rho = _instance(seed, n, levels)
    alloc = shapley_with_platform(u, rho, 1)
    users, platform = permutation_shapley_platform(u, rho)
    np.testing.assert_allclose(alloc.user_values, users, atol=TOL)
    assert alloc.platform_value == pytest.approx(platform, abs=TOL)


@given(seeds, st.integers(1, 5), st.integers(2, 3), st.floats(0.0, 1.0))
def test_pseudo_efficiency(seed, n, levels, alpha):
    u, rho = _instance(seed, n, levels)
    alloc = shapley_users_only(u, rho, alpha)
    assert math.fsum(alloc.user_values) == pytest.approx(alpha * u(rho), abs=TOL)
    assert alloc.efficiency_gap() == pytest.approx(0.0, abs=TOL)


@given(seeds, st.integers(1, 5), st.integers(2, 3))
def test_platform_efficiency(seed, n, levels):
    u, rho = _instance(seed, n, levels)
    alloc = shapley_with_platform(u, rho, 1)
    assert alloc.platform_value + math.fsum(alloc.user_values) == pytest.approx(u(rho), abs=TOL)


def test_platform_absent_pays_nothing(rng):
    u = random_utility(rng, 3, 3)
    alloc = shapley_with_platform(u, (2.0, 1.0, 2.0), 0)
    assert np.all(alloc.user_values == 0.0) and alloc.platform_value == 0.0


@given(seeds, st.integers(2, 5), st.integers(2, 3))
def test_symmetric_users_get_identical_values(seed, n, levels):
    groups = [list(range(n))]
    u, _ = _instance(seed, n, levels, groups=groups)
    rho = (float(levels - 1),) * n
    for alloc in (shapley_users_only(u, rho), shapley_with_platform(u, rho, 1)):
        assert len(set(alloc.user_values.tolist())) == 1


@given(seeds, st.integers(2, 5), st.integers(2, 3))
def test_zero_level_user_is_null(seed, n, levels):
    u, rho = _instance(seed, n, levels)
    rho = (0.0,) + rho[1:]
    assert shapley_users_only(u, rho).user_values[0] == 0.0
    assert shapley_with_platform(u, rho, 1).user_values[0] == 0.0


def test_user_that_never_matters_is_null(rng):
    base = random_utility(rng, 3, 3)

    def ignores_last(rho):
        return base((rho[0], rho[1], 0.0))

    u = CoalitionUtility(ignores_last, 3, space=base.space)
    rho = (2.0, 1.0, 2.0)
    assert shapley_users_only(u, rho).user_values[2] == pytest.approx(0.0, abs=1e-15)
    assert shapley_with_platform(u, rho, 1).user_values[2] == pytest.approx(0.0, abs=1e-15)


@given(seeds, st.integers(1, 4), st.integers(2, 3))
def test_linearity(seed, n, levels):
    rng = np.random.default_rng(seed)
    u = random_utility(rng, n, levels)
    v = random_utility(rng, n, levels)
    rho = tuple(float(x) for x in rng.integers(0, levels, size=n))
    s = u + v
    for f in (lambda w: shapley_users_only(w, rho).user_values,
              lambda w: shapley_with_platform(w, rho, 1).user_values):
        np.testing.assert_allclose(f(s), f(u) + f(v), atol=TOL)


@given(seeds, st.integers(2, 6), st.integers(2, 3))
def test_grouped_path_matches_exact(seed, n, levels):
    rng = np.random.default_rng(seed)
    split = int(rng.integers(1, n))
    groups = [list(range(split)), list(range(split, n))]
    u = random_utility(rng, n, levels, groups=groups)
    rho = tuple(float(x) for x in rng.integers(0, levels, size=n))
    exact = shapley_users_only(u, rho, 0.7).user_values
    fast = grouped_shapley(u, rho, 0.7).user_values
    np.testing.assert_allclose(fast, exact, atol=TOL)


def test_grouped_platform_mode_above_exact_cap(rng):
    u = random_utility(rng, 5, 2, groups=[[0, 1, 2, 3, 4]])
    rho = (1.0, 1.0, 0.0, 1.0, 0.0)
    exact = shapley_with_platform(u, rho, 1)
    fast = shapley_with_platform(u, rho, 1, max_exact=3)
    np.testing.assert_allclose(fast.user_values, exact.user_values, atol=TOL)
    assert fast.platform_value == pytest.approx(exact.platform_value, abs=TOL)


def test_large_ungrouped_instance_is_refused(rng):
    u = random_utility(rng, 4, 2)
    with pytest.raises(TooLargeError):
        shapley_users_only(u, (1.0,) * 4, max_exact=3)


def test_wrong_symmetry_declaration_is_caught(rng):
    table = np.zeros((2, 2))
    table[1, 0] = 1.0
    table[0, 1] = 0.25
    table[1, 1] = 1.5
    u = TabulatedUtility(PrivacySpace((0.0, 1.0)), table, groups=[[0, 1]])
    with pytest.raises(SymmetryError) as info:
        grouped_shapley(u, (1.0, 1.0))
    assert info.value.group == (0, 1) or list(info.value.group) == [0, 1]


def test_dimension_mismatch(rng):
    u = random_utility(rng, 3, 2)
    with pytest.raises(DimensionError):
        shapley_users_only(u, (1.0, 1.0))
    with pytest.raises(DimensionError):
        u((0.0,))


def test_alpha_out_of_range(rng):
    u = random_utility(rng, 2, 2)
    with pytest.raises(ValueError):
        shapley_users_only(u, (1.0, 1.0), 1.5)


def test_memo_cache_shares_symmetric_profiles():
    calls = []

    def f(rho):
        calls.append(rho)
        return sum(rho)

    u = CoalitionUtility(f, 3, space=PrivacySpace((0.0, 1.0)), groups=[[0, 1, 2]])
    assert u((1.0, 0.0, 0.0)) == u((0.0, 0.0, 1.0))
    assert len(calls) == 1
