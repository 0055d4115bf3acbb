import itertools

import numpy as np
import pytest
from hypothesis import settings

from fairdata.core import PrivacySpace, TabulatedUtility

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_table(rng, n_users, n_levels, *, symmetric_groups=None):
    """Random utility table with U(0) = 0, optionally symmetrised within groups."""
    shape = (n_levels,) * n_users
    table = rng.uniform(-1.0, 1.0, size=shape)
    if symmetric_groups:
        out = np.zeros(shape)
        perms = []
        for g in symmetric_groups:
            perms.append([dict(zip(g, p)) for p in itertools.permutations(g)])
        combos = list(itertools.product(*perms))
        for idx in itertools.product(range(n_levels), repeat=n_users):
            vals = []
            for combo in combos:
                src = list(idx)
                for mapping in combo:
                    for a, b in mapping.items():
                        src[b] = idx[a]
                vals.append(table[tuple(src)])
            out[idx] = np.mean(vals)
        table = out
    table[(0,) * n_users] = 0.0
    return table


def random_utility(rng, n_users, n_levels, *, groups=None):
    space = PrivacySpace(tuple(float(k) for k in range(n_levels)))
    table = random_table(rng, n_users, n_levels, symmetric_groups=groups)
    return TabulatedUtility(space, table, groups=groups)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
