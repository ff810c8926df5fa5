"""Shared fixtures: benchmark systems and their local CLFs."""

import numpy as np
import pytest

from clf_forge.integrator import IntegratorConfig
from clf_forge.local_clf import example_2d_clf, linearize, solve_riccati, quadratic_clf
from clf_forge.systems import make_example_2d, make_pvtol


@pytest.fixture(scope="session")
def sys_big():
    """Planar quartic-cost benchmark with a large control box."""
    return make_example_2d(20.0)


@pytest.fixture(scope="session")
def sys_small():
    """Same benchmark with the tight control box."""
    return make_example_2d(1.2)


@pytest.fixture(scope="session")
def clf_big():
    return example_2d_clf(20.0)


@pytest.fixture(scope="session")
def clf_small():
    return example_2d_clf(1.2)


@pytest.fixture(scope="session")
def pvtol():
    return make_pvtol(alpha=0.1, a1=5.0, a2=5.0, lam1=0.2, lam2=0.04)


@pytest.fixture(scope="session")
def pvtol_clf(pvtol):
    A, B = linearize(pvtol)
    P, S = solve_riccati(A, B, 0.2 * np.eye(6), 0.04 * np.eye(2))
    return quadratic_clf(P, S, c=0.017, c1=0.012)


@pytest.fixture(scope="session")
def int_config():
    return IntegratorConfig()


@pytest.fixture(scope="session")
def box2d():
    return (np.array([-6.0, -6.0]), np.array([6.0, 6.0]))
