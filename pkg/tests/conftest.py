"""Shared fixtures.  Heavy geometric objects (metrics, ball families,
calibration constants) are session scoped so every module reuses one copy.
"""

import numpy as np
import pytest
import sympy as sp

from subelliptic import estimates, fields, maximal
from subelliptic.domain import BoxDomain


@pytest.fixture(scope="session")
def g1():
    """One shared grushin(1) instance so metric caches are reused."""
    return fields.grushin(1)


@pytest.fixture(scope="session")
def xs2():
    return sp.symbols("x1 x2")


@pytest.fixture(scope="session")
def dom41():
    return BoxDomain((-2, -2), (2, 2), (41, 41))


@pytest.fixture(scope="session")
def dom61():
    return BoxDomain((-2, -2), (2, 2), (61, 61))


@pytest.fixture(scope="session")
def dom81():
    return BoxDomain((-2, -2), (2, 2), (81, 81))


@pytest.fixture(scope="session")
def family41(g1, dom41):
    """Ball family on the 41^2 grid: stride-2 centers, radii 0.6 and 1.2.

    The base radius must exceed the covering radius of the strided center
    net, which is large near x1 = 0 where the second field degenerates.
    """
    return maximal.build_ball_family(g1, dom41, r0=0.6, num_radii=2, stride=2)


@pytest.fixture(scope="session")
def family41_fine(g1, dom41):
    """Stride-1 enlargement of family41 (superset of balls)."""
    return maximal.build_ball_family(g1, dom41, r0=0.6, num_radii=2, stride=1)


@pytest.fixture(scope="session")
def lift1():
    from subelliptic import liftgroup
    return liftgroup.lift_grushin1()


@pytest.fixture(scope="session")
def eq1(lift1):
    from subelliptic import liftgroup
    return liftgroup.calibrate_equivalence(lift1)


@pytest.fixture(scope="session")
def fib1(lift1):
    from subelliptic import liftgroup
    return liftgroup.calibrate_fiber_constants(lift1)


@pytest.fixture(scope="session")
def suite41(dom41, xs2):
    """Ten bump/oscillatory grid functions on the 41^2 grid."""
    return [estimates.grid_from_expr(dom41, e, xs2)
            for e in estimates.test_function_suite(xs2, 10)]
