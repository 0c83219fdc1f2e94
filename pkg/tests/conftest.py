import math

import pytest

from pwamc.problem import builtin_example

# v*(-1) for the built-in example, from scripts/pin_oracle.py (two routes agree to 1e-10)
ORACLE_COST_M1 = 4.157066478355044
K_STAR_M1 = math.sqrt(8.0)


@pytest.fixture(scope="session")
def example():
    return builtin_example()


@pytest.fixture(scope="session")
def hierarchy_results(example):
    from pwamc.relaxation import hierarchy

    return hierarchy(example, 6)


@pytest.fixture(scope="session")
def v6(hierarchy_results):
    res = hierarchy_results[-1]
    assert res.order == 6 and res.value is not None
    return res.value.v
