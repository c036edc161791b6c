import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rieid.model import ImplicitModel, build_basis

settings.register_profile(
    "rieid", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "rieid"))


def random_model(rng: np.random.Generator, domain: str = "dt", n: int = 2, m: int = 1, k: int = 1,
                 degree: int = 3, d_x: int = 0, d_u: int = 0) -> ImplicitModel:
    """Dense random polynomial (or rational, in CT) model with small coefficients."""
    eb = build_basis(n, m, x_degree=degree, u_degree=0, min_degree=1)
    fb = build_basis(n, m, total=degree)
    gb = build_basis(n, m, total=max(degree - 1, 1))
    c = lambda rows, b: rng.standard_normal((rows, len(b))) / len(b)
    return ImplicitModel(domain, eb, c(n, eb), fb, c(n, fb), gb, c(k, gb), d_x=d_x, d_u=d_u)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Recorder for one acceptance criterion: ``acceptance(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
