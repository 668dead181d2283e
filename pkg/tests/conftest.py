"""Shared fixtures: oracle finite spaces, small lattice kernels and the z1-beta1 preset."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from lrwalk import FiniteSpace, LatticeSpace, RegVaryingFn, SlowlyVaryingFn  # noqa: E402
from lrwalk import build_kernel, concave_regularize  # noqa: E402
from lrwalk.config import resolve  # noqa: E402
from lrwalk.heat import build_table  # noqa: E402
from lrwalk.pipeline import Experiment  # noqa: E402

# criterion id -> (verdict, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def five_site():
    """Random explicit 5-site space and its exact-formula kernel (beta = 1, theta = 0.2)."""
    sites, mu, dist = oracles.random_finite_space(5, seed=11)
    space = FiniteSpace(sites, mu, dist)
    kernel = build_kernel(space, RegVaryingFn(1.0), theta_diag=0.2)
    return space, kernel, mu, dist


@pytest.fixture(scope="session")
def two_site():
    space = FiniteSpace(["x", "y"], [1.0, 1.0], [[0.0, 1.0], [1.0, 0.0]])
    kernel = build_kernel(space, RegVaryingFn(1.0), theta_diag=0.5)
    return space, kernel


@pytest.fixture(scope="session")
def z1_small():
    """Z^1 window [-256, 256], beta = 1, confined boundary."""
    space = LatticeSpace(1)
    return space, build_kernel(space, RegVaryingFn(1.0), window_radius=256)


@pytest.fixture(scope="session")
def z2_small():
    space = LatticeSpace(2)
    return space, build_kernel(space, RegVaryingFn(1.5), window_radius=24)


@pytest.fixture(scope="session")
def z1_preset(tmp_path_factory):
    """The z1-beta1 preset: kernel on [-4096, 4096] and the h_n table from 0 to n = 256."""
    cfg = resolve("z1-beta1", out=str(tmp_path_factory.mktemp("z1-beta1")), environ={})
    exp = Experiment(cfg)
    table = build_table(exp.kernel, (0,), cfg.heat.n_max, cfg.heat.eps_leak)
    return exp, table


@pytest.fixture(scope="session")
def g_pure():
    """Certified concave transform for l = 1, beta = 1, delta = 1.5 (f = (1+x)^{2/3})."""
    return concave_regularize(RegVaryingFn(1.0), 1.5)


@pytest.fixture(scope="session")
def g_log():
    """Certified concave transform for l = log(e+x), beta = 1, delta = 1.5."""
    return concave_regularize(RegVaryingFn(1.0, SlowlyVaryingFn("logpow", (1.0,))), 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        verdict, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{verdict}  criterion {key}: {detail}")
