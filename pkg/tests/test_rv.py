import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lrwalk.errors import ConvergenceError
from lrwalk.rv import (LogSmoothed, RegVaryingFn, SlowlyVaryingFn, concave_regularize,
                       de_bruijn_conjugate, de_bruijn_residual, eval_phi, inverse_transform,
                       transform_space)
from lrwalk.space import TransformedSpace
from lrwalk.space import LatticeSpace

LOG = SlowlyVaryingFn("logpow", (1.0,))

# y* with log(e + e^10 y*) y* = 1, from a bracketing root search (oracles.de_bruijn_root)
DE_BRUIJN_E10 = 0.12609881324456992


def test_eval_phi_examples():
    assert eval_phi(RegVaryingFn(1.0), 3) == 4
    for beta in (0.3, 1.0, 1.9):
        assert eval_phi(RegVaryingFn(beta), 0) == 1
    # beta = 2 lies outside the admissible range, so evaluate the formula directly
    assert ((1 + 0) * LOG(0.0)) ** 2 == pytest.approx(1.0, abs=0)


def test_regularly_varying_rejects_beta_outside_range():
    for beta in (0, 2, 2.5, -1):
        with pytest.raises(ValueError):
            RegVaryingFn(beta)


def test_de_bruijn_constant_cases():
    assert de_bruijn_conjugate(SlowlyVaryingFn(), 1e6) == 1.0
    assert de_bruijn_conjugate(SlowlyVaryingFn("const", (4.0,)), 50.0) == 0.25


def test_de_bruijn_log_against_root_oracle():
    x = math.exp(10)
    y = de_bruijn_conjugate(LOG, x, tol=1e-10)
    assert abs(math.log(math.e + x * y) * y - 1) <= 1e-9
    assert y == pytest.approx(DE_BRUIJN_E10, rel=1e-9)
    assert DE_BRUIJN_E10 == pytest.approx(oracles.de_bruijn_root(LOG, x), rel=1e-14)


def test_de_bruijn_below_x_min_and_nonconvergence():
    with pytest.raises(ValueError):
        de_bruijn_conjugate(LOG, 2.0)
    with pytest.raises(ConvergenceError) as info:
        de_bruijn_conjugate(LOG, 1e12, tol=1e-15, max_iter=1)
    assert info.value.last_iterate > 0


@settings(deadline=None)
@given(st.floats(10, 1e15), st.sampled_from([1e-8, 1e-10, 1e-12]),
       st.sampled_from([("logpow", 1.0), ("logpow", -0.5), ("iterlog", 2.0)]))
def test_de_bruijn_residual_within_ten_tol(x, tol, spec):
    l = SlowlyVaryingFn(spec[0], (spec[1],))
    try:
        y = de_bruijn_conjugate(l, x, tol)
    except ConvergenceError:
        return
    assert de_bruijn_residual(l, x, y) <= 10 * tol


def test_pure_power_l_sharp_is_one_so_bound_degenerates():
    space = LatticeSpace(1)
    for n in (1, 7, 100, 4096):
        x = n ** (1.0 / 1.3)
        ls = de_bruijn_conjugate(SlowlyVaryingFn(), max(x, 10.0))
        assert space.profile(x * ls) == space.profile(x)


def test_slowly_varying_index_tends_to_zero():
    stat = LOG.index_statistic()
    assert stat[-1] < stat[0] and stat[-1] < 0.05


def test_log_smoothed_ratio_tends_to_one():
    f = lambda x: np.asarray(eval_phi(RegVaryingFn(1.0, LOG), x)) ** (1 / 1.5)  # noqa: E731
    f1 = LogSmoothed(f, 1 / 1.5)
    xs = 2.0 ** np.array([10, 20, 30])
    assert np.allclose(f1(xs) / f(xs), 1, atol=0.02)


# concave transform --------------------------------------------------------


def test_concave_regularize_contract(g_pure):
    cert = g_pure.certificate
    assert g_pure(0.0) == 0.0 and cert["g0"] == 0.0
    assert cert["passed"] and cert["increasing"] and cert["concave"]
    assert math.isfinite(cert["ratio_constant"])
    f = g_pure.reference
    ks = np.arange(20, 41)
    assert np.all(np.abs(g_pure(2.0 ** ks) / f(2.0 ** ks) - 1) <= 0.1)


def test_concave_regularize_log_certificate(g_log):
    assert g_log.certificate["passed"]


def test_concave_regularize_rejects_bad_delta():
    with pytest.raises(ValueError):
        concave_regularize(RegVaryingFn(1.0), 0.5)


def test_g_monotone_on_sample(g_pure, rng):
    xs = np.sort(rng.uniform(0, 1e6, 400))
    assert np.all(np.diff(g_pure(xs)) > 0)


def test_inverse_transform_examples(g_pure):
    assert inverse_transform(g_pure, 0.0) == 0.0
    assert inverse_transform(g_pure, g_pure(7.5)) == pytest.approx(7.5, abs=1e-9)
    top = g_pure(g_pure.breakpoint)
    for y in np.linspace(0, top, 9):
        assert inverse_transform(g_pure, y) == pytest.approx(y / g_pure.slope, rel=1e-15)


def test_transform_space_linear_segment(g_pure):
    # d'(0, k) = k * slope for every k on the linear piece [0, A+1]
    tspace = transform_space(LatticeSpace(1), g_pure)
    for k in range(1, int(g_pure.breakpoint) + 1):
        assert tspace.distance(0, k) == pytest.approx(k * g_pure.slope, rel=1e-15)


def test_subadditivity_and_round_trip(g_log, rng):
    s = np.exp(rng.uniform(0, 25, 60))
    t = np.exp(rng.uniform(0, 25, 60))
    assert np.all(g_log(s + t) <= (g_log(s) + g_log(t)) * (1 + 1e-12))
    ys = g_log(np.exp(rng.uniform(-2, 25, 40)))
    assert np.allclose(g_log(inverse_transform(g_log, ys)), ys, rtol=1e-9, atol=0)


def test_identity_transform_preserves_distances():
    class Identity:
        def __call__(self, x):
            return np.asarray(x, dtype=float) if np.ndim(x) else float(x)

        def inverse(self, y):
            return y

    base = LatticeSpace(1)
    tspace = TransformedSpace(base, Identity(), profile=base.profile)
    for x, y in [(0, 3), (-5, 17), (4, 4)]:
        assert tspace.distance(x, y) == base.distance(x, y)
