import csv
import json
import math

import numpy as np
import pytest

from lrwalk.errors import EmptyScanError
from lrwalk.heat import build_table, poissonize
from lrwalk.kernel import dirichlet_energy
from lrwalk.rv import RegVaryingFn, SlowlyVaryingFn, transform_space
from lrwalk.space import LatticeSpace
from lrwalk.verify import (contraction_check, de_bruijn_provider, diagonal_decay,
                           general_phi_pipeline, harnack_scan, hkp_envelope, hkp_scan,
                           mn1_ratio, nash_check, nash_constant, near_diagonal_lower,
                           parabolicity_residual, pseudo_poincare_check, qt_bound_scan,
                           random_bumps, save_points_csv, save_report_json)


@pytest.fixture(scope="module")
def five_tables(five_site):
    space, k, _, _ = five_site
    return [build_table(k, site, 48) for site in space.sites]


@pytest.fixture(scope="module")
def z1_table(z1_small):
    return build_table(z1_small[1], 0, 64)


# hkp ---------------------------------------------------------------------------


def test_hkp_first_step_ratio_is_offdiagonal_scale(z1_small, z1_table):
    space, k = z1_small
    rep = hkp_scan([z1_table], k.phi, space.profile, n_max=1, keep_points=True)
    pts = rep.points
    d, ratio = np.array(pts["d"]), np.array(pts["ratio"])
    far = d >= 1
    assert far.sum() == 512
    # h_1 comes out of an FFT convolution: relative round-off ~1e-12 on the far tail
    assert np.allclose(ratio[far], k.scale, rtol=1e-11, atol=0)


def test_envelope_first_branch_with_trivial_l(z1_small):
    space = z1_small[0]
    phi = RegVaryingFn(1.3)
    provider = de_bruijn_provider(SlowlyVaryingFn())
    for n in (1, 5, 40, 1000):
        expected = 1 / space.profile(n ** (1 / 1.3))
        assert hkp_envelope(n, 0.0, phi, space.profile) == expected
        assert hkp_envelope(n, 0.0, phi, space.profile, provider) == expected


def test_hkp_is_pure_and_nested_scans_shrink(five_site, five_tables):
    space, k, _, _ = five_site
    a = hkp_scan(five_tables, k.phi, space.profile)
    b = hkp_scan(five_tables, k.phi, space.profile)
    assert a.to_dict() == b.to_dict()
    for top in (4, 16, 32):
        sub = hkp_scan(five_tables, k.phi, space.profile, n_max=top)
        assert sub.c_up <= a.c_up and sub.c_low >= a.c_low
    assert hkp_scan(five_tables[:2], k.phi, space.profile).c_up <= a.c_up


def test_hkp_errors(five_site, five_tables, z1_table, z1_small):
    space, k, _, _ = five_site
    with pytest.raises(ValueError):
        hkp_scan([five_tables[0], z1_table], k.phi, space.profile)
    with pytest.raises(EmptyScanError):
        hkp_scan([z1_table], z1_small[1].phi, z1_small[0].profile, n_min=100)


def test_hkp_z1_window_scan_passes(z1_small, z1_table):
    space, k = z1_small
    rep = hkp_scan([z1_table], k.phi, space.profile)
    assert rep.c_low <= rep.c_up
    assert rep.passed, rep.to_dict()


# diagonal -------------------------------------------------------------------------


def test_diagonal_first_step_bound(five_site, five_tables):
    space, _, mu, _ = five_site
    rep = diagonal_decay(five_tables, space.profile, 1.0, n_min=1, n_max=1)
    # h_1(x, x) <= 1/mu_x because p(x, x) <= 1
    for t, m in zip(five_tables, mu):
        assert t.h(1)[t.origin] * space.profile(1.0) <= space.profile(1.0) / m
    assert rep.c_up <= space.profile(1.0) / mu.min()


def test_diagonal_qt_at_zero(five_site, five_tables):
    space, _, mu, _ = five_site
    for x, t in enumerate(five_tables):
        q = poissonize(t, 0.0)
        assert q.values[q.origin] * space.profile(0.0) == pytest.approx(
            space.profile(0.0) / mu[x], rel=1e-15)


def test_even_diagonal_ratios_stay_in_first_even_band(z1_preset):
    exp, table = z1_preset
    rep = diagonal_decay([table], exp.space.profile, 1.0, n_min=2)
    ratios = [table.h(n)[table.origin] * exp.space.profile(n) for n in range(2, 257, 2)]
    first = max(ratios[:1])
    assert max(ratios) <= first * rep.drift_factor
    assert rep.passed


def test_qt_bound_rejects_general_phi(z1_small, z1_table):
    k = z1_small[1]
    rows = [poissonize(z1_table, 1.0)]
    with pytest.raises(ValueError):
        qt_bound_scan(rows, k, RegVaryingFn(1.0, SlowlyVaryingFn("logpow", (1.0,))),
                      z1_small[0].profile)
    rep = qt_bound_scan(rows + [poissonize(z1_table, 4.0)], k, k.phi, z1_small[0].profile)
    assert rep.one_sided and math.isfinite(rep.c_up)


# near-diagonal ------------------------------------------------------------------------


def test_near_diagonal_minimum_decreases_in_c2(z1_small, z1_table):
    rep = near_diagonal_lower([z1_table], z1_small[0].profile, 1.0, [0.125, 0.25, 0.5, 1, 2, 8])
    mins = [row["min_ratio"] for row in rep.annotations["table"]]
    assert mins == sorted(mins, reverse=True)
    assert rep.annotations["diag_min"] > 0
    assert rep.annotations["c2"] >= 0.25


# functional inequalities ------------------------------------------------------------


def test_nash_single_site_closed_form(z1_small):
    space, k = z1_small
    f = np.zeros(k.n_sites)
    f[256] = 1.0
    e = dirichlet_energy(k, f)
    for R in (1.0, 4.0, 16.0):
        rep = nash_check(k, space.profile, [f], [R], alpha=2.0)
        # ||f||_2^2 = ||f||_1 = mu_x = 1
        assert rep.c_up == pytest.approx(nash_constant(e, 1.0, 1.0, R, space.profile(R), 2.0, 1.0),
                                         rel=1e-15)


def test_nash_homogeneous_in_f(z1_small, rng):
    space, k = z1_small
    fs = random_bumps(k, 6, rng, 100, 20)
    a = nash_check(k, space.profile, fs, [1, 4, 16, 64], alpha=2.0)
    b = nash_check(k, space.profile, [2 * f for f in fs], [1, 4, 16, 64], alpha=2.0)
    assert b.c_up == pytest.approx(a.c_up, rel=1e-12)


def test_nash_preconditions(z1_small):
    space, k = z1_small
    with pytest.raises(ValueError):
        nash_check(k, space.profile, [np.ones(k.n_sites)], [1.0], alpha=1.0)
    with pytest.raises(ValueError):
        nash_check(k, space.profile, [np.zeros(k.n_sites)], [1.0], alpha=2.0)


def test_pseudo_poincare_and_contraction(z1_small, rng):
    space, k = z1_small
    fs = random_bumps(k, 40, rng, 100, 24)
    pp = pseudo_poincare_check(k, fs, [1, 2, 4, 8])
    assert pp.c_low > 0 and math.isfinite(pp.c_up)
    cont = contraction_check(k, fs, rng)
    assert cont.passed and cont.annotations["violations"] == 0


# Harnack -----------------------------------------------------------------------------


def test_harnack_degenerate_box(z1_small, z1_table):
    rep = harnack_scan([z1_table], [1.0], 1 / 9)
    assert rep.ratios == [1.0] and rep.R0 is None


def test_parabolicity_exact_on_dense_space(five_tables):
    for t in five_tables:
        assert parabolicity_residual(t, 40) <= 1e-14


def test_harnack_scan_z1(z1_table):
    rep = harnack_scan([z1_table], [8.0, 16.0, 32.0], 0.1)
    assert all(r >= 1 for r in rep.ratios)
    assert rep.R0 == 16.0 and rep.passed


def test_harnack_errors(z1_table):
    with pytest.raises(ValueError):
        harnack_scan([z1_table], [8.0], 0.2)
    with pytest.raises(ValueError):
        harnack_scan([z1_table], [150.0], 0.001)


# general phi ----------------------------------------------------------------------------


def test_mn1_ratio_bounded_for_trivial_l(g_pure):
    z1 = LatticeSpace(1)
    tspace = transform_space(z1, g_pure)
    r = 2.0 ** np.arange(0, 21)
    ratio = mn1_ratio(z1, tspace, SlowlyVaryingFn(), 1.0, 1.5, r, lambda x: 1.0)
    assert np.all(ratio > 0) and ratio.max() / ratio.min() < 4


def test_general_pipeline_with_trivial_l_matches_pure_power(z1_small):
    space = z1_small[0]
    cfg = {"window_radius": 1024, "n_max": 24, "mn1_octaves": 20, "target_radius": 256}
    rep, kernel, table = general_phi_pipeline(space, {"kind": "const", "params": [1.0]},
                                              1.0, 1.5, cfg)
    assert rep.checks["concave_certificate"] and rep.checks["de_bruijn_residual"]
    pure = build_table(z1_small[1], 0, 24)
    base = hkp_scan([pure], z1_small[1].phi, space.profile)
    assert rep.verdict == base.verdict == "PASS"


# serialization --------------------------------------------------------------------------


def test_report_serialization(tmp_path, z1_small, z1_table):
    space, k = z1_small
    rep = hkp_scan([z1_table], k.phi, space.profile, n_max=4, keep_points=True)
    save_report_json(rep, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["verdict"] == rep.verdict and doc["c_up"] == rep.c_up
    save_points_csv(rep, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == len(rep.points["ratio"])
