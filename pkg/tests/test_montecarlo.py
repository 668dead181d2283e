import csv
import math

import numpy as np
import pytest
from scipy import stats

from lrwalk.errors import NoFeasibleGammaError
from lrwalk.kernel import DenseKernel, build_kernel
from lrwalk.montecarlo import (AliasTable, estimate_gamma, exit_probability, export_stats_csv,
                               hitting_probability, killed_exit_probability, make_sampler,
                               rng_stream, sample_jump, wilson_interval)
from lrwalk.rv import RegVaryingFn
from lrwalk.space import LatticeSpace

Z999 = float(stats.norm.ppf(1 - 5e-4))


# sampling ----------------------------------------------------------------------


def test_two_site_frequency_within_four_sigma(two_site):
    _, k = two_site
    sampler = make_sampler(k)
    rng = rng_stream(7, 0, 0)
    n = 100_000
    moved = sum(sample_jump(sampler, "x", rng) == "y" for _ in range(n))
    sigma = math.sqrt(0.25 / n)
    assert abs(moved / n - 0.5) <= 4 * sigma


def test_seeded_stream_is_deterministic(z1_small):
    sampler = make_sampler(z1_small[1])
    first = sample_jump(sampler, 0, rng_stream(3, 0, 0))
    r1, r2 = rng_stream(3, 0, 0), rng_stream(3, 0, 0)
    seq1 = [sample_jump(sampler, 0, r1) for _ in range(200)]
    seq2 = [sample_jump(sampler, 0, r2) for _ in range(200)]
    assert seq1 == seq2 and seq1[0] == first
    assert seq1 != [sample_jump(sampler, 0, rng_stream(4, 0, 0)) for _ in range(200)]


def test_all_diagonal_kernel_never_moves(five_site):
    _, k, _, _ = five_site
    lazy = DenseKernel(k.space, k.window, k.phi, 1.0, 0.0, k.jump_radius,
                       np.eye(k.n_sites), {"jump_band": (1.0, 1.0)})
    sampler = make_sampler(lazy)
    rng = rng_stream(0, 0, 0)
    for site in k.space.sites:
        assert all(sample_jump(sampler, site, rng) == site for _ in range(50))


def test_alias_reconstructs_law(rng):
    w = rng.uniform(0, 1, size=(3, 17))
    w[1, 5:] = 0.0
    table = AliasTable(w)
    for r in range(3):
        assert np.abs(table.probabilities(r) - w[r] / w[r].sum()).max() <= 1e-15


def test_sampler_table_matches_kernel_rows(z1_small, five_site):
    k = z1_small[1]
    sampler = make_sampler(k)
    probs = sampler.alias.probabilities(0)
    i = k.window.index(0)
    for disp, pr in zip(sampler.displacements[:, 0], probs):
        assert pr == pytest.approx(k.p(i, i + int(disp)), rel=1e-12, abs=1e-15)
    dk = five_site[1]
    ds = make_sampler(dk)
    for i in range(dk.n_sites):
        back = np.zeros(dk.n_sites)
        np.add.at(back, ds.targets[i], ds.alias.probabilities(i))
        assert np.abs(back - dk.matrix[i]).max() <= 1e-15


@pytest.mark.parametrize("which", ["z1_preset", "z2_small"])
def test_one_step_chi_square(which, request):
    fixture = request.getfixturevalue(which)
    k = fixture[0].kernel if which == "z1_preset" else fixture[1]
    sampler = make_sampler(k)
    d = k.space.lattice.dimension
    pos = np.zeros((1_000_000, d), dtype=np.int64)
    new, cens = sampler.step_positions(pos, rng_stream(11, 0, 0))
    assert not cens.any()
    # bin by sup-norm jump length: 0..7 individually, then dyadic shells
    edges = [0, 1, 2, 3, 4, 5, 6, 7, 8, 16, 32, 64, 128, 256, 512, 1024, 1 << 40]
    length = np.abs(new).max(axis=1)
    observed = np.histogram(length, bins=np.array(edges) - 0.5)[0]
    law = sampler.alias.probabilities(0)
    disp_len = np.abs(sampler.displacements).max(axis=1)
    expected = np.histogram(disp_len, bins=np.array(edges) - 0.5, weights=law)[0] * len(pos)
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    exp *= obs.sum() / exp.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-3


# exit probabilities -------------------------------------------------------------


def test_exit_trivial_cases(z1_small):
    k = z1_small[1]
    assert exit_probability(k, 0, 4, 0, 200, seed=1).estimate == 0.0
    # three jumps of length at most R_J = 4 cannot leave B(0, 12)
    short = build_kernel(LatticeSpace(1), RegVaryingFn(1.0), window_radius=128, jump_radius=4)
    assert exit_probability(short, 0, 3 * 4, 3, 500, seed=1).n_exited == 0
    with pytest.raises(ValueError):
        exit_probability(k, 0, 4, 2, 50, seed=1)


def test_exit_agrees_with_killed_chain(z1_small):
    k = z1_small[1]
    exact = killed_exit_probability(k, 0, 8, 16)
    mc = exit_probability(k, 0, 8, 16, 20_000, seed=5)
    lo, hi = wilson_interval(mc.n_exited, mc.n_paths, Z999)
    assert lo <= exact <= hi


def test_killed_chain_on_dense_space(two_site):
    _, k = two_site
    # ball of radius 0.5 around x is {x}; survival after t steps is 0.5^t
    assert killed_exit_probability(k, "x", 0.5, 3) == pytest.approx(1 - 0.125)


def test_exit_monotone_in_t_and_r(z1_small):
    k = z1_small[1]
    counts_t = [exit_probability(k, 0, 8, t, 4000, seed=9).n_exited for t in (2, 4, 8, 16, 32)]
    assert counts_t == sorted(counts_t)
    counts_r = [exit_probability(k, 0, r, 16, 4000, seed=9).n_exited for r in (4, 8, 16, 32)]
    assert counts_r == sorted(counts_r, reverse=True)


def test_workers_do_not_change_results(z1_small):
    k = z1_small[1]
    a = exit_probability(k, 0, 8, 8, 10_000, seed=2, workers=1)
    b = exit_probability(k, 0, 8, 8, 10_000, seed=2, workers=4)
    assert a.to_dict() == b.to_dict()
    c = exit_probability(k, 0, 8, 8, 10_000, seed=2, continuous=True, workers=3)
    d = exit_probability(k, 0, 8, 8, 10_000, seed=2, continuous=True)
    assert c.n_exited == d.n_exited


def test_wilson_interval_examples():
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0 < hi < 0.05
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(1 - hi) and lo < 0.5 < hi


# hitting --------------------------------------------------------------------------


def test_hitting_rejects_zero_distance(z1_small):
    with pytest.raises(ValueError):
        hitting_probability(z1_small[1], 3, 3, 4, 200, seed=1)


def test_hitting_large_n_gives_large_probability(z1_preset):
    k = z1_preset[0].kernel
    far = hitting_probability(k, 0, 64, 2, 2000, seed=3)
    near = hitting_probability(k, 0, 64, 60, 2000, seed=3)
    assert near.estimate > 0.5 and near.estimate > far.estimate
    assert far.bound is not None and far.bound_ratio is not None


# gamma ----------------------------------------------------------------------------


def test_lazy_kernel_has_large_gamma():
    space = LatticeSpace(1)
    base = build_kernel(space, RegVaryingFn(1.0), window_radius=256)
    lazy = build_kernel(space, RegVaryingFn(1.0), theta_diag=0.98, window_radius=256)
    g0 = estimate_gamma(base, [(0,)], [8, 16], 1000, seed=4)
    g1 = estimate_gamma(lazy, [(0,)], [8, 16], 1000, seed=4)
    assert g1.gamma >= 8 * g0.gamma
    assert g1.capped() == pytest.approx(1 / 9)


def test_gamma_satisfies_its_contract(z1_small):
    est = estimate_gamma(z1_small[1], [(0,), (5,)], [8, 16], 800, seed=6)
    rows = [r for r in est.table if r["gamma"] <= est.gamma]
    assert rows and all(r["estimate"] + (r["ci_high"] - r["ci_low"]) / 2 <= 0.25 for r in rows)
    assert est.gamma in est.grid
    with pytest.raises(ValueError):
        estimate_gamma(z1_small[1], [], [8], 100, seed=1)


def test_no_feasible_gamma():
    k = build_kernel(LatticeSpace(1), RegVaryingFn(1.0), theta_diag=0.01, window_radius=64)
    with pytest.raises(NoFeasibleGammaError):
        estimate_gamma(k, [(0,)], [2], 500, seed=1, gamma_grid=[64.0])


# export ------------------------------------------------------------------------------


def test_export_stats_csv(tmp_path, z1_small):
    k = z1_small[1]
    stats_list = [exit_probability(k, 0, 8, 4, 300, seed=1),
                  hitting_probability(k, 0, 16, 8, 300, seed=1)]
    export_stats_csv(stats_list, tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["kind"] for r in rows] == ["exit", "hit"]
    assert float(rows[0]["estimate"]) == stats_list[0].estimate
    assert rows[1]["target"] == "16"
