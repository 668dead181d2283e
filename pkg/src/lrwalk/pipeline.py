"""Stage runners behind the command line: audit, build, heat, simulate, verify.

Each stage reads its inputs from the configuration and from artifacts of
earlier stages in the output directory, writes its own artifacts atomically,
and returns a mapping of verdict name -> bool.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import heat as H
from . import montecarlo as MC
from . import verify as V
from .config import ExperimentConfig
from .errors import MissingDependencyError, WindowTooSmallError
from .kernel import build_kernel, export_kernel
from .rv import RegVaryingFn, SlowlyVaryingFn
from .space import LatticeSpace, audit_space, load_finite_space

STAGES = ("audit", "build", "heat", "simulate", "verify")


# ---------------------------------------------------------------------------
# Artifact helpers


@contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path: Path, doc) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _site_tag(site) -> str:
    return "_".join(str(c) for c in (site if isinstance(site, (list, tuple)) else [site]))


# ---------------------------------------------------------------------------
# Objects from configuration


class Experiment:
    """Lazily constructed space, phi and kernel for one configuration."""

    def __init__(self, cfg: ExperimentConfig, workers: int = 1):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.workers = workers
        self._space = self._kernel = self._prepared = None

    @property
    def space(self):
        if self._space is None:
            sc = self.cfg.space
            if sc.kind == "finite":
                fin = sc.finite
                self._space = load_finite_space(fin["path"] if "path" in fin else fin)
            else:
                mu = np.asarray(sc.mu, dtype=float) if isinstance(sc.mu, list) else float(sc.mu)
                self._space = LatticeSpace(sc.dimension, sc.norm, mu)
        return self._space

    @property
    def phi(self) -> RegVaryingFn:
        return RegVaryingFn(float(self.cfg.phi.beta), SlowlyVaryingFn.from_spec(self.cfg.phi.l))

    @property
    def lattice(self) -> bool:
        return self.cfg.space.kind == "lattice"

    @property
    def general(self) -> bool:
        return self.cfg.general

    def _kernel_kw(self) -> dict:
        kc = self.cfg.kernel
        return {"jump_radius": kc.jump_radius, "noise_rho": kc.noise_rho,
                "noise_seed": kc.noise_seed, "max_tail_fraction": kc.max_tail_fraction}

    @property
    def prepared(self):
        """(g, transformed space, kernel) for the change-of-metric route."""
        if self._prepared is None:
            kc = self.cfg.kernel
            self._prepared = V.general_kernel(self.space, self.phi, self.cfg.delta,
                                              kc.theta_diag, self.window_radius, kc.boundary,
                                              **self._kernel_kw())
        return self._prepared

    @property
    def window_radius(self):
        return self.cfg.space.window_radius if self.lattice else None

    @property
    def kernel(self):
        if self._kernel is None:
            if self.general:
                self._kernel = self.prepared[2]
            else:
                kc = self.cfg.kernel
                self._kernel = build_kernel(self.space, self.phi, kc.theta_diag,
                                            window_radius=self.window_radius,
                                            boundary=kc.boundary, **self._kernel_kw())
        return self._kernel

    @property
    def origins(self) -> list:
        if self.lattice:
            return [tuple(int(c) for c in o) for o in self.cfg.heat.origins]
        return [self.space.normalize(o[0] if isinstance(o, list) else o)
                for o in self.cfg.heat.origins]

    # artifacts -----------------------------------------------------------

    def table_path(self, origin) -> Path:
        return self.out / "heat" / f"table_{_site_tag(origin)}.npz"

    def load_tables(self) -> list:
        tables = []
        for o in self.origins:
            path = self.table_path(o)
            if not path.exists():
                raise MissingDependencyError(
                    f"missing heat artifact {path}; run the 'heat' stage first")
            tables.append(H.load_table(self.kernel, path))
        return tables

    def load_gamma(self) -> float:
        path = self.out / "mc" / "summary.json"
        if not path.exists():
            raise MissingDependencyError(
                f"missing Monte Carlo artifact {path}; run the 'simulate' stage first")
        return float(json.loads(path.read_text())["gamma_capped"])

    def export_sites(self):
        """Window indices written to the heat CSVs."""
        window = self.kernel.window
        radius = self.cfg.heat.export_radius
        if radius is None or window.coords is None:
            return range(len(window))
        lat = self.space.lattice
        return np.nonzero(lat.norm_of(window.coords - np.array(window.center)) <= radius)[0]


# ---------------------------------------------------------------------------
# Stages


def run_audit(exp: Experiment) -> dict:
    space = exp.space
    if exp.lattice:
        dim = space.dimension
        samples = [(0,) * dim, (1,) * dim, (-3,) + (2,) * (dim - 1), (7,) * dim]
        top = max(1, exp.cfg.space.window_radius // 2)
        r_grid = [0.5] + [2.0 ** k for k in range(int(math.log2(top)) + 1)]
    else:
        samples = list(space.window().sites)
        dmax = float(space.distance_matrix(space.window()).max())
        r_grid = [2.0 ** k for k in range(-4, int(math.ceil(math.log2(dmax))) + 2)]
    report = audit_space(space, samples, r_grid)
    doc = report.to_dict()
    doc["space"] = repr(space)
    write_json(exp.out / "audit.json", doc)
    return {"audit": report.passed}


def run_build(exp: Experiment) -> dict:
    kernel = exp.kernel
    rows = None
    if exp.lattice:
        rows = [kernel.window.index(o) for o in exp.origins]
    meta_path, trip_path = exp.out / "kernel.meta.json", exp.out / "kernel.triplets.csv"
    with atomic_path(meta_path) as tmp_meta, atomic_path(trip_path) as tmp_trip:
        export_kernel(kernel, tmp_meta, tmp_trip, rows=rows)
    if exp.general:
        g = exp.prepared[0]
        meta = json.loads(meta_path.read_text())
        meta["transform"] = repr(g)
        meta["transform_certificate"] = g.certificate
        write_json(meta_path, meta)
        return {"concave_certificate": bool(g.certificate["passed"])}
    return {}


def run_heat(exp: Experiment) -> dict:
    hc = exp.cfg.heat
    kernel = exp.kernel
    sites = exp.export_sites()
    summary = {"tables": []}
    verdicts = {}
    tables = []
    for origin in exp.origins:
        table = H.build_table(kernel, origin, hc.n_max, hc.eps_leak)
        tables.append(table)
        tag = _site_tag(origin)
        with atomic_path(exp.table_path(origin)) as tmp:
            H.save_table(table, tmp)
        with atomic_path(exp.out / "heat" / f"h_{tag}.csv") as tmp:
            H.export_table_csv(table, tmp, sites)
        rows = [H.poissonize(table, t, hc.eps_poisson) for t in hc.t_grid
                if H.poisson_range(t, hc.eps_poisson)[1] <= table.depth]
        with atomic_path(exp.out / "heat" / f"q_{tag}.csv") as tmp:
            H.export_poisson_csv(rows, kernel, tmp, sites)
        prof = H.diagonal_profile(table)
        half = table.depth // 2
        summary["tables"].append({
            "origin": list(origin) if isinstance(origin, tuple) else origin,
            "depth": table.depth, "leak": table.leak[-1], "clipped": table.clipped,
            "chapman_residual": H.chapman_check(table, table, half, table.depth - half),
            "chapman_tolerance": H.chapman_tolerance(table, table, half, table.depth - half),
            "diagonal_violations": prof.violations,
            "poisson": [{"t": r.t, "k_range": list(r.series_range),
                         "tail_bound": r.tail_bound} for r in rows],
        })
        verdicts[f"diagonal_monotone_{tag}"] = prof.passed
    write_json(exp.out / "heat" / "summary.json", summary)
    return verdicts


def run_simulate(exp: Experiment) -> dict:
    """Monte Carlo estimates; the comparisons are recorded but carry no verdict."""
    mc = exp.cfg.montecarlo
    if exp.general:
        write_json(exp.out / "mc" / "summary.json",
                   {"skipped": "no simulation on the transformed metric",
                    "gamma": None, "gamma_capped": 1.0 / 9.0})
        return {}
    kernel = exp.kernel
    beta = kernel.phi.beta
    sampler = MC.make_sampler(kernel)
    origin = exp.origins[0]
    exits, collapse = [], []
    for r in mc.exit_r:
        t = mc.exit_t_fraction * r ** beta
        a = MC.exit_probability(kernel, origin, r, t, mc.n_paths, mc.seed, mc.continuous,
                                exp.workers, sampler)
        b = MC.exit_probability(kernel, origin, 2 * r, 2 ** beta * t, mc.n_paths, mc.seed,
                                mc.continuous, exp.workers, sampler)
        exits += [a, b]
        gap = abs(a.estimate - b.estimate)
        joint = math.hypot(a.half_width, b.half_width)
        collapse.append({"r": r, "t": t, "p_r": a.estimate, "p_2r": b.estimate,
                         "gap": gap, "joint_half_width": joint, "agree": gap <= joint})
    hits = []
    for d in mc.hit_d:
        y = (int(d),) + (0,) * (len(origin) - 1) if isinstance(origin, tuple) else d
        hits.append(MC.hitting_probability(kernel, origin, y, mc.hit_n, mc.n_paths, mc.seed,
                                           mc.continuous, exp.workers, mc.max_censored,
                                           sampler))
    est = [h.estimate for h in hits]
    slope = float(np.polyfit(np.log(mc.hit_d), np.log(est), 1)[0]) if min(est) > 0 else None
    x_samples = [tuple(x) for x in mc.gamma_x]
    g1 = MC.estimate_gamma(kernel, x_samples, mc.gamma_r, mc.gamma_paths, mc.seed,
                           workers=exp.workers)
    g4 = MC.estimate_gamma(kernel, x_samples, mc.gamma_r, 4 * mc.gamma_paths, mc.seed,
                           workers=exp.workers)
    with atomic_path(exp.out / "mc" / "exit.csv") as tmp:
        MC.export_stats_csv(exits, tmp)
    with atomic_path(exp.out / "mc" / "hitting.csv") as tmp:
        MC.export_stats_csv(hits, tmp)
    with atomic_path(exp.out / "mc" / "gamma.csv") as tmp:
        _write_gamma_csv(g1.table, tmp)
    write_json(exp.out / "mc" / "summary.json", {
        "n_paths": mc.n_paths, "seed": mc.seed,
        "exit_scale_collapse": collapse,
        "hitting": [h.to_dict() for h in hits], "hitting_loglog_slope": slope,
        "gamma": g1.gamma, "gamma_4x_paths": g4.gamma, "gamma_capped": g1.capped(),
        "gamma_ratio": max(g1.gamma, g4.gamma) / min(g1.gamma, g4.gamma),
    })
    return {}


def _write_gamma_csv(table, path):
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        keys = ["x", "r", "gamma", "steps", "estimate", "ci_low", "ci_high", "feasible"]
        wr.writerow(keys)
        for row in table:
            wr.writerow([";".join(map(str, row["x"])) if k == "x" else row[k] for k in keys])


def run_verify(exp: Experiment) -> dict:
    cfg, vc = exp.cfg, exp.cfg.verify
    tables = exp.load_tables()
    kernel = exp.kernel
    space, phi = exp.space, exp.phi
    reports = {}
    if exp.general:
        scan = {"target_radius": vc.target_radius, "drift_factor": vc.drift_factor}
        rep, _, _ = V.general_phi_pipeline(space, cfg.phi.l, phi.beta, cfg.delta, scan,
                                           prepared=exp.prepared, table=tables[0])
        reports["general_phi_hkp"] = rep
    else:
        gamma = exp.load_gamma()
        beta = phi.beta
        prof = space.profile
        target = vc.target_radius if exp.lattice else None
        reports["hkp"] = V.hkp_scan(tables, phi, prof, target_radius=target,
                                    drift_factor=vc.drift_factor, keep_points=True)
        rows = [H.poissonize(t, s, cfg.heat.eps_poisson) for t in tables for s in cfg.heat.t_grid
                if H.poisson_range(s, cfg.heat.eps_poisson)[1] <= t.depth]
        reports["diagonal_decay"] = V.diagonal_decay(
            tables, prof, beta, n_min=vc.diag_n_min, poisson_rows=rows,
            max_width=vc.diag_max_width, drift_factor=vc.drift_factor)
        if phi.slowly_varying.is_constant:
            reports["qt_bound"] = V.qt_bound_scan(rows, kernel, phi, prof, target,
                                                  vc.drift_factor)
        reports["near_diagonal"] = V.near_diagonal_lower(tables, prof, beta, vc.c2_grid,
                                                         drift_factor=vc.drift_factor)
        harnack = V.harnack_scan(tables, [R for R in vc.harnack_R
                                          if math.floor(8 * gamma * R ** beta) <= tables[0].depth],
                                 gamma, drift_factor=vc.drift_factor)
        reports["harnack"] = harnack
        if exp.lattice:
            rng = np.random.default_rng(vc.function_seed)
            fs = V.random_bumps(kernel, vc.n_functions, rng, vc.bump_center_radius,
                                vc.bump_max_width)
            alpha = vc.nash_alpha or max(beta, math.log2(prof.doubling_constant)) + 0.5
            reports["nash"] = V.nash_check(kernel, prof, fs, vc.nash_R, alpha)
            reports["pseudo_poincare"] = V.pseudo_poincare_check(kernel, fs, vc.pp_r)
            reports["contraction"] = V.contraction_check(kernel, fs, rng)
            reports["tail_sums"] = tail_sum_report(space, beta, vc.tail_r,
                                                   cfg.space.window_radius)
    verdicts = {}
    for name, rep in reports.items():
        write_json(exp.out / "reports" / f"{name}.json", rep.to_dict())
        if isinstance(rep, V.BoundReport) and rep.points:
            with atomic_path(exp.out / "reports" / f"{name}.csv") as tmp:
                V.save_points_csv(rep, tmp)
        verdicts[name] = rep.passed
    return verdicts


def _tail_sums_adaptive(space, origin, r, beta, window_radius, max_sites=2 ** 22):
    """Tail sums, doubling the summation window until the complement remainder is small."""
    while True:
        try:
            return H.tail_sums(space, origin, r, beta, window_radius), window_radius
        except WindowTooSmallError:
            if (2 * (2 * window_radius) + 1) ** space.dimension > max_sites:
                raise
            window_radius *= 2


def tail_sum_report(space, beta: float, r_grid, window_radius: int,
                    max_factor: float = 4.0) -> V.BoundReport:
    """S1 r^beta and S2 r^{beta-2} across the r-grid; each must vary by < max_factor."""
    origin = (0,) * space.dimension
    sums, windows = [], []
    for r in r_grid:
        s, window_radius = _tail_sums_adaptive(space, origin, r, beta, window_radius)
        sums.append(s)
        windows.append(window_radius)
    a = np.array([s.s1 * s.r ** beta for s in sums])
    b = np.array([s.s2 * s.r ** (beta - 2) for s in sums])
    rep = V.BoundReport("tail_sums", {"r": list(map(float, r_grid)), "beta": beta,
                                      "window_radius": window_radius},
                        float(min(a.min(), b.min())), float(max(a.max(), b.max())))
    rep.checks["S1_scaling"] = a.max() / a.min() < max_factor
    rep.checks["S2_scaling"] = b.max() / b.min() < max_factor
    rep.checks["S1_below_bound"] = all(s.s1 <= s.bound1 for s in sums)
    rep.checks["S2_below_bound"] = all(s.s2 <= s.bound2 for s in sums)
    rep.annotations.update({
        "S1_r_beta": a.tolist(), "S2_r_beta_minus_2": b.tolist(),
        "summation_window_radius": windows, "C1": sums[0].c1, "C2": sums[0].c2,
        "remainder_fraction": [s.remainder / s.s1 for s in sums]})
    return rep


RUNNERS = {"audit": run_audit, "build": run_build, "heat": run_heat,
           "simulate": run_simulate, "verify": run_verify}
