"""Empirical certificates for the heat kernel estimates and functional inequalities.

Existential constants are rendered as measured bands: every scan records the
ratio of the computed quantity to its bound envelope, the extreme ratios per
dyadic slice of the time parameter, and a verdict that only depends on the
stored numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyScanError, InsufficientDepthError, ZeroMinimumError
from .heat import HeatTable
from .kernel import (TransitionKernel, build_kernel, dirichlet_energy, local_average)
from .rv import (RegVaryingFn, SlowlyVaryingFn, concave_regularize,
                 de_bruijn_conjugate, de_bruijn_residual, transform_space)
from .space import MetricMeasureSpace, TransformedSpace, VolumeProfile

DEFAULT_DRIFT = 2.0


# ---------------------------------------------------------------------------
# Reports


@dataclass
class BoundReport:
    name: str
    grid: dict
    c_low: float
    c_up: float
    slices: list = field(default_factory=list)
    drift_factor: float = DEFAULT_DRIFT
    one_sided: bool = False
    checks: dict = field(default_factory=dict)
    annotations: dict = field(default_factory=dict)
    children: list = field(default_factory=list)
    points: dict | None = field(default=None, repr=False)

    @property
    def drifts(self) -> list:
        """Largest factor between matching band ends of consecutive slices."""
        out = []
        for a, b in zip(self.slices, self.slices[1:]):
            keys = ("hi",) if self.one_sided else ("lo", "hi")
            out.append(max(max(b[k] / a[k], a[k] / b[k]) for k in keys))
        return out

    @property
    def max_drift(self) -> float:
        return max(self.drifts, default=1.0)

    @property
    def passed(self) -> bool:
        if not (self.c_low > 0 and math.isfinite(self.c_up)):
            return False
        if self.max_drift >= self.drift_factor:
            return False
        return all(self.checks.values()) and all(c.passed for c in self.children)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {"name": self.name, "grid": self.grid, "c_low": self.c_low, "c_up": self.c_up,
                "slices": self.slices, "drifts": self.drifts, "max_drift": self.max_drift,
                "drift_factor": self.drift_factor, "one_sided": self.one_sided,
                "checks": self.checks, "annotations": self.annotations,
                "children": [c.to_dict() for c in self.children], "verdict": self.verdict}


@dataclass
class HarnackReport:
    R: list
    ratios: list
    gamma: float
    R0: float | None
    c_h: float
    parabolicity_residual: float
    parabolicity_tolerance: float
    drift_factor: float = DEFAULT_DRIFT
    details: list = field(default_factory=list)

    @property
    def drift(self) -> float:
        rs = [r for R, r in zip(self.R, self.ratios) if self.R0 is not None and R >= self.R0]
        return max((b / a for a, b in zip(rs, rs[1:])), default=1.0)

    @property
    def passed(self) -> bool:
        return (all(math.isfinite(r) and r >= 1 for r in self.ratios)
                and self.parabolicity_residual <= self.parabolicity_tolerance
                and self.drift < self.drift_factor)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update({"C_H_emp": self.c_h, "drift": self.drift, "verdict": self.verdict})
        return d


def _slice_bands(ns: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> list:
    """Per-slice extremes over n in [2^j, 2^{j+1})."""
    out = []
    js = np.floor(np.log2(ns)).astype(int)
    for j in np.unique(js):
        sel = js == j
        out.append({"j": int(j), "n_from": float(ns[sel].min()), "n_to": float(ns[sel].max()),
                    "lo": float(lo[sel].min()), "hi": float(hi[sel].max())})
    return out


def _report_from_rows(name, grid, ns, lo, hi, **kw) -> BoundReport:
    ns, lo, hi = map(np.asarray, (ns, lo, hi))
    if ns.size == 0:
        raise EmptyScanError(f"{name}: empty scan set")
    return BoundReport(name, grid, float(lo.min()), float(hi.max()),
                       _slice_bands(ns, lo, hi), **kw)


def save_report_json(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def save_points_csv(report: BoundReport, path):
    """Per-point ratios (only for reports that kept their points)."""
    pts = report.points or {}
    keys = list(pts)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for row in zip(*(pts[k] for k in keys)):
            wr.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Distances and envelopes


def _site_distances(table: HeatTable, space: MetricMeasureSpace | None = None) -> np.ndarray:
    """d(x_0, y) for every window site, in ``space``'s metric (kernel space by default)."""
    kernel = table.kernel
    space = space or kernel.space
    window = kernel.window
    if window.coords is not None and space.lattice is not None:
        base = space.lattice.norm_of(window.coords - window.coords[table.origin]).astype(float)
        if isinstance(space, TransformedSpace):
            return np.asarray(space.g(base))
        return base
    x0 = window.sites[table.origin]
    return np.array([space.distance(x0, y) for y in window.sites])


def _target_mask(table: HeatTable, target_radius) -> np.ndarray:
    window = table.kernel.window
    if target_radius is None or window.coords is None:
        return np.ones(len(window), bool)
    lat = table.kernel.space.lattice
    base = lat.norm_of(window.coords - window.coords[table.origin])
    return base <= target_radius


def de_bruijn_provider(l: SlowlyVaryingFn, x_min: float = 10.0, tol: float = 1e-12):
    """x -> l_#(max(x, x_min)); below x_min the conjugate is frozen at its x_min value."""
    cache = {}

    def provider(x):
        x = max(float(x), x_min)
        if x not in cache:
            cache[x] = de_bruijn_conjugate(l, x, tol=tol, x_min=x_min)
        return cache[x]

    provider.cache = cache
    provider.l = l
    return provider


def hkp_envelope(n, d, phi: RegVaryingFn, profile: VolumeProfile, l_sharp=None):
    """min(1/V_h(n^{1/beta} l_#(n^{1/beta})), n/(V_h(d) phi(d)))."""
    x = n ** (1.0 / phi.beta)
    scale = x * (l_sharp(x) if l_sharp is not None else 1.0)
    d = np.asarray(d, dtype=float)
    return np.minimum(1.0 / profile(scale), n / (profile(d) * phi(d)))


# ---------------------------------------------------------------------------
# Scans


def hkp_scan(tables, phi: RegVaryingFn, profile: VolumeProfile, l_sharp_provider=None,
             space: MetricMeasureSpace | None = None, target_radius=None, n_min: int = 1,
             n_max: int | None = None, drift_factor: float = DEFAULT_DRIFT,
             leak_fraction: float = 0.1, keep_points: bool = False) -> BoundReport:
    """Two-sided scan of rho = h_n(x_0, y) / env(n, d(x_0, y))."""
    kernels = {id(t.kernel) for t in tables}
    if len(kernels) != 1:
        raise ValueError("tables must share one kernel")
    ns, lo, hi, excluded = [], [], [], 0
    pts = {"n": [], "origin": [], "d": [], "h": [], "envelope": [], "ratio": []}
    for t in tables:
        dist = _site_distances(t, space)
        mask = _target_mask(t, target_radius)
        top = t.depth if n_max is None else min(n_max, t.depth)
        for n in range(n_min, top + 1):
            env = hkp_envelope(n, dist[mask], phi, profile, l_sharp_provider)
            h = t.h(n)[mask]
            keep = t.leak_tolerance(n) <= leak_fraction * env
            excluded += int((~keep).sum())
            if not keep.any():
                continue
            ratio = h[keep] / env[keep]
            ns.append(n)
            lo.append(ratio.min())
            hi.append(ratio.max())
            if keep_points:
                pts["n"] += [n] * int(keep.sum())
                pts["origin"] += [t.origin] * int(keep.sum())
                pts["d"] += list(dist[mask][keep])
                pts["h"] += list(h[keep])
                pts["envelope"] += list(env[keep])
                pts["ratio"] += list(ratio)
    grid = {"n_min": n_min, "n_max": max(ns, default=None), "target_radius": target_radius,
            "origins": [int(t.origin) for t in tables], "beta": phi.beta,
            "slowly_varying": phi.slowly_varying.to_spec()}
    lam = max(t.leak[-1] for t in tables)
    return _report_from_rows("hkp", grid, ns, lo, hi, drift_factor=drift_factor,
                             annotations={"leak": lam, "excluded_points": excluded},
                             points=pts if keep_points else None)


def diagonal_decay(tables, profile: VolumeProfile, beta: float, n_min: int = 4,
                   n_max: int | None = None, poisson_rows=None, max_width: float = 10.0,
                   drift_factor: float = DEFAULT_DRIFT) -> BoundReport:
    """h_n(x_0, x_0) V_h(n^{1/beta}) over n (and q_t(x_0, x_0) V_h(t^{1/beta}) over t)."""
    ns, vals = [], []
    for t in tables:
        top = t.depth if n_max is None else min(n_max, t.depth)
        for n in range(n_min, top + 1):
            ns.append(n)
            vals.append(t.h(n)[t.origin] * profile(n ** (1.0 / beta)))
    rep = _report_from_rows("diagonal_decay", {"n_min": n_min, "n_max": max(ns, default=None),
                                               "beta": beta}, ns, vals, vals,
                            drift_factor=drift_factor)
    rep.checks["band_width"] = rep.c_up / rep.c_low <= max_width
    rep.annotations["band_width"] = rep.c_up / rep.c_low
    rep.annotations["max_width"] = max_width
    if poisson_rows:
        ts = [r.t for r in poisson_rows]
        qv = [r.values[r.origin] * profile(r.t ** (1.0 / beta)) for r in poisson_rows]
        child = _report_from_rows("diagonal_decay_qt", {"t": ts, "beta": beta},
                                  ts, qv, qv, drift_factor=drift_factor)
        child.checks["band_width"] = child.c_up / child.c_low <= max_width
        child.annotations["band_width"] = child.c_up / child.c_low
        rep.children.append(child)
    return rep


def qt_bound_scan(poisson_rows, kernel: TransitionKernel, phi_pure_power: RegVaryingFn,
                  profile: VolumeProfile, target_radius=None,
                  drift_factor: float = DEFAULT_DRIFT) -> BoundReport:
    """Upper band of q_t(x_0, y) / min(1/V_h(t^{1/beta}), t/(V_h(d)(1+d)^beta))."""
    if not phi_pure_power.slowly_varying.is_constant:
        raise ValueError("q_t bound scan needs a pure-power phi")
    beta = phi_pure_power.beta
    ts, lo, hi = [], [], []
    for row in poisson_rows:
        if row.t <= 0:
            continue
        probe = HeatTable(kernel, row.origin, (row.values,), (0.0,))
        dist = _site_distances(probe)
        mask = _target_mask(probe, target_radius)
        d = dist[mask]
        env = np.minimum(1.0 / profile(row.t ** (1.0 / beta)),
                         row.t / (profile(d) * (1.0 + d) ** beta))
        ratio = row.values[mask] / env
        ts.append(row.t)
        lo.append(ratio.min())
        hi.append(ratio.max())
    tails = [r.tail_bound for r in poisson_rows]
    return _report_from_rows("qt_bound", {"t": ts, "beta": beta, "target_radius": target_radius},
                             ts, lo, hi, drift_factor=drift_factor, one_sided=True,
                             annotations={"max_tail_bound": max(tails, default=0.0)})


def near_diagonal_lower(tables, profile: VolumeProfile, beta: float, c2_grid,
                        n_min: int = 1, floor_fraction: float = 0.1,
                        drift_factor: float = DEFAULT_DRIFT) -> BoundReport:
    """Minimal h_n(x_0, y) V_h(n^{1/beta}) over the cone d <= c_2 n^{1/beta}, per c_2.

    The floor is ``floor_fraction`` times the smallest diagonal ratio of the
    scan, so it scales with the measured diagonal band.  The report carries
    the largest c_2 whose cone minimum stays above the floor with slice
    drift below ``drift_factor``.
    """
    c2_grid = sorted(float(c) for c in c2_grid)
    diag_min = math.inf
    per_c2 = {c: ([], []) for c in c2_grid}
    for t in tables:
        dist = _site_distances(t)
        for n in range(n_min, t.depth + 1):
            row = t.h(n) * profile(n ** (1.0 / beta))
            diag_min = min(diag_min, row[t.origin])
            for c in c2_grid:
                cone = dist <= c * n ** (1.0 / beta)
                per_c2[c][0].append(n)
                per_c2[c][1].append(float(row[cone].min()))
    floor = floor_fraction * diag_min
    table, best, best_rep = [], None, None
    for c in c2_grid:
        ns, mins = per_c2[c]
        rep = _report_from_rows(f"near_diagonal_c2={c:g}", {"c2": c}, ns, mins, mins,
                                drift_factor=drift_factor)
        ok = rep.c_low >= floor and rep.max_drift < drift_factor
        table.append({"c2": c, "min_ratio": rep.c_low, "max_drift": rep.max_drift, "ok": ok})
        if ok:
            best, best_rep = c, rep
    if best_rep is None:
        ns, mins = per_c2[c2_grid[0]]
        best_rep = _report_from_rows("near_diagonal", {}, ns, mins, mins,
                                     drift_factor=drift_factor)
        best_rep.checks["c2_found"] = False
    best_rep.name = "near_diagonal"
    best_rep.grid = {"c2_grid": c2_grid, "n_min": n_min, "beta": beta}
    best_rep.annotations.update({"c2": best, "floor": floor, "diag_min": diag_min,
                                 "table": table})
    return best_rep


# ---------------------------------------------------------------------------
# Functional inequalities


def _norms(kernel, f):
    mu = kernel.mu
    return math.sqrt(math.fsum(f * f * mu)), math.fsum(np.abs(f) * mu)


def nash_constant(energy: float, l2: float, l1: float, R: float, vol: float,
                  alpha: float, beta: float, c2: float = 1.0) -> float:
    """Smallest C_1 in ||f||_2 <= C_1 ((R^a/V(R))^{b/a}(E + C_2 R^-b ||f||_2^2))^{a/(2(a+b))} ||f||_1^{b/(a+b)}."""
    base = (R ** alpha / vol) ** (beta / alpha) * (energy + c2 * R ** -beta * l2 * l2)
    rhs = base ** (alpha / (2 * (alpha + beta))) * l1 ** (beta / (alpha + beta))
    return l2 / rhs


def nash_check(kernel: TransitionKernel, profile: VolumeProfile, f_samples, R_grid,
               alpha: float, beta: float | None = None, stability: float = 1.25) -> BoundReport:
    """Minimal C_1 with C_2 = 1, maximised over samples; stable under sample doubling
    means the maximum over the first half is within ``stability`` of the full one."""
    beta = kernel.phi.beta if beta is None else beta
    if not alpha > max(beta, math.log2(profile.doubling_constant)):
        raise ValueError("alpha must exceed max(beta, log2 C_D)")
    vals = np.empty((len(f_samples), len(R_grid)))
    for i, f in enumerate(f_samples):
        f = np.asarray(f, dtype=float)
        if not np.any(f):
            raise ValueError("Nash samples must be nonzero")
        e = dirichlet_energy(kernel, f)
        l2, l1 = _norms(kernel, f)
        for j, R in enumerate(R_grid):
            vals[i, j] = nash_constant(e, l2, l1, R, profile(R), alpha, beta)
    full = float(vals.max())
    half = float(vals[: max(1, len(f_samples) // 2)].max())
    rep = BoundReport("nash", {"R": list(map(float, R_grid)), "alpha": alpha, "beta": beta,
                               "n_samples": len(f_samples)},
                      float(vals.min()), full)
    rep.checks["sample_doubling_stable"] = full / half <= stability
    rep.annotations.update({"max_C1": full, "max_C1_first_half": half,
                            "doubling_ratio": full / half,
                            "max_C1_per_R": [float(v) for v in vals.max(axis=0)]})
    return rep


def pseudo_poincare_check(kernel: TransitionKernel, f_samples, r_grid, beta: float | None = None,
                          stability: float = 2.0) -> BoundReport:
    """C_P(r) = max_f ||f - f_r||^2 / (r^beta E(f)); stable within ``stability`` across r."""
    beta = kernel.phi.beta if beta is None else beta
    mu = kernel.mu
    energies = [dirichlet_energy(kernel, np.asarray(f, float)) for f in f_samples]
    cps, boundary = [], 0
    for r in r_grid:
        best = 0.0
        for f, e in zip(f_samples, energies):
            f = np.asarray(f, dtype=float)
            fr, flags = local_average(kernel, f, r, return_flags=True)
            boundary += int(np.any(flags & (np.abs(fr) > 0)))
            best = max(best, math.fsum((f - fr) ** 2 * mu) / (r ** beta * e))
        cps.append(best)
    rep = BoundReport("pseudo_poincare", {"r": list(map(float, r_grid)), "beta": beta},
                      float(min(cps)), float(max(cps)))
    rep.checks["stable_across_r"] = max(cps) / min(cps) <= stability
    rep.annotations.update({"C_P": cps, "spread": max(cps) / min(cps),
                            "samples_touching_boundary": boundary})
    return rep


def contraction_check(kernel: TransitionKernel, f_samples, rng: np.random.Generator,
                      rel_tol: float = 1e-12) -> BoundReport:
    """E((f - t)^+ ^ s) <= E(f) for random s, t >= 0, one pair per sample."""
    ratios = []
    for f in f_samples:
        f = np.asarray(f, dtype=float)
        top = float(np.abs(f).max())
        t, s = rng.uniform(0, top), rng.uniform(0, top)
        g = np.minimum(np.maximum(f - t, 0.0), s)
        ef = dirichlet_energy(kernel, f)
        ratios.append(dirichlet_energy(kernel, g) / ef if ef > 0 else 0.0)
    worst = max(ratios)
    rep = BoundReport("contraction", {"n_tests": len(ratios)}, 1.0, worst)
    rep.checks["all_contract"] = worst <= 1.0 + rel_tol
    rep.annotations["max_energy_ratio"] = worst
    rep.annotations["violations"] = int(sum(r > 1.0 + rel_tol for r in ratios))
    return rep


def random_bumps(kernel: TransitionKernel, count: int, rng: np.random.Generator,
                 center_radius: int, max_width: int = 64) -> list:
    """Random nonnegative tent functions with compact support inside the window."""
    window = kernel.window
    lat = kernel.space.lattice
    out = []
    for _ in range(count):
        centre = rng.integers(-center_radius, center_radius + 1, size=lat.dimension)
        width = int(rng.integers(1, max_width + 1))
        amp = rng.uniform(0.5, 2.0)
        d = lat.norm_of(window.coords - (np.array(window.center) + centre))
        out.append(amp * np.maximum(0.0, 1.0 - d / (width + 1.0)))
    return out


# ---------------------------------------------------------------------------
# Parabolic Harnack


def parabolicity_residual(table: HeatTable, n0: int) -> float:
    """max |q_k - P q_{k+1}| for q(k, .) = h_{n0-k}(x_0, .), 0 <= k < n0."""
    if n0 > table.depth:
        raise InsufficientDepthError(f"need depth {n0}", required=n0)
    worst = 0.0
    for m in range(1, n0 + 1):
        worst = max(worst, float(np.abs(table.kernel.apply(table.h(m - 1)) - table.h(m)).max()))
    return worst


def harnack_scan(tables, R_list, gamma: float, beta: float | None = None,
                 drift_factor: float = DEFAULT_DRIFT) -> HarnackReport:
    """Ratio max_{Q(floor(gamma R^b), z, R/3)} q / min_{B(z, R/3)} q(0, .) with z = x_0."""
    if gamma > 1.0 / 9.0 + 1e-15:
        raise ValueError("gamma must not exceed 1/9")
    ratios, details, res, tol = [], [], 0.0, 0.0
    R0 = None
    for R in R_list:
        worst = 1.0
        for table in tables:
            b = table.kernel.phi.beta if beta is None else beta
            n0 = int(math.floor(8 * gamma * R ** b))
            k_start = int(math.floor(gamma * R ** b))
            k_len = int(math.floor(gamma * (R / 3.0) ** b))
            if n0 > table.depth:
                raise InsufficientDepthError(f"R={R} needs depth {n0}", required=n0)
            dist = _site_distances(table)
            window = table.kernel.window
            if window.coords is not None:
                edge = table.kernel.space.distance(
                    window.sites[table.origin],
                    tuple(c + int(window.radius) if i == 0 else c
                          for i, c in enumerate(window.sites[table.origin])))
                if edge < 2 * R:
                    raise ValueError(f"window does not contain B(z, {2 * R})")
            ball = dist <= R / 3.0
            floor_vals = table.h(n0)[ball]
            low = float(floor_vals.min())
            if low <= 0:
                raise ZeroMinimumError(f"min of q(0, .) on B(z, {R / 3:g}) is zero")
            high = max(float(table.h(n0 - k)[ball].max())
                       for k in range(k_start, min(k_start + k_len, n0) + 1))
            ratio = high / low
            worst = max(worst, ratio)
            if n0 >= 1:
                res = max(res, parabolicity_residual(table, n0))
            tol = max(tol, table.leak_tolerance(n0))
            details.append({"R": R, "origin": table.origin, "n0": n0, "k_start": k_start,
                            "k_len": k_len, "ratio": ratio, "ball_sites": int(ball.sum())})
            if R0 is None and k_start >= 1:
                R0 = R
        ratios.append(worst)
    c_h = max((r for R, r in zip(R_list, ratios) if R0 is not None and R >= R0), default=math.nan)
    return HarnackReport(list(map(float, R_list)), ratios, gamma, R0, c_h, res, tol,
                         drift_factor, details)


# ---------------------------------------------------------------------------
# General phi via change of metric


def mn1_ratio(space: MetricMeasureSpace, tspace: TransformedSpace, l: SlowlyVaryingFn,
              beta: float, delta: float, r_grid, l_sharp) -> np.ndarray:
    """V_h'(r) / V_h(r^{delta/beta} l_#(r^{delta/beta})) on r_grid."""
    out = []
    for r in r_grid:
        x = r ** (delta / beta)
        out.append(tspace.profile(r) / space.profile(x * l_sharp(x)))
    return np.array(out)


def general_kernel(space: MetricMeasureSpace, phi: RegVaryingFn, delta: float,
                   theta_diag: float = 0.2, window_radius=None, boundary: str = "confine",
                   **kernel_kw):
    """Concave regularization at delta, change of metric, and the delta-stable kernel
    on the transformed space.  Returns (g, transformed space, kernel)."""
    if not phi.beta < delta < 2:
        raise ValueError("delta must lie in (beta, 2)")
    g = concave_regularize(phi, delta)
    tspace = transform_space(space, g)
    kernel = build_kernel(tspace, RegVaryingFn(delta), theta_diag, window_radius=window_radius,
                          boundary=boundary, **kernel_kw)
    return g, tspace, kernel


def general_phi_pipeline(space: MetricMeasureSpace, l_spec: dict, beta: float, delta: float,
                         scan_config: dict, prepared=None, table: HeatTable | None = None):
    """Regularize phi, change the metric, rebuild the kernel and scan the heat kernel
    against the general envelope.  ``prepared`` = (g, tspace, kernel) and ``table``
    reuse earlier stages.  Returns (report, kernel, table)."""
    from .heat import build_table

    l = SlowlyVaryingFn.from_spec(l_spec)
    phi = RegVaryingFn(beta, l)
    if prepared is None:
        prepared = general_kernel(space, phi, delta, scan_config.get("theta_diag", 0.2),
                                  scan_config["window_radius"],
                                  scan_config.get("boundary", "confine"))
    g, tspace, kernel = prepared
    if table is None:
        table = build_table(kernel, (0,) * space.lattice.dimension, scan_config["n_max"],
                            scan_config.get("eps_leak", 1e-6))
    drift = scan_config.get("drift_factor", DEFAULT_DRIFT)
    l_sharp = de_bruijn_provider(l, tol=scan_config.get("de_bruijn_tol", 1e-12))
    report = hkp_scan([table], phi, space.profile, l_sharp, space=space,
                      target_radius=scan_config.get("target_radius"), drift_factor=drift)
    r_grid = 2.0 ** np.arange(0, scan_config.get("mn1_octaves", 30) + 1)
    ratio = mn1_ratio(space, tspace, l, beta, delta, r_grid, l_sharp)
    mn1 = BoundReport("mn1_volume_ratio", {"r": list(map(float, r_grid))},
                      float(ratio.min()), float(ratio.max()),
                      [{"j": j, "lo": float(v), "hi": float(v)} for j, v in enumerate(ratio)],
                      drift_factor=drift)
    residuals = [de_bruijn_residual(l, x, y) for x, y in l_sharp.cache.items()]
    worst = max(residuals)
    cert = g.certificate
    report.name = "general_phi_hkp"
    report.checks["concave_certificate"] = bool(cert["passed"])
    report.checks["de_bruijn_residual"] = worst <= scan_config.get("de_bruijn_max", 1e-9)
    report.children.append(mn1)
    report.annotations.update({"certificate": cert, "transform": repr(g),
                               "de_bruijn_max_residual": worst,
                               "de_bruijn_points": len(residuals),
                               "kernel_scale": kernel.scale, "delta": delta})
    return report, kernel, table
