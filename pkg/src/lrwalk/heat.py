"""Exact n-step heat kernels, their Poissonization and the related checks.

Rows are stored as densities h_n(x_0, .) = p_n(x_0, .) / mu over the kernel's
window.  Each step is the row-vector/kernel product, so on an explicit finite
space the table reproduces dense matrix powers up to rounding.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InsufficientDepthError, LeakBudgetExceeded, WindowTooSmallError
from .kernel import TransitionKernel
from .space import MetricMeasureSpace, TransformedSpace

DEFAULT_EPS_LEAK = 1e-6
DEFAULT_EPS_POISSON = 1e-12


@dataclass(frozen=True)
class HeatTable:
    kernel: TransitionKernel
    origin: int                       # window index of x_0
    rows: tuple                       # h_n(x_0, .) for n = 0..depth
    leak: tuple                       # cumulative lost mass lambda_n
    eps_leak: float = DEFAULT_EPS_LEAK
    clipped: float = 0.0              # largest negative rounding residue set to 0

    @classmethod
    def start(cls, kernel: TransitionKernel, origin, eps_leak: float = DEFAULT_EPS_LEAK):
        """Table holding only h_0(x_0, y) = delta_{x_0, y} / mu_y; ``origin`` is a window site."""
        idx = kernel.window.index(origin)
        h0 = np.zeros(kernel.n_sites)
        h0[idx] = 1.0 / kernel.mu[idx]
        return cls(kernel, int(idx), (h0,), (0.0,), eps_leak)

    @property
    def depth(self) -> int:
        return len(self.rows) - 1

    @property
    def origin_site(self):
        return self.kernel.window.sites[self.origin]

    @property
    def mu(self) -> np.ndarray:
        return self.kernel.mu

    def h(self, n: int) -> np.ndarray:
        if n > self.depth:
            raise InsufficientDepthError(f"table depth {self.depth} < {n}", required=n)
        return self.rows[n]

    def mass(self, n: int) -> float:
        return math.fsum(self.rows[n] * self.mu)

    @property
    def max_h(self) -> float:
        return max(float(r.max()) for r in self.rows)

    def leak_tolerance(self, n: int) -> float:
        """Leak-aware absolute slack 2 lambda_n max h (plus rounding)."""
        return 2.0 * self.leak[min(n, self.depth)] * self.max_h + 1e-13 * self.max_h


def evolve(table: HeatTable, steps: int) -> HeatTable:
    """Append ``steps`` rows using h_{n+1} mu = (h_n mu) P."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    kernel, mu = table.kernel, table.mu
    rows, leak = list(table.rows), list(table.leak)
    clipped = table.clipped
    p = rows[-1] * mu
    for _ in range(steps):
        p = kernel.step(p)
        neg = p < 0
        if neg.any():
            clipped = max(clipped, float(-p[neg].min()))
            p = np.where(neg, 0.0, p)
        lam = max(leak[-1], 1.0 - math.fsum(p), 0.0)
        n = len(rows)
        if lam > table.eps_leak:
            raise LeakBudgetExceeded(
                f"leak {lam:.3g} exceeds budget {table.eps_leak:g} at n={n}", n_reached=n)
        rows.append(p / mu)
        leak.append(lam)
    return HeatTable(kernel, table.origin, tuple(rows), tuple(leak), table.eps_leak, clipped)


def build_table(kernel: TransitionKernel, origin, n_max: int,
                eps_leak: float = DEFAULT_EPS_LEAK) -> HeatTable:
    table = HeatTable.start(kernel, origin, eps_leak)
    return evolve(table, n_max) if n_max > 0 else table


def chapman_check(table_a: HeatTable, table_b: HeatTable, n: int, m: int) -> float:
    """|h_{n+m}(x_0, y_0) - sum_z h_n(x_0, z) h_m(z, y_0) mu_z| using h_m(z, y_0) = h_m(y_0, z)."""
    y0 = table_b.origin
    lhs = table_a.h(n + m)[y0]
    rhs = math.fsum(table_a.h(n) * table_b.h(m) * table_a.mu)
    return abs(lhs - rhs)


def chapman_tolerance(table_a: HeatTable, table_b: HeatTable, n: int, m: int) -> float:
    lam = max(table_a.leak[min(n + m, table_a.depth)], table_b.leak[min(m, table_b.depth)])
    hmax = max(table_a.max_h, table_b.max_h)
    return 2.0 * lam * hmax + 1e-12 * hmax


# ---------------------------------------------------------------------------
# Poissonization


@dataclass(frozen=True)
class PoissonRow:
    t: float
    origin: int
    values: np.ndarray
    series_range: tuple
    tail_bound: float


def poisson_range(t: float, eps: float) -> tuple:
    """[k_min, k_max] with Poisson(t) mass outside at most eps (eps/2 per side)."""
    if t == 0:
        return 0, 0
    dist = stats.poisson(t)
    half = eps / 2.0
    k_max = int(dist.isf(half))
    while dist.sf(k_max) > half:
        k_max += 1
    k_min = int(dist.ppf(half))
    while k_min > 0 and dist.cdf(k_min - 1) > half:
        k_min -= 1
    return max(k_min, 0), k_max


def poisson_weights(t: float, k_min: int, k_max: int) -> np.ndarray:
    """e^{-t} t^k / k! for k_min..k_max by recurrence outward from the mode."""
    if t == 0:
        return np.ones(1)
    mode = min(max(int(math.floor(t)), k_min), k_max)
    w = np.empty(k_max - k_min + 1)
    w[mode - k_min] = math.exp(-t + mode * math.log(t) - math.lgamma(mode + 1))
    for k in range(mode + 1, k_max + 1):
        w[k - k_min] = w[k - 1 - k_min] * t / k
    for k in range(mode - 1, k_min - 1, -1):
        w[k - k_min] = w[k + 1 - k_min] * (k + 1) / t
    return w


def poissonize(table: HeatTable, t: float, eps_poisson: float = DEFAULT_EPS_POISSON) -> PoissonRow:
    """q_t(x_0, .) = sum_k e^{-t} t^k/k! h_k(x_0, .) truncated to the central range."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    k_min, k_max = poisson_range(t, eps_poisson)
    if k_max > table.depth:
        raise InsufficientDepthError(
            f"poissonize(t={t}) needs table depth {k_max} > {table.depth}", required=k_max)
    w = poisson_weights(t, k_min, k_max)
    stack = np.stack(table.rows[k_min:k_max + 1])
    values = w @ stack
    if t == 0:
        tail = 0.0
    else:
        dist = stats.poisson(t)
        tail = float(dist.sf(k_max) + (dist.cdf(k_min - 1) if k_min > 0 else 0.0))
    return PoissonRow(float(t), table.origin, values, (k_min, k_max), tail)


# ---------------------------------------------------------------------------
# Diagonal monotonicity and Cauchy-Schwarz


@dataclass
class DiagonalProfile:
    ns: np.ndarray
    values: np.ndarray
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def diagonal_profile(table: HeatTable, slack: float | None = None) -> DiagonalProfile:
    """(n, h_n(x_0, x_0)); even-indexed values must be non-increasing up to leak slack."""
    if table.depth < 2:
        raise InsufficientDepthError("diagonal profile needs depth >= 2", required=2)
    ns = np.arange(table.depth + 1)
    vals = np.array([r[table.origin] for r in table.rows])
    viol = []
    for n in range(0, table.depth - 1, 2):
        tol = table.leak_tolerance(n + 2) if slack is None else slack
        if vals[n + 2] > vals[n] + tol:
            viol.append({"n": n + 2, "value": float(vals[n + 2]), "previous": float(vals[n])})
    return DiagonalProfile(ns, vals, viol)


def cauchy_schwarz_violations(tables: list, n: int, slack: float = 0.0) -> list:
    """Pairs violating h_{2n}(x,y) <= (h_{2n}(x,x) h_{2n}(y,y))^{1/2} among table origins."""
    out = []
    for ta in tables:
        for tb in tables:
            hxy = ta.h(2 * n)[tb.origin]
            bound = math.sqrt(ta.h(2 * n)[ta.origin] * tb.h(2 * n)[tb.origin])
            if hxy > bound * (1 + 1e-15) + slack:
                out.append((ta.origin, tb.origin, float(hxy), bound))
    return out


# ---------------------------------------------------------------------------
# Tail sums


@dataclass
class TailSums:
    r: float
    beta: float
    s1: float
    s2: float
    bound1: float                     # C_1 r^{-beta}
    bound2: float                     # C_2 r^{2-beta}
    c1: float
    c2: float
    remainder: float                  # bound on the window-complement part of S1


def tail_constants(space: MetricMeasureSpace, beta: float) -> tuple:
    """Constants of the dyadic-shell argument: C_h C_D / (1 - 2^-beta) and
    C_h C_D 2^{2-beta} / (1 - 2^{beta-2})."""
    ch = space.profile.homogeneity_constant
    cd = space.profile.doubling_constant
    return ch * cd / (1 - 2.0 ** -beta), ch * cd * 2.0 ** (2 - beta) / (1 - 2.0 ** (beta - 2))


def _complement_remainder(space, x, radius: float, beta: float, shells_per_octave: int = 8,
                          octaves: int = 60) -> float:
    """Upper bound for sum over d(x,y) > radius of mu_y / (V_h(d) d^beta).

    Shells (R q^k, R q^{k+1}] with q = 2^{1/8}; each term is bounded by the
    shell volume over V_h(inner) inner^beta, the rest by the crude dyadic
    estimate C_1 r^{-beta}.
    """
    q = 2.0 ** (1.0 / shells_per_octave)
    radii = radius * q ** np.arange(shells_per_octave * octaves + 1)
    lat = space.lattice
    base = radii
    if isinstance(space, TransformedSpace):
        base = np.asarray(space.g.inverse(radii))
    vols = lat.volumes(x, base) if lat is not None and lat.constant_measure else \
        np.array([space.profile(r) * space.profile.homogeneity_constant for r in radii])
    shell = np.diff(vols)
    inner = radii[:-1]
    terms = shell / (space.profile(inner) * inner ** beta)
    c1, _ = tail_constants(space, beta)
    return math.fsum(terms) + c1 * radii[-1] ** -beta


def tail_sums(space: MetricMeasureSpace, x, r: float, beta: float,
              window_radius: int | None = None, max_remainder: float = 0.1) -> TailSums:
    """S1 = sum_{y in window, d > r} mu_y/(V_h(d) d^beta); S2 = sum_{0<d<=r} d^{2-beta} mu_y/V_h(d)."""
    if r <= 0:
        raise ValueError("r must be positive")
    window = space.window(window_radius, center=x) if space.lattice is not None \
        else space.window()
    xs = space.normalize(x)
    if space.lattice is not None:
        lat = space.lattice
        base = lat.norm_of(window.coords - np.array(xs)).astype(float)
        d = np.asarray(space.g(base)) if isinstance(space, TransformedSpace) else base
    else:
        d = np.array([space.distance(xs, y) for y in window.sites])
    mu = window.mu
    prof = space.profile
    far = d > r
    near = (d > 0) & ~far
    s1 = math.fsum(mu[far] / (prof(d[far]) * d[far] ** beta))
    s2 = math.fsum(d[near] ** (2 - beta) * mu[near] / prof(d[near]))
    remainder = 0.0
    if space.lattice is not None:
        reach = float(space.distance(xs, tuple(c + int(window.radius) if k == 0 else c
                                               for k, c in enumerate(xs))))
        if r >= reach:
            raise WindowTooSmallError(f"r={r} is not inside the window (reach {reach})")
        remainder = _complement_remainder(space, xs, reach, beta)
        if remainder >= max_remainder * s1:
            raise WindowTooSmallError(
                f"window-complement remainder {remainder:.3g} exceeds "
                f"{max_remainder:.0%} of S1={s1:.3g}")
    c1, c2 = tail_constants(space, beta)
    return TailSums(float(r), float(beta), s1, s2, c1 * r ** -beta, c2 * r ** (2 - beta),
                    c1, c2, remainder)


# ---------------------------------------------------------------------------
# Export / import


def _site_str(site) -> str:
    return ";".join(str(c) for c in site) if isinstance(site, tuple) else str(site)


def export_table_csv(table: HeatTable, path, sites=None):
    """CSV with columns n, site, h, leak; ``sites`` restricts the window indices."""
    sites = range(table.kernel.n_sites) if sites is None else sites
    names = [_site_str(table.kernel.window.sites[i]) for i in sites]
    idx = np.asarray(list(sites), dtype=int)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "site", "h", "leak"])
        for n, row in enumerate(table.rows):
            lam = repr(float(table.leak[n]))
            for name, v in zip(names, row[idx]):
                wr.writerow([n, name, repr(float(v)), lam])


def export_poisson_csv(rows: list, kernel: TransitionKernel, path, sites=None):
    sites = range(kernel.n_sites) if sites is None else sites
    idx = np.asarray(list(sites), dtype=int)
    names = [_site_str(kernel.window.sites[i]) for i in idx]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "site", "q", "k_min", "k_max", "tail_bound"])
        for pr in rows:
            for name, v in zip(names, pr.values[idx]):
                wr.writerow([repr(pr.t), name, repr(float(v)), pr.series_range[0],
                             pr.series_range[1], repr(pr.tail_bound)])


def save_table(table: HeatTable, path):
    with open(path, "wb") as fh:
        np.savez_compressed(fh, rows=np.stack(table.rows), leak=np.array(table.leak),
                            origin=table.origin, eps_leak=table.eps_leak,
                            clipped=table.clipped, n_sites=table.kernel.n_sites)


def load_table(kernel: TransitionKernel, path) -> HeatTable:
    with np.load(path) as data:
        if int(data["n_sites"]) != kernel.n_sites:
            raise ValueError(f"{path}: table was built on a different window")
        rows = tuple(np.array(r) for r in data["rows"])
        return HeatTable(kernel, int(data["origin"]), rows, tuple(map(float, data["leak"])),
                         float(data["eps_leak"]), float(data["clipped"]))
