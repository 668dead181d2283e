"""Uniformly discrete metric measure spaces.

Three concrete kinds are provided: integer lattices Z^d with the L1 or
L-infinity metric, explicit finite spaces given by a distance matrix, and
spaces obtained from another one by composing its metric with a concave
increasing transform.  All spaces are immutable after construction.

Heavy computations never walk the whole (infinite) space; they work on a
finite :class:`Window` of sites.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import BudgetExceededError, InvalidSiteError, SpaceLoadError

Site = Hashable

DEFAULT_SITE_BUDGET = 5_000_000


class VolumeProfile:
    """Closed-form homogeneous volume function V_h with its declared constants.

    Parameters
    ----------
    func : callable
        Vectorised nondecreasing map [0, inf) -> (0, inf).
    doubling_constant : float
        Declared C_D with V_h(2r) <= C_D V_h(r).
    homogeneity_constant : float
        Declared C_h with C_h^-1 V_h(r) <= V(x, r) <= C_h V_h(r).
    alpha : float, optional
        Exponent of the polynomial comparison; defaults to log2(C_D).
    """

    def __init__(self, func: Callable, doubling_constant: float,
                 homogeneity_constant: float, alpha: float | None = None,
                 name: str = "custom"):
        if doubling_constant < 1 or homogeneity_constant < 1:
            raise ValueError("doubling and homogeneity constants must be >= 1")
        self._func = func
        self.doubling_constant = float(doubling_constant)
        self.homogeneity_constant = float(homogeneity_constant)
        min_alpha = math.log2(self.doubling_constant)
        if alpha is None:
            alpha = min_alpha
        if alpha < min_alpha - 1e-12:
            raise ValueError(f"alpha must be >= log2(C_D) = {min_alpha}")
        self.alpha = float(alpha)
        self.name = name

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.asarray(self._func(r), dtype=float)
        return float(out) if out.ndim == 0 else out

    def __repr__(self):
        return (f"VolumeProfile({self.name}, C_D={self.doubling_constant:g}, "
                f"C_h={self.homogeneity_constant:g}, alpha={self.alpha:g})")


def power_profile(dimension: int, norm: str = "Linf") -> VolumeProfile:
    """The lattice preset profile (1+2r)^d, divided by d! for the L1 metric."""
    scale = 1.0 if norm == "Linf" else float(math.factorial(dimension))
    return VolumeProfile(
        lambda r: (1.0 + 2.0 * r) ** dimension / scale,
        doubling_constant=2.0 ** dimension,
        homogeneity_constant=3.0 ** dimension,
        name=f"(1+2r)^{dimension}" + ("" if scale == 1 else f"/{int(scale)}"),
    )


def l1_ball_count(dimension: int, k):
    """Number of points of Z^d at L1 distance <= k from the origin."""
    k = np.floor(np.asarray(k, dtype=float))
    total = np.zeros_like(k)
    for i in range(dimension + 1):
        # C(k, i) for real array k, zero when k < i
        comb = np.ones_like(k)
        for j in range(i):
            comb = comb * (k - j) / (j + 1)
        comb = np.where(k >= i, comb, 0.0)
        total = total + 2.0 ** i * math.comb(dimension, i) * comb
    return total


@dataclass(frozen=True)
class Window:
    """Finite, deterministically ordered list of sites of a space.

    For lattice spaces the window is the cube of half-width ``radius`` around
    ``center`` and ``shape`` is the grid shape (sites are in C order).
    """

    space: "MetricMeasureSpace"
    sites: tuple
    mu: np.ndarray
    radius: float | None = None
    center: tuple | None = None
    shape: tuple | None = None
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._index:
            self._index.update({s: i for i, s in enumerate(self.sites)})

    def __len__(self):
        return len(self.sites)

    def __contains__(self, site):
        return self.space.normalize(site) in self._index

    def index(self, site) -> int:
        site = self.space.normalize(site)
        try:
            return self._index[site]
        except KeyError:
            raise InvalidSiteError(f"site {site!r} is not in the window") from None

    @cached_property
    def coords(self) -> np.ndarray | None:
        """Integer coordinates (N, d) for lattice windows."""
        if self.shape is None:
            return None
        return np.array(self.sites, dtype=np.int64).reshape(len(self.sites), -1)


class MetricMeasureSpace:
    """Base class: a countable uniformly discrete metric measure space."""

    metric_kind: str = "abstract"
    dimension: int | None = None

    def __init__(self, profile: VolumeProfile, discreteness_gap: float,
                 comparability_constant: float,
                 site_budget: int = DEFAULT_SITE_BUDGET):
        self.profile = profile
        self.discreteness_gap = float(discreteness_gap)
        self.comparability_constant = float(comparability_constant)
        self.site_budget = int(site_budget)

    # subclasses implement these
    def normalize(self, site) -> Site:
        raise NotImplementedError

    def measure(self, site) -> float:
        raise NotImplementedError

    def distance(self, x, y) -> float:
        raise NotImplementedError

    def ball(self, x, r: float) -> list:
        raise NotImplementedError

    def volume(self, x, r: float) -> float:
        return math.fsum(self.measure(y) for y in self.ball(x, r))

    def window(self, radius=None, center=None) -> Window:
        raise NotImplementedError

    def distance_matrix(self, window: Window) -> np.ndarray:
        n = len(window)
        out = np.zeros((n, n))
        for i, j in itertools.combinations(range(n), 2):
            out[i, j] = out[j, i] = self.distance(window.sites[i], window.sites[j])
        return out

    @property
    def lattice(self) -> "LatticeSpace | None":
        """Underlying lattice when the metric is translation invariant on Z^d."""
        return None


# ---------------------------------------------------------------------------
# Lattices


class LatticeSpace(MetricMeasureSpace):
    """Z^d with the L1 or L-infinity metric and constant or periodic measure."""

    def __init__(self, dimension: int, norm: str = "Linf", mu=1.0,
                 profile: VolumeProfile | None = None,
                 site_budget: int = DEFAULT_SITE_BUDGET):
        if dimension < 1:
            raise ValueError("dimension must be a positive integer")
        if norm not in ("L1", "Linf"):
            raise ValueError("norm must be 'L1' or 'Linf'")
        self.dimension = int(dimension)
        self.norm = norm
        self.metric_kind = "lattice-L1" if norm == "L1" else "lattice-Linf"
        mu_arr = np.asarray(mu, dtype=float)
        if mu_arr.ndim not in (0, self.dimension):
            raise ValueError("periodic measure must have one axis per dimension")
        if np.any(mu_arr <= 0):
            raise ValueError("site measure must be positive")
        self._mu = mu_arr
        c_mu = float(max(mu_arr.max(), 1.0 / mu_arr.min()))
        super().__init__(profile or power_profile(self.dimension, norm), 1.0,
                         c_mu, site_budget)

    @property
    def constant_measure(self) -> bool:
        return self._mu.ndim == 0

    @property
    def period(self) -> tuple:
        return (1,) * self.dimension if self.constant_measure else self._mu.shape

    @property
    def lattice(self):
        return self

    def __repr__(self):
        mu = float(self._mu) if self.constant_measure else f"periodic{self._mu.shape}"
        return f"LatticeSpace(Z^{self.dimension}, {self.norm}, mu={mu})"

    def normalize(self, site) -> tuple:
        if isinstance(site, (int, np.integer)):
            site = (int(site),)
        try:
            site = tuple(int(c) for c in site)
        except TypeError:
            raise InvalidSiteError(f"not a lattice site: {site!r}") from None
        if len(site) != self.dimension:
            raise InvalidSiteError(
                f"site {site!r} has wrong dimension (expected {self.dimension})")
        return site

    def measure(self, site) -> float:
        site = self.normalize(site)
        if self.constant_measure:
            return float(self._mu)
        return float(self._mu[tuple(c % p for c, p in zip(site, self._mu.shape))])

    def measure_array(self, coords: np.ndarray) -> np.ndarray:
        """Site measures for an (N, d) array of coordinates."""
        if self.constant_measure:
            return np.full(len(coords), float(self._mu))
        idx = tuple((coords[:, k] % p) for k, p in enumerate(self._mu.shape))
        return self._mu[idx]

    def norm_of(self, disp: np.ndarray) -> np.ndarray:
        disp = np.abs(np.asarray(disp))
        return disp.sum(axis=-1) if self.norm == "L1" else disp.max(axis=-1)

    def distance(self, x, y) -> float:
        x, y = self.normalize(x), self.normalize(y)
        return float(self.norm_of(np.subtract(x, y)))

    def _check_budget(self, r):
        count = (2 * math.floor(r) + 1) ** self.dimension
        if count > self.site_budget:
            raise BudgetExceededError(
                f"ball of radius {r} needs {count} sites > budget {self.site_budget}")

    def ball(self, x, r: float) -> list:
        x = self.normalize(x)
        if r < 0:
            return []
        self._check_budget(r)
        k = int(math.floor(r))
        offsets = np.array(list(itertools.product(range(-k, k + 1),
                                                  repeat=self.dimension)),
                           dtype=np.int64)
        keep = self.norm_of(offsets) <= r
        pts = offsets[keep] + np.array(x)
        return [tuple(int(c) for c in p) for p in pts]

    def count(self, r):
        """Number of lattice points in a ball of radius r (vectorised)."""
        r = np.asarray(r, dtype=float)
        if self.norm == "Linf":
            return (2 * np.floor(np.maximum(r, 0)) + 1) ** self.dimension
        return l1_ball_count(self.dimension, np.maximum(r, 0))

    def volume(self, x, r: float) -> float:
        x = self.normalize(x)
        if self.constant_measure:
            return float(self._mu) * float(self.count(r))
        self._check_budget(r)
        pts = np.array(self.ball(x, r), dtype=np.int64)
        return math.fsum(self.measure_array(pts))

    def volumes(self, x, radii) -> np.ndarray:
        """V(x, r) for an array of radii."""
        radii = np.asarray(radii, dtype=float)
        if self.constant_measure:
            return float(self._mu) * self.count(radii)
        x = self.normalize(x)
        rmax = float(radii.max()) if radii.size else 0.0
        self._check_budget(rmax)
        k = int(math.floor(rmax))
        grid = np.array(list(itertools.product(range(-k, k + 1),
                                               repeat=self.dimension)),
                        dtype=np.int64)
        dist = self.norm_of(grid)
        mu = self.measure_array(grid + np.array(x))
        order = np.argsort(dist, kind="stable")
        dist, cum = dist[order], np.cumsum(mu[order])
        pos = np.searchsorted(dist, radii, side="right")
        return np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)

    def window(self, radius=None, center=None) -> Window:
        if radius is None:
            raise ValueError("lattice windows need a radius")
        radius = int(radius)
        center = self.normalize(center if center is not None else (0,) * self.dimension)
        n = (2 * radius + 1) ** self.dimension
        if n > self.site_budget:
            raise BudgetExceededError(f"window of {n} sites exceeds site budget")
        axes = [np.arange(c - radius, c + radius + 1) for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)
        sites = tuple(tuple(int(c) for c in row) for row in mesh)
        return Window(self, sites, self.measure_array(mesh), radius=radius,
                      center=center, shape=(2 * radius + 1,) * self.dimension)

    def displacement_grid(self, radius: int) -> np.ndarray:
        """Coordinates of all displacements in the cube of half-width radius,
        shape (2R+1,)*d + (d,)."""
        axes = [np.arange(-radius, radius + 1)] * self.dimension
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def displacement_distances(self, radius: int) -> np.ndarray:
        return self.norm_of(self.displacement_grid(radius)).astype(float)


# ---------------------------------------------------------------------------
# Explicit finite spaces


def measured_profile(dist: np.ndarray, mu: np.ndarray) -> VolumeProfile:
    """Homogeneous profile V_h(r) = max_x V(x, r) measured from a finite space.

    The declared C_h and C_D are the exact suprema over all radii.
    """
    n = len(mu)
    breaks = np.unique(dist)
    # vol[i, k] = V(x_i, breaks[k])
    vol = np.array([[mu[dist[i] <= b].sum() for b in breaks] for i in range(n)])
    vmax = vol.max(axis=0)

    def func(r):
        pos = np.clip(np.searchsorted(breaks, r, side="right") - 1, 0, None)
        return vmax[pos]

    c_h = float((vmax / vol).max())
    cand = np.concatenate([breaks, breaks / 2.0])
    cand = cand[cand > 0]
    c_d = float(max(1.0, (func(2 * cand) / func(cand)).max())) if cand.size else 1.0
    return VolumeProfile(func, c_d, max(c_h, 1.0), name="measured")


class FiniteSpace(MetricMeasureSpace):
    """Explicit finite metric measure space given by a full distance matrix."""

    metric_kind = "explicit-finite"

    def __init__(self, sites: Sequence, mu: Sequence[float], dist,
                 profile: VolumeProfile | None = None, check: bool = True):
        dist = np.asarray(dist, dtype=float)
        mu = np.asarray(mu, dtype=float)
        sites = tuple(tuple(s) if isinstance(s, list) else s for s in sites)
        n = len(sites)
        if check:
            validate_metric(dist, mu, n)
        if len(set(sites)) != n:
            raise SpaceLoadError("site ids must be distinct")
        self.sites = sites
        self._index = {s: i for i, s in enumerate(sites)}
        self._mu = mu
        self._dist = dist
        gap = float(dist[~np.eye(n, dtype=bool)].min()) if n > 1 else 1.0
        c_mu = float(max(mu.max(), 1.0 / mu.min()))
        super().__init__(profile or measured_profile(dist, mu), gap, c_mu)

    def __repr__(self):
        return f"FiniteSpace({len(self.sites)} sites)"

    def normalize(self, site):
        if isinstance(site, list):
            site = tuple(site)
        if site not in self._index:
            raise InvalidSiteError(f"unknown site id {site!r}")
        return site

    def measure(self, site) -> float:
        return float(self._mu[self._index[self.normalize(site)]])

    def distance(self, x, y) -> float:
        return float(self._dist[self._index[self.normalize(x)],
                                self._index[self.normalize(y)]])

    def ball(self, x, r: float) -> list:
        row = self._dist[self._index[self.normalize(x)]]
        return [s for s, d in zip(self.sites, row) if d <= r]

    def window(self, radius=None, center=None) -> Window:
        return Window(self, self.sites, self._mu.copy())

    def distance_matrix(self, window: Window) -> np.ndarray:
        idx = [self._index[s] for s in window.sites]
        return self._dist[np.ix_(idx, idx)]

    def to_json(self) -> dict:
        return {"sites": [list(s) if isinstance(s, tuple) else s for s in self.sites],
                "mu": self._mu.tolist(), "dist": self._dist.tolist()}


def validate_metric(dist: np.ndarray, mu: np.ndarray, n: int, tol: float = 1e-12):
    if dist.shape != (n, n) or mu.shape != (n,):
        raise SpaceLoadError("dist must be n x n and mu of length n")
    if not np.all(np.isfinite(dist)):
        raise SpaceLoadError("distances must be finite")
    if np.any(mu <= 0):
        raise SpaceLoadError("site measures must be positive")
    if not np.allclose(dist, dist.T, rtol=0, atol=0):
        raise SpaceLoadError("distance matrix is not symmetric")
    if np.any(np.diag(dist) != 0):
        raise SpaceLoadError("distance matrix must have a zero diagonal")
    off = dist[~np.eye(n, dtype=bool)]
    if off.size and off.min() <= 0:
        raise SpaceLoadError("distinct sites must be at positive distance")
    # d(i,k) <= d(i,j) + d(j,k) for all triples
    via = dist[:, :, None] + dist[None, :, :]
    if np.any(dist[:, None, :] > via + tol * (1 + dist.max())):
        raise SpaceLoadError("distance matrix violates the triangle inequality")


def load_finite_space(path_or_doc) -> FiniteSpace:
    """Load ``{"sites": [...], "mu": [...], "dist": [[...]]}`` from a path or dict."""
    if isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        with open(path_or_doc) as fh:
            doc = json.load(fh)
    try:
        return FiniteSpace(doc["sites"], doc["mu"], doc["dist"])
    except KeyError as exc:
        raise SpaceLoadError(f"missing key {exc.args[0]!r} in finite space document") from None


# ---------------------------------------------------------------------------
# Change of metric


class TransformedSpace(MetricMeasureSpace):
    """(M, g∘d, mu) for a concave, strictly increasing g with g(0) = 0.

    ``g`` must be vectorised and expose ``inverse(y)``.
    """

    metric_kind = "transformed"

    def __init__(self, base: MetricMeasureSpace, g, profile: VolumeProfile | None = None):
        self.base = base
        self.g = g
        self.dimension = base.dimension
        # V_h' = V_h ∘ g^-1 lets callers evaluate V_h'(g(d)) as V_h(d) exactly
        self.derived_profile = profile is None
        if profile is None:
            profile = transformed_profile(base.profile, g)
        super().__init__(profile, float(g(base.discreteness_gap)),
                         base.comparability_constant, base.site_budget)

    def __repr__(self):
        return f"TransformedSpace({self.base!r})"

    @property
    def lattice(self):
        return self.base.lattice

    def normalize(self, site):
        return self.base.normalize(site)

    def measure(self, site) -> float:
        return self.base.measure(site)

    def distance(self, x, y) -> float:
        return float(self.g(self.base.distance(x, y)))

    def ball(self, x, r: float) -> list:
        if r < 0:
            return []
        rb = float(self.g.inverse(r))
        cand = self.base.ball(x, rb * (1 + 1e-9) + 1e-12)
        return [y for y in cand if self.distance(x, y) <= r]

    def volume(self, x, r: float) -> float:
        return math.fsum(self.measure(y) for y in self.ball(x, r))

    def window(self, radius=None, center=None) -> Window:
        w = self.base.window(radius, center)
        return Window(self, w.sites, w.mu, radius=w.radius, center=w.center, shape=w.shape)

    def distance_matrix(self, window: Window) -> np.ndarray:
        base_w = Window(self.base, window.sites, window.mu, window.radius,
                        window.center, window.shape)
        return np.asarray(self.g(self.base.distance_matrix(base_w)))

    def displacement_distances(self, radius: int) -> np.ndarray:
        return np.asarray(self.g(self.base.displacement_distances(radius)))


def transformed_profile(profile: VolumeProfile, g, r_max: float = 2.0 ** 40) -> VolumeProfile:
    """V_h' = V_h ∘ g^{-1}; its doubling constant is measured on a dyadic grid."""
    func = lambda r: profile(g.inverse(r))  # noqa: E731
    grid = 2.0 ** np.arange(-4, math.log2(r_max) + 1)
    c_d = float(max(1.0, np.max(func(2 * grid) / func(grid)))) * (1 + 1e-9)
    return VolumeProfile(func, c_d, profile.homogeneity_constant,
                         name=f"{profile.name}∘g^-1")


# ---------------------------------------------------------------------------
# Assumption audit


@dataclass
class SpaceAuditReport:
    gap: float
    comparability: float
    doubling: float
    homogeneity: float
    polynomial_comparison: float
    declared: dict
    failures: list
    n_samples: int
    r_grid: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "verdict": "PASS" if self.passed else "FAIL",
            "measured": {"a": self.gap, "C_mu": self.comparability,
                         "C_D": self.doubling, "C_h": self.homogeneity,
                         "vc_ratio": self.polynomial_comparison},
            "declared": self.declared,
            "failures": self.failures,
            "n_samples": self.n_samples,
            "r_grid": self.r_grid,
        }


def audit_space(space: MetricMeasureSpace, x_samples: Sequence, r_grid: Sequence[float],
                rel_tol: float = 1e-9) -> SpaceAuditReport:
    """Measure the standing-assumption constants on samples and a radius grid."""
    if not len(x_samples) or not len(r_grid):
        raise ValueError("audit needs nonempty samples and radius grid")
    xs = [space.normalize(x) for x in x_samples]
    r_grid = np.asarray(sorted(float(r) for r in r_grid))
    prof = space.profile

    gap = math.inf
    for x, y in itertools.combinations(xs, 2):
        if x != y:
            gap = min(gap, space.distance(x, y))
    c_mu = max(max(m, 1.0 / m) for m in (space.measure(x) for x in xs))
    vh = prof(r_grid)
    c_d = float(np.max(prof(2 * r_grid) / vh))
    c_h = 1.0
    for x in xs:
        if hasattr(space, "volumes"):
            v = space.volumes(x, r_grid)
        else:
            v = np.array([space.volume(x, r) for r in r_grid])
        c_h = max(c_h, float(np.max(np.maximum(v / vh, vh / v))))
    rr, RR = np.meshgrid(r_grid, r_grid, indexing="ij")
    mask = rr <= RR
    vc = prof(RR[mask]) / prof(rr[mask]) / (RR[mask] / rr[mask]) ** prof.alpha
    vc_ratio = float(vc.max())

    declared = {"a": space.discreteness_gap, "C_mu": space.comparability_constant,
                "C_D": prof.doubling_constant, "C_h": prof.homogeneity_constant,
                "alpha": prof.alpha}
    fails = []
    if gap < space.discreteness_gap * (1 - rel_tol):
        fails.append(f"discreteness gap {gap:g} < declared {space.discreteness_gap:g}")
    for name, got in (("C_mu", c_mu), ("C_D", c_d), ("C_h", c_h)):
        if got > declared[name] * (1 + rel_tol):
            fails.append(f"{name} measured {got:g} exceeds declared {declared[name]:g}")
    if vc_ratio > prof.doubling_constant * (1 + rel_tol):
        fails.append(f"volume comparison ratio {vc_ratio:g} exceeds C_D")
    return SpaceAuditReport(gap, c_mu, c_d, c_h, vc_ratio, declared, fails,
                            len(xs), r_grid.tolist())
