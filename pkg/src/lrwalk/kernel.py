"""One-step transition kernels with jump density comparable to 1/(V_h(d) phi(d)).

Two storage layouts share one interface:

* :class:`DenseKernel` keeps the full matrix p(x, y); used for explicit finite
  spaces.
* :class:`LatticeKernel` exploits translation invariance of the metric on
  Z^d (possibly transformed): p(x, y) = s mu_y K(y - x) off the diagonal, so
  applying the kernel is an FFT convolution plus a diagonal term.

The window is the computational domain.  With ``boundary="confine"`` (the
default) jumps are only proposed to window sites and the unused mass stays on
the diagonal, which makes the kernel exactly stochastic and reversible on the
window.  With ``boundary="leak"`` rows are normalised as on the whole lattice
and mass jumping out of the window is lost.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import KernelBuildError
from .rv import RegVaryingFn
from .space import LatticeSpace, MetricMeasureSpace, TransformedSpace, Window

BOUNDARY_MODES = ("confine", "leak")


def _conv(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    return signal.fftconvolve(a, k, mode="same")


class TransitionKernel:
    """Common interface; subclasses provide apply/step/row."""

    space: MetricMeasureSpace
    window: Window
    phi: RegVaryingFn
    theta_diag: float
    scale: float
    jump_radius: float
    diag: np.ndarray
    metadata: dict

    @property
    def mu(self) -> np.ndarray:
        return self.window.mu

    @property
    def n_sites(self) -> int:
        return len(self.window)

    @property
    def kappa(self) -> float:
        """Smallest diagonal jump density inf_x h_1(x, x)."""
        return float(np.min(self.diag / self.mu))

    def apply(self, f: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, p_row: np.ndarray) -> np.ndarray:
        """Row vector times kernel: (p P)(y) = sum_x p(x) p(x, y)."""
        raise NotImplementedError

    def row(self, i: int):
        """(indices, probabilities) of row i over window sites, diagonal included."""
        raise NotImplementedError

    def p(self, i: int, j: int) -> float:
        idx, pr = self.row(i)
        hit = np.nonzero(idx == j)[0]
        return float(pr[hit[0]]) if hit.size else 0.0

    def jump_density(self, i: int, j: int) -> float:
        return self.p(i, j) / float(self.mu[j])

    def certified_c1(self) -> float:
        lo, hi = self.metadata["jump_band"]
        return max(hi, 1.0 / lo)

    def export_metadata(self) -> dict:
        meta = dict(self.metadata)
        meta.update({
            "space": repr(self.space),
            "n_sites": self.n_sites,
            "theta_diag": self.theta_diag,
            "offdiag_scale": self.scale,
            "jump_radius": self.jump_radius,
            "beta": self.phi.beta,
            "slowly_varying": self.phi.slowly_varying.to_spec(),
            "kappa": self.kappa,
            "certified_C1": self.certified_c1(),
        })
        return meta


# ---------------------------------------------------------------------------
# Dense storage


class DenseKernel(TransitionKernel):
    def __init__(self, space, window, phi, theta_diag, scale, jump_radius,
                 matrix, metadata):
        self.space, self.window, self.phi = space, window, phi
        self.theta_diag, self.scale, self.jump_radius = theta_diag, scale, jump_radius
        self.matrix = matrix
        self.diag = np.diag(matrix).copy()
        self.metadata = metadata

    def apply(self, f):
        return self.matrix @ np.asarray(f, dtype=float)

    def step(self, p_row):
        return np.asarray(p_row, dtype=float) @ self.matrix

    def row(self, i):
        pr = self.matrix[i]
        idx = np.nonzero(pr)[0]
        return idx, pr[idx]

    def p(self, i, j):
        return float(self.matrix[i, j])

    def density_matrix(self) -> np.ndarray:
        """J(x, y) = p(x, y) / mu_y."""
        return self.matrix / self.mu[None, :]


# ---------------------------------------------------------------------------
# Translation-invariant storage on lattice windows


class LatticeKernel(TransitionKernel):
    def __init__(self, space, window, phi, theta_diag, scale, jump_radius,
                 weights, diag, boundary, metadata):
        self.space, self.window, self.phi = space, window, phi
        self.theta_diag, self.scale, self.jump_radius = theta_diag, scale, jump_radius
        self.weights = weights            # K over displacement cube, K[center] = 0
        self.half = weights.shape[0] // 2
        self.diag = diag                  # flat, window order
        self.boundary = boundary
        self.metadata = metadata
        self._mu_grid = window.mu.reshape(window.shape)
        self._diag_grid = diag.reshape(window.shape)

    @property
    def shape(self):
        return self.window.shape

    def apply(self, f):
        f = np.asarray(f, dtype=float).reshape(self.shape)
        out = self.scale * _conv(self._mu_grid * f, self.weights) + self._diag_grid * f
        return out.ravel()

    def step(self, p_row):
        p = np.asarray(p_row, dtype=float).reshape(self.shape)
        out = self.scale * self._mu_grid * _conv(p, self.weights) + self._diag_grid * p
        return out.ravel()

    def _displacement_index(self, disp: np.ndarray):
        """Index tuple into ``weights`` for (..., d) displacements, or None mask."""
        ok = np.all(np.abs(disp) <= self.half, axis=-1)
        idx = tuple(np.where(ok, disp[..., k] + self.half, 0) for k in range(disp.shape[-1]))
        return idx, ok

    def offdiag_p(self, xi: np.ndarray, yj: np.ndarray) -> np.ndarray:
        """p(x, y) for index arrays with x != y (broadcasting)."""
        c = self.window.coords
        disp = c[yj] - c[xi]
        idx, ok = self._displacement_index(disp)
        return np.where(ok, self.scale * self.mu[yj] * self.weights[idx], 0.0)

    def row(self, i):
        c = self.window.coords
        disp = c - c[i]
        idx, ok = self._displacement_index(disp)
        pr = np.where(ok, self.scale * self.mu * self.weights[idx], 0.0)
        pr[i] = self.diag[i]
        nz = np.nonzero(pr)[0]
        return nz, pr[nz]

    def p(self, i, j):
        if i == j:
            return float(self.diag[i])
        return float(self.offdiag_p(np.array([i]), np.array([j]))[0])

    def displacement_law(self):
        """Jump law of the translation-invariant chain on the whole lattice.

        Returns (displacements (M, d), probabilities (M,)) including the zero
        displacement.  Only meaningful for constant site measure.
        """
        lat = self.space.lattice
        if not lat.constant_measure:
            raise ValueError("shared displacement law needs a constant site measure")
        mu = float(self.mu[0])
        grid = lat.displacement_grid(self.half).reshape(-1, lat.dimension)
        probs = self.scale * mu * self.weights.ravel()
        centre = len(probs) // 2
        probs[centre] = 0.0
        probs[centre] = 1.0 - math.fsum(probs)
        keep = probs > 0
        return grid[keep], probs[keep]


# ---------------------------------------------------------------------------
# Construction


def _jump_base_half_width(space: MetricMeasureSpace, jump_radius: float) -> int:
    if isinstance(space, TransformedSpace):
        return int(math.floor(float(space.g.inverse(jump_radius)) * (1 + 1e-12) + 1e-9))
    return int(math.floor(jump_radius + 1e-9))


def _default_jump_radius(space: MetricMeasureSpace, window: Window) -> float:
    if window.shape is None:
        return math.inf
    lat = space.lattice
    unit = (int(window.radius),) + (0,) * (lat.dimension - 1)
    return space.distance((0,) * lat.dimension, unit)


def _tail_estimate(space, phi, jump_radius) -> float:
    """Bound on sum_{d(x,y) > R_J} mu_y / (V_h(d) phi(d)) from the dyadic shell estimate."""
    if not math.isfinite(jump_radius):
        return 0.0
    prof = space.profile
    c1 = prof.homogeneity_constant * prof.doubling_constant / (1.0 - 2.0 ** -phi.beta)
    return c1 / float(phi(jump_radius))


def _profile_at(space, dd, half, active):
    """V_h at the active displacement distances, avoiding g^-1 when possible."""
    if isinstance(space, TransformedSpace) and space.derived_profile:
        base = space.base.displacement_distances(half)[active]
        return space.base.profile(base)
    return space.profile(dd)


def _noise(rng, shape, rho):
    return rng.uniform(1.0 / rho, rho, size=shape)


def build_kernel(space: MetricMeasureSpace, phi: RegVaryingFn, theta_diag: float = 0.2,
                 jump_radius: float | None = None, window_radius: int | None = None,
                 boundary: str = "confine", noise_rho: float | None = None,
                 noise_seed: int = 0, max_tail_fraction: float = 0.05) -> TransitionKernel:
    """Reversible kernel with J = s / (V_h(d) phi(d)) off the diagonal.

    The scale s is chosen so that the row with the largest off-diagonal mass
    reaches exactly 1 - theta_diag; remaining mass sits on the diagonal.
    """
    if not 0 < theta_diag < 1:
        raise KernelBuildError("theta_diag must lie in (0, 1)")
    if boundary not in BOUNDARY_MODES:
        raise KernelBuildError(f"boundary must be one of {BOUNDARY_MODES}")
    if noise_rho is not None and noise_rho < 1:
        raise KernelBuildError("noise factor rho must be >= 1")
    window = space.window(window_radius)
    if len(window) < 2:
        raise KernelBuildError("degenerate window: fewer than two sites")
    if jump_radius is None:
        jump_radius = _default_jump_radius(space, window)
    rng = np.random.default_rng(noise_seed)
    prof = space.profile

    meta = {"boundary": boundary, "noise_rho": noise_rho,
            "profile": prof.name, "metric_kind": space.metric_kind}

    if space.lattice is not None and window.shape is not None:
        lat = space.lattice
        half = min(_jump_base_half_width(space, jump_radius), 2 * int(window.radius))
        dist = space.displacement_distances(half)
        active = (dist > 0) & (dist <= jump_radius)
        weights = np.zeros_like(dist)
        dd = dist[active]
        target = 1.0 / (_profile_at(space, dd, half, active) * phi(dd))
        weights[active] = target
        if noise_rho is not None:
            u = _noise(rng, weights.shape, noise_rho)
            u = 0.5 * (u + u[(slice(None, None, -1),) * u.ndim])
            weights *= u
        mu_grid = window.mu.reshape(window.shape)
        if boundary == "confine":
            mass = _conv(mu_grid, weights)
        elif lat.constant_measure:
            mass = np.full(window.shape, float(mu_grid.flat[0]) * math.fsum(weights.ravel()))
        else:
            big = lat.window(int(window.radius) + half, window.center)
            big_mu = big.mu.reshape(big.shape)
            crop = (slice(half, half + window.shape[0]),) * lat.dimension
            mass = _conv(big_mu, weights)[crop]
        mass = np.maximum(mass, 0.0)
        scale = (1.0 - theta_diag) / float(mass.max())
        diag = (1.0 - scale * mass).ravel()
        ratios = scale * weights[active] / target
        kernel_cls = LatticeKernel
        extra = dict(weights=weights, diag=diag, boundary=boundary)
        meta["displacement_half_width"] = half
        total_offdiag = float(mass.max())
    else:
        if boundary == "leak":
            raise KernelBuildError("leak boundary needs a lattice window")
        dist = space.distance_matrix(window)
        mu = window.mu
        off = ~np.eye(len(window), dtype=bool)
        active = off & (dist <= jump_radius)
        target = np.zeros_like(dist)
        target[active] = 1.0 / (prof(dist[active]) * phi(dist[active]))
        k = target.copy()
        if noise_rho is not None:
            u = _noise(rng, k.shape, noise_rho)
            k *= 0.5 * (u + u.T)
        w = k * mu[None, :]
        mass = np.array([math.fsum(r) for r in w])
        scale = (1.0 - theta_diag) / float(mass.max())
        matrix = scale * w
        for i in range(len(window)):
            matrix[i, i] = 0.0
            matrix[i, i] = 1.0 - math.fsum(matrix[i])
        ratios = scale * k[active] / target[active]
        kernel_cls = DenseKernel
        extra = dict(matrix=matrix)
        total_offdiag = float(mass.max())

    tail = _tail_estimate(space, phi, jump_radius)
    tail_fraction = tail / (tail + total_offdiag)
    meta["tail_mass_estimate"] = tail
    meta["tail_fraction"] = tail_fraction
    meta["truncation_warning"] = bool(tail_fraction > max_tail_fraction)
    meta["jump_band"] = [float(ratios.min()), float(ratios.max())]
    return kernel_cls(space, window, phi, float(theta_diag), float(scale),
                      float(jump_radius), metadata=meta, **extra)


# ---------------------------------------------------------------------------
# Operators and forms


def apply_P(kernel: TransitionKernel, f) -> np.ndarray:
    """(P f)(x) = sum_y p(x, y) f(y)."""
    return kernel.apply(np.asarray(f, dtype=float))


def inner(kernel: TransitionKernel, f, g) -> float:
    return float(np.dot(np.asarray(f) * kernel.mu, np.asarray(g)))


def quadratic_energy(kernel: TransitionKernel, f) -> float:
    """<(I - P) f, f>_mu."""
    f = np.asarray(f, dtype=float)
    return inner(kernel, f - kernel.apply(f), f)


@dataclass
class DirichletForm:
    kernel: TransitionKernel

    def __call__(self, f) -> float:
        return dirichlet_energy(self, f)


def dirichlet_energy(form, f) -> float:
    """E(f, f) = 1/2 sum_{x,y} (f(x) - f(y))^2 J(x, y) mu_x mu_y.

    For lattice kernels the double sum is restricted to the support S of f:
    pairs in S x S are summed directly and pairs leaving S contribute
    f(x)^2 mu_x (1 - p(x,x) - sum_{y in S, y != x} p(x, y)).
    """
    kernel = form.kernel if isinstance(form, DirichletForm) else form
    f = np.asarray(f, dtype=float)
    mu = kernel.mu
    if isinstance(kernel, DenseKernel):
        jm = kernel.density_matrix()
        np.fill_diagonal(jm, 0.0)
        diff2 = (f[:, None] - f[None, :]) ** 2
        return 0.5 * math.fsum((diff2 * jm * mu[:, None] * mu[None, :]).ravel())
    supp = np.nonzero(f)[0]
    if supp.size == 0:
        return 0.0
    xi, yj = np.meshgrid(supp, supp, indexing="ij")
    off = xi != yj
    p_ss = np.zeros(xi.shape)
    p_ss[off] = kernel.offdiag_p(xi[off], yj[off])
    fs = f[supp]
    # J mu_x mu_y = p(x, y) mu_x
    inside = 0.5 * math.fsum(((fs[:, None] - fs[None, :]) ** 2 * p_ss * mu[supp][:, None]).ravel())
    leaving = 1.0 - kernel.diag[supp] - p_ss.sum(axis=1)
    outside = math.fsum(fs ** 2 * mu[supp] * leaving)
    return inside + outside


def _lattice_volumes(lat: LatticeSpace, xs: np.ndarray, base_dists: np.ndarray) -> np.ndarray:
    """V(x, r) on the lattice for coordinates xs (N, d) and base radii (N,).

    Measures are periodic, so volumes are computed once per residue class.
    """
    origin = (0,) * lat.dimension
    if lat.constant_measure:
        return lat.volumes(origin, base_dists)
    out = np.empty(len(base_dists))
    res = np.mod(xs, np.array(lat.period))
    keys = np.ravel_multi_index(res.T, lat.period)
    for key in np.unique(keys):
        sel = keys == key
        site = tuple(int(c) for c in np.unravel_index(key, lat.period))
        out[sel] = lat.volumes(site, base_dists[sel])
    return out


def _dense_volumes(dist: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """V(x, d(x, y)) for every pair of an explicit finite space."""
    out = np.empty_like(dist)
    for i, row in enumerate(dist):
        order = np.argsort(row, kind="stable")
        cum = np.cumsum(mu[order])
        pos = np.searchsorted(row[order], row, side="right")
        out[i] = cum[pos - 1]
    return out


def besov_seminorm(kernel: TransitionKernel, f, beta: float) -> float:
    """W_beta(f) over window pairs: (sum |f(x)-f(y)|^2 / (d^beta V(x,d)) mu_x mu_y)^(1/2)."""
    f = np.asarray(f, dtype=float)
    space, window, mu = kernel.space, kernel.window, kernel.mu
    supp = np.nonzero(f)[0]
    if supp.size == 0:
        return 0.0
    n = len(window)
    if isinstance(kernel, DenseKernel):
        dist = space.distance_matrix(window)
        vol = _dense_volumes(dist, mu)
        off = ~np.eye(n, dtype=bool)
        diff2 = (f[:, None] - f[None, :]) ** 2
        terms = diff2[off] / (dist[off] ** beta * vol[off]) * (mu[:, None] * mu[None, :])[off]
        return math.sqrt(math.fsum(terms))
    coords = window.coords
    lat = space.lattice
    transformed = isinstance(space, TransformedSpace)
    outside = f == 0
    total = []
    for x in supp:
        others = np.arange(n) != x
        base = lat.norm_of(coords[others] - coords[x]).astype(float)
        d = np.asarray(space.g(base)) if transformed else base
        vol_x = _lattice_volumes(lat, np.repeat(coords[x][None, :], len(base), 0), base)
        total.append((f[x] - f[others]) ** 2 / (d ** beta * vol_x) * mu[x] * mu[others])
        # ordered pairs (y, x) with y outside the support
        out_sel = outside[others]
        vol_y = _lattice_volumes(lat, coords[others][out_sel], base[out_sel])
        total.append(f[x] ** 2 / (d[out_sel] ** beta * vol_y) * mu[others][out_sel] * mu[x])
    return math.sqrt(math.fsum(np.concatenate(total)))


def besov_constant(kernel: TransitionKernel, beta: float) -> float:
    """C_2 with W_beta(f)^2 <= C_2 E(f): 2 C_h max over stored pairs of
    1 / (J(x,y) d^beta V_h(d))."""
    prof = kernel.space.profile
    if isinstance(kernel, DenseKernel):
        dist = kernel.space.distance_matrix(kernel.window)
        jm = kernel.density_matrix()
        off = ~np.eye(len(dist), dtype=bool)
        d = dist[off]
        val = 1.0 / (jm[off] * d ** beta * prof(d))
    else:
        dist = kernel.space.displacement_distances(kernel.half)
        active = kernel.weights > 0
        d = dist[active]
        j = kernel.scale * kernel.weights[active]
        val = 1.0 / (j * d ** beta * prof(d))
    return 2.0 * prof.homogeneity_constant * float(val.max())


def local_average(window_or_kernel, f, r: float, return_flags: bool = False):
    """mu-average of f over B(x, r) intersected with the window."""
    window = getattr(window_or_kernel, "window", window_or_kernel)
    space = window.space
    f = np.asarray(f, dtype=float)
    mu = window.mu
    if window.shape is not None:
        lat = space.lattice
        half = min(int(math.floor(
            float(space.g.inverse(r)) if isinstance(space, TransformedSpace) else r) + 1),
            2 * int(window.radius))
        dist = space.displacement_distances(half)
        ball = (dist <= r).astype(float)
        num = _conv((f * mu).reshape(window.shape), ball).ravel()
        den = _conv(mu.reshape(window.shape), ball).ravel()
        full = lat.volumes((0,) * lat.dimension, [float(
            space.g.inverse(r)) if isinstance(space, TransformedSpace) else r])[0] \
            if lat.constant_measure else None
        flags = den < full * (1 - 1e-9) if full is not None else np.zeros(len(f), bool)
        # the direct ball sum is exact for r below the gap
        if r < space.discreteness_gap:
            num, den = f * mu, mu.copy()
    else:
        dist = space.distance_matrix(window)
        ball = (dist <= r).astype(float)
        num, den = ball @ (f * mu), ball @ mu
        flags = np.zeros(len(f), bool)
    out = num / den
    return (out, flags) if return_flags else out


# ---------------------------------------------------------------------------
# Export


def export_kernel(kernel: TransitionKernel, meta_path, triplet_path, rows=None):
    """Write JSON metadata and an (x, y, p) CSV triplet list in deterministic order.

    ``rows`` restricts the triplets to the given window indices (all rows by
    default); lattice windows are usually too large for a full listing.
    """
    meta = kernel.export_metadata()
    meta["triplet_rows"] = "all" if rows is None else [
        _site_str(kernel.window.sites[i]) for i in rows]
    if rows is None:
        rows = range(kernel.n_sites)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(triplet_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "p"])
        for i in rows:
            idx, pr = kernel.row(i)
            xs = _site_str(kernel.window.sites[i])
            for j, pv in zip(idx, pr):
                wr.writerow([xs, _site_str(kernel.window.sites[j]), repr(float(pv))])


def _site_str(site) -> str:
    if isinstance(site, tuple):
        return ";".join(str(c) for c in site)
    return str(site)
