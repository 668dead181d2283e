"""Path simulation: exit and hitting probabilities, and the exit-time constant gamma.

Lattice kernels are simulated as the translation-invariant chain on the whole
lattice.  Inside the window its jumps coincide with the kernel's; a jump that
would land outside the window is recorded as censoring instead of being
folded into the diagonal.  Random numbers come from counter-based Philox
streams keyed by (seed, stream, chunk), so every estimate is reproducible and
independent of the worker count.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import CensoredPathsError, NoFeasibleGammaError
from .kernel import LatticeKernel, TransitionKernel

CHUNK = 4096
Z95 = float(stats.norm.ppf(0.975))
DEFAULT_MAX_CENSORED = 0.01


# ---------------------------------------------------------------------------
# Alias tables


class AliasTable:
    """Vose alias tables for one or more discrete laws over a common support size.

    ``weights`` has shape (R, M); row r is a law over M outcomes (zero padding
    allowed).  Sampling costs one integer and one uniform per draw.
    """

    def __init__(self, weights):
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        if np.any(w < 0):
            raise ValueError("negative weight")
        rows, m = w.shape
        self.prob = np.ones((rows, m))
        self.alias = np.tile(np.arange(m), (rows, 1))
        for r in range(rows):
            self._build(r, w[r] * m / w[r].sum())

    def _build(self, r, scaled):
        small = [i for i, v in enumerate(scaled) if v < 1.0]
        large = [i for i, v in enumerate(scaled) if v >= 1.0]
        scaled = scaled.copy()
        prob, alias = self.prob[r], self.alias[r]
        while small and large:
            s, l = small.pop(), large.pop()
            prob[s], alias[s] = scaled[s], l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            (small if scaled[l] < 1.0 else large).append(l)
        for i in small + large:
            prob[i], alias[i] = 1.0, i

    @property
    def size(self) -> int:
        return self.prob.shape[1]

    def probabilities(self, r: int = 0) -> np.ndarray:
        m = self.size
        out = self.prob[r] / m
        np.add.at(out, self.alias[r], (1.0 - self.prob[r]) / m)
        return out

    def sample(self, rng: np.random.Generator, rows) -> np.ndarray:
        rows = np.asarray(rows)
        col = rng.integers(0, self.size, size=rows.shape)
        keep = rng.random(rows.shape) < self.prob[rows, col]
        return np.where(keep, col, self.alias[rows, col])


# ---------------------------------------------------------------------------
# Samplers


class Sampler:
    """Jump sampler for a kernel; state is a window index array."""

    def __init__(self, kernel: TransitionKernel):
        self.kernel = kernel
        window = kernel.window
        if isinstance(kernel, LatticeKernel):
            lat = kernel.space.lattice
            grid = lat.displacement_grid(kernel.half).reshape(-1, lat.dimension)
            kw = kernel.scale * kernel.weights.ravel()
            self.period = np.array(lat.period)
            classes = np.array(np.unravel_index(np.arange(int(np.prod(self.period))),
                                                tuple(self.period))).T
            table = []
            for cls in classes:
                mu_target = lat.measure_array(grid + cls)
                pr = kw * mu_target
                centre = len(pr) // 2
                pr[centre] = 0.0
                pr[centre] = 1.0 - math.fsum(pr)
                table.append(pr)
            table = np.array(table)
            keep = np.any(table > 0, axis=0)
            self.displacements = grid[keep]
            self.law = table[:, keep]
            self.alias = AliasTable(self.law)
            self.center = np.array(window.center)
            self.radius = int(window.radius)
            self.shape = np.array(window.shape)
            self.kind = "lattice"
        else:
            rows = [kernel.row(i) for i in range(kernel.n_sites)]
            m = max(len(idx) for idx, _ in rows)
            self.targets = np.zeros((kernel.n_sites, m), dtype=np.int64)
            law = np.zeros((kernel.n_sites, m))
            for i, (idx, pr) in enumerate(rows):
                self.targets[i, :len(idx)] = idx
                law[i, :len(idx)] = pr
            self.law = law
            self.alias = AliasTable(law)
            self.kind = "dense"

    def coords(self, idx: np.ndarray) -> np.ndarray:
        return self.kernel.window.coords[idx]

    def _class_of(self, pos: np.ndarray) -> np.ndarray:
        if self.law.shape[0] == 1:
            return np.zeros(len(pos), dtype=np.int64)
        res = np.mod(pos, self.period)
        return np.ravel_multi_index(res.T, tuple(self.period))

    def step_positions(self, pos: np.ndarray, rng) -> tuple:
        """One jump for lattice coordinates pos (N, d); returns (new_pos, censored mask)."""
        cols = self.alias.sample(rng, self._class_of(pos))
        new = pos + self.displacements[cols]
        censored = np.any(np.abs(new - self.center) > self.radius, axis=1)
        return new, censored

    def step_indices(self, idx: np.ndarray, rng) -> np.ndarray:
        cols = self.alias.sample(rng, idx)
        return self.targets[idx, cols]

    def index_of(self, pos: np.ndarray) -> np.ndarray:
        rel = pos - self.center + self.radius
        return np.ravel_multi_index(rel.T, tuple(self.shape))


def make_sampler(kernel: TransitionKernel) -> Sampler:
    return Sampler(kernel)


def sample_jump(sampler: Sampler, x, rng: np.random.Generator):
    """One draw from p(x, .) for a window site x; None if the jump leaves the window."""
    window = sampler.kernel.window
    i = window.index(x)
    if sampler.kind == "dense":
        j = int(sampler.step_indices(np.array([i]), rng)[0])
        return window.sites[j]
    pos = window.coords[[i]]
    new, cens = sampler.step_positions(pos, rng)
    if cens[0]:
        return None
    return tuple(int(c) for c in new[0])


def rng_stream(seed: int, stream: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(stream, chunk))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Statistics


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


@dataclass
class ExitStats:
    kind: str
    x: tuple
    r: float
    t: float
    n_paths: int
    n_exited: int
    n_censored: int = 0
    continuous: bool = False
    target: tuple | None = None
    bound: float | None = None

    @property
    def estimate(self) -> float:
        return self.n_exited / self.n_paths

    @property
    def ci(self) -> tuple:
        return wilson_interval(self.n_exited, self.n_paths)

    @property
    def half_width(self) -> float:
        lo, hi = self.ci
        return (hi - lo) / 2

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / self.n_paths

    @property
    def bound_ratio(self) -> float | None:
        return None if not self.bound else self.estimate / self.bound

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {"kind": self.kind, "x": list(self.x), "target": None if self.target is None
                else list(self.target), "r": self.r, "t": self.t, "continuous": self.continuous,
                "n_paths": self.n_paths, "n_exited": self.n_exited, "estimate": self.estimate,
                "ci_low": lo, "ci_high": hi, "censored_fraction": self.censored_fraction,
                "bound": self.bound, "bound_ratio": self.bound_ratio}


def _chunks(n_paths: int):
    return [(c, min(CHUNK, n_paths - c * CHUNK)) for c in range((n_paths + CHUNK - 1) // CHUNK)]


def _run_chunks(fn, n_paths, workers):
    jobs = _chunks(n_paths)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda job: fn(*job), jobs))
    return [fn(*job) for job in jobs]


def _distance_from(sampler: Sampler, pos, x) -> np.ndarray:
    kernel = sampler.kernel
    if sampler.kind == "lattice":
        return kernel.space.lattice.norm_of(pos - np.array(x)).astype(float)
    dist = kernel.space.distance_matrix(kernel.window)
    return dist[kernel.window.index(x)][pos]


def _first_passage(sampler: Sampler, x, horizons: np.ndarray, rng, crossed):
    """Simulate paths from x up to per-path horizons.

    ``crossed(state)`` flags paths that reached the target set.  Returns the
    first step at which each path crossed (inf if never) and a censoring flag
    giving the step at which the path left the window (inf if never).
    Random draws are made for every path at every step so that different
    targets on the same seed set see the same paths.
    """
    n = len(horizons)
    hit = np.full(n, np.inf)
    cens = np.full(n, np.inf)
    start = np.where(crossed(None), 0.0, np.inf)
    hit = np.minimum(hit, np.where(horizons >= 0, start, np.inf))
    t_max = int(horizons.max()) if n else 0
    window = sampler.kernel.window
    if sampler.kind == "lattice":
        state = np.repeat(np.array(window.sites[window.index(x)])[None, :], n, axis=0)
    else:
        state = np.full(n, window.index(x), dtype=np.int64)
    for k in range(1, t_max + 1):
        running = (k <= horizons) & np.isinf(hit) & np.isinf(cens)
        if not running.any():
            break
        if sampler.kind == "lattice":
            state, out = sampler.step_positions(state, rng)
            newly_cens = running & out
            cens[newly_cens] = k
            active = running & ~out
        else:
            state = sampler.step_indices(state, rng)
            active = running
        reached = active & crossed(state)
        hit[reached] = k
    return hit, cens


def exit_probability(kernel: TransitionKernel, x, r: float, t_steps: float, n_paths: int,
                     seed: int, continuous: bool = False, workers: int = 1,
                     sampler: Sampler | None = None) -> ExitStats:
    """P^x(max_{k <= t} d(X_k, x) > r); with ``continuous`` the horizon is N(t) ~ Poisson(t).

    A jump out of the window from inside B(x, r) counts as an exit: the window
    contains the ball, so the path has left it.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    sampler = sampler or make_sampler(kernel)
    x = kernel.space.normalize(x)

    def run(chunk, size):
        rng = rng_stream(seed, 0, chunk)
        if continuous:
            horizons = rng.poisson(t_steps, size).astype(float)
        else:
            horizons = np.full(size, math.floor(t_steps), dtype=float)

        def crossed(state):
            if state is None:
                return np.zeros(size, bool)
            return _distance_from(sampler, state, x) > r

        hit, cens = _first_passage(sampler, x, horizons, rng, crossed)
        return int(np.sum(np.isfinite(hit) | np.isfinite(cens)))

    exited = sum(_run_chunks(run, n_paths, workers))
    return ExitStats("exit", tuple(x), float(r), float(t_steps), n_paths, exited,
                     continuous=continuous)


def hitting_probability(kernel: TransitionKernel, x, y, n: int, n_paths: int, seed: int,
                        continuous: bool = False, workers: int = 1,
                        max_censored: float = DEFAULT_MAX_CENSORED,
                        sampler: Sampler | None = None) -> ExitStats:
    """P^x(T(y, n^{1/beta}) <= n): the walk enters B(y, n^{1/beta}) within n steps."""
    space = kernel.space
    x, y = space.normalize(x), space.normalize(y)
    d = space.distance(x, y)
    if d <= 0:
        raise ValueError("hitting_probability needs d(x, y) > 0")
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    beta = kernel.phi.beta
    radius = n ** (1.0 / beta)
    sampler = sampler or make_sampler(kernel)

    def run(chunk, size):
        rng = rng_stream(seed, 1, chunk)
        if continuous:
            horizons = rng.poisson(n, size).astype(float)
        else:
            horizons = np.full(size, float(n))

        def crossed(state):
            if state is None:
                return np.full(size, d <= radius)
            return _distance_from(sampler, state, y) <= radius

        hit, cens = _first_passage(sampler, x, horizons, rng, crossed)
        return int(np.sum(np.isfinite(hit))), int(np.sum(np.isfinite(cens)))

    parts = _run_chunks(run, n_paths, workers)
    hits = sum(p[0] for p in parts)
    censored = sum(p[1] for p in parts)
    if censored > max_censored * n_paths:
        raise CensoredPathsError(
            f"{censored}/{n_paths} paths left the window before the horizon")
    prof = space.profile
    bound = n * prof(radius) / (prof(d) * (1 + d) ** beta)
    return ExitStats("hit", tuple(x), float(radius), float(n), n_paths, hits, censored,
                     continuous, tuple(y), float(bound))


# ---------------------------------------------------------------------------
# gamma


def default_gamma_grid() -> np.ndarray:
    return 2.0 ** (np.arange(-48, 17) / 4.0)


@dataclass
class GammaEstimate:
    gamma: float
    grid: list
    table: list = field(default_factory=list)

    def __float__(self):
        return self.gamma

    def capped(self, cap: float = 1.0 / 9.0) -> float:
        return min(self.gamma, cap)


def estimate_gamma(kernel: TransitionKernel, x_samples, r_grid, n_paths: int, seed: int,
                   gamma_grid=None, workers: int = 1, level: float = 0.25) -> GammaEstimate:
    """Largest grid gamma with P^x(max_{k <= floor(gamma r^beta)} d(X_k, x) > r/2) + CI <= 1/4
    for every sampled x and r."""
    if not len(x_samples) or not len(r_grid):
        raise ValueError("x_samples and r_grid must be nonempty")
    grid = np.sort(np.asarray(default_gamma_grid() if gamma_grid is None else gamma_grid))
    beta = kernel.phi.beta
    sampler = make_sampler(kernel)
    feasible = np.ones(len(grid), bool)
    table = []
    for xi, x in enumerate(x_samples):
        x = kernel.space.normalize(x)
        for ri, r in enumerate(r_grid):
            steps = np.floor(grid * r ** beta)
            horizon = float(steps.max())

            def run(chunk, size, x=x, r=r):
                rng = rng_stream(seed, 2 + 1000 * xi + ri, chunk)

                def crossed(state):
                    if state is None:
                        return np.zeros(size, bool)
                    return _distance_from(sampler, state, x) > r / 2

                hit, cens = _first_passage(sampler, x, np.full(size, horizon), rng, crossed)
                return np.minimum(hit, cens)

            first = np.concatenate(_run_chunks(run, n_paths, workers))
            for gi, g in enumerate(grid):
                k = int(np.sum(first <= steps[gi]))
                lo, hi = wilson_interval(k, n_paths)
                p = k / n_paths
                ok = p + (hi - lo) / 2 <= level
                feasible[gi] &= ok
                table.append({"x": list(x), "r": float(r), "gamma": float(g),
                              "steps": int(steps[gi]), "estimate": p,
                              "ci_low": lo, "ci_high": hi, "feasible": bool(ok)})
    # feasibility is monotone in gamma for each (x, r); take the largest prefix
    if not feasible[0]:
        raise NoFeasibleGammaError(f"even gamma={grid[0]:g} violates the exit bound")
    last = int(np.argmin(feasible)) - 1 if not feasible.all() else len(grid) - 1
    return GammaEstimate(float(grid[last]), [float(g) for g in grid], table)


# ---------------------------------------------------------------------------
# Export


def export_stats_csv(stats_list, path):
    """One row per estimate; ``radius`` is the exit radius or the target-ball radius."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "x", "target", "radius", "t_or_n", "n_paths", "estimate",
                     "ci_low", "ci_high", "censored_fraction", "bound"])
        for st in stats_list:
            lo, hi = st.ci
            target = "" if st.target is None else ";".join(map(str, st.target))
            wr.writerow([st.kind, ";".join(map(str, st.x)), target, repr(st.r), repr(st.t),
                         st.n_paths, repr(st.estimate), repr(lo), repr(hi),
                         repr(st.censored_fraction), "" if st.bound is None else repr(st.bound)])


def killed_exit_probability(kernel: TransitionKernel, x, r: float, t_steps: int) -> float:
    """Exact P^x(max_{k <= t} d(X_k, x) > r) from the chain killed outside B(x, r).

    Only feasible for moderate balls; serves as an oracle for exit_probability.
    """
    window = kernel.window
    x = kernel.space.normalize(x)
    i0 = window.index(x)
    dist = _distance_from(make_sampler(kernel), window.coords, x) \
        if window.coords is not None else kernel.space.distance_matrix(window)[i0]
    ball = np.nonzero(dist <= r)[0]
    q = np.empty((len(ball), len(ball)))
    for a, i in enumerate(ball):
        q[a] = [kernel.p(int(i), int(j)) for j in ball]
    v = (ball == i0).astype(float)
    for _ in range(int(math.floor(t_steps))):
        v = v @ q
    return max(0.0, 1.0 - math.fsum(v))
