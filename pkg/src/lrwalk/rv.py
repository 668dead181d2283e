"""Regularly varying functions and the concave change of metric.

``phi(x) = ((1 + x) l(x))**beta`` with ``l`` slowly varying.  For the general
heat kernel bounds the metric d is replaced by ``g(d)`` where g is a concave,
strictly increasing function comparable to ``phi**(1/delta)``.  g is built
from a log-scale mollification of ``phi**(1/delta)``, linearised near zero,
and its concavity is certified on a sampled grid rather than assumed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import ConcavityCertificationError, ConvergenceError
from .space import MetricMeasureSpace, TransformedSpace

SLOWLY_VARYING_KINDS = ("const", "logpow", "iterlog", "table")


class SlowlyVaryingFn:
    """Positive continuous slowly varying function.

    kinds
        ``const``   params [c]           l(x) = c
        ``logpow``  params [a]           l(x) = log(e + x)**a
        ``iterlog`` params [a]           l(x) = log(e + log(e + x))**a
        ``table``   params [xs, ys]      log-log linear interpolation,
                                         constant beyond the table
    """

    def __init__(self, kind: str = "const", params=(1.0,)):
        if kind not in SLOWLY_VARYING_KINDS:
            raise ValueError(f"unknown slowly varying kind {kind!r}")
        self.kind = kind
        self.params = list(params)
        if kind == "const":
            if len(self.params) != 1 or not self.params[0] > 0:
                raise ValueError("const needs one positive parameter")
        elif kind in ("logpow", "iterlog"):
            if len(self.params) != 1:
                raise ValueError(f"{kind} needs one exponent parameter")
        else:
            xs, ys = (np.asarray(p, dtype=float) for p in self.params)
            if xs.ndim != 1 or xs.shape != ys.shape or np.any(np.diff(xs) <= 0):
                raise ValueError("table needs increasing xs and matching ys")
            if np.any(ys <= 0) or np.any(xs < 0):
                raise ValueError("table values must be positive, abscissae >= 0")
            self._lx, self._ly = np.log1p(xs), np.log(ys)

    @classmethod
    def from_spec(cls, spec: dict) -> "SlowlyVaryingFn":
        return cls(spec.get("kind", "const"), spec.get("params", [1.0]))

    def to_spec(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @property
    def is_constant(self) -> bool:
        return self.kind == "const"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "const":
            out = np.full_like(x, float(self.params[0]))
        elif self.kind == "logpow":
            out = np.log(math.e + x) ** self.params[0]
        elif self.kind == "iterlog":
            out = np.log(math.e + np.log(math.e + x)) ** self.params[0]
        else:
            out = np.exp(np.interp(np.log1p(x), self._lx, self._ly))
        return float(out) if out.ndim == 0 else out

    def index_statistic(self, ks=range(4, 41, 4), lambdas=(2.0, 4.0)) -> np.ndarray:
        """max over lambda of |log(l(lambda x)/l(x)) / log lambda| along x = 2^k."""
        x = 2.0 ** np.asarray(list(ks), dtype=float)
        stats = [np.abs(np.log(self(lam * x) / self(x)) / math.log(lam)) for lam in lambdas]
        return np.max(stats, axis=0)

    def __repr__(self):
        return f"SlowlyVaryingFn({self.kind}, {self.params})"


@dataclass(frozen=True)
class RegVaryingFn:
    """phi(x) = ((1 + x) l(x))**beta, regularly varying of index beta."""

    beta: float
    slowly_varying: SlowlyVaryingFn = field(default_factory=SlowlyVaryingFn)

    def __post_init__(self):
        if not 0 < self.beta < 2:
            raise ValueError("beta must lie in (0, 2)")

    def __call__(self, x):
        return eval_phi(self, x)


def eval_phi(phi: RegVaryingFn, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("phi is defined on [0, inf)")
    out = ((1.0 + x) * phi.slowly_varying(x)) ** phi.beta
    return float(out) if np.ndim(out) == 0 else out


def de_bruijn_conjugate(l: SlowlyVaryingFn, x: float, tol: float = 1e-12,
                        x_min: float = 10.0, max_iter: int = 200) -> float:
    """Value at x of the de Bruijn conjugate l_# of l.

    Fixed point of y -> 1/l(x y) started from 1/l(x); l(x y*) y* ~ 1.
    """
    if x < x_min:
        raise ValueError(f"de Bruijn conjugate evaluated below x_min={x_min}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if l.is_constant:
        return 1.0 / float(l.params[0])
    y = 1.0 / l(x)
    for _ in range(max_iter):
        y_next = 1.0 / l(x * y)
        if abs(y_next - y) <= tol * y:
            return y_next
        y = y_next
    residual = abs(l(x * y) * y - 1.0)
    raise ConvergenceError(
        f"de Bruijn iteration did not converge at x={x} after {max_iter} steps",
        last_iterate=y, residual=residual)


def de_bruijn_residual(l: SlowlyVaryingFn, x: float, y: float) -> float:
    return abs(float(l(x * y)) * y - 1.0)


# ---------------------------------------------------------------------------
# Mollification on a logarithmic scale


def _bump(u):
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    out = np.zeros_like(u)
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def _bump_prime(u):
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    out = np.zeros_like(u)
    w = 1.0 - u[inside] ** 2
    out[inside] = np.exp(-1.0 / w) * (-2.0 * u[inside] / w ** 2)
    return out


class LogSmoothed:
    """Smooth version f1 of a regularly varying f of index rho.

    f1(x) = int f(x e^u) psi(u) du / int e^{rho u} psi(u) du with psi a C^inf
    bump on [-1, 1]; the normalisation makes f1(x)/f(x) -> 1.
    """

    def __init__(self, f, rho: float, epsrel: float = 1e-13):
        self.f = f
        self.rho = rho
        self.epsrel = epsrel
        moment = integrate.quad(lambda u: math.exp(rho * u) * float(_bump(u)), -1, 1,
                                epsabs=0, epsrel=1e-13)[0]
        self._norm = moment

    def _integrate(self, x, weight):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        fx = np.asarray(self.f(x), dtype=float)
        val, _ = integrate.quad_vec(lambda u: self.f(x * math.exp(u)) / fx * weight(u),
                                    -1.0, 1.0, epsabs=0, epsrel=self.epsrel, norm="max")
        return val * fx

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        out = self._integrate(x, _bump) / self._norm
        return float(out[0]) if scalar else out

    def derivative(self, x):
        scalar = np.ndim(x) == 0
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        out = -self._integrate(xa, _bump_prime) / (xa * self._norm)
        return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Concave transform


def _divided_slopes(x, y):
    return np.diff(y) / np.diff(x)


def _concave_on(x, y, rel_tol):
    s = _divided_slopes(x, y)
    return bool(np.all(s[1:] <= s[:-1] + rel_tol * np.abs(s[:-1])))


class ConcaveTransform:
    """g(x) = slope * x on [0, A+1] and B + f1(x) beyond."""

    def __init__(self, breakpoint: float, slope: float, shift: float, tail: LogSmoothed,
                 delta: float, beta: float, reference=None):
        self.breakpoint = float(breakpoint)
        self.slope = float(slope)
        self.shift = float(shift)
        self.tail = tail
        self.delta = float(delta)
        self.beta = float(beta)
        self.reference = reference      # f = phi**(1/delta)
        self.certificate: dict = {}

    @property
    def A(self) -> float:
        return self.breakpoint - 1.0

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = self.slope * x
        far = x > self.breakpoint
        if np.any(far):
            out[far] = self.shift + self.tail(x[far])
        return float(out[0]) if scalar else out

    @property
    def junction_value(self) -> float:
        return self.slope * self.breakpoint

    def inverse(self, y):
        return inverse_transform(self, y)

    def __repr__(self):
        return (f"ConcaveTransform(A+1={self.breakpoint:g}, slope={self.slope:.6g}, "
                f"B={self.shift:.6g}, delta={self.delta:g})")


def concave_regularize(phi: RegVaryingFn, delta: float | None = None,
                       x_max: float = 2.0 ** 40, points_per_octave: int = 16,
                       scan_limit: int = 30, rel_tol: float = 1e-10) -> ConcaveTransform:
    """Concave, strictly increasing g with g(0)=0 and (1+g)/phi**(1/delta) bounded.

    The breakpoint A is the first of 2^0, ..., 2^scan_limit for which the
    shifted smooth tail is concave on the sampled grid and joins the linear
    piece without a slope increase.  The returned transform carries a
    ``certificate`` dict with the measured ratio constant and checks.
    """
    beta = phi.beta
    if delta is None:
        delta = (beta + 2.0) / 2.0
    if not beta < delta < 2:
        raise ValueError(f"delta must lie in (beta, 2) = ({beta}, 2)")
    rho = beta / delta

    def f(x):
        return np.asarray(eval_phi(phi, x)) ** (1.0 / delta)

    f1 = LogSmoothed(f, rho)
    n_oct = int(math.ceil(math.log2(x_max)))
    grid = 2.0 ** (np.arange(0, n_oct * points_per_octave + 1) / points_per_octave)
    f1_grid = f1(grid)

    chosen = None
    for k in range(scan_limit + 1):
        a1 = 2.0 ** k + 1.0
        if a1 >= grid[-1] / 4:
            break
        f1_a1 = f1(a1)
        d1 = f1.derivative(a1)
        shift = (a1 + 1.0) * d1
        slope = (shift + f1_a1) / a1
        sel = grid > a1
        xs = np.concatenate([[a1], grid[sel]])
        ys = shift + np.concatenate([[f1_a1], f1_grid[sel]])
        first_tail_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        if d1 > 0 and _concave_on(xs, ys, rel_tol) and first_tail_slope <= slope * (1 + rel_tol):
            chosen = (a1, slope, shift)
            break
    if chosen is None:
        raise ConcavityCertificationError(
            f"no breakpoint up to 2^{scan_limit} yields a concave tail")
    a1, slope, shift = chosen
    g = ConcaveTransform(a1, slope, shift, f1, delta, beta, reference=f)
    g.certificate = certify_transform(g, f, grid, rel_tol)
    return g


def certify_transform(g: ConcaveTransform, f, tail_grid, rel_tol=1e-10) -> dict:
    """Sampled checks of g(0)=0, monotonicity, concavity and the ratio band."""
    lin = np.linspace(0.0, g.breakpoint, 65)
    xs = np.unique(np.concatenate([lin, tail_grid[tail_grid > g.breakpoint]]))
    gs = g(xs)
    fs = f(xs)
    ratio = (1.0 + gs) / fs
    c_ratio = float(np.max(np.maximum(ratio, 1.0 / ratio)))
    ks = np.arange(20, int(math.log2(tail_grid[-1])) + 1)
    asym = g(2.0 ** ks) / f(2.0 ** ks)
    cert = {
        "g0": float(g(0.0)),
        "increasing": bool(np.all(np.diff(gs) > 0)),
        "concave": _concave_on(xs, gs, rel_tol),
        "ratio_constant": c_ratio,
        "ratio_band": [float(ratio.min()), float(ratio.max())],
        "asymptotic_ratio": {int(k): float(v) for k, v in zip(ks, asym)},
        "grid": {"points": int(xs.size), "x_max": float(xs[-1])},
        "breakpoint": g.breakpoint,
        "delta": g.delta,
    }
    cert["passed"] = (cert["g0"] == 0.0 and cert["increasing"] and cert["concave"]
                      and math.isfinite(c_ratio))
    return cert


def inverse_transform(g: ConcaveTransform, y, max_iter: int = 200):
    """x >= 0 with |g(x) - y| <= 1e-12 max(1, y).

    Beyond the linear piece each value is bracketed by doubling and solved with
    Brent's method; g' <= slope (concavity), so an x-tolerance of
    0.5e-12 max(1, y) / slope meets the residual contract.
    """
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(y < 0):
        raise ValueError("inverse_transform needs y >= 0")
    out = y / g.slope
    far = np.nonzero(y > g.junction_value)[0]
    if far.size:
        yf = y[far]
        hi = np.full_like(yf, g.breakpoint * 2.0)
        for _ in range(200):
            short = g(hi) < yf
            if not np.any(short):
                break
            hi[short] *= 2.0
        for i, target, top in zip(far, yf, hi):
            xtol = 0.5e-12 * max(1.0, target) / g.slope
            out[i] = optimize.brentq(lambda x: g(x) - target, g.breakpoint, top,
                                     xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=max_iter)
    return float(out[0]) if scalar else out


def transform_space(space: MetricMeasureSpace, g: ConcaveTransform) -> TransformedSpace:
    """(M, g∘d, mu) with volume profile V_h∘g^{-1}."""
    return TransformedSpace(space, g)
