"""
From unnormalized log-densities to usable priors.

A :class:`PriorDensity` carries its normalizing constant and, in one
dimension, a cumulative table on 2048 nodes from which CDF values,
quantiles and inverse-CDF samples are obtained.  The module also computes
the local metric matrix ``V(theta)`` of an arbitrary metric by finite
differences, and transforms densities under a change of parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.interpolate import CubicSpline

from .errors import InputError, NumericalError
from .funspace import ModelFunction, WeightingMeasure, functional_uniform_logdensity
from .metric_core import MetricSpace, ParamBox

__all__ = [
    "PriorDensity",
    "Reparametrization",
    "TabulatedLogDensity",
    "normalize",
    "cdf_quantile",
    "sample",
    "local_metric_fd",
    "reparametrize_density",
    "functional_uniform_prior",
    "uniform_prior",
    "log_map",
    "sqrt_map",
    "affine_map",
]

N_CDF_NODES = 2048
_GL_NODES, _GL_WEIGHTS = leggauss(16)
MAX_TENSOR_DIM = 3


# --------------------------------------------------------------------------
# Tabulated log-densities
# --------------------------------------------------------------------------


class TabulatedLogDensity:
    """Cubic-spline interpolant of a costly 1-D log-density.

    Nodes are log-spaced when the interval is positive and spans more than
    two decades, otherwise equispaced.  ``max_error`` is the largest
    interpolation error observed at the cell midpoints.
    """

    def __init__(self, f: Callable[[float], float], lo: float, hi: float, n: int = 1025):
        self.lo, self.hi = float(lo), float(hi)
        self.log_scale = self.lo > 0 and self.hi / self.lo > 100.0
        u = np.linspace(self._to_u(self.lo), self._to_u(self.hi), n)
        x = self._from_u(u)
        x[0], x[-1] = self.lo, self.hi
        y = np.array([f(v) for v in x])
        if not np.all(np.isfinite(y)):
            raise NumericalError("log-density is not finite on the whole tabulation grid")
        self._spline = CubicSpline(u, y)
        um = 0.5 * (u[:-1] + u[1:])
        check = np.array([f(v) for v in self._from_u(um[::8])])
        self.max_error = float(np.max(np.abs(check - self._spline(um[::8]))))

    def _to_u(self, x):
        return np.log(x) if self.log_scale else np.asarray(x, float)

    def _from_u(self, u):
        return np.exp(u) if self.log_scale else np.asarray(u, float)

    def __call__(self, theta):
        t = np.asarray(theta, dtype=float)
        out = self._spline(self._to_u(np.clip(t, self.lo, self.hi)))
        return np.where((t < self.lo) | (t > self.hi), -np.inf, out)


# --------------------------------------------------------------------------
# Prior densities
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _CdfTable:
    nodes: np.ndarray
    cum: np.ndarray  # unnormalized cumulative mass at nodes
    shift: float

    @property
    def total(self) -> float:
        return float(self.cum[-1])


@dataclass(frozen=True)
class PriorDensity:
    """Normalized prior on a box.

    ``log_unnorm`` must accept an array of parameter values (shape ``(n,)``
    in one dimension, ``(n, dim)`` otherwise) and return shape ``(n,)``.
    """

    log_unnorm: Callable
    box: ParamBox
    log_norm_const: float
    norm_error: float
    dim: int
    label: str = ""
    table: Optional[_CdfTable] = field(default=None, repr=False, compare=False)

    def logpdf(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        inside = self._inside(t)
        val = np.where(inside, self.log_unnorm(self._clip(t)) - self.log_norm_const, -np.inf)
        return val

    def pdf(self, theta) -> np.ndarray:
        return np.exp(self.logpdf(theta))

    def cdf(self, x):
        return cdf_quantile(self, x, "cdf")

    def quantile(self, q):
        return cdf_quantile(self, q, "quantile")

    def sample(self, n: int, rng_seed) -> np.ndarray:
        return sample(self, n, rng_seed)

    def _inside(self, t):
        if self.dim == 1:
            return (t >= self.box.lower[0]) & (t <= self.box.upper[0])
        return np.all((t >= self.box.lo) & (t <= self.box.hi), axis=-1)

    def _clip(self, t):
        return np.clip(t, self.box.lo[0], self.box.hi[0]) if self.dim == 1 else np.clip(t, self.box.lo, self.box.hi)


def _vectorize(f, dim):
    def g(theta):
        t = np.asarray(theta, dtype=float)
        if dim == 1:
            flat = np.ravel(t)
            return np.reshape(np.array([f(v) for v in flat], float), np.shape(t))
        pts = np.reshape(t, (-1, dim))
        return np.reshape(np.array([f(v) for v in pts], float), t.shape[:-1])

    return g


def _build_cdf_table(log_unnorm, lo, hi, shift) -> _CdfTable:
    pilot_x = np.linspace(lo, hi, 8193)
    pilot = np.exp(log_unnorm(pilot_x) - shift)
    pilot_cum = np.concatenate([[0.0], np.cumsum(0.5 * (pilot[1:] + pilot[:-1]) * np.diff(pilot_x))])
    levels = np.linspace(0.0, pilot_cum[-1], N_CDF_NODES // 2)
    by_mass = np.interp(levels, pilot_cum, pilot_x)
    # geometric refinement towards both ends catches integrable endpoint peaks
    width = hi - lo
    geo = np.geomspace(1e-9 * width, 0.5 * width, 64)
    nodes = np.unique(np.concatenate([np.linspace(lo, hi, N_CDF_NODES // 2 - 128), by_mass, lo + geo, hi - geo, [lo, hi]]))
    nodes = nodes[(nodes >= lo) & (nodes <= hi)]
    a, b = nodes[:-1], nodes[1:]
    half = 0.5 * (b - a)
    x = 0.5 * (a + b)[:, None] + half[:, None] * _GL_NODES[None, :]
    cell = half * (np.exp(log_unnorm(x) - shift) @ _GL_WEIGHTS)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    return _CdfTable(nodes, cum, shift)


def _grid_shift(log_unnorm, box: ParamBox) -> float:
    if box.dim == 1:
        probe = np.linspace(box.lower[0], box.upper[0], 1025)
    else:
        axes = [np.linspace(a, b, 17) for a, b in zip(box.lower, box.upper)]
        probe = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)
    vals = log_unnorm(probe)
    finite = vals[np.isfinite(vals)]
    if finite.size == 0:
        raise NumericalError("log-density is -inf or nan everywhere on the probe grid")
    return float(finite.max())


def normalize(log_unnorm: Callable, box: ParamBox, label: str = "", vectorized: bool = True) -> PriorDensity:
    """Normalize an unnormalized log-density over a box of dimension <= 3.

    One-dimensional densities are integrated by adaptive quadrature to a
    relative tolerance of 1e-9, two- and three-dimensional ones by nested
    adaptive quadrature to 1e-6.
    """
    if box.dim > MAX_TENSOR_DIM:
        raise InputError(f"normalization is limited to dimension <= {MAX_TENSOR_DIM}, got {box.dim}")
    f = log_unnorm if vectorized else _vectorize(log_unnorm, box.dim)
    shift = _grid_shift(f, box)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if box.dim == 1:
            val, err = integrate.quad(
                lambda t: float(np.exp(f(np.array([t]))[0] - shift)),
                box.lower[0], box.upper[0], epsabs=0.0, epsrel=1e-9, limit=2000,
            )
            rel = 1e-9
        else:
            val, err = integrate.nquad(
                lambda *t: float(np.exp(f(np.array([t]))[0] - shift)),
                list(zip(box.lower, box.upper)),
                opts={"epsabs": 0.0, "epsrel": 1e-6, "limit": 200},
            )
            rel = 1e-6
    if not (math.isfinite(val) and val > 0):
        raise NumericalError(f"normalizing integral is not finite and positive: {val}", achieved=err)
    if err > 100 * rel * val:
        raise NumericalError(f"normalizing integral reached relative error {err / val:.3g}", achieved=err / val)
    table = _build_cdf_table(f, box.lower[0], box.upper[0], shift) if box.dim == 1 else None
    return PriorDensity(f, box, shift + math.log(val), max(err / val, rel), box.dim, label, table)


def uniform_prior(box: ParamBox) -> PriorDensity:
    if box.dim == 1:
        return normalize(lambda t: np.zeros(np.shape(t)), box, "uniform")
    return normalize(lambda t: np.zeros(np.shape(t)[:-1]), box, "uniform")


def functional_uniform_prior(
    model: ModelFunction,
    weighting: WeightingMeasure = WeightingMeasure(),
    box: Optional[ParamBox] = None,
    tabulate: bool = True,
    n_table: int = 1025,
) -> PriorDensity:
    """Normalized ``sqrt(det Z(theta))`` prior for a model's nonlinear parameters.

    With ``tabulate`` (one-dimensional models only) the Gram log-determinant
    is computed on ``n_table`` nodes and spline-interpolated, which makes
    the prior cheap inside samplers.
    """
    if box is not None:
        model = model.with_region(bounds=np.column_stack([box.lower, box.upper]))
    box = model.param_box

    def scalar(t):
        return functional_uniform_logdensity(model, np.atleast_1d(t), weighting)

    label = f"functional-uniform:{model.model_id}"
    if tabulate and box.dim == 1:
        tab = TabulatedLogDensity(scalar, box.lower[0], box.upper[0], n_table)
        prior = normalize(tab, box, label)
        return PriorDensity(prior.log_unnorm, box, prior.log_norm_const, max(prior.norm_error, tab.max_error), 1, label, prior.table)
    return normalize(scalar, box, label, vectorized=False)


def _require_1d(prior: PriorDensity):
    if prior.dim != 1 or prior.table is None:
        raise InputError("CDF, quantiles and inverse-CDF sampling need a one-dimensional prior")


def _partial_mass(prior: PriorDensity, a, x):
    half = 0.5 * (x - a)
    pts = 0.5 * (a + x)[..., None] + half[..., None] * _GL_NODES
    return half * (np.exp(prior.log_unnorm(pts) - prior.table.shift) @ _GL_WEIGHTS)


def _cdf(prior: PriorDensity, x):
    tab = prior.table
    x = np.clip(np.asarray(x, float), tab.nodes[0], tab.nodes[-1])
    k = np.clip(np.searchsorted(tab.nodes, x, side="right") - 1, 0, len(tab.nodes) - 2)
    return np.clip((tab.cum[k] + _partial_mass(prior, tab.nodes[k], x)) / tab.total, 0.0, 1.0)


def _quantile(prior: PriorDensity, q):
    tab = prior.table
    q = np.asarray(q, float)
    target = q * tab.total
    k = np.clip(np.searchsorted(tab.cum, target, side="right") - 1, 0, len(tab.nodes) - 2)
    lo, hi = tab.nodes[k].copy(), tab.nodes[k + 1].copy()
    need = target - tab.cum[k]
    base = tab.nodes[k]
    tol = 1e-12 * (tab.nodes[-1] - tab.nodes[0])
    for _ in range(200):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        below = _partial_mass(prior, base, mid) < need
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def cdf_quantile(prior: PriorDensity, q_or_x, direction: str = "cdf"):
    """CDF value at ``x`` (``direction="cdf"``) or quantile at ``q``.

    Works elementwise on arrays; scalars in give scalars out.
    """
    _require_1d(prior)
    scalar = np.ndim(q_or_x) == 0
    if direction == "cdf":
        out = _cdf(prior, q_or_x)
    elif direction == "quantile":
        q = np.asarray(q_or_x, float)
        if np.any((q < 0) | (q > 1)) or not np.all(np.isfinite(q)):
            raise InputError("quantile levels must lie in [0, 1]")
        out = _quantile(prior, q)
    else:
        raise InputError(f"direction must be 'cdf' or 'quantile', got {direction!r}")
    return float(out) if scalar else out


def sample(prior: PriorDensity, n: int, rng_seed) -> np.ndarray:
    """Seeded draws of shape ``(n, dim)``.

    One-dimensional priors are sampled by inverting the CDF; in two or three
    dimensions a cell of a 64-per-axis grid is drawn with probability
    proportional to the density at its centre and the point is jittered
    uniformly inside the cell.
    """
    if n < 0:
        raise InputError(f"sample size must be nonnegative, got {n}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if n == 0:
        return np.empty((0, prior.dim))
    if prior.dim == 1:
        return _quantile(prior, rng.random(n))[:, None]
    m = 64 if prior.dim == 2 else 32
    edges = [np.linspace(a, b, m + 1) for a, b in zip(prior.box.lower, prior.box.upper)]
    centres = [0.5 * (e[1:] + e[:-1]) for e in edges]
    grid = np.stack(np.meshgrid(*centres, indexing="ij"), axis=-1).reshape(-1, prior.dim)
    logw = prior.log_unnorm(grid)
    w = np.exp(logw - np.max(logw))
    cells = rng.choice(len(grid), size=n, p=w / w.sum())
    cell_width = prior.box.widths / m
    return grid[cells] + (rng.random((n, prior.dim)) - 0.5) * cell_width


# --------------------------------------------------------------------------
# Local metric and reparametrization
# --------------------------------------------------------------------------


def local_metric_fd(metric: MetricSpace, theta0) -> np.ndarray:
    """Finite-difference Hessian of ``d(., theta0)^2 / 2`` at ``theta0``.

    Central differences with step ``h_i = 1e-4 (1 + |theta0_i|)``; the
    result is symmetrized.
    """
    t0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    p = t0.size
    if p != metric.space.dim:
        raise InputError(f"theta0 has dimension {p}, metric space has {metric.space.dim}")
    h = 1e-4 * (1.0 + np.abs(t0))
    margin_lo = t0 - metric.space.lo
    margin_hi = metric.space.hi - t0
    if np.any(margin_lo < 2 * h) or np.any(margin_hi < 2 * h):
        raise InputError(f"theta0 must be at least 2h = {2 * h} inside the box {metric.space}")

    def f(t):
        return 0.5 * metric.distance(t, t0) ** 2

    V = np.empty((p, p))
    for i in range(p):
        e_i = np.zeros(p)
        e_i[i] = h[i]
        V[i, i] = (f(t0 + e_i) + f(t0 - e_i)) / h[i] ** 2
        for j in range(i):
            e_j = np.zeros(p)
            e_j[j] = h[j]
            V[i, j] = (f(t0 + e_i + e_j) - f(t0 + e_i - e_j) - f(t0 - e_i + e_j) + f(t0 - e_i - e_j)) / (4 * h[i] * h[j])
            V[j, i] = V[i, j]
    return 0.5 * (V + V.T)


@dataclass(frozen=True)
class Reparametrization:
    """Bijection ``gamma = forward(theta)`` with inverse ``theta = inverse(gamma)``.

    ``jacobian(gamma)`` is the p x p matrix of partial derivatives of the
    inverse map.
    """

    forward: Callable
    inverse: Callable
    jacobian: Callable
    gamma_box: ParamBox
    label: str = ""

    def log_abs_det(self, gamma) -> float:
        sign, val = np.linalg.slogdet(np.atleast_2d(self.jacobian(np.atleast_1d(np.asarray(gamma, float)))))
        return val if sign != 0 else -math.inf

    def check(self, n_probe: int = 9, tol: float = 1e-10, jac_rtol: float = 1e-5):
        """Round-trip and Jacobian checks on probe points; raises on failure."""
        g = self.gamma_box
        probes = g.lo + g.widths * np.linspace(0.05, 0.95, n_probe)[:, None]
        for gam in probes:
            back = np.atleast_1d(self.forward(np.atleast_1d(self.inverse(gam))))
            if np.max(np.abs(back - gam)) > tol * (1 + np.max(np.abs(gam))):
                raise InputError(f"forward(inverse(gamma)) != gamma at {gam}")
            H = np.atleast_2d(self.jacobian(gam))
            fd = np.empty_like(H)
            for k in range(gam.size):
                step = 1e-6 * (1 + abs(gam[k]))
                gp, gm = gam.copy(), gam.copy()
                gp[k] += step
                gm[k] -= step
                fd[:, k] = (np.atleast_1d(self.inverse(gp)) - np.atleast_1d(self.inverse(gm))) / (2 * step)
            if np.max(np.abs(H - fd)) > jac_rtol * max(1.0, np.max(np.abs(H))):
                raise InputError(f"jacobian does not match finite differences at {gam}")
            if abs(np.linalg.det(H)) == 0:
                raise InputError(f"singular jacobian at {gam}")


def log_map(theta_box: ParamBox) -> Reparametrization:
    if np.any(theta_box.lo <= 0):
        raise InputError("log map needs a strictly positive box")
    return Reparametrization(
        np.log, np.exp, lambda g: np.diag(np.exp(np.atleast_1d(g))),
        ParamBox(tuple(np.log(theta_box.lo)), tuple(np.log(theta_box.hi))), "log",
    )


def sqrt_map(theta_box: ParamBox) -> Reparametrization:
    if np.any(theta_box.lo < 0):
        raise InputError("square-root map needs a nonnegative box")
    return Reparametrization(
        np.sqrt, np.square, lambda g: np.diag(2.0 * np.atleast_1d(g)),
        ParamBox(tuple(np.sqrt(theta_box.lo)), tuple(np.sqrt(theta_box.hi))), "sqrt",
    )


def affine_map(theta_box: ParamBox, scale, shift=0.0) -> Reparametrization:
    """``gamma = scale * theta + shift`` coordinatewise (``scale != 0``)."""
    a = np.broadcast_to(np.asarray(scale, float), (theta_box.dim,)).copy()
    b = np.broadcast_to(np.asarray(shift, float), (theta_box.dim,)).copy()
    if np.any(a == 0):
        raise InputError("affine scale must be nonzero")
    ends = np.stack([a * theta_box.lo + b, a * theta_box.hi + b])
    return Reparametrization(
        lambda t: a * np.asarray(t, float) + b,
        lambda g: (np.asarray(g, float) - b) / a,
        lambda g: np.diag(1.0 / a),
        ParamBox(tuple(ends.min(axis=0)), tuple(ends.max(axis=0))), "affine",
    )


def reparametrize_density(prior: PriorDensity, rmap: Reparametrization) -> PriorDensity:
    """Change-of-variables transform of ``prior`` to the ``gamma`` scale."""
    rmap.check()
    dim = prior.dim
    base = prior.log_unnorm

    def one(gam):
        gam = np.atleast_1d(gam)
        theta = np.atleast_1d(rmap.inverse(gam))
        # round-off at the box ends must not push theta outside
        theta = np.clip(theta, prior.box.lo, prior.box.hi)
        val = base(theta[None, :]) if dim > 1 else base(theta[:1])
        return float(np.ravel(val)[0]) + rmap.log_abs_det(gam)

    label = f"{prior.label}|{rmap.label}"
    if dim > 1:
        return normalize(one, rmap.gamma_box, label, vectorized=False)

    def batch(gam):
        g = np.asarray(gam, dtype=float)
        flat = np.ravel(g)
        theta = np.clip(np.asarray(rmap.inverse(flat), float), prior.box.lo[0], prior.box.hi[0])
        jac = np.array([np.ravel(rmap.jacobian(np.atleast_1d(v)))[0] for v in flat])
        with np.errstate(divide="ignore"):
            out = base(theta) + np.log(np.abs(jac))
        return np.reshape(out, g.shape)

    return normalize(batch, rmap.gamma_box, label)
