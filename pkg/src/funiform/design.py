"""
Bayesian optimal designs for the exponential regression model.

The information of a design ``d = {(x_i, w_i)}`` at ``theta`` is
``I(d, theta) = sum_i w_i x_i^2 exp(-2 theta x_i)`` for the homoscedastic
normal model with mean ``exp(-theta x)``.  The Bayesian criterion averages
``-log I`` over a prior for ``theta``; designs are compared through the
efficiency ``I(d, theta) / I(d_opt(theta), theta)`` against the locally
optimal one-point design.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import optimize
from scipy.special import expit, softmax

from .errors import InputError, NumericalError
from .funspace import ModelFunction, get_model
from .prior_build import PriorDensity

__all__ = [
    "Design",
    "information",
    "bayesian_criterion",
    "optimize_design",
    "local_optimal",
    "efficiency",
    "efficiency_curve",
    "REFERENCE_DESIGNS",
]

MERGE_DISTANCE = 0.05
WEIGHT_FLOOR = 0.005
N_CRITERION_NODES = 256
N_STARTS = 50


@dataclass(frozen=True)
class Design:
    """Approximate design: support points and allocation weights."""

    points: tuple
    weights: tuple

    def __post_init__(self):
        pts = tuple(float(v) for v in np.ravel(self.points))
        w = tuple(float(v) for v in np.ravel(self.weights))
        if len(pts) == 0 or len(pts) != len(w):
            raise InputError("a design needs equally many (>= 1) points and weights")
        if min(w) < 0:
            raise InputError(f"design weights must be nonnegative, got {w}")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise InputError(f"design weights must sum to 1, got {math.fsum(w)!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, points, weights) -> "Design":
        w = np.asarray(weights, float)
        return cls(tuple(points), tuple(w / w.sum()))

    def check_region(self, x_range):
        lo, hi = x_range
        if any(not lo - 1e-12 <= p <= hi + 1e-12 for p in self.points):
            raise InputError(f"design points {self.points} leave the region [{lo}, {hi}]")

    def canonical(self, merge_distance: float = MERGE_DISTANCE, weight_floor: float = WEIGHT_FLOOR) -> "Design":
        """Sort, merge points closer than ``merge_distance``, drop tiny weights."""
        order = np.argsort(self.points, kind="stable")
        pts = list(np.asarray(self.points)[order])
        w = list(np.asarray(self.weights)[order])
        merged_p, merged_w = [pts[0]], [w[0]]
        for p, wi in zip(pts[1:], w[1:]):
            if p - merged_p[-1] < merge_distance:
                total = merged_w[-1] + wi
                # keep the merged point at the weighted centre
                merged_p[-1] = (merged_p[-1] * merged_w[-1] + p * wi) / total if total > 0 else p
                merged_w[-1] = total
            else:
                merged_p.append(p)
                merged_w.append(wi)
        keep = [i for i, wi in enumerate(merged_w) if wi >= weight_floor]
        if not keep:
            keep = [int(np.argmax(merged_w))]
        return Design.normalized([merged_p[i] for i in keep], [merged_w[i] for i in keep])

    def to_dict(self) -> dict:
        return {"points": list(self.points), "weights": list(self.weights)}


#: Reference designs for x in [0, 10] and a prior on theta in [0, 5].
REFERENCE_DESIGNS = {
    "uniform": Design((0.38, 4.04, 10.0), (0.956, 0.022, 0.022)),
    "functional-uniform": Design((0.54, 2.35, 10.0), (0.19, 0.3, 0.51)),
}


def _exp_information(points, weights, theta):
    x = np.asarray(points)
    w = np.asarray(weights)
    t = np.asarray(theta, float)
    return np.sum(w * x * x * np.exp(-2.0 * t[..., None] * x), axis=-1)


def information(design: Design, theta, model: ModelFunction = None):
    """Fisher information (up to the constant 1/sigma^2) of ``design`` at ``theta``.

    Scalar for the exponential model; for other models the determinant of
    ``sum_i w_i J_i' J_i`` built from the shape embedding.  Vectorized over
    ``theta`` for the exponential model.
    """
    model = model or get_model("exponential")
    if model.model_id == "exponential" and model.jac is not None:
        t = np.asarray(theta, float)
        if np.any(t < 0):
            raise InputError("information needs theta >= 0")
        out = _exp_information(design.points, design.weights, t)
        return float(out) if np.ndim(out) == 0 else out
    t = np.atleast_1d(np.asarray(theta, float))
    J = model.embedded_jac(np.asarray(design.points), t)
    M = (J * np.asarray(design.weights)[:, None]).T @ J
    return float(np.linalg.det(M))


def _criterion_rule(prior: PriorDensity, n: int = N_CRITERION_NODES):
    nodes, weights = leggauss(n)
    lo, hi = prior.box.lower[0], prior.box.upper[0]
    theta = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights * np.exp(prior.logpdf(theta))
    return theta, w / w.sum()


def bayesian_criterion(design: Design, prior: PriorDensity, model: ModelFunction = None, rule=None) -> float:
    """Prior-averaged ``-log I(d, theta)``; smaller is better, ``inf`` if ``I`` vanishes."""
    theta, w = rule if rule is not None else _criterion_rule(prior)
    if model is None or model.model_id == "exponential":
        info = _exp_information(design.points, design.weights, theta)
    else:
        info = np.array([information(design, t, model) for t in theta])
    if np.any(info <= 0):
        return math.inf
    return float(-np.dot(w, np.log(info)))


def _decode(z, k, lo, hi):
    return lo + (hi - lo) * expit(z[:k]), softmax(z[k:])


def _objective(z, k, lo, hi, theta, w):
    x, wt = _decode(z, k, lo, hi)
    info = _exp_information(x, wt, theta)
    if np.any(info <= 0) or not np.all(np.isfinite(info)):
        return 1e300
    return -float(np.dot(w, np.log(info)))


def _run_start(args):
    z0, k, lo, hi, theta, w = args
    res = optimize.minimize(
        _objective, z0, args=(k, lo, hi, theta, w), method="Nelder-Mead",
        options={"maxiter": 20000, "maxfev": 20000, "xatol": 1e-9, "fatol": 1e-12, "adaptive": True},
    )
    return res.fun, res.x


def optimize_design(
    model: ModelFunction,
    prior: PriorDensity,
    x_range=(0.0, 10.0),
    max_points: int = 5,
    rng_seed: int = 0,
    n_starts: int = N_STARTS,
    workers: int = 1,
) -> Design:
    """Multistart Nelder-Mead search for the Bayesian optimal design.

    Points are mapped into ``x_range`` with a logistic transform and weights
    through a softmax, so the search is unconstrained.  The best of
    ``n_starts`` runs is canonicalized (merge points closer than 0.05, drop
    weights below 0.005, renormalize, sort).
    """
    if max_points < 1:
        raise InputError(f"max_points must be >= 1, got {max_points}")
    if model.model_id != "exponential":
        raise InputError("design optimization is implemented for the exponential model only")
    lo, hi = float(x_range[0]), float(x_range[1])
    if not lo < hi:
        raise InputError(f"x_range must satisfy lo < hi, got {x_range}")
    theta, w = _criterion_rule(prior)
    rng = np.random.default_rng(rng_seed)
    k = max_points
    starts = [np.concatenate([rng.normal(0.0, 2.0, k), rng.normal(0.0, 1.0, k)]) for _ in range(n_starts)]
    jobs = [(z0, k, lo, hi, theta, w) for z0 in starts]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_start, jobs))
    else:
        results = [_run_start(j) for j in jobs]
    finite = [(f, z) for f, z in results if math.isfinite(f) and f < 1e300]
    if not finite:
        raise NumericalError("design criterion was not finite at any optimizer result")
    best = min(range(len(finite)), key=lambda i: finite[i][0])
    x, wt = _decode(finite[best][1], k, lo, hi)
    return Design.normalized(x, wt).canonical()


def local_optimal(theta: float, model: ModelFunction = None, x_range=(0.0, 10.0)) -> Design:
    """One-point design maximizing ``x^2 exp(-2 theta x)`` on ``x_range``.

    The maximizer is ``clamp(1/theta, lo, hi)``; a golden-section search on
    the same interval guards the closed form.
    """
    if theta < 0:
        raise InputError(f"theta must be >= 0, got {theta}")
    lo, hi = float(x_range[0]), float(x_range[1])
    x_star = hi if theta == 0 else min(max(1.0 / theta, lo), hi)

    def neg_info(x):
        return -(x * x * math.exp(-2.0 * theta * x))

    res = optimize.minimize_scalar(neg_info, bracket=None, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    if res.fun < neg_info(x_star) * (1 + 1e-9) - 1e-300:
        x_star = float(res.x)
    return Design((x_star,), (1.0,))


def efficiency(design: Design, theta: float, model: ModelFunction = None, x_range=(0.0, 10.0)) -> float:
    """``I(d, theta) / I(d_opt(theta), theta)``; 0 (with a warning) for zero information."""
    info = information(design, theta, model)
    if info <= 0:
        warnings.warn(f"design has zero information at theta={theta}", RuntimeWarning, stacklevel=2)
        return 0.0
    best = information(local_optimal(theta, model, x_range), theta, model)
    return float(math.exp(math.log(info) - math.log(best)))


def efficiency_curve(design: Design, thetas, model: ModelFunction = None, x_range=(0.0, 10.0)) -> np.ndarray:
    return np.array([efficiency(design, float(t), model, x_range) for t in thetas])
