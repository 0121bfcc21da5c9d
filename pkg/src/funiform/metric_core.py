"""
Metric spaces over compact parameter boxes and numerical ε-lattices.

A uniform distribution on a metric space ``(M, d)`` is the limit of the
discrete uniform distribution on maximal ε-separated point sets as
``ε → 0``.  For one-dimensional parameter spaces such lattices are easy to
build by marching from the lower bound, which gives a direct numerical
route to the uniform distribution that does not rely on any local
quadratic approximation of ``d``.

The module also provides the two metrics on the family of triangular
densities on ``(0, 1)``: the Hellinger metric (whose uniform distribution
is Beta(1/2, 1/2)) and the Kolmogorov metric (whose uniform distribution
is Uniform(0, 1)).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import PchipInterpolator

from .errors import InputError, NumericalError, UnsupportedMetricError

__all__ = [
    "ParamBox",
    "MetricSpace",
    "EpsilonLattice",
    "DensityEstimate",
    "AxiomReport",
    "make_euclidean_metric",
    "triangular_pdf",
    "triangular_cdf",
    "make_hellinger_triangular_metric",
    "make_kolmogorov_triangular_metric",
    "build_epsilon_lattice",
    "audit_lattice",
    "lattice_density",
    "pseudo_probability",
    "verify_metric_axioms",
    "TRIANGULAR_DELTA",
]

#: Truncation of the triangular parameter interval to ``[δ, 1 - δ]``.
TRIANGULAR_DELTA = 1e-4

BISECTION_TOL = 1e-12
SEPARATION_SLACK = 1e-10
AUDIT_GRID_SIZE = 10_000
KOLMOGOROV_GRID_SIZE = 100_000


@dataclass(frozen=True)
class ParamBox:
    """Axis-aligned compact box ``[lower, upper]`` in ``R^p``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) == 0 or len(lo) != len(hi):
            raise InputError(f"box bounds must be nonempty and of equal length, got {lo} and {hi}")
        for a, b in zip(lo, hi):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise InputError(f"box bounds must be finite, got [{a}, {b}]")
            if not a < b:
                raise InputError(f"box is degenerate: lower {a} must be < upper {b}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ParamBox":
        return cls((lo,), (hi,))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, theta, tol: float = 0.0) -> bool:
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        if t.shape != (self.dim,):
            return False
        return bool(np.all(t >= self.lo - tol) and np.all(t <= self.hi + tol))

    def contains_box(self, other: "ParamBox", tol: float = 1e-12) -> bool:
        return other.dim == self.dim and bool(
            np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol)
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform draws, shape ``(n, dim)``."""
        return self.lo + self.widths * rng.random((n, self.dim))


@dataclass(frozen=True)
class MetricSpace:
    """A parameter box together with a distance function on it."""

    space: ParamBox
    dist: Callable[[np.ndarray, np.ndarray], float]
    label: str = "custom"

    def distance(self, a, b) -> float:
        return float(self.dist(np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))))

    def scaled(self, c: float) -> "MetricSpace":
        if not c > 0:
            raise InputError(f"scale factor must be positive, got {c}")
        base = self.dist
        return MetricSpace(self.space, lambda a, b: c * base(a, b), f"{c:g}*{self.label}")


@dataclass(frozen=True)
class EpsilonLattice:
    epsilon: float
    points: np.ndarray
    metric_label: str
    direction: str = "up"

    @property
    def cardinality(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    cdf: np.ndarray

    def cdf_at(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.cdf)


@dataclass
class AxiomReport:
    """Outcome of :func:`verify_metric_axioms`; failures are data, not exceptions."""

    passed: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    n_samples: int = 0

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def make_euclidean_metric(space: ParamBox) -> MetricSpace:
    return MetricSpace(space, lambda a, b: float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float))), "euclid")


def _tri_pdf(x, theta):
    x = np.asarray(x, dtype=float)
    return np.where(x <= theta, 2.0 * x / theta, 2.0 * (1.0 - x) / (1.0 - theta))


def triangular_pdf(x: float, theta: float) -> float:
    """Density of the triangular distribution on (0, 1) with mode ``theta``.

    >>> triangular_pdf(0.25, 0.5)
    1.0
    """
    if not 0.0 < theta < 1.0:
        raise InputError(f"triangular mode must lie in (0, 1), got {theta}")
    if not 0.0 < x < 1.0:
        raise InputError(f"triangular support is (0, 1), got x={x}")
    return float(_tri_pdf(x, theta))


def triangular_cdf(y, theta):
    """Distribution function ``F(y | theta)``; vectorized over ``y``."""
    y = np.asarray(y, dtype=float)
    return np.where(y <= theta, y * y / theta, 1.0 - (1.0 - y) ** 2 / (1.0 - theta))


def _scalar(theta) -> float:
    return float(np.ravel(theta)[0])


def _hellinger_sq(t1: float, t2: float) -> float:
    if t1 == t2:
        return 0.0
    a, b = (t1, t2) if t1 < t2 else (t2, t1)
    # Outer pieces are closed form: both root densities are c*sqrt(x) on
    # [0, a] and c*sqrt(1 - x) on [b, 1].
    left = (math.sqrt(2.0 / t1) - math.sqrt(2.0 / t2)) ** 2 * a * a / 2.0
    right = (math.sqrt(2.0 / (1.0 - t1)) - math.sqrt(2.0 / (1.0 - t2))) ** 2 * (1.0 - b) ** 2 / 2.0

    def middle(x):
        # On (a, b) the distribution with mode a is on its falling edge and
        # the one with mode b on its rising edge.
        return (math.sqrt(2.0 * (1.0 - x) / (1.0 - a)) - math.sqrt(2.0 * x / b)) ** 2

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        mid, err, info = integrate.quad(middle, a, b, epsabs=1e-15, epsrel=1e-11, limit=200, full_output=True)[:3]
    if err > max(1e-13, 1e-8 * abs(mid)):
        raise NumericalError(f"Hellinger quadrature on [{a}, {b}] did not converge", achieved=err)
    return left + mid + right


def hellinger_triangular(t1: float, t2: float) -> float:
    """Hellinger distance between two triangular densities."""
    return math.sqrt(max(_hellinger_sq(t1, t2), 0.0))


def make_hellinger_triangular_metric() -> MetricSpace:
    space = ParamBox.interval(TRIANGULAR_DELTA, 1.0 - TRIANGULAR_DELTA)
    return MetricSpace(space, lambda a, b: hellinger_triangular(_scalar(a), _scalar(b)), "hellinger-tri")


def kolmogorov_triangular(t1: float, t2: float, grid_size: int = KOLMOGOROV_GRID_SIZE) -> float:
    """Kolmogorov distance between two triangular distributions.

    The CDF difference is piecewise quadratic with knots at the two modes;
    the sup is taken over a dense grid augmented with the knots and the
    interior stationary point, where the two densities cross.
    """
    if t1 == t2:
        return 0.0
    a, b = (t1, t2) if t1 < t2 else (t2, t1)
    crossing = b / (1.0 - a + b)
    y = np.concatenate([np.linspace(0.0, 1.0, grid_size), [a, b, crossing]])
    return float(np.max(np.abs(triangular_cdf(y, t1) - triangular_cdf(y, t2))))


def make_kolmogorov_triangular_metric(grid_size: int = KOLMOGOROV_GRID_SIZE) -> MetricSpace:
    space = ParamBox.interval(TRIANGULAR_DELTA, 1.0 - TRIANGULAR_DELTA)
    return MetricSpace(
        space,
        lambda a, b: kolmogorov_triangular(_scalar(a), _scalar(b), grid_size),
        "kolmogorov-tri",
    )


METRIC_FACTORIES = {
    "euclid": lambda: make_euclidean_metric(ParamBox.interval(0.0, 1.0)),
    "hellinger-tri": make_hellinger_triangular_metric,
    "kolmogorov-tri": make_kolmogorov_triangular_metric,
}


# --------------------------------------------------------------------------
# Lattices
# --------------------------------------------------------------------------


def _check_monotone(metric: MetricSpace, n_anchor: int = 5, n_probe: int = 12):
    lo, hi = metric.space.lower[0], metric.space.upper[0]
    width = hi - lo
    for anchor in np.linspace(lo, hi, n_anchor):
        for sign in (1.0, -1.0):
            room = (hi - anchor) if sign > 0 else (anchor - lo)
            if room <= 0:
                continue
            steps = anchor + sign * room * np.linspace(0.0, 1.0, n_probe + 1)[1:]
            d = [metric.distance(anchor, s) for s in steps]
            if d[0] <= 0 or np.any(np.diff(d) <= -1e-12 * width):
                raise UnsupportedMetricError(
                    f"metric {metric.label!r} is not increasing in |θ - θ'| near θ={anchor:.6g}"
                )


def _next_point(metric: MetricSpace, prev: float, eps: float, bound: float, tol: float):
    """First parameter beyond ``prev`` (towards ``bound``) at distance >= eps."""
    reach = metric.distance(prev, bound)
    if reach < eps - SEPARATION_SLACK:
        return None
    if reach < eps:
        return bound
    near, far = prev, bound
    # Grow the bracket geometrically; most steps are tiny compared with the box.
    step = max(tol, 1e-3 * abs(bound - prev))
    while True:
        probe = prev + math.copysign(step, bound - prev)
        if (bound - probe) * (bound - prev) <= 0:
            break
        if metric.distance(prev, probe) >= eps:
            far = probe
            break
        near = probe
        step *= 2.0
    # Bracketed Brent iteration, then a bisection clean-up so the returned
    # point is on the ">= eps" side of the root.
    if abs(far - near) > tol:
        root = optimize.brentq(lambda t: metric.distance(prev, t) - eps, near, far, xtol=tol / 4, rtol=4 * np.finfo(float).eps)
        lo_side, hi_side = root - math.copysign(tol / 2, bound - prev), root + math.copysign(tol / 2, bound - prev)
        if metric.distance(prev, lo_side) < eps and (lo_side - near) * (bound - prev) >= 0:
            near = lo_side
        if metric.distance(prev, hi_side) >= eps and (far - hi_side) * (bound - prev) >= 0:
            far = hi_side
    while abs(far - near) > tol:
        mid = 0.5 * (near + far)
        if metric.distance(prev, mid) >= eps:
            far = mid
        else:
            near = mid
    return far


def build_epsilon_lattice(
    metric: MetricSpace,
    epsilon: float,
    direction: str = "up",
    tol: float = BISECTION_TOL,
    check_monotone: bool = True,
) -> EpsilonLattice:
    """Greedy ε-lattice on a one-dimensional metric space.

    Points are placed by marching from one end of the interval: each new
    point is the closest parameter at distance at least ``epsilon`` from
    the previous one, located by bisection to ``tol`` in parameter units.
    For metrics that increase with ``|θ - θ'|`` this greedy set is a
    packing of maximal cardinality.

    Parameters
    ----------
    direction : {"up", "down"}
        March from the lower bound (default) or from the upper bound.
    """
    if metric.space.dim != 1:
        raise InputError("ε-lattices are implemented for one-dimensional spaces only")
    if not epsilon > 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    if direction not in ("up", "down"):
        raise InputError(f"direction must be 'up' or 'down', got {direction!r}")
    if check_monotone:
        _check_monotone(metric)
    lo, hi = metric.space.lower[0], metric.space.upper[0]
    start, bound = (lo, hi) if direction == "up" else (hi, lo)
    points = [start]
    while True:
        nxt = _next_point(metric, points[-1], epsilon, bound, tol)
        if nxt is None:
            break
        points.append(nxt)
    pts = np.array(sorted(points))
    return EpsilonLattice(float(epsilon), pts, metric.label, direction)


def audit_lattice(metric: MetricSpace, lattice: EpsilonLattice, grid_size: int = AUDIT_GRID_SIZE, tol: float = 1e-10):
    """Check separation and grid maximality of a 1-D lattice.

    Returns ``(min_consecutive_distance, n_insertable)`` where
    ``n_insertable`` counts audit-grid candidates at distance at least
    ``epsilon + tol`` from every lattice point.  In one dimension with a
    monotone metric only the two neighbours of a candidate matter.
    """
    pts = lattice.points
    sep = min((metric.distance(a, b) for a, b in zip(pts[:-1], pts[1:])), default=math.inf)
    lo, hi = metric.space.lower[0], metric.space.upper[0]
    grid = np.linspace(lo, hi, grid_size)
    idx = np.searchsorted(pts, grid)
    eps = lattice.epsilon
    insertable = 0
    for c, i in zip(grid, idx):
        if i < len(pts) and pts[i] == c:
            continue
        if i > 0 and metric.distance(pts[i - 1], c) < eps + tol:
            continue
        if i < len(pts) and metric.distance(c, pts[i]) < eps + tol:
            continue
        insertable += 1
    return sep, insertable


def lattice_density(lattice: EpsilonLattice, grid_size: int = 512, bounds=None) -> DensityEstimate:
    """Smooth density estimate from the empirical distribution of a lattice.

    The empirical CDF takes the value ``k/(N-1)`` at the k-th lattice point,
    so neighbouring points are one ``1/(N-1)`` step apart in probability.
    The end points are moved onto ``bounds`` when these are wider than the
    lattice.  The knots are joined by a monotone piecewise-cubic
    interpolant whose derivative is the density.
    """
    n = lattice.cardinality
    if n < 10:
        raise InputError(f"lattice density needs at least 10 points, got {n}")
    pts = np.asarray(lattice.points, float)
    lo, hi = (pts[0], pts[-1]) if bounds is None else bounds
    knots_x = np.concatenate([[min(lo, pts[0])], pts[1:-1], [max(hi, pts[-1])]])
    knots_f = np.arange(n) / (n - 1)
    keep = np.concatenate([[True], np.diff(knots_x) > 0])
    interp = PchipInterpolator(knots_x[keep], knots_f[keep])
    grid = np.linspace(lo, hi, grid_size)
    cdf = np.clip(interp(grid), 0.0, 1.0)
    cdf[0], cdf[-1] = 0.0, 1.0
    dens = np.maximum(interp.derivative()(grid), 0.0)
    dens = dens / np.trapezoid(dens, grid)
    return DensityEstimate(grid, dens, cdf)


def pseudo_probability(metric: MetricSpace, epsilon: float, subinterval: ParamBox) -> float:
    """Ratio of packing numbers ``D(ε, A) / D(ε, M)`` for an interval ``A``."""
    if not metric.space.contains_box(subinterval):
        raise InputError(f"subinterval {subinterval} is not contained in {metric.space}")
    full = build_epsilon_lattice(metric, epsilon)
    sub_metric = MetricSpace(subinterval, metric.dist, metric.label)
    sub = build_epsilon_lattice(sub_metric, epsilon, check_monotone=False)
    return sub.cardinality / full.cardinality


def verify_metric_axioms(metric: MetricSpace, n_samples: int = 1000, rng_seed: int = 0, tol: float = 1e-10) -> AxiomReport:
    """Spot-check identity, symmetry and the triangle inequality on random points."""
    rng = np.random.default_rng(rng_seed)
    pts = metric.space.sample(rng, n_samples)
    d = metric.distance
    worst_id = 0.0
    for p in pts:
        worst_id = max(worst_id, abs(d(p, p)))
    worst_sym = 0.0
    worst_tri = 0.0
    nxt = np.roll(pts, -1, axis=0)
    nxt2 = np.roll(pts, -2, axis=0)
    for a, b, c in zip(pts, nxt, nxt2):
        ab, ba = d(a, b), d(b, a)
        if ab < 0:
            worst_id = max(worst_id, -ab)
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_tri = max(worst_tri, d(a, c) - ab - d(b, c))
    report = AxiomReport(n_samples=n_samples)
    report.worst = {"identity": worst_id, "symmetry": worst_sym, "triangle": worst_tri}
    report.passed = {k: v <= tol for k, v in report.worst.items()}
    return report


def lattice_points_table(lattice: EpsilonLattice) -> Sequence[tuple]:
    return [(float(p),) for p in lattice.points]
