"""
Nonlinear regression models and their function-space geometry.

For a regression function ``mu(x, theta)`` on a design region ``X`` the
L2 distance between two parameter values is locally

    d(theta, theta0)^2 ~ (theta - theta0)' Z(theta0) (theta - theta0),
    Z(theta) = integral over X of J_x(theta)' J_x(theta) dx,

with ``J_x`` the row vector of partial derivatives.  The uniform
distribution on the space of functional shapes then has density
proportional to ``sqrt(det Z(theta))``.  Replacing ``dx`` by the
empirical measure of a design gives the Jeffreys prior of the
homoscedastic normal model.

Affine parameters do not change the shape of a curve, so each registry
model exposes an *embedding* that keeps only the parameters entering
non-linearly, e.g. ``x / (theta2 + x)`` for the Emax model.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import InputError, NumericalError
from .metric_core import ParamBox

__all__ = [
    "ModelFunction",
    "WeightingMeasure",
    "GramMatrix",
    "SingularGramWarning",
    "get_model",
    "load_model",
    "model_mu",
    "embedded_jacobian",
    "gram_matrix",
    "functional_uniform_logdensity",
    "closed_form_prior",
    "jeffreys_logdensity",
    "fd_jacobian",
    "MODEL_IDS",
]

QUAD_RTOL = 1e-9
QUAD_MAX_EVALS = 200_000
_GK21_EVALS = 21


class SingularGramWarning(RuntimeWarning):
    """The Gram matrix was not positive definite; the log-density is -inf."""


@dataclass(frozen=True)
class ModelFunction:
    """A regression function with its shape embedding.

    ``mu(x, theta)`` and ``full_jac(x, theta)`` broadcast over a leading
    batch axis of ``theta`` (shape ``(p,)`` or ``(K, p)``) and a trailing
    axis of ``x``.  ``embed`` and ``jac`` take the nonlinear parameters
    only; ``jac`` returns shape ``(len(x), p_nl)``.  When ``jac`` is None
    central finite differences of ``embed`` are used.
    """

    model_id: str
    mu: Callable
    n_params: int
    nonlinear_index: tuple
    embed: Callable
    jac: Optional[Callable]
    design_region: tuple
    param_box: ParamBox
    full_jac: Optional[Callable] = None
    param_names: tuple = ()

    @property
    def p_nl(self) -> int:
        return len(self.nonlinear_index)

    @property
    def linear_index(self) -> tuple:
        return tuple(i for i in range(self.n_params) if i not in self.nonlinear_index)

    def check_theta_nl(self, theta_nl) -> np.ndarray:
        t = np.atleast_1d(np.asarray(theta_nl, dtype=float))
        if t.shape != (self.p_nl,):
            raise InputError(f"{self.model_id}: expected {self.p_nl} nonlinear parameter(s), got shape {t.shape}")
        if not self.param_box.contains(t, tol=1e-12):
            raise InputError(f"{self.model_id}: theta {t} outside parameter box {self.param_box}")
        return t

    def embedded_jac(self, x, theta_nl) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.jac is None:
            return fd_jacobian(self.embed, x, theta_nl)
        return np.reshape(self.jac(x, theta_nl), (x.size, self.p_nl))

    def with_region(self, x_range=None, bounds=None) -> "ModelFunction":
        region = self.design_region if x_range is None else tuple(float(v) for v in x_range)
        if not region[0] < region[1]:
            raise InputError(f"design region must satisfy lo < hi, got {region}")
        box = self.param_box
        if bounds is not None:
            b = np.asarray(bounds, dtype=float).reshape(-1, 2) if np.ndim(bounds) > 1 else np.asarray(bounds, float).reshape(1, 2)
            box = ParamBox(tuple(b[:, 0]), tuple(b[:, 1]))
        return ModelFunction(
            self.model_id, self.mu, self.n_params, self.nonlinear_index, self.embed, self.jac,
            region, box, self.full_jac, self.param_names,
        )

    def reparametrized(self, inverse: Callable, gamma_box: ParamBox, model_id: Optional[str] = None) -> "ModelFunction":
        """Same family of curves indexed by ``gamma`` with ``theta = inverse(gamma)``.

        The Jacobian of the new embedding is taken by finite differences,
        so a prior built from it does not use the chain rule.
        """
        embed = self.embed

        def new_embed(x, gamma):
            return embed(x, np.atleast_1d(inverse(np.asarray(gamma, float))))

        return ModelFunction(
            model_id or f"{self.model_id}[reparam]", self.mu, self.n_params, self.nonlinear_index,
            new_embed, None, self.design_region, gamma_box, None, self.param_names,
        )


def fd_jacobian(f: Callable, x, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``f(x, theta)`` in ``theta``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(theta, dtype=float))
    out = np.empty((x.size, t.size))
    for k in range(t.size):
        h = rel_step * (1.0 + abs(t[k]))
        tp, tm = t.copy(), t.copy()
        tp[k] += h
        tm[k] -= h
        out[:, k] = (np.asarray(f(x, tp), float) - np.asarray(f(x, tm), float)) / (2.0 * h)
    return out


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


def _cols(theta):
    t = np.asarray(theta, dtype=float)
    return [t[..., k, None] for k in range(t.shape[-1])]


def _exp_mu(x, theta):
    (t,) = _cols(theta)
    return np.exp(-t * x)


def _exp_jac(x, theta_nl):
    t = float(np.ravel(theta_nl)[0])
    return (-x * np.exp(-t * x))[:, None]


def _emax_mu(x, theta):
    t0, t1, t2 = _cols(theta)
    return t0 + t1 * x / (t2 + x)


def _emax_embed(x, theta_nl):
    t2 = float(np.ravel(theta_nl)[0])
    return x / (t2 + x)


def _emax_jac(x, theta_nl):
    t2 = float(np.ravel(theta_nl)[0])
    return (-x / (x + t2) ** 2)[:, None]


def _emax_full_jac(x, theta):
    t0, t1, t2 = _cols(theta)
    g = x / (t2 + x)
    return np.stack(np.broadcast_arrays(np.ones_like(g), g, -t1 * x / (t2 + x) ** 2), axis=-1)


def _xpow(x, t):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.power(np.where(x > 0, x, 1.0), t), 0.0)


def _xpow_log(x, t):
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(x > 0, x, 1.0)
        return np.where(x > 0, np.power(safe, t) * np.log(safe), 0.0)


def _power_mu(x, theta):
    t0, t1, t2 = _cols(theta)
    return t0 + t1 * _xpow(x, t2)


def _power_embed(x, theta_nl):
    return _xpow(x, float(np.ravel(theta_nl)[0]))


def _power_jac(x, theta_nl):
    return _xpow_log(x, float(np.ravel(theta_nl)[0]))[:, None]


def _power_full_jac(x, theta):
    t0, t1, t2 = _cols(theta)
    g = _xpow(x, t2)
    return np.stack(np.broadcast_arrays(np.ones_like(g), g, t1 * _xpow_log(x, t2)), axis=-1)


def _linear_mu(x, theta):
    t0, t1 = _cols(theta)
    return t0 + t1 * x


def _linear_embed(x, theta_nl):
    t = np.ravel(theta_nl)
    return t[0] + t[1] * x


def _linear_jac(x, theta_nl):
    return np.stack([np.ones_like(x), x], axis=-1)


def _linear_full_jac(x, theta):
    t0, t1 = _cols(theta)
    one = np.ones_like(t0 + 0.0 * x)
    return np.stack([one, one * x], axis=-1)


_REGISTRY = {
    "exponential": ModelFunction(
        "exponential", _exp_mu, 1, (0,), lambda x, t: np.exp(-float(np.ravel(t)[0]) * x), _exp_jac,
        (0.0, 10.0), ParamBox.interval(0.0, 5.0),
        lambda x, theta: (-x * _exp_mu(x, theta))[..., None], ("theta",),
    ),
    "emax": ModelFunction(
        "emax", _emax_mu, 3, (2,), _emax_embed, _emax_jac,
        (0.0, 4.0), ParamBox.interval(0.004, 6.0), _emax_full_jac, ("e0", "emax", "ed50"),
    ),
    "power": ModelFunction(
        "power", _power_mu, 3, (2,), _power_embed, _power_jac,
        (0.0, 1.0), ParamBox.interval(0.05, 20.0), _power_full_jac, ("theta0", "theta1", "theta2"),
    ),
    "linear": ModelFunction(
        "linear", _linear_mu, 2, (0, 1), _linear_embed, _linear_jac,
        (0.0, 1.0), ParamBox((-5.0, -5.0), (5.0, 5.0)), _linear_full_jac, ("theta0", "theta1"),
    ),
}

MODEL_IDS = tuple(_REGISTRY)


def get_model(model_id: str, x_range=None, bounds=None) -> ModelFunction:
    """Registry lookup, optionally overriding design region and parameter box."""
    try:
        model = _REGISTRY[model_id]
    except KeyError:
        raise InputError(f"unknown model {model_id!r}; choose from {', '.join(MODEL_IDS)}") from None
    if x_range is None and bounds is None:
        return model
    return model.with_region(x_range, bounds)


def load_model(source) -> ModelFunction:
    """Model from a JSON document ``{model_id, x_range: [lo, hi], bounds: [lo, hi]}``.

    ``source`` is a path, a JSON string or an already parsed mapping.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            try:
                with open(text) as fh:
                    doc = json.load(fh)
            except OSError as exc:
                raise InputError(f"cannot read model file {text}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise InputError(f"model file {text} is not valid JSON: {exc}") from None
    if "model_id" not in doc:
        raise InputError("model JSON requires a 'model_id' field")
    return get_model(doc["model_id"], doc.get("x_range"), doc.get("bounds"))


def model_mu(model: ModelFunction, x: float, theta_full) -> float:
    lo, hi = model.design_region
    if not lo <= x <= hi:
        raise InputError(f"x={x} outside design region [{lo}, {hi}]")
    t = np.asarray(theta_full, dtype=float)
    if t.shape != (model.n_params,):
        raise InputError(f"{model.model_id} takes {model.n_params} parameters, got shape {t.shape}")
    if model.model_id == "power" and x == 0 and t[2] <= 0:
        raise InputError("power model is undefined at x = 0 for a non-positive exponent")
    return float(np.ravel(model.mu(np.array([x], float), t))[0])


def embedded_jacobian(model: ModelFunction, x: float, theta_nl) -> np.ndarray:
    t = model.check_theta_nl(theta_nl)
    return model.embedded_jac(np.array([x], float), t)[0]


# --------------------------------------------------------------------------
# Weighting measures and Gram matrices
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightingMeasure:
    kind: str = "lebesgue"
    points: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind not in ("lebesgue", "discrete"):
            raise InputError(f"weighting kind must be 'lebesgue' or 'discrete', got {self.kind!r}")
        if self.kind == "discrete":
            pts = tuple(float(v) for v in self.points)
            w = tuple(float(v) for v in self.weights)
            if len(pts) == 0 or len(pts) != len(w):
                raise InputError("discrete weighting needs equally many points and weights")
            if min(w) < 0:
                raise InputError("discrete weights must be nonnegative")
            if abs(math.fsum(w) - 1.0) > 1e-12:
                raise InputError(f"discrete weights must sum to 1, got {math.fsum(w)!r}")
            object.__setattr__(self, "points", pts)
            object.__setattr__(self, "weights", w)

    @classmethod
    def lebesgue(cls) -> "WeightingMeasure":
        return cls("lebesgue")

    @classmethod
    def discrete(cls, points, weights=None) -> "WeightingMeasure":
        pts = [float(v) for v in np.ravel(points)]
        if weights is None:
            weights = [1.0 / len(pts)] * len(pts)
        return cls("discrete", tuple(pts), tuple(float(v) for v in np.ravel(weights)))

    @classmethod
    def from_design(cls, design) -> "WeightingMeasure":
        return cls.discrete(design.points, design.weights)

    def check_region(self, region):
        if self.kind == "discrete":
            lo, hi = region
            bad = [p for p in self.points if not lo - 1e-12 <= p <= hi + 1e-12]
            if bad:
                raise InputError(f"weighting atoms {bad} lie outside the design region [{lo}, {hi}]")


@dataclass(frozen=True)
class GramMatrix:
    theta: np.ndarray
    matrix: np.ndarray
    quadrature_error: float = 0.0

    def logdet(self) -> float:
        m = 0.5 * (self.matrix + self.matrix.T)
        sign, val = np.linalg.slogdet(m)
        return val if sign > 0 else -math.inf


def _quad_1d(f, lo, hi):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err, info = integrate.quad(
            f, lo, hi, epsabs=0.0, epsrel=QUAD_RTOL, limit=QUAD_MAX_EVALS // _GK21_EVALS, full_output=True
        )[:3]
    if not math.isfinite(val) or err > max(10 * QUAD_RTOL * abs(val), 1e-300):
        raise NumericalError(f"quadrature on [{lo}, {hi}] reached error {err:.3g} for value {val:.6g}", achieved=err)
    return val, err


def gram_matrix(model: ModelFunction, theta_nl, weighting: WeightingMeasure = WeightingMeasure()) -> GramMatrix:
    t = model.check_theta_nl(theta_nl)
    p = model.p_nl
    if weighting.kind == "discrete":
        weighting.check_region(model.design_region)
        J = model.embedded_jac(np.asarray(weighting.points), t)
        w = np.asarray(weighting.weights)
        Z = (J * w[:, None]).T @ J
        return GramMatrix(t, 0.5 * (Z + Z.T), 0.0)
    lo, hi = model.design_region
    if p == 1:
        val, err = _quad_1d(lambda x: float(model.embedded_jac(x, t)[0, 0]) ** 2, lo, hi)
        return GramMatrix(t, np.array([[val]]), err)

    def integrand(x):
        row = model.embedded_jac(x, t)[0]
        return np.outer(row, row)

    Z, err = integrate.quad_vec(integrand, lo, hi, epsabs=0.0, epsrel=QUAD_RTOL, limit=QUAD_MAX_EVALS // _GK21_EVALS)
    scale = np.max(np.abs(Z))
    if not np.all(np.isfinite(Z)) or err > max(10 * QUAD_RTOL * scale, 1e-300):
        raise NumericalError(f"matrix quadrature reached error {err:.3g}", achieved=err)
    return GramMatrix(t, 0.5 * (Z + Z.T), float(err))


def functional_uniform_logdensity(model: ModelFunction, theta_nl, weighting: WeightingMeasure = WeightingMeasure()) -> float:
    """Unnormalized log of ``sqrt(det Z(theta))``; ``-inf`` for a singular Gram matrix."""
    G = gram_matrix(model, theta_nl, weighting)
    val = G.logdet()
    if not math.isfinite(val):
        warnings.warn(f"{model.model_id}: singular Gram matrix at theta={G.theta}", SingularGramWarning, stacklevel=2)
        return -math.inf
    return 0.5 * val


def jeffreys_logdensity(model: ModelFunction, theta_nl, design) -> float:
    """Jeffreys prior of the homoscedastic normal model at ``design``.

    This is the functional uniform density with the design's empirical
    measure as weighting measure.  ``design`` needs ``points`` and
    ``weights`` attributes.
    """
    return functional_uniform_logdensity(model, theta_nl, WeightingMeasure.from_design(design))


# --------------------------------------------------------------------------
# Closed forms
# --------------------------------------------------------------------------

_CLOSED_FORM_BOXES = {"exponential": (0.0, 5.0), "emax": (0.004, 6.0), "power": (0.0, 20.0)}


def _exp_series_limit(ts):
    # (e^{20t} - 200t^2 - 20t - 1) / t^3 by its series; the t -> 0 limit is 8000/6
    u = 20.0 * ts
    safe = np.where(ts > 0, ts, 1.0)
    return np.where(ts > 0, (u ** 3 / 6 + u ** 4 / 24 + u ** 5 / 120) / safe ** 3, 8000.0 / 6.0)


def closed_form_prior(model_id: str, theta, reference: bool = True):
    """Unnormalized closed-form functional uniform priors.

    ``exponential`` on x in [0, 10], ``emax`` (embedding x/(theta+x)) on
    [0, 4] and ``power`` (embedding x^theta) on [0, 1].  For the power model
    ``reference=True`` gives the reference expression
    ``1/sqrt(2t^3/3 + t^2 + t/2 + 1)``; ``reference=False`` gives ``(2t + 1)^(-3/2)``, which is what the integral
    of ``(x^t log x)^2`` over [0, 1] actually yields.
    """
    if model_id not in _CLOSED_FORM_BOXES:
        raise InputError(f"no closed-form prior for {model_id!r}; choose from {', '.join(_CLOSED_FORM_BOXES)}")
    scalar = np.ndim(theta) == 0
    t = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(t < 0):
        raise InputError(f"closed-form priors need theta >= 0, got {t.min()}")
    if model_id == "exponential":
        small = t < 1e-3
        out = np.empty_like(t)
        out[small] = np.exp(-10.0 * t[small]) * np.sqrt(_exp_series_limit(t[small]))
        tl = t[~small]
        out[~small] = np.exp(-10.0 * tl) * np.sqrt((np.exp(20.0 * tl) - 200.0 * tl ** 2 - 20.0 * tl - 1.0) / tl ** 3)
    elif model_id == "emax":
        if np.any(t <= 0):
            raise InputError("emax closed form is singular at theta = 0")
        out = 1.0 / np.sqrt(t ** 4 + 12.0 * t ** 3 + 48.0 * t ** 2 + 64.0 * t)
    elif reference:
        out = 1.0 / np.sqrt(2.0 * t ** 3 / 3.0 + t ** 2 + t / 2.0 + 1.0)
    else:
        out = (2.0 * t + 1.0) ** -1.5
    return float(out[0]) if scalar else out
