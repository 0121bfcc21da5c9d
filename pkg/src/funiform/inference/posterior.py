"""
Posterior computation for nonlinear regression with shape-based priors.

The mean function is ``mu(x, theta)`` from :mod:`funiform.funspace`.  The
parameters entering non-linearly carry the chosen prior (uniform,
functional uniform or Jeffreys) on a compact box; the affine parameters
get improper flat priors and, for normal data, ``sigma`` gets a prior
proportional to ``sigma^-2``.

:class:`Posterior` evaluates the log posterior for a *batch* of datasets
sharing their design points: parameters of shape ``(K, d)`` are scored
against the K datasets row by row.  Samplers run one chain per row in
lockstep, each chain with its own random stream, so a chain's output does
not depend on which other chains share its batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import optimize, special, stats
from scipy.special import gammaln

from .._rng import stream
from ..errors import InputError, NumericalError
from ..funspace import ModelFunction, functional_uniform_logdensity
from ..metric_core import ParamBox
from ..prior_build import TabulatedLogDensity, normalize

__all__ = [
    "Dataset",
    "LikelihoodSpec",
    "PriorSpec",
    "PosteriorSample",
    "Posterior",
    "log_posterior",
    "sample_posterior_mh",
    "sample_posterior_isr",
    "posterior_mode",
    "predictive_band",
    "median_mcse",
    "run_mh_batch",
]

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Specifications
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Observed data: ``(x, y)`` rows, or ``(x, n, s)`` rows for binomial counts."""

    x: np.ndarray
    y: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.atleast_1d(np.asarray(self.y, dtype=float))
            if y.shape != x.shape:
                raise InputError(f"x and y must have equal length, got {x.size} and {y.size}")
            object.__setattr__(self, "y", y)
        else:
            if self.n is None or self.s is None:
                raise InputError("a dataset needs y, or both n and s")
            n = np.atleast_1d(np.asarray(self.n)).astype(np.int64)
            s = np.atleast_1d(np.asarray(self.s)).astype(np.int64)
            if n.shape != x.shape or s.shape != x.shape:
                raise InputError("x, n and s must have equal length")
            if np.any(n < 1) or np.any(s < 0) or np.any(s > n):
                raise InputError("binomial rows need n >= 1 and 0 <= s <= n")
            object.__setattr__(self, "n", n)
            object.__setattr__(self, "s", s)

    @property
    def kind(self) -> str:
        return "normal" if self.y is not None else "binomial"

    def __len__(self) -> int:
        return self.x.size

    @classmethod
    def empty(cls, kind: str = "normal") -> "Dataset":
        if kind == "normal":
            return cls(np.empty(0), np.empty(0))
        return cls(np.empty(0), n=np.empty(0, np.int64), s=np.empty(0, np.int64))

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read ``x,y`` or ``x,n,s`` columns (header row required)."""
        import csv

        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise InputError(f"cannot read data file {path}: {exc}") from None
        if not rows:
            raise InputError(f"data file {path} has no rows")
        cols = set(rows[0])
        try:
            if {"x", "y"} <= cols:
                return cls([float(r["x"]) for r in rows], [float(r["y"]) for r in rows])
            if {"x", "n", "s"} <= cols:
                return cls([float(r["x"]) for r in rows], n=[int(r["n"]) for r in rows], s=[int(r["s"]) for r in rows])
        except ValueError as exc:
            raise InputError(f"non-numeric entry in {path}: {exc}") from None
        raise InputError(f"data file {path} needs columns x,y or x,n,s; found {sorted(cols)}")


@dataclass(frozen=True)
class LikelihoodSpec:
    """``kind`` is ``"normal"`` or ``"binomial"``; ``sigma`` fixes the normal sd."""

    kind: str = "normal"
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("normal", "binomial"):
            raise InputError(f"likelihood must be 'normal' or 'binomial', got {self.kind!r}")
        if self.sigma is not None and not self.sigma > 0:
            raise InputError("fixed sigma must be positive")


@dataclass(frozen=True)
class PriorSpec:
    """Prior on the nonlinear parameters; the affine ones are flat.

    ``nonlinear_prior`` is ``"uniform"``, ``"functional-uniform"``,
    ``"jeffreys"`` or a vectorized callable returning an unnormalized
    log-density for an array of nonlinear parameter vectors.
    ``jeffreys_design`` (points and weights) defaults to the design of the
    data.  ``x_range`` sets the region of the functional uniform prior and
    defaults to the model's design region.
    """

    nonlinear_prior: Union[str, Callable] = "uniform"
    bounds: Optional[ParamBox] = None
    jeffreys_design: object = None
    x_range: Optional[tuple] = None

    def __post_init__(self):
        if isinstance(self.nonlinear_prior, str) and self.nonlinear_prior not in ("uniform", "functional-uniform", "jeffreys"):
            raise InputError(f"unknown prior {self.nonlinear_prior!r}")
        b = self.bounds
        if b is not None and not isinstance(b, ParamBox):
            arr = np.asarray(b, float).reshape(-1, 2)
            object.__setattr__(self, "bounds", ParamBox(tuple(arr[:, 0]), tuple(arr[:, 1])))

    @property
    def kind(self) -> str:
        return self.nonlinear_prior if isinstance(self.nonlinear_prior, str) else "custom"


@dataclass
class PosteriorSample:
    draws: np.ndarray
    log_weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    param_names: tuple = ()

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - np.max(self.log_weights))
        return w / w.sum()


# --------------------------------------------------------------------------
# Log posterior
# --------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _tabulated_fu(model: ModelFunction, region: tuple, lo: float, hi: float) -> TabulatedLogDensity:
    m = model.with_region(region, [lo, hi])
    return TabulatedLogDensity(lambda t: functional_uniform_logdensity(m, [t]), lo, hi, n=2049)


class Posterior:
    """Log posterior for one dataset or a batch of datasets on shared x.

    Parameters are ordered as the model's ``theta`` followed by ``sigma``
    for a normal likelihood with free scale.
    """

    def __init__(self, model: ModelFunction, prior: PriorSpec, lik: LikelihoodSpec, data):
        datasets = [data] if isinstance(data, Dataset) else list(data)
        if not datasets:
            raise InputError("no datasets given")
        self.model, self.prior, self.lik = model, prior, lik
        self.datasets = datasets
        x = datasets[0].x
        for d in datasets:
            if d.kind != lik.kind:
                raise InputError(f"{lik.kind} likelihood cannot be used with {d.kind} data")
            if d.x.shape != x.shape or not np.array_equal(d.x, x):
                raise InputError("batched datasets must share their design points")
        lo, hi = model.design_region
        if x.size and (x.min() < lo - 1e-12 or x.max() > hi + 1e-12):
            raise InputError(f"data x outside the design region [{lo}, {hi}]")
        self.K = len(datasets)
        self.nl_index = list(model.nonlinear_index)
        self.bounds = prior.bounds if prior.bounds is not None else model.param_box
        if self.bounds.dim != len(self.nl_index):
            raise InputError(f"bounds have dimension {self.bounds.dim}, model has {len(self.nl_index)} nonlinear parameter(s)")
        self.free_sigma = lik.kind == "normal" and lik.sigma is None
        self.dim = model.n_params + (1 if self.free_sigma else 0)
        self.param_names = tuple(model.param_names or [f"theta{i}" for i in range(model.n_params)]) + (
            ("sigma",) if self.free_sigma else ()
        )
        self._prepare_data(x)
        self._prepare_prior()

    # -- setup ---------------------------------------------------------------

    def _prepare_data(self, x):
        ux, inverse = np.unique(x, return_inverse=True)
        self.ux = ux
        self.n_obs = x.size
        J = ux.size
        if self.lik.kind == "normal":
            Y = np.stack([d.y for d in self.datasets])
            counts = np.bincount(inverse, minlength=J).astype(float)
            sums = np.zeros((self.K, J))
            for k in range(self.K):
                sums[k] = np.bincount(inverse, weights=Y[k], minlength=J)
            means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
            self.counts = counts
            self.ybar = means
            self.ssw = np.sum((Y - means[:, inverse]) ** 2, axis=1)
        else:
            N = np.zeros((self.K, J))
            S = np.zeros((self.K, J))
            for k, d in enumerate(self.datasets):
                N[k] = np.bincount(inverse, weights=d.n, minlength=J)
                S[k] = np.bincount(inverse, weights=d.s, minlength=J)
            self.N, self.S = N, S
            self.log_binom = np.array(
                [np.sum(gammaln(d.n + 1) - gammaln(d.s + 1) - gammaln(d.n - d.s + 1)) for d in self.datasets]
            )

    def _prepare_prior(self):
        p = self.prior
        self._prior_fn = None
        if callable(p.nonlinear_prior):
            self._prior_fn = p.nonlinear_prior
        elif p.nonlinear_prior == "functional-uniform":
            if len(self.nl_index) != 1:
                # multi-parameter embeddings: direct quadrature per evaluation
                m = self.model.with_region(p.x_range, np.column_stack([self.bounds.lower, self.bounds.upper]))
                self._prior_fn = lambda t: np.array(
                    [functional_uniform_logdensity(m, row) for row in np.atleast_2d(t)]
                )
            else:
                region = tuple(p.x_range) if p.x_range is not None else self.model.design_region
                tab = _tabulated_fu(self.model, region, self.bounds.lower[0], self.bounds.upper[0])
                self._prior_fn = lambda t: tab(t[..., 0])
        elif p.nonlinear_prior == "jeffreys":
            if self.model.full_jac is None:
                raise InputError(f"model {self.model.model_id} has no full Jacobian for a Jeffreys prior")
            design = p.jeffreys_design
            if design is None:
                if self.n_obs == 0:
                    raise InputError("Jeffreys prior needs a design; the dataset is empty")
                jx = self.ux
                jw = self.N[0] if self.lik.kind == "binomial" else self.counts
            else:
                jx = np.asarray(design.points, float)
                jw = np.asarray(design.weights, float)
            self._jx, self._jw = jx, jw

    # -- evaluation ----------------------------------------------------------

    def _constraints(self, P):
        theta = P[:, : self.model.n_params]
        nl = theta[:, self.nl_index]
        ok = np.all((nl >= self.bounds.lo) & (nl <= self.bounds.hi), axis=1)
        if self.free_sigma:
            ok &= P[:, -1] > 0
        if self.lik.kind == "binomial":
            if self.model.model_id == "power":
                ok &= (theta[:, 0] >= 0) & (theta[:, 1] >= 0) & (theta[:, 0] + theta[:, 1] <= 1)
        return ok & np.all(np.isfinite(P), axis=1)

    def _log_prior(self, P, ok):
        theta = P[:, : self.model.n_params]
        out = np.zeros(P.shape[0])
        if self._prior_fn is not None:
            out[ok] = self._prior_fn(theta[ok][:, self.nl_index])
        elif self.prior.nonlinear_prior == "jeffreys" and np.any(ok):
            out[ok] = self._jeffreys(theta[ok])
        if self.free_sigma:
            with np.errstate(divide="ignore", invalid="ignore"):
                out[ok] -= 2.0 * np.log(P[ok, -1])
        return out

    def _jeffreys(self, theta):
        J = self.model.full_jac(self._jx, theta)  # (m, jx, p)
        J = np.broadcast_to(J, (theta.shape[0],) + J.shape[-2:])
        w = np.broadcast_to(self._jw, J.shape[:2])
        if self.lik.kind == "binomial":
            mu = self.model.mu(self._jx, theta)
            with np.errstate(divide="ignore", invalid="ignore"):
                w = w / (mu * (1.0 - mu))
            w = np.where(np.isfinite(w) & (w > 0), w, np.nan)
        M = np.einsum("kj,kja,kjb->kab", w, J, J)
        bad = ~np.all(np.isfinite(M), axis=(1, 2))
        M[bad] = np.eye(M.shape[-1])
        sign, logdet = np.linalg.slogdet(M)
        out = 0.5 * logdet
        out[(sign <= 0) | bad] = -np.inf
        return out

    def _log_lik(self, P, rows, ok):
        theta = P[:, : self.model.n_params]
        out = np.full(P.shape[0], -np.inf)
        if not np.any(ok):
            return out
        if self.n_obs == 0:
            out[ok] = 0.0
            return out
        mu = self.model.mu(self.ux, theta[ok])
        mu = np.broadcast_to(mu, (int(ok.sum()), self.ux.size))
        r = rows[ok]
        if self.lik.kind == "normal":
            sigma = P[ok, -1] if self.free_sigma else np.full(int(ok.sum()), self.lik.sigma)
            rss = self.ssw[r] + np.sum(self.counts * (self.ybar[r] - mu) ** 2, axis=1)
            out[ok] = -0.5 * self.n_obs * LOG_2PI - self.n_obs * np.log(sigma) - rss / (2.0 * sigma ** 2)
        else:
            N, S = self.N[r], self.S[r]
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = np.where(S > 0, S * np.log(mu), 0.0) + np.where(N - S > 0, (N - S) * np.log1p(-mu), 0.0)
            bad = np.any((mu < 0) | (mu > 1) | ~np.isfinite(mu), axis=1)
            val = self.log_binom[r] + np.sum(ll, axis=1)
            val[bad] = -np.inf
            out[ok] = np.where(np.isnan(val), -np.inf, val)
        return out

    def logpdf(self, params, rows=None) -> np.ndarray:
        """Log posterior of ``params`` (shape ``(K, d)``) against datasets ``rows``.

        ``rows`` defaults to ``arange(K)`` when ``params`` has one row per
        dataset, or to dataset 0 for a single-dataset posterior.
        """
        P = np.atleast_2d(np.asarray(params, dtype=float))
        if P.shape[1] != self.dim:
            raise InputError(f"expected {self.dim} parameters {self.param_names}, got {P.shape[1]}")
        if rows is None:
            rows = np.arange(P.shape[0]) if P.shape[0] == self.K else np.zeros(P.shape[0], dtype=int)
        rows = np.asarray(rows)
        ok = self._constraints(P)
        lp = self._log_prior(P, ok)
        ok &= np.isfinite(lp)
        out = self._log_lik(P, rows, ok) + np.where(ok, lp, 0.0)
        out[~ok] = -np.inf
        return np.where(np.isnan(out), -np.inf, out)

    def loglik(self, params, rows=None) -> np.ndarray:
        """Log-likelihood alone; ``-inf`` outside the parameter constraints."""
        P = np.atleast_2d(np.asarray(params, dtype=float))
        if rows is None:
            rows = np.arange(P.shape[0]) if P.shape[0] == self.K else np.zeros(P.shape[0], dtype=int)
        out = self._log_lik(P, np.asarray(rows), self._constraints(P))
        return np.where(np.isnan(out), -np.inf, out)

    def logpdf_one(self, p, row: int = 0) -> float:
        """Scalar version of :meth:`logpdf` for one vector, with less overhead."""
        p = np.asarray(p, dtype=float)
        m = self.model
        theta = p[: m.n_params]
        nl = theta[self.nl_index]
        if not (np.all(np.isfinite(p)) and np.all(nl >= self.bounds.lo) and np.all(nl <= self.bounds.hi)):
            return -math.inf
        if self.free_sigma and not p[-1] > 0:
            return -math.inf
        if self.lik.kind == "binomial" and m.model_id == "power":
            if theta[0] < 0 or theta[1] < 0 or theta[0] + theta[1] > 1:
                return -math.inf
        lp = 0.0
        if self._prior_fn is not None:
            lp = float(np.ravel(self._prior_fn(nl[None, :]))[0])
        elif self.prior.nonlinear_prior == "jeffreys":
            lp = float(self._jeffreys(theta[None, :])[0])
        if self.free_sigma:
            lp -= 2.0 * math.log(p[-1])
        if not math.isfinite(lp) or self.n_obs == 0:
            return lp if math.isfinite(lp) else -math.inf
        mu = np.ravel(m.mu(self.ux, theta))
        if self.lik.kind == "normal":
            sigma = p[-1] if self.free_sigma else self.lik.sigma
            rss = self.ssw[row] + np.sum(self.counts * (self.ybar[row] - mu) ** 2)
            ll = -0.5 * self.n_obs * LOG_2PI - self.n_obs * math.log(sigma) - rss / (2.0 * sigma ** 2)
        else:
            if np.any((mu < 0) | (mu > 1)) or not np.all(np.isfinite(mu)):
                return -math.inf
            N, S = self.N[row], self.S[row]
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(S > 0, S * np.log(mu), 0.0) + np.where(N - S > 0, (N - S) * np.log1p(-mu), 0.0)
            ll = self.log_binom[row] + float(np.sum(terms))
        out = ll + lp
        return out if math.isfinite(out) else -math.inf

    def subset(self, k: int) -> "Posterior":
        return Posterior(self.model, self.prior, self.lik, self.datasets[k])

    # -- helpers for starting values ----------------------------------------

    def candidates(self, rng: np.random.Generator, n: int, row: int = 0, nl_draws=None) -> np.ndarray:
        """Plausible parameter vectors: nonlinear part from ``nl_draws`` or
        uniform in the box, affine part by least squares (normal) or uniform
        on the probability simplex (binomial power model)."""
        m = self.model
        P = np.zeros((n, self.dim))
        nl = nl_draws if nl_draws is not None else self.bounds.sample(rng, n)
        P[:, self.nl_index] = nl
        lin = list(m.linear_index)
        if self.lik.kind == "binomial":
            if m.model_id == "power":
                d = rng.dirichlet([1.0, 1.0, 1.0], size=n)
                P[:, 0], P[:, 1] = d[:, 0], d[:, 1]
            elif lin:
                P[:, lin] = rng.random((n, len(lin)))
        else:
            x = self.ux
            for i in range(n):
                resid_sd = 1.0
                if lin and self.n_obs > 0:
                    th = P[i, : m.n_params].copy()
                    X = np.broadcast_to(m.full_jac(x, th), (x.size, m.n_params))[:, lin]
                    w = np.sqrt(self.counts)
                    coef, *_ = np.linalg.lstsq(X * w[:, None], self.ybar[row] * w, rcond=None)
                    P[i, lin] = coef
                    th[lin] = coef
                    mu = np.ravel(m.mu(x, th))
                    rss = self.ssw[row] + np.sum(self.counts * (self.ybar[row] - mu) ** 2)
                    resid_sd = math.sqrt(max(rss, 1e-12) / max(self.n_obs, 1))
                if self.free_sigma:
                    P[i, -1] = resid_sd
        return P


def log_posterior(model, prior: PriorSpec, lik: LikelihoodSpec, data: Dataset, theta_full, sigma=None) -> float:
    """Log posterior at one parameter vector; ``-inf`` outside the constraints."""
    post = Posterior(model, prior, lik, data)
    params = list(np.ravel(theta_full))
    if post.free_sigma:
        if sigma is None:
            raise InputError("sigma is required for a normal likelihood with free scale")
        params.append(sigma)
    return float(post.logpdf(np.array(params))[0])


# --------------------------------------------------------------------------
# Random-walk Metropolis
# --------------------------------------------------------------------------


def _diag_curvature_scale(post: Posterior, P, rows, fallback):
    """Per-coordinate step ``1/sqrt(-d2 loglik / dtheta_i^2)`` at ``P``.

    Only the likelihood enters, so rescaling the prior by a constant cannot
    change the proposal through rounding.
    """
    lp0 = post.loglik(P, rows)
    scale = fallback.copy()
    for i in range(P.shape[1]):
        h = 1e-4 * (1.0 + np.abs(P[:, i]))
        up, dn = P.copy(), P.copy()
        up[:, i] += h
        dn[:, i] -= h
        d2 = (post.loglik(up, rows) - 2 * lp0 + post.loglik(dn, rows)) / h ** 2
        good = np.isfinite(d2) & (d2 < 0)
        scale[good, i] = 1.0 / np.sqrt(-d2[good])
    return np.minimum(scale, fallback * 10)


def _fallback_scale(post: Posterior, P):
    s = np.empty_like(P)
    width = post.bounds.widths
    for j in range(P.shape[1]):
        s[:, j] = 0.1 * (np.abs(P[:, j]) + 0.1)
    s[:, post.nl_index] = 0.05 * width
    return s


def find_start(post: Posterior, rngs, n_candidates: int = 200, rows=None) -> np.ndarray:
    """Coarse search: best of ``n_candidates`` per dataset; raises if none is finite."""
    rows = np.arange(len(rngs)) if rows is None else np.asarray(rows)
    starts = np.empty((len(rngs), post.dim))
    for i, (rng, r) in enumerate(zip(rngs, rows)):
        cand = post.candidates(rng, n_candidates, row=int(r))
        lp = post.logpdf(cand, np.full(n_candidates, r))
        if not np.any(np.isfinite(lp)):
            raise NumericalError(f"no interior starting point found for dataset {r}")
        starts[i] = cand[int(np.argmax(lp))]
    return starts


def run_mh_batch(
    post: Posterior,
    starts: np.ndarray,
    rngs: Sequence[np.random.Generator],
    n_draws: int = 10_000,
    n_burnin: int = 1_000,
    thin: int = 2,
    rows=None,
    init_scale=None,
    target_accept: float = 0.3,
    record: int = 0,
    block: int = 1000,
):
    """Lockstep adaptive random-walk Metropolis, one chain per row of ``starts``.

    The diagonal proposal is tuned during burn-in only: halfway through,
    its shape is reset to the empirical standard deviations of the chain,
    and its overall size is adapted in windows of 50 iterations towards
    ``target_accept``.  Afterwards the proposal is frozen.

    Returns ``(draws, acceptance, scales, records)`` with ``draws`` of shape
    ``(K, n_draws, d)``.
    """
    P = np.array(starts, dtype=float)
    K, d = P.shape
    rows = np.arange(K) if rows is None else np.asarray(rows)
    lp = post.logpdf(P, rows)
    if not np.all(np.isfinite(lp)):
        raise NumericalError("starting points must have finite log posterior")
    fb = _fallback_scale(post, P)
    base = _diag_curvature_scale(post, P, rows, fb) if init_scale is None else np.array(init_scale, float)
    log_lam = np.full(K, math.log(2.38 / math.sqrt(d)))
    n_iter = n_burnin + n_draws * thin
    draws = np.empty((K, n_draws, d))
    acc_window = np.zeros(K)
    acc_post = np.zeros(K)
    half = n_burnin // 2
    burn_hist = np.empty((K, max(half - n_burnin // 4, 0), d))
    records = []
    z_buf = u_buf = None
    window = 50
    n_windows = 0
    for it in range(n_iter):
        j = it % block
        if j == 0:
            z_buf = np.stack([g.standard_normal((block, d)) for g in rngs], axis=1)
            u_buf = np.log(np.stack([g.random(block) for g in rngs], axis=1))
        prop = P + (np.exp(log_lam)[:, None] * base) * z_buf[j]
        lp_prop = post.logpdf(prop, rows)
        with np.errstate(invalid="ignore"):
            log_alpha = lp_prop - lp
        accept = u_buf[j] < log_alpha
        if it < record:
            records.append((P.copy(), prop.copy(), log_alpha.copy()))
        P = np.where(accept[:, None], prop, P)
        lp = np.where(accept, lp_prop, lp)
        if it < n_burnin:
            acc_window += accept
            if n_burnin // 4 <= it < half:
                burn_hist[:, it - n_burnin // 4] = P
            if it + 1 == half and burn_hist.shape[1] > 1:
                sd = burn_hist.std(axis=1)
                good = np.all(sd > 0, axis=1)
                base[good] = sd[good]
                log_lam[good] = math.log(2.38 / math.sqrt(d))
            if (it + 1) % window == 0:
                n_windows += 1
                rate = acc_window / window
                log_lam += (rate - target_accept) * 3.0 / math.sqrt(n_windows)
                acc_window[:] = 0
        else:
            acc_post += accept
            k = it - n_burnin
            if (k + 1) % thin == 0:
                draws[:, k // thin] = P
    n_post = max(n_iter - n_burnin, 1)
    return draws, acc_post / n_post, np.exp(log_lam)[:, None] * base, records


def sample_posterior_mh(
    post: Posterior,
    n_draws: int = 10_000,
    n_burnin: int = 1_000,
    thin: int = 2,
    rng_seed: int = 0,
    start=None,
    stream_keys: tuple = (),
    record: int = 0,
) -> PosteriorSample:
    """Adaptive random-walk Metropolis for a single-dataset posterior.

    ``n_draws`` retained draws after ``n_burnin`` iterations, keeping every
    ``thin``-th state.  The chain starts at ``start`` or at the best point of
    a coarse random search.
    """
    if post.K != 1:
        raise InputError("sample_posterior_mh takes a single-dataset posterior; use run_mh_batch for batches")
    rng_start = stream(rng_seed, *stream_keys, 0)
    rng_chain = stream(rng_seed, *stream_keys, 1)
    if start is None:
        P0 = find_start(post, [rng_start])
    else:
        P0 = np.atleast_2d(np.asarray(start, float))
    draws, acc, scales, records = run_mh_batch(post, P0, [rng_chain], n_draws, n_burnin, thin, record=record)
    diag = {
        "sampler": "adaptive-rwm",
        "acceptance_rate": float(acc[0]),
        "n_burnin": n_burnin,
        "thinning": thin,
        "proposal_scale": scales[0].tolist(),
    }
    if record:
        diag["records"] = [(a[0], b[0], float(c[0])) for a, b, c in records]
    return PosteriorSample(draws[0], np.zeros(n_draws), diag, post.param_names)


# --------------------------------------------------------------------------
# Posterior mode
# --------------------------------------------------------------------------


def _nl_prior_draws(post: Posterior, rng, n):
    """Starting values for the nonlinear parameters drawn from their prior."""
    kind = post.prior.kind
    if kind == "uniform" or kind == "jeffreys" or len(post.nl_index) != 1:
        return post.bounds.sample(rng, n)
    lo, hi = post.bounds.lower[0], post.bounds.upper[0]
    fn = post._prior_fn
    prior = normalize(lambda t: fn(np.asarray(t)[..., None]), ParamBox.interval(lo, hi))
    return prior.sample(n, rng)


def posterior_mode(post: Posterior, rng_seed=0, n_starts: int = 20, row: int = 0, nl_prior=None) -> np.ndarray:
    """Multistart Nelder-Mead maximization of the log posterior.

    Starts are drawn from the prior of the nonlinear parameters with the
    affine ones filled in as in :meth:`Posterior.candidates`.  All starts
    are run with moderate tolerances and the best result is polished.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else stream(rng_seed)
    nl = _nl_prior_draws(post, rng, n_starts) if nl_prior is None else nl_prior.sample(n_starts, rng)
    starts = post.candidates(rng, n_starts, row=row, nl_draws=nl)

    def neg(p):
        v = post.logpdf_one(p, row)
        return -v if math.isfinite(v) else 1e300

    results = []
    for s in starts:
        if neg(s) >= 1e300:
            continue
        r = optimize.minimize(neg, s, method="Nelder-Mead",
                              options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 800, "maxfev": 800, "adaptive": True})
        results.append((r.fun, r.x))
    if not results:
        raise NumericalError(f"posterior mode search failed: none of {n_starts} starts has finite log posterior")
    f, x = min(results, key=lambda t: t[0])
    for _ in range(3):
        r = optimize.minimize(neg, x, method="Nelder-Mead",
                              options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000, "maxfev": 20000, "adaptive": True})
        if r.fun >= f - 1e-12:
            f, x = min((f, x), (r.fun, r.x), key=lambda t: t[0])
            break
        f, x = r.fun, r.x
    if f >= 1e300:
        raise NumericalError("posterior mode search did not find a finite optimum")
    return x


# --------------------------------------------------------------------------
# Importance sampling resampling
# --------------------------------------------------------------------------


def _fd_hessian(fun, x, rel: float = 1e-4):
    d = x.size
    h = rel * (1.0 + np.abs(x))
    H = np.empty((d, d))
    f0 = fun(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h[i] * h[j])
    return H


class _Unbounded:
    """Map from unbounded coordinates to the parameter space.

    Nonlinear parameters go through a scaled logistic onto their box and a
    free noise level through ``exp``; affine parameters are left as is.
    """

    def __init__(self, post: Posterior):
        self.nl = np.asarray(post.nl_index, int)
        self.lo = np.asarray(post.bounds.lower, float)
        self.width = np.asarray(post.bounds.upper, float) - self.lo
        self.sig = post.dim - 1 if post.free_sigma else None

    def forward(self, Z):
        """Return ``(theta, log|dtheta/dz|)`` for rows of ``Z``."""
        Z = np.atleast_2d(Z)
        X = Z.copy()
        zn = Z[:, self.nl]
        X[:, self.nl] = self.lo + self.width * special.expit(zn)
        logjac = np.sum(np.log(self.width) + special.log_expit(zn) + special.log_expit(-zn), axis=1)
        if self.sig is not None:
            X[:, self.sig] = np.exp(Z[:, self.sig])
            logjac = logjac + Z[:, self.sig]
        return X, logjac

    def inverse(self, theta):
        z = np.array(theta, float)
        u = np.clip((z[self.nl] - self.lo) / self.width, 1e-9, 1 - 1e-9)
        z[self.nl] = special.logit(u)
        if self.sig is not None:
            z[self.sig] = math.log(z[self.sig])
        return z


def sample_posterior_isr(
    post: Posterior,
    n_proposal: int = 20_000,
    n_resample: int = 5_000,
    rng_seed: int = 0,
    mode=None,
    df: float = 4.0,
    stream_keys: tuple = (),
) -> PosteriorSample:
    """Importance sampling resampling with a Laplace-based t proposal.

    The posterior is moved to unbounded coordinates (logistic for the
    bounded nonlinear parameters, log for a free noise level) so that a
    mode on the edge of the box still gives a usable expansion.  The
    proposal is a multivariate t with ``df`` degrees of freedom centred at
    the mode in those coordinates with the inverse negative Hessian as
    scale.  ``mode`` is a starting point in the original parameters.  If
    the Hessian is not negative definite the function falls back to
    :func:`sample_posterior_mh` with a warning.
    """
    if post.K != 1:
        raise InputError("sample_posterior_isr takes a single-dataset posterior")
    if mode is None:
        mode = posterior_mode(post, stream(rng_seed, *stream_keys, 0))
    mode = np.asarray(mode, float)
    tr = _Unbounded(post)

    def lpz(Z):
        X, lj = tr.forward(Z)
        return post.logpdf(X) + lj

    def neg(z):
        v = float(lpz(z[None, :])[0])
        return -v if math.isfinite(v) else 1e300

    z0 = tr.inverse(mode)
    r = optimize.minimize(neg, z0, method="Nelder-Mead",
                          options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 20000, "maxfev": 20000, "adaptive": True})
    zmode = r.x if r.fun <= neg(z0) else z0
    H = _fd_hessian(lambda z: -neg(z), zmode)
    H = 0.5 * (H + H.T)
    ok = np.all(np.isfinite(H)) and np.all(np.abs(H) < 1e250)
    if ok:
        eig = np.linalg.eigvalsh(H)
        ok = np.all(np.isfinite(eig)) and np.max(eig) < 0
    if not ok:
        warnings.warn("Hessian at the mode is not negative definite; falling back to Metropolis sampling",
                      RuntimeWarning, stacklevel=2)
        out = sample_posterior_mh(post, n_draws=n_resample, rng_seed=rng_seed, start=mode[None, :], stream_keys=stream_keys)
        out.diagnostics["fallback"] = "mh"
        return out
    cov = np.linalg.inv(-H)
    cov = 0.5 * (cov + cov.T)
    proposal = stats.multivariate_t(loc=zmode, shape=cov, df=df)
    rng = stream(rng_seed, *stream_keys, 1)
    Z = proposal.rvs(size=n_proposal, random_state=rng).reshape(n_proposal, -1)
    X, _ = tr.forward(Z)
    lw = lpz(Z) - proposal.logpdf(Z)
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise NumericalError("all importance weights vanish")
    lw = np.where(finite, lw, -np.inf)
    w = np.exp(lw - lw[finite].max())
    w /= w.sum()
    ess = 1.0 / np.sum(w ** 2)
    idx = rng.choice(n_proposal, size=n_resample, replace=True, p=w)
    diag = {
        "sampler": "laplace-t-isr",
        "effective_sample_size": float(ess),
        "ess_fraction": float(ess / n_proposal),
        "n_proposal": n_proposal,
        "df": df,
        "mode": tr.forward(zmode[None, :])[0][0].tolist(),
    }
    return PosteriorSample(X[idx], np.zeros(n_resample), diag, post.param_names)


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------


def _weighted_quantiles(values, weights, qs):
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order] / weights.sum()
    pos = np.cumsum(w) - 0.5 * w
    return np.interp(qs, pos, v)


def predictive_band(samples: PosteriorSample, model: ModelFunction, dose_grid, level: float = 0.9):
    """Pointwise ``(lower, median, upper)`` of ``mu(x, theta)`` over the draws.

    The band uses the ``(1 - level)/2`` and ``(1 + level)/2`` quantiles.
    Equal-weight samples use the Hazen plotting positions, which the
    weighted version reduces to.
    """
    if len(samples.draws) == 0:
        raise InputError("predictive band needs at least one draw")
    if not 0.0 <= level < 1.0:
        raise InputError(f"level must lie in [0, 1), got {level}")
    x = np.atleast_1d(np.asarray(dose_grid, float))
    mu = model.mu(x, samples.draws[:, : model.n_params])  # (n, G)
    a = 0.5 * (1.0 - level)
    qs = np.array([a, 0.5, 1.0 - a])
    lw = samples.log_weights
    if np.all(lw == lw[0]):
        lo, med, hi = np.quantile(mu, qs, axis=0, method="hazen")
    else:
        w = samples.weights
        out = np.array([_weighted_quantiles(mu[:, g], w, qs) for g in range(x.size)])
        lo, med, hi = out.T
    return lo, med, hi


def median_mcse(values, kind: str = "chain", ess: Optional[float] = None, n_batches: int = 25) -> float:
    """Monte Carlo standard error of a sample median.

    ``kind="chain"`` uses batch medians of an autocorrelated chain;
    ``kind="iid"`` uses ``sqrt(1/(4 n_eff)) / f(median)`` with the density
    estimated from the 40% and 60% quantiles and ``n_eff = ess`` if given.
    """
    v = np.asarray(values, float)
    if kind == "chain":
        m = v.size // n_batches
        if m < 2:
            raise InputError("too few draws for batch medians")
        meds = np.median(v[: m * n_batches].reshape(n_batches, m), axis=1)
        return float(np.std(meds, ddof=1) / math.sqrt(n_batches))
    n_eff = v.size if ess is None else min(ess, v.size)
    q40, q60 = np.quantile(v, [0.4, 0.6])
    if q60 <= q40:
        return 0.0
    dens = 0.2 / (q60 - q40)
    return float(math.sqrt(0.25 / n_eff) / dens)
