"""
Simulation harness for binary dose-response fits.

Each replicate simulates binomial data at five doses from a fixed truth,
fits the power model ``theta0 + theta1 x^theta2`` under a chosen prior for
``theta2`` and scores the fit on the dose grid ``0, 1/8, ..., 1``:

* MAE1: mean absolute error of the pointwise posterior median curve,
* MAE2: mean absolute error of the curve at the posterior mode,
* CP: fraction of grid doses whose 0.9 credible interval covers the truth,
* ILE: mean length of those intervals.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .._rng import stream
from ..errors import InputError, NumericalError
from ..funspace import get_model
from ..metric_core import ParamBox
from ..prior_build import normalize
from .posterior import Dataset, LikelihoodSpec, Posterior, PriorSpec, posterior_mode, run_mh_batch

__all__ = ["SCENARIOS", "PRIOR_KINDS", "DOSES", "PATIENTS_PER_DOSE", "EVAL_GRID", "ScenarioResult",
           "scenario_truth", "simulate_dataset", "evaluate_scenario"]

DOSES = np.array([0.0, 0.05, 0.2, 0.6, 1.0])
PATIENTS_PER_DOSE = 20
EVAL_GRID = np.arange(9) / 8.0
THETA2_BOUNDS = (0.05, 20.0)
BAND_LEVEL = 0.9
PRIOR_KINDS = ("uniform", "functional-uniform", "jeffreys")

SCENARIOS = {
    "power1": ("power", 0.4),
    "linear": ("power", 1.0),
    "power2": ("power", 4.0),
    "emax": ("emax", 0.05),
}


def scenario_truth(scenario_id: str):
    """Vectorized true response probability ``x -> p(x)`` of a scenario."""
    if scenario_id not in SCENARIOS:
        raise InputError(f"unknown scenario {scenario_id!r}; choose from {', '.join(SCENARIOS)}")
    shape, t2 = SCENARIOS[scenario_id]
    if shape == "power":
        return lambda x: 0.2 + 0.6 * np.asarray(x, float) ** t2
    return lambda x: 0.2 + 0.6 * np.asarray(x, float) / (np.asarray(x, float) + t2)


def simulate_dataset(scenario_id: str, rng: np.random.Generator) -> Dataset:
    p = scenario_truth(scenario_id)(DOSES)
    n = np.full(DOSES.size, PATIENTS_PER_DOSE)
    return Dataset(DOSES, n=n, s=rng.binomial(n, p))


@dataclass
class ScenarioResult:
    scenario: str
    prior: str
    mae1: float
    mae2: float
    cp: float
    ile: float
    n_reps: int
    n_failed: int
    per_dose: dict = field(default_factory=dict)
    acceptance_rate: float = float("nan")

    def row(self) -> dict:
        return {"prior": self.prior, "scenario": self.scenario, "MAE1": self.mae1, "MAE2": self.mae2,
                "CP": self.cp, "ILE": self.ile, "n_reps": self.n_reps, "n_failed": self.n_failed}


def _prior_spec(kind: str) -> PriorSpec:
    if kind not in PRIOR_KINDS:
        raise InputError(f"unknown prior kind {kind!r}; choose from {', '.join(PRIOR_KINDS)}")
    return PriorSpec(kind, ParamBox.interval(*THETA2_BOUNDS))


def _theta2_prior(post: Posterior):
    """Normalized 1-D prior of theta2, used to seed the mode search."""
    if post.prior.kind != "functional-uniform":
        return None
    fn = post._prior_fn
    return normalize(lambda t: fn(np.asarray(t)[..., None]), ParamBox.interval(*THETA2_BOUNDS))


def _run_chunk(args):
    scenario_id, prior_kind, seed, reps, n_draws, n_burnin, thin = args
    model = get_model("power")
    lik = LikelihoodSpec("binomial")
    spec = _prior_spec(prior_kind)
    truth = scenario_truth(scenario_id)(EVAL_GRID)
    data = [simulate_dataset(scenario_id, stream(seed, r, 0)) for r in reps]
    post = Posterior(model, spec, lik, data)
    nl_prior = _theta2_prior(post)
    modes, ok_rows, failed = [], [], []
    for i, r in enumerate(reps):
        try:
            modes.append(posterior_mode(post, stream(seed, r, 1), row=i, nl_prior=nl_prior))
            ok_rows.append(i)
        except NumericalError:
            failed.append(r)
    out = {"reps": [], "failed": failed}
    if not ok_rows:
        return out
    modes = np.array(modes)
    rows = np.array(ok_rows)
    rngs = [stream(seed, reps[i], 2) for i in ok_rows]
    draws, acc, _, _ = run_mh_batch(post, modes, rngs, n_draws, n_burnin, thin, rows=rows)
    a = 0.5 * (1.0 - BAND_LEVEL)
    for j, i in enumerate(ok_rows):
        mu = model.mu(EVAL_GRID, draws[j])
        lo, med, hi = np.quantile(mu, [a, 0.5, 1.0 - a], axis=0, method="hazen")
        plug = np.ravel(model.mu(EVAL_GRID, modes[j]))
        out["reps"].append({
            "rep": reps[i],
            "abs1": np.abs(med - truth),
            "abs2": np.abs(plug - truth),
            "cover": ((lo <= truth) & (truth <= hi)).astype(float),
            "length": hi - lo,
            "acceptance": float(acc[j]),
        })
    return out


def evaluate_scenario(
    scenario_id: str,
    prior_kind: str,
    n_reps: int = 100,
    rng_seed: int = 0,
    n_draws: int = 10_000,
    n_burnin: int = 1_000,
    thin: int = 2,
    workers: int = 1,
    chunk: int = 50,
) -> ScenarioResult:
    """Average MAE1, MAE2, CP and ILE over ``n_reps`` simulated trials.

    Replicate ``r`` draws its data, mode-search starts and Metropolis
    proposals from the streams ``(rng_seed, r, 0|1|2)``, so results do not
    depend on ``workers`` or ``chunk``.  Replicates whose mode search fails
    are excluded and counted in ``n_failed``.
    """
    scenario_truth(scenario_id)
    _prior_spec(prior_kind)
    if n_reps < 1:
        raise InputError(f"n_reps must be >= 1, got {n_reps}")
    jobs = [(scenario_id, prior_kind, rng_seed, list(range(s, min(s + chunk, n_reps))), n_draws, n_burnin, thin)
            for s in range(0, n_reps, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    reps = sorted((r for p in parts for r in p["reps"]), key=lambda r: r["rep"])
    n_failed = sum(len(p["failed"]) for p in parts)
    if not reps:
        raise NumericalError(f"all {n_reps} replicates failed")
    stack = {k: np.array([r[k] for r in reps]) for k in ("abs1", "abs2", "cover", "length")}
    per_dose = {"dose": EVAL_GRID.copy(), **{k: v.mean(axis=0) for k, v in stack.items()}}
    return ScenarioResult(
        scenario=scenario_id,
        prior=prior_kind,
        mae1=float(stack["abs1"].mean()),
        mae2=float(stack["abs2"].mean()),
        cp=float(stack["cover"].mean()),
        ile=float(stack["length"].mean()),
        n_reps=len(reps),
        n_failed=n_failed,
        per_dose=per_dose,
        acceptance_rate=float(np.mean([r["acceptance"] for r in reps])),
    )
