"""Posterior computation and the dose-response simulation harness."""

from .posterior import (
    Dataset,
    LikelihoodSpec,
    Posterior,
    PosteriorSample,
    PriorSpec,
    find_start,
    log_posterior,
    median_mcse,
    posterior_mode,
    predictive_band,
    run_mh_batch,
    sample_posterior_isr,
    sample_posterior_mh,
)
from .simulation import (
    DOSES,
    EVAL_GRID,
    PRIOR_KINDS,
    SCENARIOS,
    ScenarioResult,
    evaluate_scenario,
    scenario_truth,
    simulate_dataset,
)

__all__ = [
    "Dataset", "LikelihoodSpec", "Posterior", "PosteriorSample", "PriorSpec", "find_start",
    "log_posterior", "median_mcse", "posterior_mode", "predictive_band", "run_mh_batch",
    "sample_posterior_isr", "sample_posterior_mh", "DOSES", "EVAL_GRID", "PRIOR_KINDS",
    "SCENARIOS", "ScenarioResult", "evaluate_scenario", "scenario_truth", "simulate_dataset",
]
