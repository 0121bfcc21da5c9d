"""
Command-line interface.

Every subcommand writes CSV (15 significant digits) or JSON and a
``*.manifest.json`` next to its first output recording the argument list,
seed, input and output checksums and the wall-clock time.  ``rerun``
replays a manifest and checks that the outputs are byte-identical.

Exit codes: 0 success, 1 input error (including bad flags), 2 numerical
error or a failed reproduction.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .design import REFERENCE_DESIGNS, Design, bayesian_criterion, efficiency_curve, optimize_design
from .errors import FuniformError, InputError, NumericalError
from .funspace import MODEL_IDS, WeightingMeasure, get_model
from .inference import (
    PRIOR_KINDS,
    SCENARIOS,
    Dataset,
    LikelihoodSpec,
    Posterior,
    PriorSpec,
    evaluate_scenario,
    predictive_band,
    sample_posterior_isr,
    sample_posterior_mh,
)
from .metric_core import METRIC_FACTORIES, MetricSpace, ParamBox, build_epsilon_lattice, lattice_density
from .prior_build import functional_uniform_prior, uniform_prior

FLOAT_FMT = "%.15g"

# reduced and full settings for the reproduction targets
SCALES = {
    "desk": {"epsilon": 0.01, "reps": 100},
    "full": {"epsilon": 0.005, "reps": 1000},
}


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


# --------------------------------------------------------------------------
# I/O helpers
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return str(path)


def _round_floats(obj):
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(FLOAT_FMT % float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_round_floats(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _pair(text, name):
    try:
        a, b = (float(v) for v in str(text).split(","))
    except ValueError:
        raise InputError(f"{name} must be 'lo,hi', got {text!r}") from None
    if not a < b:
        raise InputError(f"{name} must satisfy lo < hi, got {text!r}")
    return a, b


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# Subcommands; each returns (outputs, inputs)
# --------------------------------------------------------------------------


def cmd_lattice(args):
    if args.metric not in METRIC_FACTORIES:
        raise InputError(f"unknown metric {args.metric!r}; choose from {', '.join(METRIC_FACTORIES)}")
    metric = METRIC_FACTORIES[args.metric]()
    if args.interval:
        metric = MetricSpace(ParamBox.interval(*_pair(args.interval, "--interval")), metric.dist, metric.label)
        if not METRIC_FACTORIES[args.metric]().space.contains_box(metric.space):
            raise InputError(f"--interval {args.interval} leaves the metric space")
    lat = build_epsilon_lattice(metric, args.epsilon, direction=args.direction)
    outs = [write_csv(args.out, ["theta"], ([p] for p in lat.points))]
    if args.density:
        est = lattice_density(lat, grid_size=args.grid)
        outs.append(write_csv(args.density, ["theta", "density", "cdf"], zip(est.grid, est.density, est.cdf)))
    return outs, []


def _build_prior(args):
    model = get_model(args.model, _pair(args.x_range, "--x-range") if args.x_range else None,
                      _pair(args.bounds, "--bounds") if args.bounds else None)
    if model.p_nl != 1:
        raise InputError(f"prior commands support one nonlinear parameter; {args.model} has {model.p_nl}")
    inputs = []
    if args.prior == "uniform":
        return uniform_prior(model.param_box), inputs
    weighting = WeightingMeasure.lebesgue()
    if args.weighting != "lebesgue":
        if not args.weighting.startswith("design:"):
            raise InputError(f"--weighting must be 'lebesgue' or 'design:FILE', got {args.weighting!r}")
        path = args.weighting[len("design:"):]
        d = _load_design(path)
        inputs.append(path)
        weighting = WeightingMeasure.discrete(d.points, d.weights)
    return functional_uniform_prior(model, weighting), inputs


def _grid(lo, hi, n, spacing):
    if spacing == "auto":
        spacing = "log" if lo > 0 and hi / lo > 100 else "linear"
    if spacing == "log":
        if lo <= 0:
            raise InputError("log spacing needs a positive lower bound")
        g = np.geomspace(lo, hi, n)
    else:
        g = np.linspace(lo, hi, n)
    g[0], g[-1] = lo, hi
    return g


def cmd_prior_eval(args):
    prior, inputs = _build_prior(args)
    if args.grid < 2:
        raise InputError("--grid must be at least 2")
    g = _grid(prior.box.lower[0], prior.box.upper[0], args.grid, args.spacing)
    log_unnorm = prior.log_unnorm(g)
    dens = np.exp(prior.logpdf(g))
    cdf = prior.cdf(g)
    rows = zip(g, log_unnorm, dens, cdf)
    return [write_csv(args.out, ["theta", "log_unnormalized", "density", "cdf"], rows)], inputs


def cmd_prior_sample(args):
    prior, inputs = _build_prior(args)
    draws = prior.sample(args.n, args.seed)
    return [write_csv(args.out, ["theta"], ([v] for v in draws[:, 0]))], inputs


def cmd_fit(args):
    model = get_model(args.model, _pair(args.x_range, "--x-range") if args.x_range else None)
    data = Dataset.from_csv(args.data)
    bounds = ParamBox.interval(*_pair(args.bounds, "--bounds")) if args.bounds else None
    if args.prior == "functional-uniform" and bounds is not None:
        model = model.with_region(bounds=[bounds.lower[0], bounds.upper[0]])
    spec = PriorSpec(args.prior, bounds)
    lik = LikelihoodSpec(args.likelihood, args.sigma)
    post = Posterior(model, spec, lik, data)
    if args.sampler == "mh":
        sample = sample_posterior_mh(post, args.draws, args.burnin, args.thin, args.seed)
    else:
        sample = sample_posterior_isr(post, args.proposal, args.draws, args.seed)
    outs = [write_csv(args.out, list(sample.param_names), sample.draws)]
    diag = {k: v for k, v in sample.diagnostics.items() if k != "records"}
    if args.band:
        lo, hi = model.design_region
        grid = np.linspace(lo, hi, args.band_points)
        b_lo, b_med, b_hi = predictive_band(sample, model, grid, args.level)
        outs.append(write_csv(args.band, ["x", "lower", "median", "upper"], zip(grid, b_lo, b_med, b_hi)))
    outs.append(write_json(Path(args.out).with_suffix(".diagnostics.json"), diag))
    return outs, [args.data]


def _choices(value, allowed, name):
    items = list(allowed) if value == "all" else value.split(",")
    for v in items:
        if v not in allowed:
            raise InputError(f"unknown {name} {v!r}; choose from {', '.join(allowed)} or 'all'")
    return items


def simulate_table(scenarios, priors, reps, seed, draws, burnin, thin, workers):
    rows = []
    for sc in scenarios:
        for pr in priors:
            r = evaluate_scenario(sc, pr, reps, seed, draws, burnin, thin, workers=workers)
            rows.append([pr, sc, r.mae1, r.mae2, r.cp, r.ile, r.n_reps, r.n_failed, r.acceptance_rate])
    return rows


TABLE_HEADER = ["prior", "scenario", "MAE1", "MAE2", "CP", "ILE", "n_reps", "n_failed", "acceptance_rate"]


def cmd_simulate(args):
    scenarios = _choices(args.scenario, SCENARIOS, "scenario")
    priors = _choices(args.prior, PRIOR_KINDS, "prior")
    rows = simulate_table(scenarios, priors, args.reps, args.seed, args.draws, args.burnin, args.thin, _threads(args))
    return [write_csv(args.out, TABLE_HEADER, rows)], []


def _design_prior(kind, x_range, bounds):
    model = get_model("exponential", x_range, bounds)
    if kind == "uniform":
        return model, uniform_prior(model.param_box)
    if kind == "functional-uniform":
        return model, functional_uniform_prior(model)
    raise InputError(f"design prior must be uniform or functional-uniform, got {kind!r}")


def _load_design(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return Design.normalized(doc["points"], doc["weights"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read design from {path}: {exc}") from None


def cmd_design_optimize(args):
    x_range = _pair(args.x_range, "--x-range")
    if args.model != "exponential":
        raise InputError("design optimization supports the exponential model only")
    model, prior = _design_prior(args.prior, x_range, _pair(args.theta_range, "--theta-range"))
    d = optimize_design(model, prior, x_range, args.max_points, args.seed, args.starts, workers=_threads(args))
    doc = {**d.to_dict(), "criterion": bayesian_criterion(d, prior), "prior": args.prior,
           "x_range": list(x_range), "seed": args.seed}
    return [write_json(args.out, doc)], []


def cmd_design_efficiency(args):
    x_range = _pair(args.x_range, "--x-range")
    parts = args.theta_grid.split(",")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except (ValueError, IndexError):
        raise InputError(f"--theta-grid must be 'lo,hi,n', got {args.theta_grid!r}") from None
    if not (0 <= lo < hi and n >= 2):
        raise InputError(f"--theta-grid needs 0 <= lo < hi and n >= 2, got {args.theta_grid!r}")
    thetas = np.linspace(lo, hi, n)
    inputs = []
    if args.design:
        designs = {"design": _load_design(args.design)}
        inputs.append(args.design)
    else:
        designs = dict(REFERENCE_DESIGNS)
    cols = [efficiency_curve(d, thetas, x_range=x_range) for d in designs.values()]
    fu = functional_uniform_prior(get_model("exponential", x_range, (0.0, max(hi, 5.0))))
    shape = fu.cdf(thetas)
    return [write_csv(args.out, ["theta", "fu_prior_cdf", *designs], zip(thetas, shape, *cols))], inputs


# --------------------------------------------------------------------------
# Reproduction targets
# --------------------------------------------------------------------------


def _repro_fig2(outdir, scale, seed, workers):
    eps = SCALES[scale]["epsilon"]
    outs = []
    for name in ("hellinger-tri", "kolmogorov-tri"):
        lat = build_epsilon_lattice(METRIC_FACTORIES[name](), eps)
        est = lattice_density(lat, bounds=(0.0, 1.0))
        stem = name.split("-")[0]
        outs.append(write_csv(outdir / f"fig2_{stem}.csv", ["theta", "density", "cdf"], zip(est.grid, est.density, est.cdf)))
    return outs


def _repro_fig3(outdir, scale, seed, workers):
    model = get_model("exponential")
    outs = []
    x = np.linspace(0.0, 10.0, 201)
    for kind in ("uniform", "functional-uniform"):
        _, prior = _design_prior(kind, None, None)
        g = np.linspace(0.0, 5.0, 501)
        outs.append(write_csv(outdir / f"fig3_{kind}_density.csv", ["theta", "density"], zip(g, prior.pdf(g))))
        thetas = np.concatenate([[0.0], prior.quantile(np.arange(1, 10) / 10.0), [5.0]])
        curves = [model.mu(x, np.array([t]))[..., :].ravel() for t in thetas]
        header = ["x"] + [f"theta={FLOAT_FMT % t}" for t in thetas]
        outs.append(write_csv(outdir / f"fig3_{kind}_curves.csv", header, zip(x, *curves)))
    return outs


def _repro_table1(outdir, scale, seed, workers):
    reps = SCALES[scale]["reps"]
    rows = simulate_table(list(SCENARIOS), list(PRIOR_KINDS), reps, seed, 10_000, 1_000, 2, workers)
    return [write_csv(outdir / "table1.csv", TABLE_HEADER, rows)]


def _repro_designs(outdir, scale, seed, workers):
    doc = {}
    for kind in ("uniform", "functional-uniform"):
        model, prior = _design_prior(kind, (0.0, 10.0), (0.0, 5.0))
        d = optimize_design(model, prior, (0.0, 10.0), 5, seed, workers=workers)
        ref = REFERENCE_DESIGNS[kind]
        doc[kind] = {**d.to_dict(), "criterion": bayesian_criterion(d, prior),
                     "reference_points": list(ref.points), "reference_weights": list(ref.weights),
                     "reference_criterion": bayesian_criterion(ref, prior)}
    return [write_json(outdir / "designs.json", doc)]


def _repro_fig5(outdir, scale, seed, workers):
    thetas = np.linspace(0.0, 5.0, 501)
    cols = [efficiency_curve(d, thetas) for d in REFERENCE_DESIGNS.values()]
    _, fu = _design_prior("functional-uniform", None, None)
    return [write_csv(outdir / "fig5_efficiency.csv", ["theta", "fu_prior_cdf", "fu_prior_density", *REFERENCE_DESIGNS],
                      zip(thetas, fu.cdf(thetas), fu.pdf(thetas), *cols))]


REPRO_TARGETS = {
    "fig2": _repro_fig2,
    "fig3": _repro_fig3,
    "table1": _repro_table1,
    "designs": _repro_designs,
    "fig5": _repro_fig5,
}


def cmd_repro(args):
    outdir = Path(args.outdir)
    targets = list(REPRO_TARGETS) if args.target == "all" else [args.target]
    outs = []
    for t in targets:
        outs += REPRO_TARGETS[t](outdir, args.scale, args.seed, _threads(args))
    return outs, []


def cmd_rerun(args):
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        argv = list(manifest["argv"])
        expected = manifest["outputs"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read manifest {args.manifest}: {exc}") from None
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).exists() or sha256(path) != digest:
            raise InputError(f"input {path} is missing or changed since the manifest was written")
    with tempfile.TemporaryDirectory() as tmp:
        saved = {}
        for path in expected:
            if Path(path).exists():
                saved[path] = Path(tmp) / hashlib.sha256(path.encode()).hexdigest()
                Path(path).replace(saved[path])
        try:
            code = run(argv, write_manifest=False)
            if code != 0:
                return code
            mismatched = [p for p, d in expected.items() if not Path(p).exists() or sha256(p) != d]
        finally:
            for path, keep in saved.items():
                # keep the fresh output only if it matched; otherwise restore the original
                if not Path(path).exists() or sha256(path) != expected[path]:
                    Path(keep).replace(path)
    if mismatched:
        raise NumericalError(f"re-run outputs differ from the manifest: {', '.join(mismatched)}")
    print(f"reproduced {len(expected)} output(s) byte-identically")
    return 0


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="funiform", description="Functional uniform priors: lattices, priors, posteriors and designs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=0, help="worker processes (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("lattice", help="epsilon-lattice of a one-parameter metric space")
    s.add_argument("--metric", default="hellinger-tri", help=", ".join(METRIC_FACTORIES))
    s.add_argument("--eps", "--epsilon", dest="epsilon", type=float, default=0.01)
    s.add_argument("--interval", help="lo,hi sub-interval of the metric space")
    s.add_argument("--direction", choices=("up", "down"), default="up")
    s.add_argument("--out", default="lattice.csv")
    s.add_argument("--density", help="also write the smoothed lattice density here")
    s.add_argument("--grid", type=int, default=512)
    s.set_defaults(func=cmd_lattice)

    pr = sub.add_parser("prior", help="evaluate or sample a prior")
    psub = pr.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name, func in (("eval", cmd_prior_eval), ("sample", cmd_prior_sample)):
        s = psub.add_parser(name)
        s.add_argument("--model", default="emax", choices=MODEL_IDS)
        s.add_argument("--prior", default="functional-uniform", choices=("functional-uniform", "uniform"))
        s.add_argument("--bounds", help="lo,hi of the nonlinear parameter")
        s.add_argument("--x-range", help="lo,hi of the design region")
        s.add_argument("--weighting", default="lebesgue", help="lebesgue or design:FILE (discrete design weighting)")
        s.add_argument("--seed", type=int, default=0)
        if name == "eval":
            s.add_argument("--grid", type=int, default=200)
            s.add_argument("--spacing", choices=("auto", "linear", "log"), default="auto")
            s.add_argument("--out", default="prior.csv")
        else:
            s.add_argument("--n", type=int, default=1000)
            s.add_argument("--out", default="prior_sample.csv")
        s.set_defaults(func=func)

    s = sub.add_parser("fit", help="posterior sampling for one dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--model", default="emax", choices=MODEL_IDS)
    s.add_argument("--likelihood", default="normal", choices=("normal", "binomial"))
    s.add_argument("--prior", default="functional-uniform", choices=PRIOR_KINDS)
    s.add_argument("--bounds", help="lo,hi of the nonlinear parameter")
    s.add_argument("--x-range", help="lo,hi of the design region")
    s.add_argument("--sigma", type=float, help="fix the residual sd instead of sampling it")
    s.add_argument("--sampler", choices=("mh", "isr"), default="mh")
    s.add_argument("--draws", type=int, default=10_000)
    s.add_argument("--burnin", type=int, default=1_000)
    s.add_argument("--thin", type=int, default=2)
    s.add_argument("--proposal", type=int, default=50_000, help="ISR proposal size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="posterior.csv")
    s.add_argument("--band", help="also write a pointwise credible band here")
    s.add_argument("--band-points", type=int, default=41)
    s.add_argument("--level", type=float, default=0.9)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="dose-response simulation table")
    s.add_argument("--scenario", default="all", help=f"{', '.join(SCENARIOS)} (comma list) or all")
    s.add_argument("--prior", default="all", help=f"{', '.join(PRIOR_KINDS)} (comma list) or all")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--draws", type=int, default=10_000)
    s.add_argument("--burnin", type=int, default=1_000)
    s.add_argument("--thin", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="table1.csv")
    s.set_defaults(func=cmd_simulate)

    de = sub.add_parser("design", help="Bayesian optimal designs for the exponential model")
    dsub = de.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsub.add_parser("optimize")
    s.add_argument("--model", default="exponential", choices=MODEL_IDS)
    s.add_argument("--prior", default="functional-uniform", choices=("uniform", "functional-uniform"))
    s.add_argument("--x-range", default="0,10")
    s.add_argument("--theta-range", default="0,5")
    s.add_argument("--max-points", type=int, default=5)
    s.add_argument("--starts", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="design.json")
    s.set_defaults(func=cmd_design_optimize)
    s = dsub.add_parser("efficiency")
    s.add_argument("--design", help="design JSON (default: both reference designs)")
    s.add_argument("--x-range", default="0,10")
    s.add_argument("--theta-grid", default="0.02,5,200", help="lo,hi,n")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="efficiency.csv")
    s.set_defaults(func=cmd_design_efficiency)

    s = sub.add_parser("repro", help="regenerate the reference artifacts")
    s.add_argument("target", choices=(*REPRO_TARGETS, "all"))
    s.add_argument("--scale", choices=tuple(SCALES), default="desk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--outdir", default="repro")
    s.set_defaults(func=cmd_repro)

    s = sub.add_parser("rerun", help="replay a manifest and verify byte-identical outputs")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun)
    return p


def _write_manifest(argv, args, outputs, inputs, seconds):
    first = Path(outputs[0])
    path = first.with_name(first.stem + ".manifest.json")
    doc = {
        "argv": list(argv),
        "command_line": "funiform " + " ".join(argv),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "numpy": np.__version__,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "wall_seconds": round(seconds, 3),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def run(argv=None, write_manifest: bool = True) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.func is cmd_rerun:
            return cmd_rerun(args)
        t0 = time.perf_counter()
        outputs, inputs = args.func(args)
        if write_manifest and outputs:
            _write_manifest(argv, args, outputs, inputs, time.perf_counter() - t0)
        for p in outputs:
            print(p)
        return 0
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FuniformError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
