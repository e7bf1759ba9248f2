"""Command-line front end: ``linkage-sae {fit,predict,simulate,audit-lambda}``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

import numpy as np
import pandas as pd

from . import io
from .exceptions import ConvergenceError, InputError, LinkageSAEError
from .linkage import estimate_lambda_audit
from .lmm import EBLUPStar
from .mquantile import MQStar
from .robust import REBLUPStar
from .simulation import ScenarioConfig, run_design_based, run_monte_carlo, scatter_dump

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

METHODS = ("eblup-star", "eblup-starstar", "reblup-star", "mq-star")

log = logging.getLogger("linkage_sae")


def parse_tau_grid(text):
    """``"0.1,0.5,0.9"`` or ``"start:stop:step"`` (stop inclusive)."""
    try:
        if ":" in text:
            a, b, h = (float(t) for t in text.split(":"))
            k = int(round((b - a) / h))
            grid = a + h * np.arange(k + 1)
        else:
            grid = np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise InputError(f"cannot parse tau grid {text!r}") from None
    grid = np.round(grid, 10)
    if grid.size < 2 or np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] >= 1:
        raise InputError("tau grid must hold at least two increasing orders inside (0, 1)")
    return grid


def _estimator(args):
    if args.method in ("eblup-star", "eblup-starstar"):
        return EBLUPStar(
            variant=args.method.split("-")[1],
            correct_linkage=not args.classical,
            lambda_uncertainty=getattr(args, "lambda_uncertainty", "none") != "none",
        )
    if args.method == "reblup-star":
        return REBLUPStar(c=args.huber_c, correct_linkage=not args.classical)
    taus = None if args.tau_grid is None else parse_tau_grid(args.tau_grid)
    return MQStar(c=args.huber_c, taus=taus, correct_linkage=not args.classical)


def _load_sample(args):
    sample = io.read_linked_sample(
        args.sample, args.paradata, aggregates=args.aggregates, population_csv=args.population
    )
    mode = getattr(args, "lambda_uncertainty", "none")
    if mode != "none":
        if args.audit is not None:
            audit = io.read_audit(args.audit)
            lam, var = _audit_estimates(audit, mode, sample)
            sample = sample.with_lambdas(lam, var)
        elif sample.lambda_var is None:
            raise InputError(
                "lambda uncertainty needs a var_lambda column in paradata or an --audit file"
            )
    return sample


def _audit_estimates(audit, mode, sample):
    order = {b: k for k, b in enumerate(audit.block_ids)}
    missing = [b for b in sample.block_labels.tolist() if b not in order]
    if missing:
        raise InputError(f"audit: no audited records for block(s) {missing}")
    n_linked = np.bincount(sample.block, minlength=sample.n_blocks)
    idx = np.array([order[b] for b in sample.block_labels.tolist()])
    lam, var = estimate_lambda_audit(
        audit, variance=mode, n_linked=np.bincount(idx, weights=n_linked, minlength=len(order))
    )
    return lam[idx], var[idx]


def _prediction_frame(est, sample, with_mse):
    out = pd.DataFrame(
        {
            "area_id": sample.area_labels,
            "estimator": est.name,
            "point": est.predict(),
        }
    )
    if with_mse:
        comps = est.mse()
        out["mse"] = comps["mse"].to_numpy()
        for col in comps.columns:
            if col != "mse":
                out[col] = comps[col].to_numpy()
    return out


def cmd_fit(args, predict_only=False):
    sample = _load_sample(args)
    est = _estimator(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        est.fit(sample)
        preds = _prediction_frame(est, sample, with_mse=not predict_only and args.mse == "on")
    os.makedirs(args.out, exist_ok=True)
    io.write_frame(preds, os.path.join(args.out, "predictions.csv"))
    for w in caught:
        log.warning("%s", w.message)
    if predict_only:
        return EXIT_OK
    summary = est.summary()
    summary["method"] = args.method
    summary["n_units"] = sample.n
    summary["n_areas"] = sample.n_areas
    summary["lambdas"] = dict(zip(map(str, sample.block_labels.tolist()), sample.lambdas))
    summary["warnings"] = sorted({str(w.message) for w in caught})
    io.write_json(summary, os.path.join(args.out, "summary.json"))
    if isinstance(est, MQStar):
        io.write_frame(est.coefficient_frame(), os.path.join(args.out, "mq_coefficients.csv"))
    return EXIT_OK


def cmd_simulate(args):
    config = ScenarioConfig.from_toml(args.config)
    over = {}
    if args.seed is not None:
        over["base_seed"] = args.seed
    if args.replicates is not None:
        over["replicates"] = args.replicates
    if args.huber_c is not None:
        over["huber_c"] = args.huber_c
    if args.tau_grid is not None:
        over["tau_grid"] = tuple(parse_tau_grid(args.tau_grid))
    if args.mse is not None:
        over["mse"] = args.mse == "on"
    if args.n_jobs is not None:
        over["n_jobs"] = args.n_jobs
    if over:
        config = ScenarioConfig.from_dict({**config.to_dict(), **over})
    if config.replicates < 2:
        warnings.warn(
            f"only {config.replicates} replicate(s): medians describe a single draw",
            RuntimeWarning,
        )
    progress = None if args.quiet else sys.stderr
    if args.population is not None:
        if args.sample_size is None:
            raise InputError("design-based mode needs --sample-size")
        pop = io.read_population(args.population)
        lam = _population_lambdas(args, pop)
        report = run_design_based(pop, lam, args.sample_size, config, progress=progress)
    else:
        report = run_monte_carlo(config, progress=progress)
    report.write(args.out, replicates=args.dump_replicates)
    if args.scatter:
        io.write_frame(scatter_dump(config), os.path.join(args.out, "scatter.csv"))
    return EXIT_OK


def _population_lambdas(args, pop):
    if args.paradata is None:
        if pop.y_star is None:
            raise InputError("design-based mode needs --paradata or a y_star column")
        log.warning("no paradata given: treating every block as perfectly linked")
        return np.ones(len(pop.block_labels))
    para = io.read_csv(args.paradata, "paradata", ("block_id", "lambda"))
    lut = dict(zip(para["block_id"].tolist(), para["lambda"].to_numpy(dtype=float)))
    missing = [b for b in pop.block_labels.tolist() if b not in lut]
    if missing:
        raise InputError(f"paradata: no lambda for block(s) {missing}")
    return np.array([lut[b] for b in pop.block_labels.tolist()])


def cmd_audit_lambda(args):
    audit = io.read_audit(args.audit)
    n_linked = None
    if args.variance == "sample-total":
        if args.sample is None:
            raise InputError("--variance sample-total needs --sample for the linked sample sizes")
        s = io.read_csv(args.sample, "sample", ("block_id",))
        counts = s.groupby("block_id").size()
        n_linked = np.array([counts.get(b, 0) for b in audit.block_ids], dtype=float)
    lam, var = estimate_lambda_audit(audit, variance=args.variance, n_linked=n_linked)
    out = pd.DataFrame(
        {
            "block_id": list(audit.block_ids),
            "lambda": lam,
            "var_lambda": var,
            "m": audit.m,
            "n_correct": audit.correct,
        }
    )
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    io.write_frame(out, args.out)
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--sample", required=True, help="sample.csv")
    p.add_argument("--paradata", required=True, help="paradata.csv")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--aggregates", help="aggregates.csv")
    src.add_argument("--population", help="population.csv (aggregates computed from it)")
    p.add_argument("--method", choices=METHODS, default="eblup-star")
    p.add_argument("--classical", action="store_true", help="ignore linkage errors")
    p.add_argument("--huber-c", type=float, default=1.345)
    p.add_argument("--tau-grid", default=None, help="'a,b,c' or 'start:stop:step'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="recorded only; fits are deterministic")


def build_parser():
    parser = argparse.ArgumentParser(prog="linkage-sae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit an estimator, write predictions, MSE and a summary")
    _add_data_args(p)
    p.add_argument("--mse", choices=("on", "off"), default="on")
    p.add_argument(
        "--lambda-uncertainty",
        choices=("none", "binomial", "sample-total"),
        default="none",
        help="add the linkage-probability uncertainty term (EBLUP methods)",
    )
    p.add_argument("--audit", default=None, help="audit.csv used to re-estimate lambda")

    p = sub.add_parser("predict", help="point predictions only")
    _add_data_args(p)

    p = sub.add_parser("simulate", help="Monte Carlo or design-based simulation")
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides base_seed")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--huber-c", type=float, default=None)
    p.add_argument("--tau-grid", default=None)
    p.add_argument("--mse", choices=("on", "off"), default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--population", default=None, help="fixed population for design-based mode")
    p.add_argument("--paradata", default=None, help="block lambdas for design-based mode")
    p.add_argument("--sample-size", type=int, default=None)
    p.add_argument("--dump-replicates", action="store_true")
    p.add_argument("--scatter", action="store_true", help="write scatter.csv of replicate 0")
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("audit-lambda", help="estimate block lambdas from an audit sample")
    p.add_argument("--audit", required=True)
    p.add_argument("--out", required=True, help="paradata CSV to write")
    p.add_argument("--variance", choices=("binomial", "sample-total"), default="binomial")
    p.add_argument("--sample", default=None, help="sample.csv (for --variance sample-total)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    handlers = {
        "fit": cmd_fit,
        "predict": lambda a: cmd_fit(a, predict_only=True),
        "simulate": cmd_simulate,
        "audit-lambda": cmd_audit_lambda,
    }
    try:
        return handlers[args.command](args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, np.linalg.LinAlgError, LinkageSAEError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        norms = getattr(exc, "norms", None)
        if norms:
            print(f"diagnostics: {norms}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
