"""Command-line front end.

Every command prints one JSON document to stdout holding the result and
a run manifest (command, config echo, seed, library version, input
digests, timestamps).  Exit codes: 0 success, 2 configuration problem,
3 data problem, 4 numerical failure.  Commands with any internal
randomness require --seed.  CALIBRA_LOG in {error, info, debug} gates
log verbosity.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import __version__, harness, recal, regress, scores, synth
from . import estimators as est_mod
from .core import (
    LabeledPredictions,
    ParseError,
    Split,
    ValidationError,
    digest_file,
    load_csv,
)
from .estimators import BinningScheme, ConfigError, EstimatorConfig
from .recal import FitError
from .regress import MdnConfig, TrainingDiverged

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("calibra")


class CliError(SystemExit):
    def __init__(self, code, message):
        log.error(message)
        print(f"error: {message}", file=sys.stderr)
        super().__init__(code)


def _setup_logging():
    level = os.environ.get("CALIBRA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(
            EXIT_CONFIG, f"CALIBRA_LOG must be one of {sorted(levels)}, got {level!r}"
        )
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class Manifest:
    def __init__(self, command, args):
        self.doc = {
            "command": command,
            "config": {
                k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None
            },
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "inputs": {},
            "started": _utcnow(),
        }

    def add_input(self, path):
        self.doc["inputs"][str(path)] = digest_file(path)

    def emit(self, result):
        self.doc["finished"] = _utcnow()
        print(json.dumps({"schema_version": 1, "result": result, "manifest": self.doc},
                         indent=2))


def _estimator_configs(args) -> list[EstimatorConfig]:
    names = [v.strip() for v in args.estimators.split(",") if v.strip()]
    if not names:
        raise ConfigError("no estimators requested")
    binning = None
    if getattr(args, "bins", None) is not None:
        binning = BinningScheme(getattr(args, "scheme", "equal_width"), args.bins)
    return [
        EstimatorConfig(
            name=name,
            p=getattr(args, "p", 2.0),
            binning=binning,
            debias=bool(getattr(args, "debias", False)),
            bandwidth=getattr(args, "bandwidth", "auto"),
            nu=getattr(args, "nu", None),
        )
        for name in names
    ]


def _load_predictions(path, fmt, manifest) -> LabeledPredictions:
    try:
        data = load_csv(path, fmt)
        manifest.add_input(path)
        return data
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"no such file: {path}")
    except (ParseError, ValidationError) as err:
        raise CliError(EXIT_DATA, str(err))


def _load_joint(path, manifest) -> synth.FiniteJointModel:
    try:
        with open(path, encoding="utf-8") as fh:
            joint = synth.joint_from_json(fh.read())
        manifest.add_input(path)
        return joint
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"no such file: {path}")
    except ValidationError as err:
        raise CliError(EXIT_DATA, str(err))


def cmd_estimate(args):
    manifest = Manifest("estimate", args)
    try:
        args.estimators = args.estimator
        cfg = _estimator_configs(args)[0]
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, str(err))
    data = _load_predictions(args.input, args.format, manifest)
    try:
        result = est_mod.estimate(data, cfg)
    except (ConfigError, ValidationError) as err:
        raise CliError(EXIT_CONFIG, str(err))
    manifest.emit({"estimator": cfg.label(), "value": result.value,
                   "metadata": result.metadata})


def _fit_map(method, val):
    if method == "ts":
        return recal.fit_temperature(val)
    if method == "ets":
        return recal.fit_ets(val)
    if method == "tf":
        return recal.tf_transform(val)
    if method == "tf-binary":
        return recal.tf_transform(val, binary=True)
    raise ConfigError(f"unknown method {method!r}")


def cmd_recalibrate(args):
    manifest = Manifest("recalibrate", args)
    try:
        configs = _estimator_configs(args)
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, str(err))
    val = _load_predictions(args.val, args.format, manifest)
    test = _load_predictions(args.test, args.format, manifest)
    try:
        split = Split(val, test)
        fitted = _fit_map(args.method, split.validation)
        after_data = recal.apply(fitted, split.test)
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, str(err))
    except (FitError, ValidationError) as err:
        raise CliError(EXIT_DATA, str(err))

    rows = []
    for cfg in configs:
        before = est_mod.estimate(split.test, cfg).value
        after = est_mod.estimate(after_data, cfg).value
        rows.append(
            {
                "estimator": cfg.label(),
                "before": before,
                "after": after,
                "improvement": before - after,
                "improvement_squared": before * before - after * after,
            }
        )
    if args.map_out:
        with open(args.map_out, "w", encoding="utf-8") as fh:
            fh.write(recal.map_to_json(fitted))
    manifest.emit(
        {
            "method": args.method,
            "map": json.loads(recal.map_to_json(fitted)),
            "evaluations": rows,
        }
    )


def _parse_grid(text, ticks):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return harness.log2_ticks(int(hi), int(lo), ticks)
    return tuple(sorted(int(v) for v in text.split(",")))


def cmd_sweep(args):
    manifest = Manifest("sweep", args)
    try:
        configs = _estimator_configs(args)
        if args.replicates:
            reps = tuple(int(v) for v in args.replicates.split(","))
        else:
            reps = None
    except (ConfigError, ValueError) as err:
        raise CliError(EXIT_CONFIG, str(err))

    if args.joint:
        source = _load_joint(args.joint, manifest)
        pool_size = args.pool_size or 10000
    else:
        if not args.input:
            raise CliError(EXIT_CONFIG, "need --input or --joint")
        source = _load_predictions(args.input, args.format, manifest)
        pool_size = source.n_items

    try:
        sizes = harness.log2_ticks(pool_size, args.min_size, args.ticks)
        if reps is None:
            reps = harness.DEFAULT_REPLICATES[-len(sizes):]
        sweep_config = harness.SweepConfig(sizes, reps, args.seed, args.threads)
        maps = {}
        if args.val and args.methods:
            valset = _load_predictions(args.val, args.format, manifest)
            for method in args.methods.split(","):
                maps[method] = _fit_map(method.strip(), valset)
        report = harness.sweep(source, configs, sweep_config, maps or None,
                               pool_size=pool_size)
    except (ConfigError, ValidationError) as err:
        raise CliError(EXIT_CONFIG, str(err))
    except FitError as err:
        raise CliError(EXIT_DATA, str(err))

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(harness.report_to_csv(report))
    if args.plot_data:
        rel = harness.relative_bias(report)
        with open(args.plot_data, "w", encoding="utf-8") as fh:
            fh.write(harness.report_to_csv(rel))
    manifest.emit(json.loads(harness.report_to_json(report)))


def cmd_simulate_bias(args):
    manifest = Manifest("simulate-bias", args)
    try:
        sizes = _parse_grid(args.n_grid, args.ticks)
        sampler = synth.logistic_normal_model(args.classes, args.scale, args.seed)
    except (ValidationError, ValueError) as err:
        raise CliError(EXIT_CONFIG, str(err))
    preds = sampler.sample(args.support)
    weights = np.full(args.support, 1.0 / args.support)
    joint = synth.FiniteJointModel(preds, weights / weights.sum(), preds)

    rows = []
    rng_master = args.seed
    for i, n in enumerate(sizes):
        approx = synth.ece_bias_mu(joint, n, args.bins)
        values = np.empty(args.replicates)
        for r in range(args.replicates):
            data = synth.sample(joint, n, np.random.SeedSequence([rng_master, i, r]))
            values[r] = est_mod.ece(data, BinningScheme("equal_width", args.bins))
        rows.append(
            {
                "n": int(n),
                "mc_mean": float(values.mean()),
                "mc_se": float(values.std(ddof=1) / np.sqrt(len(values)))
                if len(values) > 1
                else 0.0,
                "mu_n": approx.mu_n,
            }
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("n,mc_mean,mc_se,mu_n\n")
            for row in rows:
                fh.write(f"{row['n']},{row['mc_mean']!r},{row['mc_se']!r},{row['mu_n']!r}\n")
    manifest.emit({"bins": args.bins, "rows": rows,
                   "oracle_ece": synth.true_error(joint, "ece", bins=args.bins)})


def cmd_counterexample(args):
    manifest = Manifest("counterexample", args)
    try:
        joint = synth.counterexample(args.classes, args.eps, args.support, args.seed)
    except ValidationError as err:
        raise CliError(EXIT_CONFIG, str(err))
    table = {
        "ce_2": synth.true_error(joint, "ce_p", p=2),
        "ce_brier": synth.true_error(joint, "ce_brier"),
        "cwce_2": synth.true_error(joint, "cwce_p", p=2),
        "tce_1": synth.true_error(joint, "tce_p", p=1),
        "tce_2": synth.true_error(joint, "tce_p", p=2),
        "ece": synth.true_error(joint, "ece", bins=args.bins),
        "ks": synth.true_error(joint, "ks"),
        "mmce": synth.true_error(joint, "mmce"),
        "brier": synth.true_error(joint, "brier"),
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(synth.joint_to_json(joint))
    manifest.emit({"support_atoms": joint.support_size, "oracle": table})


def cmd_regress_demo(args):
    manifest = Manifest("regress-demo", args)
    try:
        config = MdnConfig(
            hidden=args.hidden,
            learning_rate=args.lr,
            iterations=args.iterations,
            seed=args.seed,
        )
        result = regress.variance_experiment(
            args.seed,
            n_train=args.train_size,
            n_val=args.train_size,
            n_test=args.train_size,
            config=config,
            checkpoint_every=args.checkpoint_every,
        )
    except TrainingDiverged as err:
        raise CliError(EXIT_NUMERICAL, str(err))
    if args.curves_out:
        with open(args.curves_out, "w", encoding="utf-8") as fh:
            for row in result["curve"]:
                fh.write(json.dumps(row) + "\n")
    manifest.emit({"summary": result["summary"], "checkpoints": len(result["curve"])})


def cmd_decompose(args):
    manifest = Manifest("decompose", args)
    joint = _load_joint(args.joint, manifest)
    score = {"brier": scores.BRIER, "log": scores.LOG}.get(args.score)
    if score is None:
        raise CliError(EXIT_CONFIG, f"unknown score {args.score!r}")
    try:
        parts = scores.decompose(joint, score)
    except ValidationError as err:
        raise CliError(EXIT_NUMERICAL, str(err))
    manifest.emit(
        {
            "score": score.name,
            "entropy": parts.entropy,
            "sharpness": parts.sharpness,
            "calibration": parts.calibration,
            "expected_score": parts.expected_score,
            "residual": parts.residual,
        }
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibra",
        description="Calibration-error estimation, bounds, and recalibration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_estimator_flags(p):
        p.add_argument("--bins", type=int, default=None)
        p.add_argument("--scheme", choices=["equal_width", "equal_mass"],
                       default="equal_width")
        p.add_argument("--p", type=float, default=2.0)
        p.add_argument("--debias", action="store_true")
        p.add_argument("--bandwidth", default="auto")
        p.add_argument("--nu", type=float, default=None)

    p = sub.add_parser("estimate", help="one estimator on one file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["probs", "logits"], default="probs")
    p.add_argument("--estimator", required=True)
    add_common_estimator_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("recalibrate", help="fit a map on --val, evaluate on --test")
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--format", choices=["probs", "logits"], default="probs")
    p.add_argument("--method", required=True,
                   choices=["ts", "ets", "tf", "tf-binary"])
    p.add_argument("--estimators", required=True)
    p.add_argument("--map-out", default=None)
    add_common_estimator_flags(p)
    p.set_defaults(func=cmd_recalibrate)

    p = sub.add_parser("sweep", help="sample-size sweep over a pool")
    p.add_argument("--input", default=None)
    p.add_argument("--joint", default=None)
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--format", choices=["probs", "logits"], default="probs")
    p.add_argument("--estimators", required=True)
    p.add_argument("--ticks", type=int, default=10)
    p.add_argument("--min-size", type=int, default=100)
    p.add_argument("--replicates", default=None,
                   help="comma list, one count per tick")
    p.add_argument("--val", default=None)
    p.add_argument("--methods", default=None,
                   help="comma list of recalibration methods fitted on --val")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--plot-data", default=None,
                   help="relative-bias CSV path (figure-ready long format)")
    add_common_estimator_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate-bias",
                       help="Monte-Carlo bias curve next to its closed form")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--support", type=int, default=2000)
    p.add_argument("--n-grid", default="100..10000")
    p.add_argument("--ticks", type=int, default=10)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate_bias)

    p = sub.add_parser("counterexample",
                       help="joint with zero channel errors but large ce_2")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--support", type=int, default=4)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help="joint JSON path")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("regress-demo",
                       help="density-network variance calibration walkthrough")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-size", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=25)
    p.add_argument("--curves-out", default=None, help="JSON lines path")
    p.set_defaults(func=cmd_regress_demo)

    p = sub.add_parser("decompose", help="entropy/sharpness/calibration split")
    p.add_argument("--joint", required=True)
    p.add_argument("--score", choices=["brier", "log"], default="brier")
    p.set_defaults(func=cmd_decompose)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    log.info("running %s", args.command)
    try:
        args.func(args)
    except CliError:
        raise
    except (ConfigError,) as err:
        raise CliError(EXIT_CONFIG, str(err))
    except (ParseError, FitError) as err:
        raise CliError(EXIT_DATA, str(err))
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as err:
        raise CliError(EXIT_NUMERICAL, str(err))
    except ValidationError as err:
        raise CliError(EXIT_DATA, str(err))
    return 0


if __name__ == "__main__":
    sys.exit(main())
