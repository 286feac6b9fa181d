"""Command-line surface: thin wrappers over the library operations.

Subcommands: gen, train, calibrate, evaluate, refer, attack, report.
--seed, --config, and --out are shared flags. Exit status 0 on success,
1 with a single ``error: ...`` line on failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio
from .calib import (
    CalibratedDetector,
    fit_ensemble_weights,
    fit_temperature,
    mean_probs,
    predict_dataset,
    train_detector,
)
from .dataset import split_dataset
from .errors import CalshiftError, ConfigurationError
from .evalkit import default_tau_grid, referral_from_arrays
from .experiment import load_config, run_experiment, _generator_config
from .metrics import binary_entropy, metric_report
from .nncore import TrainConfig, forward_logit
from .seeding import make_rng, mix_seed
from .shiftlab import AttackBudget, attack_dataset, gen_dataset, gen_out_of_source, gen_temporal


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config file")
        if out:
            p.add_argument("--out", required=True, help="output file or directory")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed (deterministic subcommands ignore it)")

    p = sub.add_parser("gen", help="generate the configured synthetic datasets")
    common(p)

    p = sub.add_parser("train", help="train a detector bundle on a dataset file")
    common(p)
    p.add_argument("--data", required=True, help="dataset file")

    p = sub.add_parser("calibrate", help="refit post-hoc parameters of a bundle")
    common(p, config=False)
    p.add_argument("--bundle", required=True, help="detector bundle directory")
    p.add_argument("--data", required=True, help="validation dataset file")

    p = sub.add_parser("evaluate", help="predict and report metrics on a dataset")
    common(p, config=False)
    p.add_argument("--bundle", required=True, help="detector bundle directory")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("refer", help="referral curve from a prediction dump")
    common(p, config=False)
    p.add_argument("--preds", required=True, help="predictions.csv from evaluate")
    p.add_argument("--data", required=True, help="dataset file with the truth labels")
    p.add_argument("--points", type=int, default=50)

    p = sub.add_parser("attack", help="attack the malicious rows of a dataset")
    common(p, config=False)
    p.add_argument("--bundle", required=True, help="surrogate detector bundle")
    p.add_argument("--data", required=True, help="dataset file (binary mode)")
    p.add_argument("--method", choices=("greedy", "mimicry", "max"), default="greedy")
    p.add_argument("--budget", type=int, default=20)

    p = sub.add_parser("report", help="run the configured experiment end to end")
    common(p)
    return parser


def _resolve_seed(cfg, override):
    return cfg.get_int("seed") if override is None else int(override)


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    gen_cfg = _generator_config(cfg)
    base = gen_dataset(gen_cfg, cfg.get_int("gen.n"), mix_seed(seed, "base"))
    dataio.save_dataset(base, os.path.join(args.out, "base.csv"))
    oos = cfg.get_opt_float("shift.out_of_source")
    if oos is not None:
        shifted = gen_out_of_source(gen_cfg, oos, cfg.get_int("gen.n"), mix_seed(seed, "oos"))
        dataio.save_dataset(shifted, os.path.join(args.out, "out_of_source.csv"))
    months = cfg.get_opt_int("shift.months")
    drift = cfg.get_opt_float("shift.drift_rate")
    if months is not None:
        if drift is None:
            raise ConfigurationError("shift.months requires shift.drift_rate")
        series = gen_temporal(
            _generator_config(cfg, drift_rate=drift),
            months + 1,
            cfg.get_int("shift.n_per_month"),
            mix_seed(seed, "temporal"),
        )
        for t, ds in enumerate(series):
            dataio.save_dataset(ds, os.path.join(args.out, f"month_{t:02d}.csv"))
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    ds = dataio.load_dataset(args.data)
    data = split_dataset(
        ds,
        (cfg.get_float("split.train"), cfg.get_float("split.val"), cfg.get_float("split.test")),
        mix_seed(seed, "split"),
    )
    train_cfg = TrainConfig(
        learning_rate=cfg.get_float("train.lr"),
        epochs=cfg.get_int("train.epochs"),
        batch_size=cfg.get_int("train.batch"),
        seed=mix_seed(seed, "detector"),
        kl_weight=cfg.get_float("train.kl_weight"),
        gradient_clip=cfg.get_opt_float("train.clip"),
    )
    det = train_detector(
        cfg.get("detector.kind"),
        data,
        train_cfg,
        size=cfg.get_int("detector.size"),
        hidden=tuple(int(h) for h in cfg.get("detector.hidden").split(",") if h),
        dropout_rate=cfg.get_float("detector.dropout_rate"),
        samples_per_prediction=cfg.get_int("detector.samples"),
    )
    dataio.save_detector(det, args.out)
    return 0


def _cmd_calibrate(args) -> int:
    det = dataio.load_detector(args.bundle)
    val = dataio.load_dataset(args.data)
    if det.kind == "temp-scaling":
        logits = forward_logit(det.members[0], val.features)
        temperature = fit_temperature(logits, val.labels)
        new = CalibratedDetector(
            kind=det.kind,
            members=det.members,
            temperature=temperature,
            samples_per_prediction=det.samples_per_prediction,
            member_seeds=det.member_seeds,
        )
    elif det.kind == "w-ensemble":
        weights = fit_ensemble_weights(det.members, val)
        new = CalibratedDetector(
            kind=det.kind,
            members=det.members,
            weights=weights,
            samples_per_prediction=det.samples_per_prediction,
            member_seeds=det.member_seeds,
        )
    else:
        raise ConfigurationError(f"kind {det.kind!r} has no post-hoc parameters")
    dataio.save_detector(new, args.out)
    return 0


def _cmd_evaluate(args) -> int:
    det = dataio.load_detector(args.bundle)
    ds = dataio.load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    member, weights = predict_dataset(det, ds.features, make_rng(seed, "predict"))
    means = mean_probs(member, weights)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_predictions(ds.ids, member, weights, os.path.join(args.out, "predictions.csv"))
    if ds.has_labels:
        report = metric_report(means, ds.labels, S=args.bins)
        dataio.metrics_to_csv(report, os.path.join(args.out, "metrics.csv"))
    return 0


def _cmd_refer(args) -> int:
    ids, member, weights = dataio.load_predictions(args.preds)
    ds = dataio.load_dataset(args.data)
    truth_by_id = {ds.ids[i]: int(ds.labels[i]) for i in range(len(ds))}
    missing = [i for i in ids if i not in truth_by_id]
    if missing:
        raise ConfigurationError(f"id {missing[0]!r} not present in the dataset")
    truth = np.array([truth_by_id[i] for i in ids], dtype=np.int64)
    means = mean_probs(member, weights)
    curve = referral_from_arrays(
        binary_entropy(means), (means >= 0.5).astype(np.int64), truth,
        default_tau_grid(args.points),
    )
    dataio.referral_to_csv(curve, args.out)
    return 0


def _cmd_attack(args) -> int:
    det = dataio.load_detector(args.bundle)
    ds = dataio.load_dataset(args.data)
    budget = AttackBudget(max_flips=args.budget, surrogate=det)
    benign_pool = ds.subset(np.flatnonzero(ds.labels == 0)) if (ds.labels == 0).any() else None
    attacked = attack_dataset(ds, budget, method=args.method, benign_pool=benign_pool)
    dataio.save_dataset(attacked, args.out)
    return 0


def _cmd_report(args) -> int:
    from .experiment import parse_config

    cfg = load_config(args.config)
    if args.seed is not None:
        text = cfg.canonical.replace(f"seed = {cfg.get('seed')}\n", f"seed = {args.seed}\n")
        cfg = parse_config(text)
    run_experiment(cfg, args.out)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "refer": _cmd_refer,
    "attack": _cmd_attack,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CalshiftError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
