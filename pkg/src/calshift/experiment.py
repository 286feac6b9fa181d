"""Experiment configuration and the end-to-end report pipeline.

A config is a flat ``key = value`` text file (``#`` comments allowed);
the full key schema is documented in the README. ``run_experiment``
generates or loads data, trains the configured detector, evaluates on
the in-distribution test set plus any requested shifted/temporal/
adversarial sets, and writes a report bundle whose bytes depend only on
the config digest and the seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import __version__, dataio
from .calib import mean_probs, predict_dataset, train_detector
from .dataset import LabeledDataset, split_dataset
from .errors import CalshiftError, ConfigurationError, PipelineError
from .evalkit import (
    bootstrap_ci,
    default_tau_grid,
    entropy_histogram,
    referral_curve,
    reliability_data,
)
from .metrics import bin_stats, binary_entropy, metric_report
from .nncore import TrainConfig
from .seeding import make_rng, mix_seed
from .shiftlab import (
    AttackBudget,
    attack_dataset,
    drebin_like_config,
    dense_real_config,
    gen_dataset,
    gen_out_of_source,
    gen_temporal,
)

_DEFAULTS = {
    "seed": "7",
    "data.file": "",
    "gen.mode": "binary-drebin-like",
    "gen.dimension": "256",
    "gen.class_prior": "0.5",
    "gen.param_seed": "1",
    "gen.separation": "1.0",
    "gen.n": "2000",
    "split.train": "0.6",
    "split.val": "0.2",
    "split.test": "0.2",
    "detector.kind": "vanilla",
    "detector.size": "10",
    "detector.hidden": "32,32",
    "detector.dropout_rate": "0.4",
    "detector.samples": "10",
    "train.lr": "0.001",
    "train.epochs": "30",
    "train.batch": "16",
    "train.kl_weight": "1.0",
    "train.clip": "",
    "metrics.bins": "10",
    "metrics.bin_mode": "equal-width",
    "hist.bins": "20",
    "referral.points": "50",
    "bootstrap.reps": "1000",
    "bootstrap.level": "0.95",
    "shift.out_of_source": "",
    "shift.months": "",
    "shift.drift_rate": "",
    "shift.n_per_month": "500",
    "attack.method": "",
    "attack.budget": "20",
    "attack.n": "100",
    "emit.svg": "1",
}


@dataclass
class ExperimentConfig:
    """Parsed, validated experiment options plus the canonical text."""

    options: dict[str, str]
    canonical: str
    digest: str

    def get(self, key: str) -> str:
        return self.options[key]

    def get_int(self, key: str) -> int:
        return int(self.options[key])

    def get_float(self, key: str) -> float:
        return float(self.options[key])

    def get_opt_float(self, key: str) -> float | None:
        raw = self.options[key]
        return None if raw == "" else float(raw)

    def get_opt_int(self, key: str) -> int | None:
        raw = self.options[key]
        return None if raw == "" else int(raw)


def parse_config(text: str) -> ExperimentConfig:
    options = dict(_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        options[key] = value
    _validate(options)
    canonical = "\n".join(f"{k} = {options[k]}" for k in sorted(options)) + "\n"
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:16]
    return ExperimentConfig(options=options, canonical=canonical, digest=digest)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _validate(options: dict[str, str]) -> None:
    fractions = [float(options[k]) for k in ("split.train", "split.val", "split.test")]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be positive and sum to 1")
    if options["detector.kind"] not in ("vanilla", "temp-scaling", "mc-dropout", "vbi", "ensemble", "w-ensemble"):
        raise ConfigurationError(f"unknown detector.kind {options['detector.kind']!r}")
    if options["attack.method"] not in ("", "greedy", "mimicry", "max"):
        raise ConfigurationError(f"unknown attack.method {options['attack.method']!r}")
    if options["data.file"]:
        if not os.path.exists(options["data.file"]):
            raise ConfigurationError(f"data.file does not exist: {options['data.file']}")


# ---------------------------------------------------------------------------
# pipeline

def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, CalshiftError) and not isinstance(exc, PipelineError):
                raise PipelineError(f"stage {name!r}: {exc}") from exc
            return False

    return _Ctx()


def _generator_config(cfg: ExperimentConfig, drift_rate=None):
    mode = cfg.get("gen.mode")
    if mode == "binary-drebin-like":
        return drebin_like_config(
            dimension=cfg.get_int("gen.dimension"),
            class_prior=cfg.get_float("gen.class_prior"),
            param_seed=cfg.get_int("gen.param_seed"),
            drift_rate=drift_rate,
        )
    return dense_real_config(
        dimension=cfg.get_int("gen.dimension"),
        class_prior=cfg.get_float("gen.class_prior"),
        param_seed=cfg.get_int("gen.param_seed"),
        separation=cfg.get_float("gen.separation"),
        drift_rate=drift_rate,
    )


def _evaluate_set(cfg: ExperimentConfig, det, ds: LabeledDataset, out_dir: str,
                  seed: int, name: str, referral: bool = True) -> dict:
    """Predictions, metric report, tables, and intervals for one test set."""
    rng = make_rng(seed, "predict", name)
    member, weights = predict_dataset(det, ds.features, rng)
    means = mean_probs(member, weights)
    preds = (means >= 0.5).astype(np.int64)
    prov = {"config_digest": cfg.digest, "seed": seed, "set": name}

    os.makedirs(out_dir, exist_ok=True)
    dataio.save_predictions(ds.ids, member, weights,
                            os.path.join(out_dir, "predictions.csv"), prov)

    S = cfg.get_int("metrics.bins")
    bin_mode = cfg.get("metrics.bin_mode")
    report = metric_report(means, ds.labels, S=S, bin_mode=bin_mode)
    dataio.metrics_to_csv(report, os.path.join(out_dir, "metrics.csv"), prov)
    dataio.metrics_to_json(report, os.path.join(out_dir, "metrics.json"), prov)

    bins = bin_stats(means, ds.labels, S, bin_mode)
    dataio.bins_to_csv(bins, os.path.join(out_dir, "bins.csv"), prov)
    rel = reliability_data(bins)
    dataio.reliability_to_csv(rel, os.path.join(out_dir, "reliability.csv"), prov)

    hist = entropy_histogram(means, bins=cfg.get_int("hist.bins"))
    dataio.histogram_to_csv(hist, os.path.join(out_dir, "entropy_hist.csv"), prov)

    emit_svg = cfg.get("emit.svg") == "1"
    if emit_svg:
        dataio.reliability_svg(rel, os.path.join(out_dir, "reliability.svg"), prov)

    if referral:
        curve = referral_curve(means, ds.labels, default_tau_grid(cfg.get_int("referral.points")))
        dataio.referral_to_csv(curve, os.path.join(out_dir, "referral.csv"), prov)
        if emit_svg:
            dataio.referral_svg(curve, os.path.join(out_dir, "referral.svg"), prov)

    intervals = []
    reps = cfg.get_int("bootstrap.reps")
    level = cfg.get_float("bootstrap.level")
    ci_seed = mix_seed(seed, "bootstrap", name)
    intervals.append(("Acc", bootstrap_ci((preds, ds.labels), "Acc", reps, level, ci_seed)))
    if (ds.labels == 0).any() and (ds.labels == 1).any():
        intervals.append(("bAcc", bootstrap_ci((preds, ds.labels), "bAcc", reps, level, ci_seed)))
    dataio.intervals_to_csv(intervals, os.path.join(out_dir, "intervals.csv"), prov)

    return {
        "set": name,
        "n": len(ds),
        "Acc": report["Acc"],
        "bNLL": None if math.isnan(report["bNLL"]) else report["bNLL"],
        "mean_entropy": float(np.mean(binary_entropy(means))),
    }


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run the configured pipeline and write a report bundle.

    Bundle layout: config.txt, manifest.json, data/, detector/, and one
    reports/<set>/ directory per evaluated test set.
    """
    seed = cfg.get_int("seed")
    os.makedirs(out_dir, exist_ok=True)
    dataio.atomic_write_text(os.path.join(out_dir, "config.txt"), cfg.canonical)

    run_meta = {"run_config_digest": cfg.digest, "run_seed": seed}
    summaries = []
    with _stage("data"):
        if cfg.get("data.file"):
            base = dataio.load_dataset(cfg.get("data.file"))
            gen_cfg = None
        else:
            gen_cfg = _generator_config(cfg)
            base = gen_dataset(gen_cfg, cfg.get_int("gen.n"), mix_seed(seed, "base"))
            dataio.save_dataset(base.with_meta(**run_meta),
                                os.path.join(out_dir, "data", "base.csv"))

    with _stage("split"):
        fractions = (
            cfg.get_float("split.train"),
            cfg.get_float("split.val"),
            cfg.get_float("split.test"),
        )
        data = split_dataset(base, fractions, mix_seed(seed, "split"))

    with _stage("train"):
        clip = cfg.get_opt_float("train.clip")
        train_cfg = TrainConfig(
            learning_rate=cfg.get_float("train.lr"),
            epochs=cfg.get_int("train.epochs"),
            batch_size=cfg.get_int("train.batch"),
            seed=mix_seed(seed, "detector"),
            kl_weight=cfg.get_float("train.kl_weight"),
            gradient_clip=clip,
        )
        hidden = tuple(int(h) for h in cfg.get("detector.hidden").split(",") if h)
        det = train_detector(
            cfg.get("detector.kind"),
            data,
            train_cfg,
            size=cfg.get_int("detector.size"),
            hidden=hidden,
            dropout_rate=cfg.get_float("detector.dropout_rate"),
            samples_per_prediction=cfg.get_int("detector.samples"),
        )
        dataio.save_detector(det, os.path.join(out_dir, "detector"))

    with _stage("evaluate:test"):
        summaries.append(
            _evaluate_set(cfg, det, data.test, os.path.join(out_dir, "reports", "test"), seed, "test")
        )

    oos = cfg.get_opt_float("shift.out_of_source")
    if oos is not None and gen_cfg is not None:
        with _stage("shift:out-of-source"):
            shifted = gen_out_of_source(gen_cfg, oos, len(data.test), mix_seed(seed, "oos"))
            dataio.save_dataset(shifted.with_meta(**run_meta),
                                os.path.join(out_dir, "data", "out_of_source.csv"))
            summaries.append(
                _evaluate_set(cfg, det, shifted, os.path.join(out_dir, "reports", "out_of_source"), seed, "out_of_source")
            )

    months = cfg.get_opt_int("shift.months")
    drift = cfg.get_opt_float("shift.drift_rate")
    if months is not None and gen_cfg is not None:
        with _stage("shift:temporal"):
            if drift is None:
                raise ConfigurationError("shift.months requires shift.drift_rate")
            drift_cfg = _generator_config(cfg, drift_rate=drift)
            series = gen_temporal(drift_cfg, months + 1, cfg.get_int("shift.n_per_month"), mix_seed(seed, "temporal"))
            for t, month_ds in enumerate(series):
                dataio.save_dataset(month_ds.with_meta(**run_meta),
                                    os.path.join(out_dir, "data", f"month_{t:02d}.csv"))
                summaries.append(
                    _evaluate_set(
                        cfg, det, month_ds,
                        os.path.join(out_dir, "reports", f"month_{t:02d}"),
                        seed, f"month_{t:02d}",
                    )
                )

    method = cfg.get("attack.method")
    if method:
        with _stage(f"attack:{method}"):
            if base.mode != "binary-drebin-like":
                raise ConfigurationError("attacks require binary-drebin-like data")
            mal_idx = np.flatnonzero(data.test.labels == 1)[: cfg.get_int("attack.n")]
            clean = data.test.subset(mal_idx)
            budget = AttackBudget(max_flips=cfg.get_int("attack.budget"), surrogate=det)
            benign_pool = data.train.subset(np.flatnonzero(data.train.labels == 0))
            attacked = attack_dataset(clean, budget, method=method, benign_pool=benign_pool)
            dataio.save_dataset(attacked.with_meta(**run_meta),
                                os.path.join(out_dir, "data", f"attack_{method}.csv"))
            summaries.append(
                _evaluate_set(cfg, det, clean, os.path.join(out_dir, "reports", "attack_clean"), seed, "attack_clean", referral=False)
            )
            summaries.append(
                _evaluate_set(cfg, det, attacked, os.path.join(out_dir, "reports", f"attack_{method}"), seed, f"attack_{method}", referral=False)
            )

    with _stage("report"):
        manifest = {
            "format": "calshift-run-v1",
            "version": __version__,
            "config_digest": cfg.digest,
            "seed": seed,
            "detector_kind": cfg.get("detector.kind"),
            "sets": summaries,
        }
        dataio.atomic_write_text(
            os.path.join(out_dir, "manifest.json"),
            json.dumps(manifest, sort_keys=True, indent=1),
        )
    return manifest
