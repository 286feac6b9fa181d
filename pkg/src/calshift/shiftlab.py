"""Synthetic data generation under shift, plus feature-space evasion.

Two feature families: dense real vectors from class-conditional
Gaussians, and sparse binary vectors from per-class Bernoulli activation
rates. Shift comes in three flavors: a different source (parameters
nudged along a fixed direction), temporal drift (malicious parameters
interpolate toward the benign ones month by month), and adversarial
perturbation (add-only feature flips against a surrogate detector).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .calib import CalibratedDetector, point_scores
from .dataset import LabeledDataset
from .errors import ConfigurationError, ModeError
from .seeding import make_rng, mix_seed


@dataclass
class GeneratorConfig:
    """Class-conditional sampling recipe.

    ``benign_params``/``malware_params`` are per-feature Bernoulli
    activation rates in binary mode, or Gaussian means (with shared
    ``feature_scale`` std) in dense mode. ``param_seed`` records how the
    parameters were derived and seeds the shift/drift directions.
    """

    dimension: int
    class_prior: float
    mode: str
    benign_params: np.ndarray
    malware_params: np.ndarray
    feature_scale: float = 1.0
    drift_rate: float | None = None
    drift_horizon: int | None = None
    param_seed: int = 0

    def __post_init__(self):
        if self.dimension < 2:
            raise ConfigurationError("dimension must be >= 2")
        if not 0.0 < self.class_prior < 1.0:
            raise ConfigurationError("class_prior must be in (0, 1)")
        if self.mode not in ("dense-real", "binary-drebin-like"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        self.benign_params = np.asarray(self.benign_params, dtype=np.float64)
        self.malware_params = np.asarray(self.malware_params, dtype=np.float64)
        for arr in (self.benign_params, self.malware_params):
            if arr.shape != (self.dimension,):
                raise ConfigurationError("class parameters must have shape (dimension,)")
        if self.mode == "binary-drebin-like":
            for arr in (self.benign_params, self.malware_params):
                if (arr < 0).any() or (arr > 1).any():
                    raise ConfigurationError("activation rates must lie in [0, 1]")
        if self.drift_rate is not None and self.drift_rate < 0:
            raise ConfigurationError("drift_rate must be non-negative")
        if self.drift_horizon is not None and self.drift_horizon < 1:
            raise ConfigurationError("drift_horizon must be >= 1")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(
            f"{self.dimension}|{self.class_prior}|{self.mode}|"
            f"{self.feature_scale}|{self.drift_rate}|{self.drift_horizon}|"
            f"{self.param_seed}|".encode()
        )
        h.update(self.benign_params.tobytes())
        h.update(self.malware_params.tobytes())
        return h.hexdigest()[:16]


def drebin_like_config(
    dimension: int = 1024,
    class_prior: float = 0.5,
    param_seed: int = 0,
    drift_rate: float | None = None,
    drift_horizon: int | None = None,
) -> GeneratorConfig:
    """Sparse binary recipe with benign- and malware-indicative features.

    Most features fire rarely for either class; one slice fires mainly
    for malware, another mainly for benign software, so detectors have
    signal and add-only attackers have benign evidence to inject.
    """
    rng = make_rng(param_seed, "drebin-params")
    base = rng.uniform(0.01, 0.05, size=dimension)
    benign = base.copy()
    malware = base.copy()
    k = max(dimension // 8, 1)
    idx = rng.permutation(dimension)
    mal_idx, ben_idx = idx[:k], idx[k : 2 * k]
    malware[mal_idx] = rng.uniform(0.25, 0.55, size=len(mal_idx))
    benign[mal_idx] = rng.uniform(0.0, 0.02, size=len(mal_idx))
    benign[ben_idx] = rng.uniform(0.25, 0.55, size=len(ben_idx))
    malware[ben_idx] = rng.uniform(0.0, 0.02, size=len(ben_idx))
    return GeneratorConfig(
        dimension=dimension,
        class_prior=class_prior,
        mode="binary-drebin-like",
        benign_params=benign,
        malware_params=malware,
        drift_rate=drift_rate,
        drift_horizon=drift_horizon,
        param_seed=param_seed,
    )


def dense_real_config(
    dimension: int = 16,
    class_prior: float = 0.5,
    param_seed: int = 0,
    separation: float = 1.0,
    drift_rate: float | None = None,
    drift_horizon: int | None = None,
) -> GeneratorConfig:
    """Two Gaussian blobs whose means differ by ``separation`` per axis
    on a random subset of coordinates."""
    rng = make_rng(param_seed, "dense-params")
    benign = rng.normal(0.0, 0.5, size=dimension)
    direction = rng.normal(0.0, 1.0, size=dimension)
    direction /= np.linalg.norm(direction) / np.sqrt(dimension)
    malware = benign + separation * direction
    return GeneratorConfig(
        dimension=dimension,
        class_prior=class_prior,
        mode="dense-real",
        benign_params=benign,
        malware_params=malware,
        drift_rate=drift_rate,
        drift_horizon=drift_horizon,
        param_seed=param_seed,
    )


# ---------------------------------------------------------------------------
# sampling

def _sample(cfg: GeneratorConfig, n: int, seed: int, generator_name: str,
            month: int | None = None) -> LabeledDataset:
    rng = make_rng(seed, "sample")
    labels = (rng.random(n) < cfg.class_prior).astype(np.int64)
    params = np.where(labels[:, None] == 1, cfg.malware_params, cfg.benign_params)
    if cfg.mode == "binary-drebin-like":
        features = (rng.random((n, cfg.dimension)) < params).astype(np.float64)
    else:
        features = params + cfg.feature_scale * rng.standard_normal((n, cfg.dimension))
    months = None if month is None else np.full(n, month, dtype=np.int64)
    meta = {
        "generator": generator_name,
        "seed": str(seed),
        "config_digest": cfg.digest(),
    }
    if month is not None:
        meta["month"] = str(month)
    return LabeledDataset(
        features=features,
        labels=labels,
        ids=[f"e{i:06d}" for i in range(n)],
        months=months,
        mode=cfg.mode,
        meta=meta,
    )


def gen_dataset(cfg: GeneratorConfig, n: int, seed: int) -> LabeledDataset:
    """Sample n examples from the base distribution; pure in (cfg, n, seed)."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    return _sample(cfg, n, seed, "gen_dataset")


def _shift_directions(cfg: GeneratorConfig):
    rng = make_rng(cfg.param_seed, "source-shift")
    u0 = rng.uniform(-1.0, 1.0, size=cfg.dimension)
    u1 = rng.uniform(-1.0, 1.0, size=cfg.dimension)
    return u0, u1


def shifted_config(cfg: GeneratorConfig, magnitude: float) -> GeneratorConfig:
    """Config with class parameters nudged along the fixed shift direction."""
    u0, u1 = _shift_directions(cfg)
    benign = cfg.benign_params + magnitude * u0
    malware = cfg.malware_params + magnitude * u1
    if cfg.mode == "binary-drebin-like":
        benign = np.clip(benign, 0.0, 1.0)
        malware = np.clip(malware, 0.0, 1.0)
    return replace(cfg, benign_params=benign, malware_params=malware)


def gen_out_of_source(cfg: GeneratorConfig, magnitude: float, n: int, seed: int) -> LabeledDataset:
    """Sample from a perturbed source; magnitude 0 degenerates to gen_dataset."""
    if magnitude < 0:
        raise ConfigurationError("magnitude must be non-negative")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    return _sample(shifted_config(cfg, magnitude), n, seed, "gen_out_of_source")


def _drift_directions(cfg: GeneratorConfig):
    rng = make_rng(cfg.param_seed, "temporal-drift")
    u0 = rng.uniform(-1.0, 1.0, size=cfg.dimension)
    u1 = rng.uniform(-1.0, 1.0, size=cfg.dimension)
    return u0, u1


def drifted_config(cfg: GeneratorConfig, step: int) -> GeneratorConfig:
    """Config after ``step`` drift steps: both class-conditional parameter
    vectors move linearly along a fixed random direction (drift_rate
    units per step, capped at the drift horizon), so later months fall in
    regions the base distribution never produced."""
    if cfg.drift_rate is None:
        raise ConfigurationError("drift is not configured")
    t = step if cfg.drift_horizon is None else min(step, cfg.drift_horizon)
    u0, u1 = _drift_directions(cfg)
    benign = cfg.benign_params + t * cfg.drift_rate * u0
    malware = cfg.malware_params + t * cfg.drift_rate * u1
    if cfg.mode == "binary-drebin-like":
        benign = np.clip(benign, 0.0, 1.0)
        malware = np.clip(malware, 0.0, 1.0)
    return replace(cfg, benign_params=benign, malware_params=malware)


def gen_temporal(cfg: GeneratorConfig, months: int, n_per_month: int, seed: int) -> list[LabeledDataset]:
    """One dataset per month 0..months-1 under the configured drift.

    Month t samples with the derived seed mix(seed, "month", t); month 0
    is distributed exactly as the base generator under that seed.
    """
    if cfg.drift_rate is None:
        raise ConfigurationError("drift is not configured")
    if months < 1 or n_per_month < 1:
        raise ConfigurationError("months and n_per_month must be >= 1")
    out = []
    for t in range(months):
        month_seed = mix_seed(seed, "month", t)
        out.append(_sample(drifted_config(cfg, t), n_per_month, month_seed,
                           "gen_temporal", month=t))
    return out


# ---------------------------------------------------------------------------
# feature-space attacks

@dataclass
class AttackBudget:
    """Add-only flip budget against a surrogate detector."""

    max_flips: int
    surrogate: CalibratedDetector
    direction: str = "add-only"

    def __post_init__(self):
        if self.max_flips < 0:
            raise ConfigurationError("max_flips must be non-negative")
        if self.direction != "add-only":
            raise ConfigurationError("only add-only perturbation is supported")


def _check_binary(x: np.ndarray):
    if not np.isin(x, (0.0, 1.0)).all():
        raise ModeError("attacks require binary feature vectors")


def attack_greedy_flip(x, budget: AttackBudget) -> np.ndarray:
    """Greedy add-only evasion: repeatedly set the absent feature whose
    flip most lowers the surrogate's malware score.

    Stops at the budget or as soon as no single flip strictly lowers the
    score; the score is therefore non-increasing over iterations and the
    Hamming distance to the input never exceeds max_flips.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    _check_binary(x)
    score = float(point_scores(budget.surrogate, x)[0])
    for _ in range(budget.max_flips):
        zeros = np.flatnonzero(x == 0.0)
        if len(zeros) == 0:
            break
        candidates = np.repeat(x[None, :], len(zeros), axis=0)
        candidates[np.arange(len(zeros)), zeros] = 1.0
        cand_scores = point_scores(budget.surrogate, candidates)
        k = int(np.argmin(cand_scores))
        if cand_scores[k] >= score:
            break
        x[zeros[k]] = 1.0
        score = float(cand_scores[k])
    return x


def attack_mimicry(x, benign_pool, budget: AttackBudget) -> np.ndarray:
    """Mimic the benign template that evades best under add-only merging.

    For each pool row, features present in the template but absent in x
    are added (in ascending index order when the budget truncates); the
    merged candidate with the lowest surrogate score wins, earliest pool
    row on ties.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_binary(x)
    pool = benign_pool.features if isinstance(benign_pool, LabeledDataset) else np.asarray(benign_pool, dtype=np.float64)
    pool = np.atleast_2d(pool)
    if len(pool) == 0:
        raise ConfigurationError("benign pool is empty")
    _check_binary(pool)
    if pool.shape[1] != x.shape[0]:
        raise ConfigurationError("pool dimension does not match the input")

    candidates = np.empty_like(pool)
    for i, template in enumerate(pool):
        merged = x.copy()
        additions = np.flatnonzero((template == 1.0) & (x == 0.0))
        merged[additions[: budget.max_flips]] = 1.0
        candidates[i] = merged
    scores = point_scores(budget.surrogate, candidates)
    return candidates[int(np.argmin(scores))].copy()


def attack_best_of(x, benign_pool, budget: AttackBudget) -> np.ndarray:
    """Per-example strongest of {greedy flips, mimicry} by surrogate score."""
    a = attack_greedy_flip(x, budget)
    b = attack_mimicry(x, benign_pool, budget)
    sa = float(point_scores(budget.surrogate, a)[0])
    sb = float(point_scores(budget.surrogate, b)[0])
    return a if sa <= sb else b


def attack_dataset(ds: LabeledDataset, budget: AttackBudget, method: str = "greedy",
                   benign_pool=None) -> LabeledDataset:
    """Apply an attack to every malicious row of ``ds``; benign rows are
    dropped (evasion only makes sense for malware)."""
    if ds.mode != "binary-drebin-like":
        raise ModeError("attacks require the binary feature mode")
    if method in ("mimicry", "max") and benign_pool is None:
        raise ConfigurationError(f"{method} attack needs a benign pool")
    mal = ds.subset(np.flatnonzero(ds.labels == 1))
    attacked = np.empty_like(mal.features)
    for i in range(len(mal)):
        if method == "greedy":
            attacked[i] = attack_greedy_flip(mal.features[i], budget)
        elif method == "mimicry":
            attacked[i] = attack_mimicry(mal.features[i], benign_pool, budget)
        elif method == "max":
            attacked[i] = attack_best_of(mal.features[i], benign_pool, budget)
        else:
            raise ConfigurationError(f"unknown attack method {method!r}")
    out = LabeledDataset(
        features=attacked,
        labels=mal.labels,
        ids=mal.ids,
        months=mal.months,
        mode=mal.mode,
        meta=dict(mal.meta),
    )
    return out.with_meta(attack=method, attack_budget=budget.max_flips)
