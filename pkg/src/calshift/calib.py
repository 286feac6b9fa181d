"""Six calibration strategies behind one predictive interface.

Every detector answers a query with a PredictiveSample: T member
probabilities plus simplex weights. Vanilla and temperature scaling are
single-pass (T=1); MC dropout and the variational detector draw T
stochastic forward passes; ensembles query T independently trained
members, uniformly or with weights fitted on validation NLL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nncore
from .dataset import SplitData
from .errors import ConfigurationError, DegenerateValidationError
from .metrics import clamp_probs
from .nncore import DropoutSpec, Model, TrainConfig, forward, forward_logit
from .seeding import make_rng, mix_seed

KINDS = ("vanilla", "temp-scaling", "mc-dropout", "vbi", "ensemble", "w-ensemble")
STOCHASTIC_KINDS = ("mc-dropout", "vbi")
ENSEMBLE_KINDS = ("ensemble", "w-ensemble")


@dataclass
class PredictiveSample:
    """T member probabilities with non-negative weights summing to 1."""

    member_probs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.member_probs = np.atleast_1d(np.asarray(self.member_probs, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if self.member_probs.shape != self.weights.shape or self.member_probs.ndim != 1:
            raise ConfigurationError("member_probs and weights must match 1-D shapes")
        if len(self.member_probs) < 1:
            raise ConfigurationError("need at least one member")
        if (self.weights < 0).any() or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("weights must be non-negative and sum to 1")

    @property
    def mean(self) -> float:
        w = self.weights
        # uniform weights reduce to the plain arithmetic mean, exactly
        if w.min() == w.max():
            return float(np.mean(self.member_probs))
        return float(np.dot(w, self.member_probs))


def uniform_weights(T: int) -> np.ndarray:
    return np.full(T, 1.0 / T)


@dataclass
class CalibratedDetector:
    """One of the six calibration strategies wrapped around MLP members."""

    kind: str
    members: list[Model]
    temperature: float | None = None
    weights: np.ndarray | None = None
    samples_per_prediction: int = 10
    member_seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown detector kind {self.kind!r}")
        if not self.members:
            raise ConfigurationError("detector needs at least one member")
        if (self.temperature is not None) != (self.kind == "temp-scaling"):
            raise ConfigurationError("temperature present iff kind is temp-scaling")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if (self.weights is not None) != (self.kind == "w-ensemble"):
            raise ConfigurationError("weights present iff kind is w-ensemble")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(self.members),):
                raise ConfigurationError("one weight per member required")
        if self.kind not in ENSEMBLE_KINDS and len(self.members) != 1:
            raise ConfigurationError(f"{self.kind} uses exactly one member")
        if self.samples_per_prediction < 1:
            raise ConfigurationError("samples_per_prediction must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim


# ---------------------------------------------------------------------------
# prediction

def apply_temperature(logits, temperature: float):
    """Sigmoid of logits divided by the temperature."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    return expit(np.asarray(logits, dtype=np.float64) / temperature)


def predict(det: CalibratedDetector, x, rng=None) -> PredictiveSample:
    """PredictiveSample for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if det.kind == "vanilla":
        return PredictiveSample([forward(det.members[0], x)], [1.0])
    if det.kind == "temp-scaling":
        logit = forward_logit(det.members[0], x)
        return PredictiveSample([float(apply_temperature(logit, det.temperature))], [1.0])
    if det.kind in STOCHASTIC_KINDS:
        if rng is None:
            rng = make_rng(0, "predict")
        T = det.samples_per_prediction
        probs = [forward(det.members[0], x, mode="train", rng=rng) for _ in range(T)]
        return PredictiveSample(probs, uniform_weights(T))
    probs = [forward(m, x) for m in det.members]
    if det.kind == "w-ensemble":
        return PredictiveSample(probs, det.weights.copy())
    return PredictiveSample(probs, uniform_weights(len(probs)))


def predict_dataset(det: CalibratedDetector, features, rng=None):
    """Member probabilities for a whole feature matrix.

    Returns (member_probs, weights) with member_probs of shape (n, T).
    Stochastic detectors draw one parameter/mask sample per pass, shared
    across the batch within that pass.
    """
    features = np.asarray(features, dtype=np.float64)
    if det.kind == "vanilla":
        probs = forward(det.members[0], features)[:, None]
        return probs, np.array([1.0])
    if det.kind == "temp-scaling":
        logits = forward_logit(det.members[0], features)
        return apply_temperature(logits, det.temperature)[:, None], np.array([1.0])
    if det.kind in STOCHASTIC_KINDS:
        if rng is None:
            rng = make_rng(0, "predict")
        T = det.samples_per_prediction
        cols = [forward(det.members[0], features, mode="train", rng=rng) for _ in range(T)]
        return np.stack(cols, axis=1), uniform_weights(T)
    cols = [forward(m, features) for m in det.members]
    probs = np.stack(cols, axis=1)
    if det.kind == "w-ensemble":
        return probs, det.weights.copy()
    return probs, uniform_weights(len(det.members))


def mean_probs(member_probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean over the member axis of an (n, T) matrix."""
    if weights.min() == weights.max():
        return member_probs.mean(axis=1)
    return member_probs @ weights


def point_scores(det: CalibratedDetector, features) -> np.ndarray:
    """Deterministic malware scores: eval-mode member mean.

    Used where a pure function of the inputs is required (attacks,
    surrogate scoring); stochastic detectors are collapsed to their
    deterministic eval pass.
    """
    features = np.asarray(np.atleast_2d(features), dtype=np.float64)
    if det.kind == "temp-scaling":
        return apply_temperature(forward_logit(det.members[0], features), det.temperature)
    cols = [forward(m, features) for m in det.members]
    probs = np.stack(cols, axis=1)
    w = det.weights if det.kind == "w-ensemble" else uniform_weights(len(det.members))
    return mean_probs(probs, w)


def decide(sample: PredictiveSample) -> int:
    """1 iff the weighted mean probability is >= 0.5 (inclusive)."""
    return int(sample.mean >= 0.5)


# ---------------------------------------------------------------------------
# post-hoc fitting

def _nll_from_logits(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    # stable BCE in logit space: softplus(z) - y*z
    return float(np.mean(np.logaddexp(0.0, z) - labels * z))


def fit_temperature(logits, labels) -> float:
    """Temperature minimizing validation NLL of sigmoid(logit / T).

    Deterministic: coarse log-spaced scan over [1e-2, 1e2] followed by
    golden-section refinement; the result never has higher NLL than T=1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape or logits.ndim != 1 or len(logits) == 0:
        raise ConfigurationError("logits and labels must be equal-length 1-D arrays")
    if not np.isfinite(logits).all():
        raise ConfigurationError("logits must be finite")
    if not ((labels == 1).any() and (labels == 0).any()):
        raise DegenerateValidationError("temperature fitting needs both classes")

    lo, hi = math.log(1e-2), math.log(1e2)
    grid = np.linspace(lo, hi, 201)
    vals = [_nll_from_logits(logits, labels, math.exp(t)) for t in grid]
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, len(grid) - 1)]

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _nll_from_logits(logits, labels, math.exp(c))
    fd = _nll_from_logits(logits, labels, math.exp(d))
    while b - a > 1e-6:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _nll_from_logits(logits, labels, math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _nll_from_logits(logits, labels, math.exp(d))
    t_star = math.exp((a + b) / 2.0)
    if _nll_from_logits(logits, labels, t_star) > _nll_from_logits(logits, labels, 1.0):
        t_star = 1.0
    return float(t_star)


def fit_ensemble_weights(members: list[Model], val) -> np.ndarray:
    """Simplex weights minimizing validation NLL of the weighted mean.

    Softmax-parameterized, uniform start, fixed-step gradient descent
    with a clipped step so the run is deterministic. A flat or symmetric
    objective leaves the weights exactly uniform.
    """
    if not members:
        raise ConfigurationError("need at least one member")
    if len(val) == 0 or not val.has_labels:
        raise ConfigurationError("weight fitting needs a labeled validation set")
    T = len(members)
    if T == 1:
        return np.array([1.0])

    probs = np.stack([forward(m, val.features) for m in members], axis=1)
    probs = clamp_probs(probs)
    y = val.labels.astype(np.float64)

    v = np.zeros(T)
    steps, lr = 1500, 0.2
    for _ in range(steps):
        w = np.exp(v - v.max())
        w /= w.sum()
        pbar = clamp_probs(probs @ w)
        dl_dpbar = -(y / pbar - (1.0 - y) / (1.0 - pbar)) / len(y)
        g_w = probs.T @ dl_dpbar
        g_v = w * (g_w - float(np.dot(w, g_w)))
        norm = float(np.linalg.norm(g_v))
        if norm == 0.0:
            break
        if norm > 10.0:
            g_v = g_v * (10.0 / norm)
        v = v - lr * g_v
    w = np.exp(v - v.max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# training

def member_seed(seed: int, index: int) -> int:
    """Per-member training seed derived from the detector seed."""
    return mix_seed(seed, "member", index)


def default_dropout(kind: str, rate: float = 0.4) -> DropoutSpec:
    """Dropout recipe per calibration kind.

    MC dropout masks the input of every layer and keeps masks on at
    prediction time; the plain kinds regularize with a mask before the
    output layer during training only; the variational detector relies
    on parameter sampling instead of dropout.
    """
    if kind == "mc-dropout":
        return DropoutSpec(rate=rate, placement="before-every-layer")
    if kind == "vbi":
        return DropoutSpec(rate=0.0)
    return DropoutSpec(rate=rate, placement="before-output-only")


def train_detector(
    kind: str,
    data: SplitData,
    cfg: TrainConfig,
    size: int = 10,
    hidden: tuple[int, ...] = (32, 32),
    dropout_rate: float = 0.4,
    samples_per_prediction: int = 10,
    prior_std: float = 1.0,
) -> CalibratedDetector:
    """Train the members a calibration kind requires and post-process.

    Ensemble kinds train ``size`` members from independently derived
    seeds; the other kinds train one. Temperature and ensemble weights
    are fitted on the validation split and never alter member
    parameters.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown detector kind {kind!r}")
    if size < 1:
        raise ConfigurationError("size must be >= 1")
    n_members = size if kind in ENSEMBLE_KINDS else 1
    dim = data.train.dimension
    dropout = default_dropout(kind, dropout_rate)

    members, seeds = [], []
    for i in range(n_members):
        seed_i = member_seed(cfg.seed, i)
        init = nncore.build_mlp(
            dim,
            hidden=hidden,
            dropout=dropout,
            bayesian=(kind == "vbi"),
            prior_std=prior_std,
            seed=seed_i,
        )
        member_cfg = TrainConfig(
            learning_rate=cfg.learning_rate,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            seed=seed_i,
            kl_weight=cfg.kl_weight,
            gradient_clip=cfg.gradient_clip,
        )
        members.append(nncore.train(init, data, member_cfg))
        seeds.append(seed_i)

    temperature = None
    weights = None
    if kind == "temp-scaling":
        logits = forward_logit(members[0], data.val.features)
        temperature = fit_temperature(logits, data.val.labels)
    elif kind == "w-ensemble":
        weights = fit_ensemble_weights(members, data.val)

    return CalibratedDetector(
        kind=kind,
        members=members,
        temperature=temperature,
        weights=weights,
        samples_per_prediction=samples_per_prediction,
        member_seeds=seeds,
    )
