"""Detection and uncertainty metrics for binary probabilistic detectors.

Ground-truth metrics: NLL, BSE, ECE and their class-balanced variants
bNLL, bBSE, uECE (the balanced ones average per-class means so the
majority class cannot dominate). Label-free metrics: predictive entropy,
weighted standard deviation across ensemble members, and mean member-vs-
ensemble KL divergence. All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClassError, UndefinedMetricError

EPS = 1e-12
LN2 = math.log(2.0)

METRIC_ORDER = (
    "FNR", "FPR", "Acc", "bAcc", "F1",
    "NLL", "bNLL", "BSE", "bBSE", "ECE", "uECE",
)


def clamp_probs(p) -> np.ndarray:
    """Clamp probabilities into [EPS, 1-EPS] before any logarithm."""
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def _check_lengths(probs, truth):
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if probs.shape != truth.shape or probs.ndim != 1:
        raise ValueError("probs and truth must be equal-length 1-D arrays")
    if len(truth) == 0:
        raise ValueError("empty input")
    return probs, truth


# ---------------------------------------------------------------------------
# detection metrics

def detection_metrics(preds, truth) -> dict[str, float]:
    """FNR, FPR, Acc, bAcc, F1 with the malicious class (1) as positive.

    Rates conditioned on a class that is absent from ``truth`` are
    reported as NaN markers, never silently zero.
    """
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1 or len(truth) == 0:
        raise ValueError("preds and truth must be equal-length non-empty 1-D arrays")
    pos = truth == 1
    neg = truth == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    tp = int((preds[pos] == 1).sum())
    tn = int((preds[neg] == 0).sum())
    fn = n_pos - tp
    fp = n_neg - tn

    fnr = fn / n_pos if n_pos else math.nan
    fpr = fp / n_neg if n_neg else math.nan
    acc = (tp + tn) / len(truth)
    if n_pos and n_neg:
        bacc = ((tp / n_pos) + (tn / n_neg)) / 2.0
    else:
        bacc = math.nan
    if n_pos:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    else:
        f1 = math.nan
    return {"FNR": fnr, "FPR": fpr, "Acc": acc, "bAcc": bacc, "F1": f1}


# ---------------------------------------------------------------------------
# scoring rules

def _bce_terms(probs, truth):
    p = clamp_probs(probs)
    y = truth
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def nll(probs, truth) -> float:
    """Mean negative log-likelihood over all examples."""
    probs, truth = _check_lengths(probs, truth)
    return float(np.mean(_bce_terms(probs, truth)))


def bnll(probs, truth) -> float:
    """Per-class mean NLL averaged over the two classes."""
    probs, truth = _check_lengths(probs, truth)
    terms = _bce_terms(probs, truth)
    per_class = []
    for cls in (0, 1):
        mask = truth == cls
        if not mask.any():
            raise DegenerateClassError(f"class {cls} absent; bNLL undefined")
        per_class.append(float(np.mean(terms[mask])))
    return float(sum(per_class) / 2.0)


def bse(probs, truth) -> float:
    """Brier score: mean squared gap between label and probability."""
    probs, truth = _check_lengths(probs, truth)
    return float(np.mean((truth - probs) ** 2))


def bbse(probs, truth) -> float:
    """Per-class mean Brier score averaged over the two classes."""
    probs, truth = _check_lengths(probs, truth)
    sq = (truth - probs) ** 2
    per_class = []
    for cls in (0, 1):
        mask = truth == cls
        if not mask.any():
            raise DegenerateClassError(f"class {cls} absent; bBSE undefined")
        per_class.append(float(np.mean(sq[mask])))
    return float(sum(per_class) / 2.0)


# ---------------------------------------------------------------------------
# calibration error

@dataclass
class BinStats:
    """One probability bucket: interval (lower, upper], its occupancy,
    mean predicted probability and empirical positive fraction."""

    lower: float
    upper: float
    count: int
    conf: float
    frac_pos: float

    @property
    def gap(self) -> float:
        return abs(self.frac_pos - self.conf)


def bin_stats(probs, truth, S: int, mode: str = "equal-width") -> list[BinStats]:
    """Bucket probabilities into ``S`` bins and summarize each bucket.

    Bins are left-open right-closed and partition (0, 1]; the first bin
    additionally admits 0. ``equal-width`` places edges at s/S;
    ``quantile`` places edges at empirical quantiles (duplicates merged,
    outermost edges widened to 0 and 1 so the partition covers (0, 1]).
    """
    probs, truth = _check_lengths(probs, truth)
    if S < 1:
        raise ValueError("S must be >= 1")
    if mode == "equal-width":
        edges = np.linspace(0.0, 1.0, S + 1)
    elif mode == "quantile":
        edges = np.unique(np.quantile(probs, np.linspace(0.0, 1.0, S + 1)))
        if len(edges) < 2:
            edges = np.array([0.0, 1.0])
        else:
            edges = edges.copy()
            edges[0] = 0.0
            edges[-1] = 1.0
    else:
        raise ValueError(f"unknown bin mode {mode!r}")

    idx = np.searchsorted(edges, probs, side="left") - 1
    idx = np.clip(idx, 0, len(edges) - 2)  # first bin admits 0
    bins = []
    for s in range(len(edges) - 1):
        mask = idx == s
        count = int(mask.sum())
        if count:
            conf = float(np.mean(probs[mask]))
            frac = float(np.mean(truth[mask]))
        else:
            conf = math.nan
            frac = math.nan
        bins.append(BinStats(float(edges[s]), float(edges[s + 1]), count, conf, frac))
    return bins


def ece(bins: list[BinStats], N: int) -> float:
    """Calibration gap weighted by bucket occupancy count/N."""
    occupied = [b for b in bins if b.count > 0]
    if not occupied:
        raise UndefinedMetricError("all bins empty; ECE undefined")
    weights = np.array([b.count / N for b in occupied])
    gaps = np.array([b.gap for b in occupied])
    return float(np.dot(weights, gaps))


def uece(bins: list[BinStats]) -> float:
    """Calibration gap averaged uniformly over occupied buckets."""
    occupied = [b for b in bins if b.count > 0]
    if not occupied:
        raise UndefinedMetricError("all bins empty; uECE undefined")
    weights = np.full(len(occupied), 1.0 / len(occupied))
    gaps = np.array([b.gap for b in occupied])
    return float(np.dot(weights, gaps))


# ---------------------------------------------------------------------------
# label-free metrics over a predictive sample

def binary_entropy(p) -> np.ndarray | float:
    """Entropy of Bernoulli(p) in nats, clamped into [0, ln 2]."""
    p = clamp_probs(p)
    h = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    h = np.clip(h, 0.0, LN2)
    return float(h) if np.ndim(h) == 0 else h


def entropy(sample) -> float:
    """Predictive entropy of the sample's weighted mean probability."""
    return float(binary_entropy(sample.mean))


def sd(sample) -> float:
    """Weighted spread of member probabilities around the ensemble mean.

    Uses the T/(T-1) inflation factor as-is even for non-uniform weights.
    Undefined for a single member.
    """
    T = len(sample.member_probs)
    if T < 2:
        raise UndefinedMetricError("SD needs at least two members")
    m = sample.mean
    var = float(np.dot(sample.weights, (sample.member_probs - m) ** 2))
    return math.sqrt(T / (T - 1) * var)


def kl_disagreement(sample) -> float:
    """Weighted mean KL(member || ensemble mean) over Bernoulli outputs."""
    p = clamp_probs(sample.member_probs)
    q = float(clamp_probs(sample.mean))
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    kl = np.maximum(kl, 0.0)
    return float(np.dot(sample.weights, kl))


# ---------------------------------------------------------------------------
# combined report

@dataclass
class MetricReport:
    """Named metric values in the fixed order METRIC_ORDER.

    Metrics undefined on the given data (missing class) are NaN markers.
    """

    values: dict[str, float]

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def rows(self) -> list[tuple[str, float]]:
        return [(k, self.values[k]) for k in METRIC_ORDER]


def metric_report(probs, truth, S: int = 10, bin_mode: str = "equal-width") -> MetricReport:
    """All eleven detection + uncertainty metrics for mean probabilities.

    Class-balanced metrics fall back to NaN markers (instead of raising)
    when a class is absent, so single-class evaluation sets still yield a
    report.
    """
    probs, truth = _check_lengths(probs, truth)
    preds = (probs >= 0.5).astype(np.int64)
    out = dict(detection_metrics(preds, truth))
    out["NLL"] = nll(probs, truth)
    out["BSE"] = bse(probs, truth)
    both = bool((truth == 0).any() and (truth == 1).any())
    out["bNLL"] = bnll(probs, truth) if both else math.nan
    out["bBSE"] = bbse(probs, truth) if both else math.nan
    bins = bin_stats(probs, truth, S, bin_mode)
    out["ECE"] = ece(bins, len(truth))
    out["uECE"] = uece(bins)
    return MetricReport(values={k: out[k] for k in METRIC_ORDER})
