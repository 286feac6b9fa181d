"""Decision referral, reliability tables, and bootstrap intervals.

Referral sweeps score only the examples whose predictive entropy stays
at or below a threshold tau; metrics that are undefined on the retained
subset (empty set, or a missing class for balanced accuracy) are NaN
markers, never zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .metrics import LN2, BinStats, binary_entropy, detection_metrics
from .seeding import make_rng


def default_tau_grid(points: int = 50) -> np.ndarray:
    """Evenly spaced entropy thresholds spanning [0, ln 2]."""
    return np.linspace(0.0, LN2, points)


@dataclass
class ReferralCurve:
    taus: np.ndarray
    retained: np.ndarray   # int counts
    coverage: np.ndarray
    acc: np.ndarray        # NaN where undefined
    bacc: np.ndarray

    def rows(self):
        for i in range(len(self.taus)):
            yield (
                float(self.taus[i]),
                int(self.retained[i]),
                float(self.coverage[i]),
                float(self.acc[i]),
                float(self.bacc[i]),
            )


def _sample_arrays(samples):
    from .calib import PredictiveSample  # local import to avoid cycle

    if len(samples) and isinstance(samples[0], PredictiveSample):
        return np.array([s.mean for s in samples])
    return np.asarray(samples, dtype=np.float64)


def referral_from_arrays(entropies, preds, truth, taus) -> ReferralCurve:
    entropies = np.asarray(entropies, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    taus = np.asarray(taus, dtype=np.float64)
    if np.any(np.diff(taus) < 0):
        raise ValueError("taus must be sorted ascending")
    n = len(truth)
    retained = np.zeros(len(taus), dtype=np.int64)
    acc = np.full(len(taus), math.nan)
    bacc = np.full(len(taus), math.nan)
    for i, tau in enumerate(taus):
        keep = entropies <= tau
        retained[i] = int(keep.sum())
        if retained[i] == 0:
            continue
        m = detection_metrics(preds[keep], truth[keep])
        acc[i] = m["Acc"]
        bacc[i] = m["bAcc"]
    return ReferralCurve(
        taus=taus,
        retained=retained,
        coverage=retained / n,
        acc=acc,
        bacc=bacc,
    )


def referral_curve(samples, truth, taus=None) -> ReferralCurve:
    """Accuracy/balanced accuracy on the subset with entropy <= tau.

    ``samples`` may be PredictiveSamples or raw mean probabilities.
    """
    means = _sample_arrays(samples)
    if taus is None:
        taus = default_tau_grid()
    entropies = binary_entropy(means)
    preds = (means >= 0.5).astype(np.int64)
    return referral_from_arrays(entropies, preds, truth, taus)


def entropy_histogram(samples, bins: int = 20):
    """(interval, count, density) rows over [0, ln 2].

    Densities integrate to one over the entropy range.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    means = _sample_arrays(samples)
    entropies = binary_entropy(np.atleast_1d(means))
    edges = np.linspace(0.0, LN2, bins + 1)
    counts, _ = np.histogram(entropies, bins=edges)
    width = LN2 / bins
    density = counts / (len(entropies) * width)
    return [
        ((float(edges[i]), float(edges[i + 1])), int(counts[i]), float(density[i]))
        for i in range(bins)
    ]


def reliability_data(bins: list[BinStats]):
    """(mean confidence, positive fraction, count) per occupied bin.

    Empty bins are omitted; the diagonal conf == frac_pos is the
    reference a calibrated detector should track.
    """
    return [(b.conf, b.frac_pos, b.count) for b in bins if b.count > 0]


# ---------------------------------------------------------------------------
# bootstrap

@dataclass
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    level: float
    repetitions: int

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")


_STATISTICS = ("Acc", "bAcc", "mean")


def _canonical(values, statistic):
    """Sort the input so the interval depends only on its multiset."""
    if statistic == "mean":
        arr = np.sort(np.asarray(values, dtype=np.float64))
        return arr, None
    preds, truth = values
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    order = np.lexsort((truth, preds))
    return preds[order], truth[order]


def _stat_value(statistic, a, b, idx=None):
    if idx is not None:
        a = a[idx]
        b = b[idx] if b is not None else None
    if statistic == "mean":
        return float(np.mean(a))
    m = detection_metrics(a, b)
    return m[statistic]


def bootstrap_ci(
    values,
    statistic: str = "mean",
    reps: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> ConfidenceInterval:
    """Percentile bootstrap interval, deterministic given the seed.

    ``values`` is a 1-D array for ``mean`` or a (preds, truth) pair for
    ``Acc``/``bAcc``. Resamples on which the statistic is undefined
    (single-class bAcc) are redrawn, capped at 10x reps redraws.
    """
    if statistic not in _STATISTICS:
        raise ValueError(f"statistic must be one of {_STATISTICS}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    a, b = _canonical(values, statistic)
    n = len(a)
    if n == 0:
        raise ValueError("empty input")
    point = _stat_value(statistic, a, b)
    if math.isnan(point):
        raise UndefinedMetricError(f"{statistic} undefined on the full input")

    rng = make_rng(seed, "bootstrap")
    stats = np.empty(reps)
    redraws = 0
    for r in range(reps):
        while True:
            idx = rng.integers(0, n, size=n)
            val = _stat_value(statistic, a, b, idx)
            if not math.isnan(val):
                break
            redraws += 1
            if redraws > 10 * reps:
                raise UndefinedMetricError(
                    f"{statistic} undefined on too many resamples"
                )
        stats[r] = val
    alpha = 1.0 - level
    lower = float(np.percentile(stats, 100.0 * alpha / 2.0))
    upper = float(np.percentile(stats, 100.0 * (1.0 - alpha / 2.0)))
    return ConfidenceInterval(
        point=point, lower=lower, upper=upper, level=level, repetitions=reps
    )
