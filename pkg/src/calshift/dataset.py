"""Labeled feature-vector datasets and deterministic splitting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .seeding import make_rng

MODES = ("dense-real", "binary-drebin-like")
UNLABELED = -1


@dataclass
class LabeledDataset:
    """Feature matrix with binary labels (1 = malicious, 0 = benign).

    ``labels`` uses -1 for unlabeled rows (the ``?`` marker on disk).
    ``months`` is an optional per-row time index for temporal sets.
    ``meta`` carries provenance (generator name, seed, config digest).
    """

    features: np.ndarray
    labels: np.ndarray
    ids: list[str]
    months: np.ndarray | None = None
    mode: str = "dense-real"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigurationError("features must be a 2-D array")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.features),):
            raise ConfigurationError("labels length must match features")
        if not np.isin(self.labels, (0, 1, UNLABELED)).all():
            raise ConfigurationError("labels must be 0, 1 or -1 (unlabeled)")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "binary-drebin-like":
            if not np.isin(self.features, (0.0, 1.0)).all():
                raise ConfigurationError("binary mode requires 0/1 features")
        if len(self.ids) != len(self.features):
            raise ConfigurationError("ids length must match features")
        if self.months is not None:
            self.months = np.asarray(self.months, dtype=np.int64)
            if self.months.shape != (len(self.features),):
                raise ConfigurationError("months length must match features")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool((self.labels != UNLABELED).all()) and len(self) > 0

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx],
            months=None if self.months is None else self.months[idx],
            mode=self.mode,
            meta=dict(self.meta),
        )

    def with_meta(self, **extra) -> "LabeledDataset":
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in extra.items()})
        return replace(self, meta=meta)


@dataclass
class SplitData:
    """Train/validation/test partition of one dataset."""

    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def split_dataset(
    ds: LabeledDataset,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitData:
    """Shuffle and partition ``ds`` into train/val/test by ``fractions``.

    Fractions must be positive and sum to 1 within 1e-9. The shuffle is
    determined by ``seed`` alone.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigurationError("need three positive split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must sum to 1 within 1e-9")
    n = len(ds)
    if n < 3:
        raise ConfigurationError("dataset too small to split three ways")
    perm = make_rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    return SplitData(
        train=ds.subset(perm[:n_train]),
        val=ds.subset(perm[n_train : n_train + n_val]),
        test=ds.subset(perm[n_train + n_val :]),
    )
