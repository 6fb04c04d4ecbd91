"""Datasets, splits, scalers, and evaluation metrics.

Everything downstream (base models, residual pools, the ensemble) consumes the
types defined here. All containers are immutable after construction and all
operations are pure, so they can be shared freely across threads.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

REGRESSION = "regression"
CLASSIFICATION = "classification"

SCALER_KINDS = ("none", "standardize", "minmax01", "minmax010")

# output range of each minmax kind
_MINMAX_RANGE = {"minmax01": (0.0, 1.0), "minmax010": (0.01, 0.99)}


class DataError(ValueError):
    """Raised when a dataset violates its invariants or fails to load."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus targets.

    Classification labels are 1..num_classes. No NaN/Inf anywhere.
    """

    features: np.ndarray            # (N, d) float64
    feature_names: tuple[str, ...]
    targets: np.ndarray             # (N,) float64 or int labels in 1..C
    task: str
    num_classes: Optional[int] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise DataError("features must be a non-empty 2-D matrix")
        if not np.isfinite(feats).all():
            raise DataError("features contain NaN/Inf")
        if len(self.feature_names) != feats.shape[1]:
            raise DataError("feature_names length != number of columns")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature_names must be unique")
        tgts = np.asarray(self.targets, dtype=np.float64)
        if tgts.shape != (feats.shape[0],):
            raise DataError("targets length != number of rows")
        if not np.isfinite(tgts).all():
            raise DataError("targets contain NaN/Inf")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise DataError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION:
            if not self.num_classes or self.num_classes < 2:
                raise DataError("classification requires num_classes >= 2")
            labs = tgts.astype(int)
            if not np.array_equal(labs, tgts):
                raise DataError("classification targets must be integer labels")
            if labs.min() < 1 or labs.max() > self.num_classes:
                raise DataError("labels must lie in 1..num_classes")
        feats.setflags(write=False)
        tgts.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", tgts)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def labels(self) -> np.ndarray:
        """Integer class labels (classification only)."""
        return self.targets.astype(int)

    def rename_features(self, names: Sequence[str]) -> "Dataset":
        return Dataset(self.features, tuple(names), self.targets, self.task,
                       self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    """Requested split: fractions, seed and strategy."""

    train_frac: float = 0.8
    val_frac: float = 0.0
    test_frac: float = 0.2
    seed: int = 0
    strategy: str = "random"        # random | quantile
    q_bins: int = 5

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"split fractions sum to {total}, expected 1")
        if self.strategy not in ("random", "quantile"):
            raise DataError(f"unknown split strategy {self.strategy!r}")
        if self.strategy == "quantile" and self.q_bins < 2:
            raise DataError("quantile strategy needs q_bins >= 2")

    @property
    def active_splits(self) -> int:
        return sum(1 for f in (self.train_frac, self.val_frac, self.test_frac)
                   if f > 0)


@dataclass(frozen=True)
class ResolvedSplit:
    """Disjoint index sets covering the dataset."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    spec: SplitSpec

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.intp)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    # floor each split, hand the remainder to train
    n_val = int(np.floor(n * spec.val_frac))
    n_test = int(np.floor(n * spec.test_frac))
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def make_split(dataset: Dataset, spec: SplitSpec) -> ResolvedSplit:
    """Resolve a split spec into disjoint covering index sets.

    Deterministic for a fixed (dataset, spec): the RNG is seeded from
    spec.seed only. The quantile strategy bins the targets and splits each
    bin with the same fractions, so quantile membership is balanced across
    splits within one sample per bin.
    """
    n = dataset.n_rows
    rng = np.random.default_rng(spec.seed)

    if spec.strategy == "quantile":
        if dataset.task != REGRESSION:
            raise DataError("quantile-stratified splits are regression-only")
        edges = np.quantile(dataset.targets,
                            np.linspace(0, 1, spec.q_bins + 1)[1:-1])
        bin_ids = np.searchsorted(edges, dataset.targets, side="right")
        groups = [np.flatnonzero(bin_ids == b) for b in range(spec.q_bins)]
        groups = [g for g in groups if g.size]
    else:
        groups = [np.arange(n)]

    parts: list[list[np.ndarray]] = [[], [], []]
    for g in groups:
        if len(groups) > 1 and g.size < spec.active_splits:
            log.warning("quantile bin with %d samples < %d splits; "
                        "assigning randomly within the bin",
                        g.size, spec.active_splits)
        perm = rng.permutation(g)
        n_tr, n_va, _ = _split_counts(g.size, spec)
        parts[0].append(perm[:n_tr])
        parts[1].append(perm[n_tr:n_tr + n_va])
        parts[2].append(perm[n_tr + n_va:])

    train, val, test = (np.sort(np.concatenate(p)) if p else
                        np.empty(0, dtype=np.intp) for p in parts)
    return ResolvedSplit(train=train, val=val, test=test, spec=spec)


@dataclass(frozen=True)
class ScalerStats:
    """Frozen per-feature transform parameters fitted on one split."""

    kind: str
    location: np.ndarray            # means or mins (value for constant cols)
    scale: np.ndarray               # stds or ranges; 1 for constant cols
    constant: np.ndarray            # bool mask of degenerate columns
    fitted_on: str = "train"

    def __post_init__(self):
        if self.kind not in SCALER_KINDS:
            raise DataError(f"unknown scaler kind {self.kind!r}")
        for name in ("location", "scale", "constant"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if (np.asarray(self.scale) <= 0).any():
            raise DataError("scaler scale entries must be > 0")


def fit_scaler(dataset: Dataset, split: ResolvedSplit, kind: str,
               which: str = "train") -> ScalerStats:
    """Fit scaler statistics on one split (train unless stated otherwise).

    standardize uses the population std (divide by N). Constant columns get
    location=value, scale=1; standardize maps them to 0 and the minmax kinds
    to the midpoint of their output range.
    """
    idx = getattr(split, which)
    if idx.size == 0:
        raise DataError(f"cannot fit scaler on empty {which} split")
    x = dataset.features[idx]
    if kind == "none":
        d = dataset.n_features
        return ScalerStats("none", np.zeros(d), np.ones(d),
                           np.zeros(d, dtype=bool), which)
    if kind == "standardize":
        loc = x.mean(axis=0)
        scale = x.std(axis=0)               # population convention
    elif kind in _MINMAX_RANGE:
        loc = x.min(axis=0)
        scale = x.max(axis=0) - loc
    else:
        raise DataError(f"unknown scaler kind {kind!r}")
    const = scale <= 0
    if const.any():
        log.info("scaler: %d constant column(s) pinned", int(const.sum()))
        loc = np.where(const, x[0], loc)
        scale = np.where(const, 1.0, scale)
    return ScalerStats(kind, loc, scale, const, which)


def apply_scaler(stats: ScalerStats, matrix: np.ndarray) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    if stats.kind == "none":
        return x.copy()
    z = (x - stats.location) / stats.scale
    if stats.kind == "standardize":
        return np.where(stats.constant, 0.0, z)
    lo, hi = _MINMAX_RANGE[stats.kind]
    out = lo + (hi - lo) * z
    return np.where(stats.constant, 0.5 * (lo + hi), out)


def invert_scaler(stats: ScalerStats, matrix: np.ndarray) -> np.ndarray:
    """Inverse transform; exact for minmax kinds (constant cols map back
    to their pinned value)."""
    z = np.asarray(matrix, dtype=np.float64)
    if stats.kind == "none":
        return z.copy()
    if stats.kind == "standardize":
        raw = z * stats.scale + stats.location
    else:
        lo, hi = _MINMAX_RANGE[stats.kind]
        raw = (z - lo) / (hi - lo) * stats.scale + stats.location
    return np.where(stats.constant, stats.location, raw)


@dataclass(frozen=True)
class MetricReport:
    r2: Optional[float] = None
    mae: Optional[float] = None
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    minority_f1: Optional[float] = None
    ece: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_res = float(((y_true - y_pred) ** 2).sum())
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        log.warning("R^2 with zero target variance; defining by residual")
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _per_class_f1(labels: np.ndarray, preds: np.ndarray,
                  num_classes: int) -> np.ndarray:
    f1 = np.zeros(num_classes)
    for c in range(1, num_classes + 1):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        f1[c - 1] = 2 * tp / denom if denom else 0.0
    return f1


def expected_calibration_error(probs: np.ndarray, labels: np.ndarray,
                               n_bins: int = 10) -> float:
    """ECE over equal-width max-prob confidence bins."""
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1)
    preds = probs.argmax(axis=1) + 1
    correct = (preds == labels).astype(np.float64)
    ece = 0.0
    n = len(labels)
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        mask = (conf > lo) & (conf <= hi) if b else (conf >= lo) & (conf <= hi)
        if mask.any():
            ece += abs(correct[mask].mean() - conf[mask].mean()) * mask.sum() / n
    return float(ece)


def metrics(y_true: np.ndarray, y_pred: Optional[np.ndarray] = None,
            probs: Optional[np.ndarray] = None, task: str = REGRESSION,
            num_classes: Optional[int] = None) -> MetricReport:
    """Task-appropriate metric report.

    Regression: R^2 and MAE. Classification: accuracy, macro-F1, minority-F1
    (F1 of the rarest true class) and, when probabilities are given, 10-bin
    ECE. Classification predictions default to argmax of probs.
    """
    y_true = np.asarray(y_true)
    if task == REGRESSION:
        if y_pred is None:
            raise DataError("regression metrics need y_pred")
        if len(y_pred) != len(y_true):
            raise DataError("length mismatch")
        mae = float(np.abs(y_true - y_pred).mean())
        return MetricReport(r2=r_squared(y_true, y_pred), mae=mae)

    if num_classes is None:
        raise DataError("classification metrics need num_classes")
    labels = y_true.astype(int)
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(labels), num_classes):
            raise DataError("probs shape mismatch")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise DataError("probability rows must sum to 1")
        if y_pred is None:
            y_pred = probs.argmax(axis=1) + 1
    if y_pred is None:
        raise DataError("classification metrics need y_pred or probs")
    preds = np.asarray(y_pred).astype(int)
    if len(preds) != len(labels):
        raise DataError("length mismatch")
    acc = float((preds == labels).mean())
    f1 = _per_class_f1(labels, preds, num_classes)
    counts = np.bincount(labels, minlength=num_classes + 1)[1:]
    present = np.flatnonzero(counts)
    minority = int(present[np.argmin(counts[present])]) if present.size else 0
    report = MetricReport(
        accuracy=acc,
        macro_f1=float(f1.mean()),
        minority_f1=float(f1[minority - 1]) if minority else None,
        ece=expected_calibration_error(probs, labels) if probs is not None
        else None,
    )
    return report


def load_csv(path: str | Path, task: Optional[str] = None,
             num_classes: Optional[int] = None,
             sidecar: Optional[str | Path] = None) -> Dataset:
    """Load a dataset CSV: header row of feature names, last column = target.

    Task kind / class count come from arguments or a sidecar JSON
    ({"task": ..., "num_classes": ...}); the sidecar defaults to the CSV path
    with a .json suffix. Missing values are rejected.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: need a header with >= 2 columns")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        mat = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric or missing cell ({exc})") from exc
    if mat.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")

    if task is None:
        side = Path(sidecar) if sidecar else path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
            task = meta.get("task", REGRESSION)
            num_classes = meta.get("num_classes", num_classes)
        else:
            task = REGRESSION
    return Dataset(features=mat[:, :-1], feature_names=tuple(header[:-1]),
                   targets=mat[:, -1], task=task, num_classes=num_classes)


def save_csv(dataset: Dataset, path: str | Path,
             target_name: str = "target") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dataset.feature_names) + [target_name])
        for x, y in zip(dataset.features, dataset.targets):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])
