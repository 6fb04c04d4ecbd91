"""Residual computation, high-residual pool selection, and distance machinery.

Distances live in standardized feature space with statistics frozen from the
train split; they never see validation or test rows. Pools are immutable and
the scoring/distance operations are pure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basemodels import BaseModel
from .data import (CLASSIFICATION, REGRESSION, DataError, Dataset,
                   ResolvedSplit, ScalerStats, apply_scaler, fit_scaler)

log = logging.getLogger(__name__)

DEFAULT_GAMMA_S = 1.0


@dataclass(frozen=True)
class ResidualTable:
    """Signed residuals on the train split, with the |r|-descending order."""

    row_indices: np.ndarray         # dataset row ids of the train split
    residuals: np.ndarray           # aligned with row_indices
    predictions: np.ndarray         # ŷ (regression) or true-class prob
    order: np.ndarray               # positions into row_indices, by -|r|

    def __post_init__(self):
        for name in ("row_indices", "residuals", "predictions", "order"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class HighResidualPool:
    """Top-|r| training rows plus frozen distance-space statistics."""

    row_indices: np.ndarray         # dataset row ids, |r|-descending
    x_raw: np.ndarray               # raw features of the pool rows
    x_std: np.ndarray               # standardized features (frozen stats)
    y: np.ndarray
    y_hat: np.ndarray
    residuals: np.ndarray
    stats: ScalerStats              # standardization frozen on train
    d95: float                      # nearest-rank 95th pct of pairwise dists
    sigma_s: float                  # median pairwise distance
    gamma_s: float = DEFAULT_GAMMA_S

    def __post_init__(self):
        for name in ("row_indices", "x_raw", "x_std", "y", "y_hat",
                     "residuals"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return len(self.row_indices)


def residuals(model: BaseModel, dataset: Dataset,
              split: ResolvedSplit) -> ResidualTable:
    """Signed base-model residuals on the train split.

    Regression: r = y - f(x). Classification: r = 1[misclassified] * (1 -
    P(true class)), so confidently wrong rows rank highest and correct rows
    contribute zero.
    """
    idx = split.train
    x = dataset.features[idx]
    if dataset.task == REGRESSION:
        if model.task != REGRESSION:
            raise DataError("model/dataset task mismatch")
        y_hat = model.predict(x, row_ids=idx)
        r = dataset.targets[idx] - y_hat
    else:
        if model.task != CLASSIFICATION:
            raise DataError("model/dataset task mismatch")
        labels = dataset.labels()[idx]
        probs = model.predict_proba(x, row_ids=idx)
        preds = probs.argmax(axis=1) + 1
        true_p = probs[np.arange(len(labels)), labels - 1]
        r = (preds != labels) * (1.0 - true_p)
        y_hat = true_p
    order = np.lexsort((idx, -np.abs(r)))
    return ResidualTable(row_indices=idx, residuals=r, predictions=y_hat,
                         order=order)


def select_pool(table: ResidualTable, kappa: float, dataset: Dataset,
                split: ResolvedSplit,
                gamma_s: float = DEFAULT_GAMMA_S,
                stats: Optional[ScalerStats] = None) -> HighResidualPool:
    """Top-kappa fraction of train rows by |r| (ties by ascending row id).

    Pool size is max(1, floor(kappa * N_train)). Standardization statistics
    are fitted on the full train split and frozen into the pool; D95 is the
    nearest-rank 95th percentile of within-pool pairwise distances and
    sigma_s the median pairwise distance.
    """
    if not 0.0 < kappa <= 1.0:
        raise DataError(f"kappa must be in (0, 1], got {kappa}")
    n_train = len(table.row_indices)
    size = max(1, int(np.floor(kappa * n_train)))
    take = table.order[:size]
    rows = table.row_indices[take]

    if stats is None:
        stats = fit_scaler(dataset, split, "standardize")
    x_raw = dataset.features[rows]
    x_std = apply_scaler(stats, x_raw)
    y = dataset.targets[rows]
    r = table.residuals[take]
    y_hat = table.predictions[take]

    if size >= 2:
        diffs = x_std[:, None, :] - x_std[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=2))
        iu = np.triu_indices(size, k=1)
        pairwise = np.sort(dist[iu])
        rank = max(int(np.ceil(0.95 * len(pairwise))) - 1, 0)
        d95 = float(pairwise[rank])
        sigma_s = float(np.median(pairwise))
        if d95 <= 0.0:
            log.warning("degenerate pool (identical points); forcing D95 = 1")
            d95 = 1.0
    else:
        d95 = 1.0
        sigma_s = 0.0
    return HighResidualPool(row_indices=rows, x_raw=x_raw, x_std=x_std, y=y,
                            y_hat=y_hat, residuals=r, stats=stats, d95=d95,
                            sigma_s=sigma_s, gamma_s=gamma_s)


def query_distance(pool: HighResidualPool, x: np.ndarray) -> np.ndarray:
    """Normalized distance d = min(d_tilde / D95, 1) per query row.

    d_tilde is the minimum standardized Euclidean distance to any pool
    member; 0 on pool members themselves, 1 on far queries.
    """
    if pool.size == 0:
        raise DataError("empty pool")
    q = np.asarray(x, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    q_std = apply_scaler(pool.stats, q)
    diffs = q_std[:, None, :] - pool.x_std[None, :, :]
    d_tilde = np.sqrt((diffs ** 2).sum(axis=2)).min(axis=1)
    d = np.minimum(d_tilde / pool.d95, 1.0)
    return d[0] if single else d


def score_examples(pool: HighResidualPool, batch_size: int) -> list[np.ndarray]:
    """Greedy anchored batching of the pool for prompt construction.

    Repeats until the pool is exhausted: the unselected row with the largest
    |r| (ties by ascending row id) anchors a batch; remaining unselected rows
    score exp(-||x_anchor - x||^2 / (2 sigma_s^2)) * |r|^gamma_s and the top
    batch_size rows (anchor first) form the batch. Returns arrays of pool
    positions.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = pool.size
    sigma = pool.sigma_s
    if sigma <= 0.0 and n > 1:
        log.warning("sigma_s = 0 (identical pool points); kernel term := 1")
    absr = np.abs(pool.residuals)
    remaining = np.ones(n, dtype=bool)
    batches: list[np.ndarray] = []
    while remaining.any():
        cand = np.flatnonzero(remaining)
        # greedy top-residual seed; ties broken by ascending row id
        anchor = cand[np.lexsort((pool.row_indices[cand], -absr[cand]))[0]]
        if sigma > 0.0:
            sq = ((pool.x_std[cand] - pool.x_std[anchor]) ** 2).sum(axis=1)
            kernel = np.exp(-sq / (2.0 * sigma * sigma))
        else:
            kernel = np.ones(len(cand))
        scores = kernel * absr[cand] ** pool.gamma_s
        # anchor leads its batch; others by descending score, ties by position
        others = cand[cand != anchor]
        other_scores = scores[cand != anchor]
        order = others[np.lexsort((others, -other_scores))]
        batch = np.concatenate([[anchor], order])[:batch_size]
        batches.append(batch)
        remaining[batch] = False
    return batches


def pool_dump_csv(pool: HighResidualPool, path,
                  feature_names) -> None:
    """Write the high-residual table (x, y, y_hat, r), |r|-descending —
    the same rows the prompts see, for debugging."""
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_id", *feature_names, "y", "y_hat", "r"])
        for i in range(pool.size):
            writer.writerow([int(pool.row_indices[i]),
                             *[repr(float(v)) for v in pool.x_raw[i]],
                             repr(float(pool.y[i])),
                             repr(float(pool.y_hat[i])),
                             repr(float(pool.residuals[i]))])


def example_scores(pool: HighResidualPool, anchor: int) -> np.ndarray:
    """Kernel-times-residual scores of every pool row against one anchor."""
    sq = ((pool.x_std - pool.x_std[anchor]) ** 2).sum(axis=1)
    if pool.sigma_s > 0.0:
        kernel = np.exp(-sq / (2.0 * pool.sigma_s ** 2))
    else:
        kernel = np.ones(pool.size)
    return kernel * np.abs(pool.residuals) ** pool.gamma_s
