"""Pluggable base predictors anchoring the correction pipeline.

Native kinds: linear (least squares), ridge, logistic (multinomial,
L-BFGS to gradient norm < 1e-6 or 10k iterations). Externally trained
models plug in through FrozenPredictions keyed by row id.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .data import CLASSIFICATION, REGRESSION, DataError, Dataset, ResolvedSplit

log = logging.getLogger(__name__)

RIDGE_DEFAULT_LAMBDA = 1e-3
LOGISTIC_L2 = 1e-4
LOGISTIC_GTOL = 1e-6
LOGISTIC_MAXITER = 10_000


class SchemaError(DataError):
    """Prediction input does not match the training schema."""


@dataclass(frozen=True)
class LinearModel:
    kind: str                       # linear | ridge
    coef: np.ndarray                # (d,)
    intercept: float
    feature_names: tuple[str, ...]
    ridge_lambda: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coef, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "coef", c)

    @property
    def task(self) -> str:
        return REGRESSION

    @property
    def feature_importance(self) -> np.ndarray:
        return np.abs(self.coef)

    def predict(self, matrix: np.ndarray,
                row_ids: Optional[np.ndarray] = None) -> np.ndarray:
        x = _check_matrix(matrix, self.feature_names)
        return x @ self.coef + self.intercept

    def knowledge_digest(self) -> str:
        pairs = ", ".join(f"{n}={c:+.4g}"
                          for n, c in zip(self.feature_names, self.coef))
        return (f"{self.kind} model: intercept {self.intercept:+.4g}; "
                f"coefficients {pairs}")


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray             # (C, d)
    bias: np.ndarray                # (C,)
    feature_names: tuple[str, ...]
    num_classes: int

    def __post_init__(self):
        for name in ("weights", "bias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def kind(self) -> str:
        return "logistic"

    @property
    def task(self) -> str:
        return CLASSIFICATION

    @property
    def feature_importance(self) -> np.ndarray:
        return np.abs(self.weights).mean(axis=0)

    def predict_proba(self, matrix: np.ndarray,
                      row_ids: Optional[np.ndarray] = None) -> np.ndarray:
        x = _check_matrix(matrix, self.feature_names)
        logits = x @ self.weights.T + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, matrix: np.ndarray,
                row_ids: Optional[np.ndarray] = None) -> np.ndarray:
        return self.predict_proba(matrix).argmax(axis=1) + 1

    def knowledge_digest(self) -> str:
        imp = ", ".join(f"{n}={v:.4g}" for n, v
                        in zip(self.feature_names, self.feature_importance))
        return f"logistic model mean |weight| per feature: {imp}"


@dataclass(frozen=True)
class FrozenModel:
    """Externally produced predictions, keyed by row id."""

    predictions: dict[int, float]
    probs: Optional[dict[int, np.ndarray]]
    task: str
    num_classes: Optional[int]
    feature_names: tuple[str, ...]
    provenance: str = "frozen"

    @property
    def kind(self) -> str:
        return "frozen-predictions"

    @property
    def feature_importance(self) -> np.ndarray:
        return np.zeros(len(self.feature_names))

    def _rows(self, matrix: np.ndarray,
              row_ids: Optional[np.ndarray]) -> np.ndarray:
        n = np.asarray(matrix).shape[0]
        ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
        missing = [int(i) for i in ids if int(i) not in self.predictions]
        if missing:
            raise SchemaError(f"frozen predictions missing row id(s) "
                              f"{missing[:5]}{'...' if len(missing) > 5 else ''}")
        return ids

    def predict(self, matrix: np.ndarray,
                row_ids: Optional[np.ndarray] = None) -> np.ndarray:
        ids = self._rows(matrix, row_ids)
        return np.array([self.predictions[int(i)] for i in ids])

    def predict_proba(self, matrix: np.ndarray,
                      row_ids: Optional[np.ndarray] = None) -> np.ndarray:
        if self.probs is None:
            raise SchemaError("frozen model carries no probabilities")
        ids = self._rows(matrix, row_ids)
        return np.vstack([self.probs[int(i)] for i in ids])

    def knowledge_digest(self) -> str:
        return f"frozen external predictor ({self.provenance})"


BaseModel = LinearModel | LogisticModel | FrozenModel


def _check_matrix(matrix: np.ndarray,
                  feature_names: tuple[str, ...]) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != len(feature_names):
        raise SchemaError(f"matrix has {x.shape[1]} columns, model expects "
                          f"{len(feature_names)}")
    return x


def _fit_linear(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    n, d = x.shape
    if lam > 0:
        # center so the intercept is unpenalised
        xm, ym = x.mean(axis=0), y.mean()
        xc, yc = x - xm, y - ym
        coef = np.linalg.solve(xc.T @ xc + lam * np.eye(d), xc.T @ yc)
        return coef, float(ym - xm @ coef)
    aug = np.column_stack([x, np.ones(n)])
    sol, _, rank, _ = np.linalg.lstsq(aug, y, rcond=None)
    if rank < d + 1:
        log.info("singular design; using the minimum-norm least-squares "
                 "solution")
    return sol[:-1], float(sol[-1])


def _fit_logistic(x: np.ndarray, labels: np.ndarray,
                  num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    n, d = x.shape
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels - 1] = 1.0

    def unpack(theta):
        w = theta[: num_classes * d].reshape(num_classes, d)
        b = theta[num_classes * d:]
        return w, b

    def nll_grad(theta):
        w, b = unpack(theta)
        logits = x @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        p = expl / expl.sum(axis=1, keepdims=True)
        loss = -np.log(np.clip(p[np.arange(n), labels - 1], 1e-300, None)).mean()
        loss += LOGISTIC_L2 * float((w ** 2).sum())
        g = (p - onehot) / n
        gw = g.T @ x + 2 * LOGISTIC_L2 * w
        gb = g.sum(axis=0)
        return loss, np.concatenate([gw.ravel(), gb])

    theta0 = np.zeros(num_classes * (d + 1))
    res = minimize(nll_grad, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": LOGISTIC_MAXITER, "gtol": LOGISTIC_GTOL,
                            "ftol": 0.0})
    w, b = unpack(res.x)
    gnorm = float(np.abs(nll_grad(res.x)[1]).max())
    if gnorm > LOGISTIC_GTOL:
        log.info("logistic fit stopped at gradient norm %.2e after %d "
                 "iterations", gnorm, res.nit)
    return w, b


def fit(kind: str, dataset: Dataset, split: ResolvedSplit,
        ridge_lambda: Optional[float] = None) -> BaseModel:
    """Train a base model on the train split."""
    idx = split.train
    if idx.size == 0:
        raise DataError("empty train split")
    x, y = dataset.features[idx], dataset.targets[idx]
    if kind in ("linear", "ridge"):
        if dataset.task != REGRESSION:
            raise DataError(f"{kind} base model is regression-only")
        lam = 0.0 if kind == "linear" else (
            RIDGE_DEFAULT_LAMBDA if ridge_lambda is None else ridge_lambda)
        coef, intercept = _fit_linear(x, y, lam)
        return LinearModel(kind=kind, coef=coef, intercept=intercept,
                           feature_names=dataset.feature_names,
                           ridge_lambda=lam)
    if kind == "logistic":
        if dataset.task != CLASSIFICATION:
            raise DataError("logistic base model is classification-only")
        labels = y.astype(int)
        if len(np.unique(labels)) < 2:
            raise DataError("logistic fit needs >= 2 classes present")
        w, b = _fit_logistic(x, labels, dataset.num_classes)
        return LogisticModel(weights=w, bias=b,
                             feature_names=dataset.feature_names,
                             num_classes=dataset.num_classes)
    raise DataError(f"unknown base model kind {kind!r}")


def load_frozen(path: str | Path, task: str,
                feature_names: tuple[str, ...],
                num_classes: Optional[int] = None,
                provenance: Optional[str] = None) -> FrozenModel:
    """Read a frozen-predictions CSV: row_id, prediction[, prob_1..prob_C]."""
    path = Path(path)
    preds: dict[int, float] = {}
    probs: dict[int, np.ndarray] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty frozen-predictions file")
        has_probs = len(header) > 2
        for row in reader:
            rid = int(row[0])
            preds[rid] = float(row[1])
            if has_probs:
                p = np.array([float(v) for v in row[2:]])
                if abs(p.sum() - 1.0) > 1e-6:
                    raise DataError(f"{path}: row {rid} probs sum to "
                                    f"{p.sum():.6f}")
                probs[rid] = p
    if task == CLASSIFICATION and not probs:
        raise DataError(f"{path}: classification frozen model needs "
                        "prob_1..prob_C columns")
    return FrozenModel(predictions=preds, probs=probs or None, task=task,
                       num_classes=num_classes, feature_names=feature_names,
                       provenance=provenance or str(path))


def frozen_from_arrays(row_ids: np.ndarray, predictions: np.ndarray,
                       task: str, feature_names: tuple[str, ...],
                       probs: Optional[np.ndarray] = None,
                       num_classes: Optional[int] = None,
                       provenance: str = "frozen") -> FrozenModel:
    table = {int(i): float(p) for i, p in zip(row_ids, predictions)}
    ptable = None
    if probs is not None:
        ptable = {int(i): np.asarray(row, dtype=np.float64)
                  for i, row in zip(row_ids, probs)}
    return FrozenModel(predictions=table, probs=ptable, task=task,
                       num_classes=num_classes, feature_names=feature_names,
                       provenance=provenance)
