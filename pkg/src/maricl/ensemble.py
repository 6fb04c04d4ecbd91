"""Zero-LLM inference: compiled corrections, query-aware gating, aggregation.

A trained ensemble is a base model plus retained mechanisms, each carrying a
global score p_k, its high-residual evidence pool (frozen stats, D95) and,
for classification, a softmax temperature. Prediction is arithmetic plus
nearest-neighbor lookups; no provider is ever touched.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .basemodels import (BaseModel, FrozenModel, LinearModel, LogisticModel,
                         SchemaError)
from .data import (CLASSIFICATION, REGRESSION, Dataset, ResolvedSplit,
                   ScalerStats, apply_scaler, expected_calibration_error,
                   metrics)
from .formula import (EXP_CLAMP, FormulaAst, evaluate_per_row,
                      format_mechanism_block, parse, read_mechanism_file,
                      sigmoid, write_mechanism_file)
from .residuals import HighResidualPool, query_distance

log = logging.getLogger(__name__)

GAMMA_DEFAULT = 2.0
P_MIN_DEFAULT = 0.1
TAU_SCALE = 0.2                      # regression p_k scale vs target range
BETA_GRID = (0.3, 0.5, 0.7)
TAU_K_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class Mechanism:
    """Retained correction: explanation text plus compiled formula(s)."""

    agent_id: int
    explanation: str
    formula_texts: tuple[str, ...]   # 1 entry (regression) or C entries
    asts: tuple[FormulaAst, ...]
    p: float                         # global performance score
    pool: HighResidualPool
    tau_k: float = 1.0
    selected_iteration: int = 0


@dataclass(frozen=True)
class EnsembleModel:
    base_model: BaseModel
    mechanisms: tuple[Mechanism, ...]
    task: str
    feature_names: tuple[str, ...]          # names formulas are written in
    source_feature_names: tuple[str, ...]   # original input schema
    scaler: ScalerStats                      # raw input -> model space
    output_bounds: tuple[float, float]
    beta: float = 0.5
    gamma: float = GAMMA_DEFAULT
    tau: float = TAU_SCALE
    p_min: float = P_MIN_DEFAULT
    num_classes: Optional[int] = None

    def replace(self, **kw) -> "EnsembleModel":
        return dataclasses.replace(self, **kw)

    @property
    def delta_bounds(self) -> tuple[float, float]:
        # corrections are residual-scale: symmetric band of the target width
        lo, hi = self.output_bounds
        width = hi - lo
        return (-width, width)


@dataclass(frozen=True)
class Prediction:
    values: Optional[np.ndarray]            # regression
    probs: Optional[np.ndarray]             # classification (N, C)
    alphas: np.ndarray                      # (N, K) attention weights
    deltas: Optional[np.ndarray]            # (N, K) per-mechanism corrections
    fallback: np.ndarray                    # (N,) bool


def default_output_bounds(train_targets: np.ndarray) -> tuple[float, float]:
    lo, hi = float(train_targets.min()), float(train_targets.max())
    if 0.0 <= lo and hi <= 1.0:
        return (0.0, 1.0)                   # the scaled-target convention
    return (lo, hi)


def global_score(mechanism_asts: Sequence[FormulaAst], base_model: BaseModel,
                 x: np.ndarray, y: np.ndarray, task: str,
                 tau: float, beta: float = 0.5,
                 output_bounds: tuple[float, float] = (0.0, 1.0),
                 tau_k: float = 1.0,
                 num_classes: Optional[int] = None,
                 row_ids: Optional[np.ndarray] = None) -> float:
    """Train-split quality score p_k of one mechanism.

    Regression: exp(-MAE/tau) of the corrected predictor at full weight.
    Classification: macro-F1 of the beta-blended predictor. A rejected
    evaluation scores 0 (the mechanism gets filtered).
    """
    if task == REGRESSION:
        vals, finite = evaluate_per_row(mechanism_asts[0], x)
        if not finite.all():
            return 0.0
        lo, hi = output_bounds
        width = hi - lo
        delta = np.clip(vals, -width, width)
        pred = np.clip(base_model.predict(x, row_ids=row_ids) + delta, lo, hi)
        mae = float(np.abs(y - pred).mean())
        return float(math.exp(-mae / tau))
    q = mechanism_class_probs(mechanism_asts, x, tau_k)
    if q is None:
        return 0.0
    p_ml = base_model.predict_proba(x, row_ids=row_ids)
    blend = beta * p_ml + (1.0 - beta) * q
    rep = metrics(y, probs=blend, task=CLASSIFICATION,
                  num_classes=num_classes)
    return float(rep.macro_f1)


def confidence(pool: HighResidualPool, x: np.ndarray,
               gamma: float = GAMMA_DEFAULT) -> np.ndarray:
    """Query-specific confidence c = sigmoid(gamma * (1 - d(x)))."""
    d = query_distance(pool, x)
    return sigmoid(np.asarray(gamma * (1.0 - d)))


def attention(p: np.ndarray, c: np.ndarray,
              p_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized attention weights and the fallback mask.

    alpha_k = p_k * c_k * 1[p_k > p_min] / Z per query; queries with Z = 0
    fall back to the base model.
    """
    p = np.asarray(p, dtype=np.float64)
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    keep = (p > p_min).astype(np.float64)
    weights = c * (p * keep)
    z = weights.sum(axis=1)
    fallback = z <= 0.0
    safe_z = np.where(fallback, 1.0, z)
    alphas = weights / safe_z[:, None]
    alphas[fallback] = 0.0
    return alphas, fallback


def _model_space(model: EnsembleModel, matrix: np.ndarray) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != len(model.source_feature_names):
        raise SchemaError(
            f"input has {x.shape[1]} columns, bundle expects "
            f"{len(model.source_feature_names)}")
    return apply_scaler(model.scaler, x)


def _mechanism_confidences(model: EnsembleModel,
                           x_model: np.ndarray) -> np.ndarray:
    if not model.mechanisms:
        return np.zeros((x_model.shape[0], 0))
    return np.column_stack([confidence(m.pool, x_model, model.gamma)
                            for m in model.mechanisms])


def predict_regression(model: EnsembleModel, matrix: np.ndarray,
                       row_ids: Optional[np.ndarray] = None) -> Prediction:
    """y_hat = f_ML(x) + sum_k alpha_k(x) * Delta_k(x), clipped to bounds.

    A mechanism whose formula goes non-finite on some query has its
    confidence zeroed for that query only; surviving weights renormalize.
    """
    x = _model_space(model, matrix)
    n = x.shape[0]
    base = model.base_model.predict(x, row_ids=row_ids)
    k = len(model.mechanisms)
    if k == 0:
        lo, hi = model.output_bounds
        return Prediction(values=np.clip(base, lo, hi), probs=None,
                          alphas=np.zeros((n, 0)), deltas=np.zeros((n, 0)),
                          fallback=np.ones(n, dtype=bool))
    dlo, dhi = model.delta_bounds
    deltas = np.zeros((n, k))
    conf = _mechanism_confidences(model, x)
    for j, mech in enumerate(model.mechanisms):
        vals, finite = evaluate_per_row(mech.asts[0], x)
        if not finite.all():
            log.info("mechanism %d rejected on %d/%d queries",
                     mech.agent_id, int((~finite).sum()), n)
        conf[:, j] = np.where(finite, conf[:, j], 0.0)
        deltas[:, j] = np.where(finite, np.clip(vals, dlo, dhi), 0.0)
    p = np.array([m.p for m in model.mechanisms])
    alphas, fallback = attention(p, conf, model.p_min)
    lo, hi = model.output_bounds
    values = np.clip(base + (alphas * deltas).sum(axis=1), lo, hi)
    return Prediction(values=values, probs=None, alphas=alphas,
                      deltas=deltas, fallback=fallback)


def _stable_softmax(scores: np.ndarray, tau_k: float) -> np.ndarray:
    z = scores / tau_k
    z = z - z.max(axis=1, keepdims=True)
    z = np.clip(z, -EXP_CLAMP, EXP_CLAMP)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mechanism_class_probs(asts: Sequence[FormulaAst], x: np.ndarray,
                          tau_k: float) -> Optional[np.ndarray]:
    """Temperature-scaled softmax over per-class formula scores.

    Returns None when any per-class formula rejects (batch-level rule)."""
    if tau_k <= 0:
        raise ValueError("tau_k must be > 0")
    cols = []
    for ast in asts:
        vals, finite = evaluate_per_row(ast, x)
        if not finite.all():
            return None
        cols.append(vals)
    return _stable_softmax(np.column_stack(cols), tau_k)


def predict_classification(model: EnsembleModel, matrix: np.ndarray,
                           row_ids: Optional[np.ndarray] = None) -> Prediction:
    """P = beta * P_ML + (1 - beta) * sum_k alpha_k * Q_k (simplex by
    construction; fallback rows use P_ML alone)."""
    x = _model_space(model, matrix)
    n = x.shape[0]
    p_ml = model.base_model.predict_proba(x, row_ids=row_ids)
    k = len(model.mechanisms)
    if k == 0:
        return Prediction(values=None, probs=p_ml, alphas=np.zeros((n, 0)),
                          deltas=None, fallback=np.ones(n, dtype=bool))
    conf = _mechanism_confidences(model, x)
    qs = np.zeros((n, k, model.num_classes))
    for j, mech in enumerate(model.mechanisms):
        q = mechanism_class_probs(mech.asts, x, mech.tau_k)
        if q is None:
            log.info("mechanism %d rejected for this batch", mech.agent_id)
            conf[:, j] = 0.0
            qs[:, j, :] = 1.0 / model.num_classes
        else:
            qs[:, j, :] = q
    p = np.array([m.p for m in model.mechanisms])
    alphas, fallback = attention(p, conf, model.p_min)
    mix = (alphas[:, :, None] * qs).sum(axis=1)
    probs = model.beta * p_ml + (1.0 - model.beta) * mix
    probs[fallback] = p_ml[fallback]
    probs = probs / probs.sum(axis=1, keepdims=True)
    return Prediction(values=None, probs=probs, alphas=alphas, deltas=None,
                      fallback=fallback)


def predict(model: EnsembleModel, matrix: np.ndarray,
            row_ids: Optional[np.ndarray] = None) -> Prediction:
    if model.task == REGRESSION:
        return predict_regression(model, matrix, row_ids)
    return predict_classification(model, matrix, row_ids)


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels - 1], 1e-12, None)
    return float(-np.log(p).mean())


def tune(model: EnsembleModel, dataset: Dataset,
         split: ResolvedSplit) -> EnsembleModel:
    """Validation-grid selection of tau_k (min ECE) and beta (min CE).

    Regression ensembles have nothing to tune and pass through unchanged.
    Each mechanism's tau_k minimizes the ECE of its own beta-blended
    predictor (ties to the smallest grid value); beta then minimizes the
    full-ensemble validation cross-entropy. A degenerate validation slice
    (single class) pins tau_k at 1.0.
    """
    if model.task == REGRESSION or not model.mechanisms:
        return model
    idx = split.val
    if idx.size == 0:
        raise ValueError("tune() needs a nonempty validation split")
    x = apply_scaler(model.scaler, dataset.features[idx])
    labels = dataset.labels()[idx]
    p_ml = model.base_model.predict_proba(x, row_ids=idx)

    degenerate = len(np.unique(labels)) < 2
    new_mechs = []
    for mech in model.mechanisms:
        if degenerate:
            log.warning("single-class validation slice; tau_k defaults to 1.0")
            new_mechs.append(dataclasses.replace(mech, tau_k=1.0))
            continue
        best = None
        for tk in TAU_K_GRID:
            q = mechanism_class_probs(mech.asts, x, tk)
            if q is None:
                continue
            blend = model.beta * p_ml + (1.0 - model.beta) * q
            blend = blend / blend.sum(axis=1, keepdims=True)
            ece = expected_calibration_error(blend, labels)
            if best is None or ece < best[0] - 1e-12:
                best = (ece, tk)
        tau_k = best[1] if best else 1.0
        new_mechs.append(dataclasses.replace(mech, tau_k=tau_k))
    tuned = model.replace(mechanisms=tuple(new_mechs))

    best_beta = None
    for beta in BETA_GRID:
        candidate = tuned.replace(beta=beta)
        probs = predict_classification(candidate, dataset.features[idx],
                                       row_ids=idx).probs
        ce = _cross_entropy(probs, labels)
        if best_beta is None or ce < best_beta[0] - 1e-12:
            best_beta = (ce, beta)
    return tuned.replace(beta=best_beta[1])


# ---------------------------------------------------------------------------
# bundle persistence


def _scaler_to_json(s: ScalerStats) -> dict:
    return {"kind": s.kind, "location": s.location.tolist(),
            "scale": s.scale.tolist(), "constant": s.constant.tolist(),
            "fitted_on": s.fitted_on}


def _scaler_from_json(d: dict) -> ScalerStats:
    return ScalerStats(kind=d["kind"], location=np.array(d["location"]),
                       scale=np.array(d["scale"]),
                       constant=np.array(d["constant"], dtype=bool),
                       fitted_on=d["fitted_on"])


def _base_to_json(m: BaseModel) -> dict:
    if isinstance(m, LinearModel):
        return {"kind": m.kind, "coef": m.coef.tolist(),
                "intercept": m.intercept,
                "feature_names": list(m.feature_names),
                "ridge_lambda": m.ridge_lambda}
    if isinstance(m, LogisticModel):
        return {"kind": "logistic", "weights": m.weights.tolist(),
                "bias": m.bias.tolist(),
                "feature_names": list(m.feature_names),
                "num_classes": m.num_classes}
    if isinstance(m, FrozenModel):
        return {"kind": "frozen-predictions",
                "predictions": {str(k): v for k, v in m.predictions.items()},
                "probs": {str(k): v.tolist() for k, v in m.probs.items()}
                if m.probs else None,
                "task": m.task, "num_classes": m.num_classes,
                "feature_names": list(m.feature_names),
                "provenance": m.provenance}
    raise TypeError(f"unsupported base model {type(m)!r}")


def _base_from_json(d: dict) -> BaseModel:
    kind = d["kind"]
    if kind in ("linear", "ridge"):
        return LinearModel(kind=kind, coef=np.array(d["coef"]),
                           intercept=d["intercept"],
                           feature_names=tuple(d["feature_names"]),
                           ridge_lambda=d.get("ridge_lambda", 0.0))
    if kind == "logistic":
        return LogisticModel(weights=np.array(d["weights"]),
                             bias=np.array(d["bias"]),
                             feature_names=tuple(d["feature_names"]),
                             num_classes=d["num_classes"])
    if kind == "frozen-predictions":
        probs = d.get("probs")
        return FrozenModel(
            predictions={int(k): v for k, v in d["predictions"].items()},
            probs={int(k): np.array(v) for k, v in probs.items()}
            if probs else None,
            task=d["task"], num_classes=d.get("num_classes"),
            feature_names=tuple(d["feature_names"]),
            provenance=d.get("provenance", "frozen"))
    raise TypeError(f"unsupported base model kind {kind!r}")


def _pool_to_json(p: HighResidualPool) -> dict:
    return {"row_indices": p.row_indices.tolist(),
            "x_raw": p.x_raw.tolist(), "y": p.y.tolist(),
            "y_hat": p.y_hat.tolist(), "residuals": p.residuals.tolist(),
            "stats": _scaler_to_json(p.stats), "d95": p.d95,
            "sigma_s": p.sigma_s, "gamma_s": p.gamma_s}


def _pool_from_json(d: dict) -> HighResidualPool:
    stats = _scaler_from_json(d["stats"])
    x_raw = np.array(d["x_raw"], dtype=np.float64)
    return HighResidualPool(
        row_indices=np.array(d["row_indices"], dtype=np.intp),
        x_raw=x_raw, x_std=apply_scaler(stats, x_raw),
        y=np.array(d["y"]), y_hat=np.array(d["y_hat"]),
        residuals=np.array(d["residuals"]), stats=stats,
        d95=d["d95"], sigma_s=d["sigma_s"], gamma_s=d["gamma_s"])


def save_bundle(model: EnsembleModel, directory: str | Path) -> None:
    """Write mechanisms.txt plus model.json; loading is bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = [format_mechanism_block(m.explanation,
                                     m.formula_texts[0]
                                     if len(m.formula_texts) == 1
                                     else list(m.formula_texts))
              for m in model.mechanisms]
    write_mechanism_file(directory / "mechanisms.txt", blocks)
    meta = {
        "schema_version": 1,
        "task": model.task,
        "num_classes": model.num_classes,
        "feature_names": list(model.feature_names),
        "source_feature_names": list(model.source_feature_names),
        "scaler": _scaler_to_json(model.scaler),
        "output_bounds": list(model.output_bounds),
        "beta": model.beta, "gamma": model.gamma, "tau": model.tau,
        "p_min": model.p_min,
        "base_model": _base_to_json(model.base_model),
        "mechanisms": [{
            "agent_id": m.agent_id, "p": m.p, "tau_k": m.tau_k,
            "selected_iteration": m.selected_iteration,
            "pool": _pool_to_json(m.pool),
        } for m in model.mechanisms],
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=1))


def load_bundle(directory: str | Path) -> EnsembleModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    blocks = read_mechanism_file(directory / "mechanisms.txt") \
        if meta["mechanisms"] else []
    feature_names = tuple(meta["feature_names"])
    mechanisms = []
    for info, (explanation, formulas) in zip(meta["mechanisms"], blocks):
        texts = (formulas,) if isinstance(formulas, str) else tuple(formulas)
        asts = tuple(parse(t, feature_names) for t in texts)
        mechanisms.append(Mechanism(
            agent_id=info["agent_id"], explanation=explanation,
            formula_texts=texts, asts=asts, p=info["p"],
            pool=_pool_from_json(info["pool"]), tau_k=info["tau_k"],
            selected_iteration=info["selected_iteration"]))
    return EnsembleModel(
        base_model=_base_from_json(meta["base_model"]),
        mechanisms=tuple(mechanisms), task=meta["task"],
        feature_names=feature_names,
        source_feature_names=tuple(meta["source_feature_names"]),
        scaler=_scaler_from_json(meta["scaler"]),
        output_bounds=tuple(meta["output_bounds"]),
        beta=meta["beta"], gamma=meta["gamma"], tau=meta["tau"],
        p_min=meta["p_min"], num_classes=meta["num_classes"])
