"""Frozen-formula cross-plate transfer evaluation.

A plate is one experimental batch; cohorts group plates that share a data
regime. Formulas frozen from source-plate runs are re-evaluated numerically
on held-out target plates (no retraining, zero provider calls) and blended
with an ML baseline. Reported per (source, target) pair: MAE/R^2 deltas
versus ML-only, plus per-cohort aggregates.

Protocol per pair: the target plate splits 80/20 (quantile-stratified);
features and targets are scaled to [0.01, 0.99] with statistics from the
train split of whichever plate the ML model was trained on; formula outputs
are treated as absolute predictions of the scaled target, clipped to [0, 1];
the headline prediction is the 50/50 blend of the ML output and the mean
formula output.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (Dataset, REGRESSION, SplitSpec, apply_scaler,
                   fit_scaler, make_split, r_squared)
from .ensemble import EnsembleModel
from .formula import evaluate_per_row

log = logging.getLogger(__name__)

MODES = ("headline", "per_formula", "formula_only", "joint")


@dataclass(frozen=True)
class Plate:
    plate_id: str
    dataset: Dataset
    cohort: str


@dataclass(frozen=True)
class PlateSet:
    plates: tuple[Plate, ...]

    def __post_init__(self):
        schemas = {p.dataset.feature_names for p in self.plates}
        if len(schemas) > 1:
            raise ValueError("plates must share one feature schema")


@dataclass(frozen=True)
class SourceBundle:
    run_id: str
    source_plate: str
    cohort: str
    model: EnsembleModel
    delta_r2_vs_ml: float


@dataclass(frozen=True)
class TransferConfig:
    beta_transfer: float = 0.5
    filter_enabled: bool = True
    ml_source: str = "retrain"          # retrain | transfer
    mode: str = "headline"
    train_frac: float = 0.8
    q_bins: int = 5
    split_seed: int = 0
    residual_pilot: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta_transfer <= 1.0:
            raise ValueError("beta_transfer must be in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.ml_source not in ("retrain", "transfer"):
            raise ValueError("ml_source must be retrain or transfer "
                             "(explicit plate ids replace path sniffing)")


@dataclass(frozen=True)
class PairResult:
    run_id: str
    formula_index: Optional[int]        # None = averaged across mechanisms
    source_plate: str
    target_plate: str
    source_cohort: str
    target_cohort: str
    within_cohort: bool
    mae_ml: float
    mae_pred: float
    delta_mae: float                    # positive = transfer improves
    delta_r2: float
    improved: bool
    failed: bool = False


@dataclass
class TransferReport:
    results: list[PairResult]
    failed_evaluations: int
    config: TransferConfig

    def aggregate(self) -> dict:
        out = {}
        for label, flag in (("within", True), ("across", False)):
            rows = [r for r in self.results
                    if r.within_cohort is flag and not r.failed]
            out[label] = {
                "pairs": len(rows),
                "pct_improving": (100.0 * sum(r.improved for r in rows)
                                  / len(rows)) if rows else None,
                "mean_delta_mae": (float(np.mean([r.delta_mae for r in rows]))
                                   if rows else None),
                "mean_delta_r2": (float(np.mean([r.delta_r2 for r in rows]))
                                  if rows else None),
            }
        out["failed_evaluations"] = self.failed_evaluations
        out["mode"] = self.config.mode
        out["filter_enabled"] = self.config.filter_enabled
        return out


def _scale01(values: np.ndarray, stats_lo: float, stats_hi: float) -> np.ndarray:
    width = stats_hi - stats_lo
    if width <= 0:
        return np.full_like(values, 0.5)
    return 0.01 + 0.98 * (values - stats_lo) / width


def _formula_outputs(model: EnsembleModel, x_scaled: np.ndarray
                     ) -> list[Optional[np.ndarray]]:
    """Per-mechanism absolute predictions, clipped to [0, 1]; None when a
    formula rejects on this target."""
    outs: list[Optional[np.ndarray]] = []
    for mech in model.mechanisms:
        vals, finite = evaluate_per_row(mech.asts[0], x_scaled)
        outs.append(np.clip(vals, 0.0, 1.0) if finite.all() else None)
    return outs


def transfer_eval(plates: PlateSet, sources: Sequence[SourceBundle],
                  config: TransferConfig) -> TransferReport:
    """Evaluate every (source run, target plate) pair under one mode.

    Pairs whose formulas all reject on the target are recorded as failed
    evaluations and excluded from the improvement percentages.
    """
    kept = [s for s in sources
            if not config.filter_enabled or s.delta_r2_vs_ml > 0.0]
    dropped = len(sources) - len(kept)
    if dropped:
        log.info("source filter removed %d run(s) with delta_r2 <= 0", dropped)
    results: list[PairResult] = []
    failed = 0

    for plate in plates.plates:
        ds = plate.dataset
        if ds.task != REGRESSION:
            raise ValueError("transfer evaluation is regression-only")
        split = make_split(ds, SplitSpec(
            train_frac=config.train_frac, val_frac=0.0,
            test_frac=1.0 - config.train_frac, seed=config.split_seed,
            strategy="quantile", q_bins=config.q_bins))

        for src in kept:
            if tuple(src.model.source_feature_names) != ds.feature_names:
                raise ValueError(f"schema mismatch between run {src.run_id} "
                                 f"and plate {plate.plate_id}")
            # scaling statistics come from the ML-training plate's train split
            if config.ml_source == "retrain":
                scale_ds, scale_split = ds, split
            else:
                scale_plate = next((p for p in plates.plates
                                    if p.plate_id == src.source_plate), None)
                if scale_plate is None:
                    raise ValueError(f"source plate {src.source_plate} not in "
                                     "plate set (required for ml_source="
                                     "transfer)")
                scale_ds = scale_plate.dataset
                scale_split = make_split(scale_ds, SplitSpec(
                    train_frac=config.train_frac, val_frac=0.0,
                    test_frac=1.0 - config.train_frac,
                    seed=config.split_seed, strategy="quantile",
                    q_bins=config.q_bins))
            fstats = fit_scaler(scale_ds, scale_split, "minmax010")
            y_train_ref = scale_ds.targets[scale_split.train]
            ylo, yhi = float(y_train_ref.min()), float(y_train_ref.max())

            te = split.test
            x_te = apply_scaler(fstats, ds.features[te])
            y_te = _scale01(ds.targets[te], ylo, yhi)

            if config.ml_source == "retrain":
                scaled_train = apply_scaler(fstats, ds.features[split.train])
                y_tr = _scale01(ds.targets[split.train], ylo, yhi)
                aug = np.column_stack([scaled_train,
                                       np.ones(len(split.train))])
                w, *_ = np.linalg.lstsq(aug, y_tr, rcond=None)
                y_ml = np.column_stack([x_te, np.ones(len(te))]) @ w
            else:
                raw_pred = src.model.base_model.predict(
                    apply_scaler(src.model.scaler, ds.features[te]))
                y_ml = _scale01(raw_pred, ylo, yhi)

            mae_ml = float(np.abs(y_te - y_ml).mean())
            r2_ml = r_squared(y_te, y_ml)

            outputs = _formula_outputs(src.model, x_te)
            usable = [(i, o) for i, o in enumerate(outputs) if o is not None]
            if not usable:
                failed += 1
                results.append(PairResult(
                    run_id=src.run_id, formula_index=None,
                    source_plate=src.source_plate,
                    target_plate=plate.plate_id, source_cohort=src.cohort,
                    target_cohort=plate.cohort,
                    within_cohort=src.cohort == plate.cohort,
                    mae_ml=mae_ml, mae_pred=float("nan"),
                    delta_mae=float("nan"), delta_r2=float("nan"),
                    improved=False, failed=True))
                continue
            if len(usable) < len(outputs):
                log.info("run %s: %d formula(s) rejected on %s",
                         src.run_id, len(outputs) - len(usable),
                         plate.plate_id)

            def emit(pred: np.ndarray, formula_index: Optional[int]):
                mae_pred = float(np.abs(y_te - pred).mean())
                results.append(PairResult(
                    run_id=src.run_id, formula_index=formula_index,
                    source_plate=src.source_plate,
                    target_plate=plate.plate_id, source_cohort=src.cohort,
                    target_cohort=plate.cohort,
                    within_cohort=src.cohort == plate.cohort,
                    mae_ml=mae_ml, mae_pred=mae_pred,
                    delta_mae=mae_ml - mae_pred,
                    delta_r2=r_squared(y_te, pred) - r2_ml,
                    improved=mae_pred < mae_ml))

            beta = config.beta_transfer
            if config.mode == "headline":
                mean_f = np.mean([o for _, o in usable], axis=0)
                if config.residual_pilot:
                    y_bar = float(_scale01(y_train_ref, ylo, yhi).mean())
                    pred = y_ml + (1 - beta) * (mean_f - y_bar)
                else:
                    pred = beta * y_ml + (1 - beta) * mean_f
                emit(pred, None)
            elif config.mode == "per_formula":
                for i, o in usable:
                    emit(beta * y_ml + (1 - beta) * o, i)
            elif config.mode == "formula_only":
                emit(np.mean([o for _, o in usable], axis=0), None)
            else:                       # joint: per formula, no blend
                for i, o in usable:
                    emit(o, i)
    return TransferReport(results=results, failed_evaluations=failed,
                          config=config)


def write_report(report: TransferReport, csv_path: str | Path,
                 json_path: str | Path) -> None:
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_run", "formula_index", "source_plate",
                         "target_plate", "target_cohort", "within_cohort",
                         "delta_mae", "delta_r2", "improved", "failed"])
        for r in report.results:
            writer.writerow([r.run_id,
                             "" if r.formula_index is None else r.formula_index,
                             r.source_plate, r.target_plate, r.target_cohort,
                             int(r.within_cohort), f"{r.delta_mae:.6f}",
                             f"{r.delta_r2:.6f}", int(r.improved),
                             int(r.failed)])
    Path(json_path).write_text(json.dumps(report.aggregate(), indent=1))


def load_plate_csv(path: str | Path, plate_id: str, cohort: str) -> Plate:
    """Plate ingestion for externally supplied plate CSVs (same layout as
    the standard dataset CSV)."""
    from .data import load_csv
    return Plate(plate_id=plate_id, dataset=load_csv(path, task=REGRESSION),
                 cohort=cohort)
