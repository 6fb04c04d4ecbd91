"""Residual-correction pipeline.

A base model anchors predictions; agent-refined symbolic formulas explain
and correct its systematic residuals; inference aggregates the compiled
corrections with query-aware weights at zero LLM cost.
"""

__version__ = "0.1.0"

from .agent import AgentConfig, count_calls, train
from .data import (Dataset, MetricReport, ScalerStats, SplitSpec,
                   apply_scaler, fit_scaler, load_csv, make_split, metrics)
from .ensemble import (EnsembleModel, Mechanism, Prediction, attention,
                       confidence, global_score, load_bundle, predict,
                       predict_classification, predict_regression,
                       save_bundle, tune)
from .formula import (EvalReport, FormulaAst, FormulaSource, evaluate,
                      extract_formula, multiclass_scores, parse)
from .providers import (CallLedger, HttpProvider, LlmProvider,
                        RecordingProvider, ScriptedProvider)
from .residuals import (HighResidualPool, ResidualTable, query_distance,
                        residuals, score_examples, select_pool)
from .stats import bh_correct, wilcoxon_paired
from .synthetic import SyntheticSpec, generate, variance_budget
from .transfer import (PlateSet, SourceBundle, TransferConfig, transfer_eval)

__all__ = [name for name in dir() if not name.startswith("_")]
