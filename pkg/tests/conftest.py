"""Shared fixtures: worked-example data, scripted transcripts, plate sets."""
from __future__ import annotations

import math

import numpy as np
import pytest

from maricl.data import Dataset, ScalerStats, SplitSpec
from maricl.basemodels import frozen_from_arrays
from maricl.formula import sigmoid
from maricl.residuals import HighResidualPool
from maricl.synthetic import SyntheticSpec

# the running example: three reagent features, one anchor sample
ANCHOR = {"NAD": 0.8, "spermidine": 0.7, "folinic_acid": 0.3}
ANCHOR_Y = 0.72
ANCHOR_BASE = 0.58
WORKED_F0 = "0.5*NAD*spermidine"
WORKED_F1 = "0.5*NAD*spermidine + 0.5*folinic_acid/(0.5 + folinic_acid)"


@pytest.fixture
def reagent_names():
    return ("NAD", "spermidine", "folinic_acid")


def identity_stats(d: int) -> ScalerStats:
    return ScalerStats("none", np.zeros(d), np.ones(d),
                       np.zeros(d, dtype=bool), "train")


def make_pool(x, residuals, y=None, y_hat=None, gamma_s=1.0,
              standardized=True) -> HighResidualPool:
    """Hand-built pool; coordinates are taken as already standardized."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    n, d = x.shape
    stats = identity_stats(d)
    if n >= 2:
        diffs = x[:, None, :] - x[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=2))
        iu = np.triu_indices(n, k=1)
        pairwise = np.sort(dist[iu])
        rank = max(int(math.ceil(0.95 * len(pairwise))) - 1, 0)
        d95 = float(pairwise[rank]) or 1.0
        sigma = float(np.median(pairwise))
    else:
        d95, sigma = 1.0, 0.0
    y = np.zeros(n) if y is None else np.asarray(y, dtype=np.float64)
    y_hat = np.zeros(n) if y_hat is None else np.asarray(y_hat,
                                                         dtype=np.float64)
    return HighResidualPool(row_indices=np.arange(n), x_raw=x, x_std=x,
                            y=y, y_hat=y_hat, residuals=r, stats=stats,
                            d95=d95, sigma_s=sigma, gamma_s=gamma_s)


def trivial_split(n: int, train_frac=0.8, val_frac=0.0, seed=0,
                  strategy="random", q_bins=5) -> SplitSpec:
    return SplitSpec(train_frac=train_frac, val_frac=val_frac,
                     test_frac=round(1 - train_frac - val_frac, 12),
                     seed=seed, strategy=strategy, q_bins=q_bins)


def tiny_regression(n=40, d=3, seed=0, names=None) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, d))
    y = x @ np.arange(1, d + 1) + 0.1 * rng.normal(size=n)
    return Dataset(x, names or tuple(f"f{i}" for i in range(d)), y,
                   "regression")


def zero_frozen_base(n_rows: int, feature_names) -> object:
    return frozen_from_arrays(np.arange(n_rows), np.zeros(n_rows),
                              "regression", tuple(feature_names),
                              provenance="zero-base")


# ---------------------------------------------------------------------------
# scripted transcript builders


def hypothesis_text(pattern: str, features: str) -> str:
    return (f"hypothesised_pattern: {pattern}\n"
            f"implicated_features: {features}\n"
            "functional_form_guess: interaction with saturation\n"
            "rationale: the largest residuals cluster where these features "
            "are jointly elevated.")


def decode_response(explanation: str, formula: str) -> str:
    return f"{explanation}\nFormula: {formula}"


def training_transcript(n_batches: int, formulas_by_agent: list[list[str]],
                        hypothesis: str = "cofactor synergy drives "
                                          "underprediction",
                        critique_text: str = "add a saturation term",
                        explanations: dict | None = None) -> list[str]:
    """Responses in pipeline call order for K agents over T iterations.

    formulas_by_agent[k] holds the agent's formula at t = 0..T; length
    determines T (all agents must agree).
    """
    k_agents = len(formulas_by_agent)
    t_iters = len(formulas_by_agent[0]) - 1
    assert all(len(f) == t_iters + 1 for f in formulas_by_agent)
    explanations = explanations or {}
    responses: list[str] = []
    for k in range(k_agents):
        responses.extend([hypothesis_text(hypothesis, "")] * n_batches)
        expl = explanations.get((k, 0), f"agent {k + 1} initial mechanism")
        responses.append(decode_response(expl, formulas_by_agent[k][0]))
    for t in range(t_iters):
        for k in range(k_agents):
            responses.append(critique_text)
            expl = explanations.get((k, t + 1),
                                    f"agent {k + 1} refinement {t + 1}")
            responses.append(decode_response(expl,
                                             formulas_by_agent[k][t + 1]))
    return responses


# ---------------------------------------------------------------------------
# two-cohort synthetic plates (transfer fixtures)

PLATE_NOISE = 0.05
PLATE_ROWS = 800

COHORT_A_FORMULAS = (
    "0.077 + 0.1578*X1 + 0.1026*X2 + 0.6668*sigmoid(45*X1*X3 - 30)",
    "0.08 + 0.1478*X1 + 0.1026*X2 + 0.6768*sigmoid(44*X1*X3 - 29)",
)
COHORT_B_FORMULAS = (
    "0.1273 + 0.3984*X1 + 0.2689*X2"
    " + 0.2162*exp(-(X5*X7 - 0.3)*(X5*X7 - 0.3)/0.045)"
    " - 0.2328*exp(-(X5*X7 - 0.95)*(X5*X7 - 0.95)/0.04)",
    "0.1303 + 0.3884*X1 + 0.2689*X2"
    " + 0.2262*exp(-(X5*X7 - 0.31)*(X5*X7 - 0.31)/0.05)"
    " - 0.2228*exp(-(X5*X7 - 0.94)*(X5*X7 - 0.94)/0.04)",
)


def make_plate_dataset(seed: int, shifted: bool) -> Dataset:
    """One synthetic plate; cohort B shifts the sigmoid pair to (0.5, +1.2)
    (a saturated gate, i.e. a different data regime). Targets arrive
    pre-scaled to [0.01, 0.99], mirroring upstream plate preparation."""
    spec = SyntheticSpec(noise_std=PLATE_NOISE, n_rows=PLATE_ROWS)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (PLATE_ROWS, spec.n_features))
    if shifted:
        gate = spec.sigmoid_amp * sigmoid(
            spec.interaction_gain * (0.5 * x[:, 0] * x[:, 2] + 1.2))
    else:
        gate = spec.sigmoid_term(x)
    y_raw = (spec.linear_term(x) + gate + spec.sin_term(x)
             + rng.normal(0, PLATE_NOISE, PLATE_ROWS))
    y = 0.01 + 0.98 * (y_raw - y_raw.min()) / (y_raw.max() - y_raw.min())
    return Dataset(x, spec.feature_names(), y, "regression")
