import math

import numpy as np
import pytest

from maricl.basemodels import LinearModel, frozen_from_arrays
from maricl.data import Dataset, make_split
from maricl.ensemble import (EnsembleModel, Mechanism, attention, confidence,
                             global_score, load_bundle,
                             mechanism_class_probs, predict,
                             predict_classification, predict_regression,
                             save_bundle, tune)
from maricl.formula import parse

from conftest import (ANCHOR, ANCHOR_BASE, WORKED_F1, identity_stats,
                      make_pool, trivial_split)

REAGENTS = ("NAD", "spermidine", "folinic_acid")


def mech(formula, names, p, pool, agent_id=1, tau_k=1.0):
    texts = (formula,) if isinstance(formula, str) else tuple(formula)
    return Mechanism(agent_id=agent_id, explanation="test mechanism",
                     formula_texts=texts,
                     asts=tuple(parse(t, names) for t in texts),
                     p=p, pool=pool, tau_k=tau_k)


def regression_ensemble(mechanisms, names=REAGENTS, base_coef=None,
                        bounds=(0.0, 1.0), p_min=0.1, gamma=2.0):
    d = len(names)
    base = LinearModel("linear", np.array(base_coef or [0.0] * d), 0.0,
                       tuple(names))
    return EnsembleModel(base_model=base, mechanisms=tuple(mechanisms),
                         task="regression", feature_names=tuple(names),
                         source_feature_names=tuple(names),
                         scaler=identity_stats(d), output_bounds=bounds,
                         p_min=p_min, gamma=gamma)


def anchor_row():
    return np.array([[ANCHOR["NAD"], ANCHOR["spermidine"],
                      ANCHOR["folinic_acid"]]])


class TestGlobalScore:
    def setup_method(self):
        self.x = np.array([[0.5, 0.5, 0.5], [0.2, 0.4, 0.6]])
        self.base = LinearModel("linear", np.zeros(3), 0.0, REAGENTS)

    def test_zero_mae_scores_one(self):
        asts = (parse("0", REAGENTS),)
        y = self.base.predict(self.x)
        p = global_score(asts, self.base, self.x, y, "regression", tau=0.2)
        assert p == pytest.approx(1.0)

    def test_mae_equals_tau(self):
        # constant correction 0.2 against zero targets, tau = 0.2
        asts = (parse("0.2", REAGENTS),)
        y = np.zeros(2)
        p = global_score(asts, self.base, self.x, y, "regression", tau=0.2)
        assert p == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_macro_f1_identity_branch(self):
        names = ("x1",)
        x = np.array([[1.0], [0.0], [1.0], [0.0], [1.0]])
        y = np.array([2, 1, 2, 1, 1], dtype=float)
        base = frozen_from_arrays(
            np.arange(5), np.array([1, 1, 1, 1, 1]), "classification",
            names, probs=np.tile([0.5, 0.5], (5, 1)), num_classes=2)
        # scores that classify rows 0..3 right and row 4 wrong
        asts = (parse("1 - x1", names), parse("x1", names))
        p = global_score(asts, base, x, y, "classification", tau=0.2,
                         beta=0.0, num_classes=2,
                         row_ids=np.arange(5))
        from maricl.data import metrics
        q = mechanism_class_probs(asts, x, 1.0)
        expected = metrics(y, probs=q, task="classification",
                           num_classes=2).macro_f1
        assert p == pytest.approx(expected)

    def test_rejected_scores_zero(self):
        asts = (parse("1/NAD", REAGENTS),)
        x = np.array([[0.0, 1.0, 1.0]])
        p = global_score(asts, self.base, x, np.zeros(1), "regression",
                         tau=0.2)
        assert p == 0.0


class TestConfidence:
    def test_far_query_half(self):
        pool = make_pool([[0.0], [1.0]], [1.0, 0.5])
        c = confidence(pool, np.array([[99.0]]), gamma=2.0)
        assert c[0] == pytest.approx(0.5)

    def test_on_pool_member(self):
        pool = make_pool([[0.0], [1.0]], [1.0, 0.5])
        c = confidence(pool, np.array([[0.0]]), gamma=2.0)
        assert c[0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)

    def test_strictly_decreasing_in_distance(self):
        pool = make_pool([[0.0]], [1.0])
        qs = np.linspace(0, 0.9, 10)[:, None]
        c = confidence(pool, qs, gamma=2.0)
        assert (np.diff(c) < 0).all()


class TestAttention:
    def test_single_mechanism_full_weight(self):
        alphas, fb = attention(np.array([0.5]), np.array([[0.7]]), 0.1)
        assert alphas[0, 0] == 1.0 and not fb[0]

    def test_hand_normalization(self):
        alphas, fb = attention(np.array([0.6, 0.3]),
                               np.array([[0.5, 1.0]]), 0.1)
        assert np.allclose(alphas, [[0.5, 0.5]])

    def test_all_below_threshold_fallback(self):
        alphas, fb = attention(np.array([0.05, 0.08]),
                               np.array([[1.0, 1.0]]), 0.1)
        assert fb[0] and np.allclose(alphas, 0.0)

    def test_sum_to_one_and_rescale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = rng.integers(1, 6)
            p = rng.uniform(0.2, 1.0, k)
            c = rng.uniform(0.01, 1.0, (3, k))
            alphas, fb = attention(p, c, 0.1)
            assert np.allclose(alphas.sum(axis=1), 1.0, atol=1e-9)
            scaled, _ = attention(p * 7.3, c, 0.1 * 7.3)
            assert np.allclose(scaled, alphas, atol=1e-9)


class TestPredictRegression:
    def test_worked_example_prediction(self):
        # two mechanisms whose p weights resolve alpha = (0.28, 0.72) on a
        # query inside both pools: 0.58 + 0.28 * 0.4675 + 0.72 * 0
        pool = make_pool(anchor_row(), [0.14])
        base = frozen_from_arrays(np.array([0]), np.array([ANCHOR_BASE]),
                                  "regression", REAGENTS)
        m1 = mech(WORKED_F1, REAGENTS, p=0.28, pool=pool, agent_id=1)
        m2 = mech("0", REAGENTS, p=0.72, pool=pool, agent_id=2)
        model = EnsembleModel(base_model=base, mechanisms=(m1, m2),
                              task="regression", feature_names=REAGENTS,
                              source_feature_names=REAGENTS,
                              scaler=identity_stats(3),
                              output_bounds=(0.0, 1.0))
        pred = predict_regression(model, anchor_row(), row_ids=np.array([0]))
        assert np.allclose(pred.alphas, [[0.28, 0.72]], atol=1e-12)
        assert pred.values[0] == pytest.approx(0.7109, abs=5e-5)

    def test_no_mechanisms_fallback(self):
        model = regression_ensemble([], base_coef=[1.0, 0.0, 0.0])
        pred = predict_regression(model, anchor_row())
        assert pred.values[0] == pytest.approx(0.8)
        assert pred.fallback[0]

    def test_zero_formula_is_identity(self):
        pool = make_pool(anchor_row(), [0.1])
        model = regression_ensemble([mech("0", REAGENTS, 0.9, pool)],
                                    base_coef=[1.0, 0.0, 0.0])
        pred = predict_regression(model, anchor_row())
        assert pred.values[0] == pytest.approx(0.8)
        assert not pred.fallback[0]

    def test_query_time_rejection_zeroes_one_mechanism(self):
        pool = make_pool([[0.5, 0.5, 0.5]], [0.1])
        m_bad = mech("1/NAD", REAGENTS, 0.9, pool, agent_id=1)
        m_ok = mech("0.25", REAGENTS, 0.9, pool, agent_id=2)
        model = regression_ensemble([m_bad, m_ok])
        x = np.array([[0.0, 1.0, 1.0], [0.5, 1.0, 1.0]])
        pred = predict_regression(model, x)
        # row 0: 1/0 -> only the constant mechanism contributes
        assert pred.alphas[0, 0] == 0.0 and pred.alphas[0, 1] == 1.0
        assert pred.values[0] == pytest.approx(0.25)
        assert pred.alphas[1, 0] > 0.0

    def test_final_clip_to_bounds(self):
        pool = make_pool([[0.5, 0.5, 0.5]], [0.1])
        model = regression_ensemble([mech("5", REAGENTS, 0.9, pool)])
        pred = predict_regression(model, np.array([[0.5, 0.5, 0.5]]))
        assert pred.values[0] == 1.0


class TestClassProbs:
    def test_two_class_logistic_value(self):
        asts = (parse("x1", ("x1",)), parse("0", ("x1",)))
        q = mechanism_class_probs(asts, np.array([[1.0]]), tau_k=1.0)
        assert q[0, 0] == pytest.approx(math.e / (1 + math.e), abs=1e-12)
        assert q[0, 1] == pytest.approx(1 / (1 + math.e), abs=1e-12)

    def test_equal_scores_uniform(self):
        asts = (parse("x1", ("x1",)), parse("x1", ("x1",)))
        q = mechanism_class_probs(asts, np.array([[0.7]]), tau_k=1.0)
        assert np.allclose(q, 0.5)

    def test_high_temperature_flattens(self):
        asts = (parse("x1", ("x1",)), parse("0", ("x1",)))
        q = mechanism_class_probs(asts, np.array([[1.0]]), tau_k=100.0)
        assert np.abs(q - 0.5).max() < 0.01


class TestPredictClassification:
    def binary_setup(self, beta, p_ml_row, scores):
        names = ("x1",)
        base = frozen_from_arrays(
            np.array([0]), np.array([1]), "classification", names,
            probs=np.array([p_ml_row]), num_classes=2)
        pool = make_pool([[0.5]], [0.1])
        m = mech([f"{scores[0]}", f"{scores[1]}"], names, p=0.9, pool=pool)
        return EnsembleModel(base_model=base, mechanisms=(m,),
                             task="classification", feature_names=names,
                             source_feature_names=names,
                             scaler=identity_stats(1),
                             output_bounds=(0.0, 1.0), beta=beta,
                             num_classes=2)

    def test_beta_one_is_base(self):
        model = self.binary_setup(1.0, [0.8, 0.2], (5.0, 0.0))
        pred = predict_classification(model, np.array([[0.5]]),
                                      row_ids=np.array([0]))
        assert np.allclose(pred.probs, [[0.8, 0.2]], atol=1e-9)

    def test_hand_blend(self):
        # beta=0.5, P_ML=(0.8,0.2), Q=(0.2,0.8) -> (0.5,0.5)
        # pick scores whose softmax at tau=1 equals (0.2, 0.8)
        gap = math.log(0.8 / 0.2)
        model = self.binary_setup(0.5, [0.8, 0.2], (0.0, gap))
        pred = predict_classification(model, np.array([[0.5]]),
                                      row_ids=np.array([0]))
        assert np.allclose(pred.probs, 0.5, atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for beta in (0.0, 0.3, 1.0):
            model = self.binary_setup(beta, [0.6, 0.4], (1.0, -0.5))
            pred = predict_classification(model, rng.uniform(0, 1, (20, 1)),
                                          row_ids=np.zeros(20, dtype=int))
            assert np.abs(pred.probs.sum(axis=1) - 1).max() < 1e-6


class TestTune:
    def classification_fixture(self, probs_fn, n=60, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, (n, 1))
        labels = (x[:, 0] > 0.5).astype(int) + 1
        ds = Dataset(x, ("x1",), labels.astype(float), "classification",
                     num_classes=2)
        split = make_split(ds, trivial_split(n, train_frac=0.5, val_frac=0.5,
                                             seed=seed))
        probs = probs_fn(x, labels)
        base = frozen_from_arrays(np.arange(n), labels, "classification",
                                  ("x1",), probs=probs, num_classes=2)
        return ds, split, base

    def test_perfect_base_picks_largest_beta(self):
        def perfect(x, labels):
            probs = np.full((len(labels), 2), 0.001)
            probs[np.arange(len(labels)), labels - 1] = 0.999
            return probs
        ds, split, base = self.classification_fixture(perfect)
        pool = make_pool([[0.5]], [0.1])
        m = mech(["0", "0"], ("x1",), p=0.9, pool=pool)
        model = EnsembleModel(base_model=base, mechanisms=(m,),
                              task="classification", feature_names=("x1",),
                              source_feature_names=("x1",),
                              scaler=identity_stats(1),
                              output_bounds=(0.0, 1.0), beta=0.5,
                              num_classes=2)
        tuned = tune(model, ds, split)
        assert tuned.beta == 0.7

    def test_single_class_val_defaults_tau(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (20, 1))
        ds = Dataset(x, ("x1",), np.ones(20), "classification",
                     num_classes=2)
        split = make_split(ds, trivial_split(20, train_frac=0.5,
                                             val_frac=0.5))
        base = frozen_from_arrays(np.arange(20), np.ones(20, dtype=int),
                                  "classification", ("x1",),
                                  probs=np.tile([0.9, 0.1], (20, 1)),
                                  num_classes=2)
        pool = make_pool([[0.5]], [0.1])
        m = mech(["x1", "0"], ("x1",), p=0.9, pool=pool, tau_k=2.5)
        model = EnsembleModel(base_model=base, mechanisms=(m,),
                              task="classification", feature_names=("x1",),
                              source_feature_names=("x1",),
                              scaler=identity_stats(1),
                              output_bounds=(0.0, 1.0), num_classes=2)
        tuned = tune(model, ds, split)
        assert tuned.mechanisms[0].tau_k == 1.0

    def test_overconfident_mechanism_calibrated_by_grid(self):
        # mechanism emits over-sharp scores; the ECE-optimal temperature is
        # found by exhaustive grid search (independent recomputation)
        rng = np.random.default_rng(3)
        n = 400
        x = rng.uniform(-1, 1, (n, 1))
        noisy = x[:, 0] + rng.normal(0, 0.8, n)
        labels = (noisy > 0).astype(int) + 1
        ds = Dataset(x, ("x1",), labels.astype(float), "classification",
                     num_classes=2)
        split = make_split(ds, trivial_split(n, train_frac=0.5, val_frac=0.5,
                                             seed=1))
        base = frozen_from_arrays(
            np.arange(n), labels, "classification", ("x1",),
            probs=np.tile([0.5, 0.5], (n, 1)), num_classes=2)
        pool = make_pool([[0.0]], [0.1])
        m = mech(["6*x1", "0 - 6*x1"], ("x1",), p=0.9, pool=pool)
        model = EnsembleModel(base_model=base, mechanisms=(m,),
                              task="classification", feature_names=("x1",),
                              source_feature_names=("x1",),
                              scaler=identity_stats(1),
                              output_bounds=(0.0, 1.0), beta=0.3,
                              num_classes=2)
        tuned = tune(model, ds, split)

        from maricl.data import expected_calibration_error
        from maricl.ensemble import TAU_K_GRID
        idx = split.val
        xv = ds.features[idx]
        lv = ds.labels()[idx]
        p_ml = base.predict_proba(xv, row_ids=idx)
        eces = []
        for tk in TAU_K_GRID:
            q = mechanism_class_probs(m.asts, xv, tk)
            blend = 0.3 * p_ml + 0.7 * q
            blend /= blend.sum(axis=1, keepdims=True)
            eces.append(expected_calibration_error(blend, lv))
        assert tuned.mechanisms[0].tau_k == TAU_K_GRID[int(np.argmin(eces))]
        assert tuned.mechanisms[0].tau_k > 0.5   # sharp scores need cooling


class TestBundleIO:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        pool = make_pool(rng.uniform(0, 1, (6, 3)), rng.uniform(-1, 1, 6))
        base = LinearModel("linear", rng.normal(size=3), 0.123456789,
                           REAGENTS)
        m1 = mech(WORKED_F1, REAGENTS, p=0.737373, pool=pool, agent_id=1)
        m2 = mech("sigmoid(NAD) - 0.3", REAGENTS, p=0.5, pool=pool,
                  agent_id=2, tau_k=1.5)
        model = EnsembleModel(base_model=base, mechanisms=(m1, m2),
                              task="regression", feature_names=REAGENTS,
                              source_feature_names=REAGENTS,
                              scaler=identity_stats(3),
                              output_bounds=(0.0, 1.0))
        save_bundle(model, tmp_path / "bundle")
        loaded = load_bundle(tmp_path / "bundle")

        x = rng.uniform(0, 1, (40, 3))
        a = predict(model, x)
        b = predict(loaded, x)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.alphas, b.alphas)
        assert loaded.mechanisms[0].formula_texts == m1.formula_texts

    def test_empty_bundle(self, tmp_path):
        model = regression_ensemble([])
        save_bundle(model, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")
        assert loaded.mechanisms == ()
