import numpy as np
import pytest

from maricl.basemodels import (SchemaError, fit, frozen_from_arrays,
                               load_frozen)
from maricl.data import Dataset, make_split

from conftest import trivial_split


def exact_line(n=20):
    x = np.linspace(0, 1, n)[:, None]
    return Dataset(x, ("x",), 2.0 * x.ravel(), "regression")


class TestLinear:
    def test_recovers_exact_slope(self):
        ds = exact_line()
        split = make_split(ds, trivial_split(20, train_frac=1.0))
        model = fit("linear", ds, split)
        assert model.coef[0] == pytest.approx(2.0, abs=1e-8)
        assert model.intercept == pytest.approx(0.0, abs=1e-8)

    def test_residuals_orthogonal_to_design(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(60, 4))
        y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + rng.normal(size=60)
        ds = Dataset(x, tuple("abcd"), y, "regression")
        split = make_split(ds, trivial_split(60, train_frac=1.0))
        model = fit("linear", ds, split)
        resid = y - model.predict(x)
        assert np.abs(x.T @ resid).max() < 1e-6
        assert abs(resid.sum()) < 1e-6

    def test_singular_design_min_norm(self):
        # duplicated column: lstsq must still return a solution
        x = np.ones((10, 2))
        x[:, 1] = np.arange(10)
        x = np.column_stack([x, x[:, 1]])          # exact duplicate
        ds = Dataset(x, ("a", "b", "c"), x[:, 1] * 3.0, "regression")
        split = make_split(ds, trivial_split(10, train_frac=1.0))
        model = fit("linear", ds, split)
        assert np.allclose(model.predict(x), x[:, 1] * 3.0, atol=1e-8)

    def test_ridge_converges_to_linear(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(80, 3))
        y = x @ np.array([2.0, -1.0, 0.3]) + 0.5
        ds = Dataset(x, ("a", "b", "c"), y, "regression")
        split = make_split(ds, trivial_split(80, train_frac=1.0))
        lin = fit("linear", ds, split)
        ridge = fit("ridge", ds, split, ridge_lambda=1e-10)
        assert np.allclose(ridge.coef, lin.coef, atol=1e-6)
        assert ridge.feature_importance == pytest.approx(np.abs(ridge.coef))

    def test_schema_mismatch_fault(self):
        ds = exact_line()
        split = make_split(ds, trivial_split(20, train_frac=1.0))
        model = fit("linear", ds, split)
        with pytest.raises(SchemaError):
            model.predict(np.ones((3, 2)))


class TestLogistic:
    def separable(self):
        x = np.concatenate([np.random.default_rng(0).normal(-3, 0.3, 30),
                            np.random.default_rng(1).normal(3, 0.3, 30)])
        y = np.array([1] * 30 + [2] * 30)
        return Dataset(x[:, None], ("x",), y.astype(float), "classification",
                       num_classes=2)

    def test_separable_train_accuracy(self):
        ds = self.separable()
        split = make_split(ds, trivial_split(60, train_frac=1.0))
        model = fit("logistic", ds, split)
        assert (model.predict(ds.features) == ds.labels()).mean() == 1.0

    def test_probs_on_simplex(self):
        ds = self.separable()
        split = make_split(ds, trivial_split(60, train_frac=1.0))
        model = fit("logistic", ds, split)
        probs = model.predict_proba(ds.features)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6
        assert (probs >= 0).all()

    def test_gradient_norm_at_solution(self):
        # finite-difference cross-check of the optimizer's first-order
        # condition on a small 3-feature instance
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 3))
        logits = x @ np.array([1.0, -1.0, 0.5])
        y = (logits + 0.3 * rng.normal(size=50) > 0).astype(int) + 1
        ds = Dataset(x, ("a", "b", "c"), y.astype(float), "classification",
                     num_classes=2)
        split = make_split(ds, trivial_split(50, train_frac=1.0))
        model = fit("logistic", ds, split)

        from maricl.basemodels import LOGISTIC_L2
        def nll(w, b):
            z = x @ w.T + b
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            lab = ds.labels()
            return (-np.log(p[np.arange(50), lab - 1]).mean()
                    + LOGISTIC_L2 * (w ** 2).sum())

        eps = 1e-6
        base = nll(model.weights, model.bias)
        grads = []
        for c in range(2):
            for j in range(3):
                w2 = model.weights.copy()
                w2[c, j] += eps
                grads.append((nll(w2, model.bias) - base) / eps)
        assert np.abs(grads).max() < 1e-3

    def test_zero_weight_probs_uniform(self):
        from maricl.basemodels import LogisticModel
        model = LogisticModel(weights=np.zeros((2, 1)), bias=np.zeros(2),
                              feature_names=("x",), num_classes=2)
        probs = model.predict_proba(np.array([[5.0]]))
        assert np.allclose(probs, 0.5)


class TestFrozen:
    def test_echoes_table(self):
        model = frozen_from_arrays(np.array([3, 7]), np.array([0.1, 0.9]),
                                   "regression", ("x",))
        out = model.predict(np.zeros((2, 1)), row_ids=np.array([7, 3]))
        assert np.allclose(out, [0.9, 0.1])

    def test_worked_example_base(self):
        model = frozen_from_arrays(np.array([0]), np.array([0.58]),
                                   "regression", ("NAD", "sperm", "fol"))
        assert model.predict(np.zeros((1, 3)), row_ids=np.array([0]))[0] \
            == pytest.approx(0.58)

    def test_missing_row_fault(self):
        model = frozen_from_arrays(np.array([0]), np.array([0.5]),
                                   "regression", ("x",))
        with pytest.raises(SchemaError):
            model.predict(np.zeros((1, 1)), row_ids=np.array([4]))

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "frozen.csv"
        path.write_text("row_id,prediction,prob_1,prob_2\n"
                        "0,2,0.3,0.7\n1,1,0.8,0.2\n")
        model = load_frozen(path, "classification", ("x",), num_classes=2)
        probs = model.predict_proba(np.zeros((2, 1)),
                                    row_ids=np.array([0, 1]))
        assert np.allclose(probs, [[0.3, 0.7], [0.8, 0.2]])
