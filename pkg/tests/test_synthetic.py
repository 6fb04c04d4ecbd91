import math

import numpy as np
import pytest

from maricl.formula import evaluate, parse
from maricl.synthetic import (SyntheticSpec, generate, linear_base_r2,
                              oracle_r2, variance_budget)

UNIT_GAIN = SyntheticSpec(interaction_gain=1.0, sin_frequency=1.0)


class TestGenerator:
    def test_shapes_and_split(self):
        ds, split = generate(SyntheticSpec(), seed=0)
        assert ds.features.shape == (1000, 8)
        assert (len(split.train), len(split.val), len(split.test)) == \
            (600, 200, 200)

    def test_deterministic_per_seed(self):
        a, _ = generate(SyntheticSpec(), seed=3)
        b, _ = generate(SyntheticSpec(), seed=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.targets, b.targets)

    def test_feature_means_uniform(self):
        for seed in range(5):
            ds, _ = generate(SyntheticSpec(), seed=seed)
            means = ds.features.mean(axis=0)
            assert ((means > 0.45) & (means < 0.55)).all()

    def test_zero_vector_unit_gain_value(self):
        # oracle recomputation: 2.5 / (1 + e^{1.2}) with no noise at X = 0
        expected = 2.5 / (1.0 + math.exp(1.2))
        spec = UNIT_GAIN
        val = spec.noiseless(np.zeros((1, 8)))[0]
        assert val == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.57868, abs=5e-5)

    def test_targets_not_clipped(self):
        ds, _ = generate(SyntheticSpec(), seed=0)
        assert ds.targets.max() > 1.0          # raw scale, beyond [0, 1]

    def test_planted_formula_matches_generator(self):
        spec = SyntheticSpec()
        text = spec.planted_formula_text()
        ast = parse(text, spec.feature_names())
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (50, 8))
        rep = evaluate(ast, x)
        assert np.allclose(rep.values, spec.sigmoid_term(x), atol=1e-12)


class TestReferenceLevels:
    def test_linear_base_r2(self):
        vals = [linear_base_r2(SyntheticSpec(), s) for s in range(5)]
        assert np.mean(vals) == pytest.approx(0.387, abs=0.06)

    def test_oracle_r2(self):
        vals = [oracle_r2(SyntheticSpec(), s) for s in range(5)]
        assert np.mean(vals) == pytest.approx(0.961, abs=0.02)

    def test_oracle_residuals_are_noise(self):
        # variance ratio of oracle residuals to the planted noise level
        spec = SyntheticSpec()
        for seed in range(3):
            ds, split = generate(spec, seed)
            x = ds.features[split.train]
            resid = ds.targets[split.train] - spec.noiseless(x)
            ratio = resid.var() / spec.noise_std ** 2
            assert 0.7 < ratio < 1.4


class TestVarianceBudget:
    def test_components_quick(self):
        # loose tolerances at reduced draw count; the acceptance suite runs
        # the full 1e6-draw check
        budget = variance_budget(SyntheticSpec(), n_mc=200_000, seed=1)
        assert budget["linear"] == pytest.approx(0.0433, abs=0.002)
        assert budget["sigmoid"] == pytest.approx(0.31, abs=0.03)
        assert budget["sin"] == pytest.approx(0.018, abs=0.006)
        assert budget["noise"] == 0.01
        assert budget["r2_ceiling"] == pytest.approx(0.97, abs=0.015)

    def test_rejects_small_draws(self):
        with pytest.raises(ValueError):
            variance_budget(SyntheticSpec(), n_mc=1000)

    def test_unit_gain_budget_differs(self):
        # literal unit-gain form has a much flatter nonlinearity
        budget = variance_budget(UNIT_GAIN, n_mc=100_000, seed=0)
        assert budget["sigmoid"] < 0.1

    def test_linear_component_closed_form(self):
        # var(0.6 X1 + 0.4 X2) = (0.36 + 0.16) / 12 for U(0,1)
        budget = variance_budget(SyntheticSpec(), n_mc=400_000, seed=2)
        assert budget["linear"] == pytest.approx((0.36 + 0.16) / 12,
                                                 abs=0.001)
