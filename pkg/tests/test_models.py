import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsel import models
from fedsel.data import SampleSet

LOGISTIC = models.ModelSpec("logistic", 60, 10)
SMALL_MLP = models.ModelSpec("mlp", 12, 4, hidden=(8, 6))


def random_batch(spec, n, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, spec.input_dim))
    if labels is None:
        labels = rng.integers(0, spec.num_classes, size=n)
    return SampleSet(feats, labels)


def random_params(spec, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    params = models.init_params(spec, seed=seed)
    params.values[...] = rng.normal(scale=scale, size=params.size)
    return params


class TestInit:
    def test_logistic_zero_init(self):
        params = models.init_params(LOGISTIC, seed=123)
        assert params.size == 60 * 10 + 10 == 610
        assert np.all(params.values == 0.0)

    def test_mlp_parameter_count(self):
        spec = models.ModelSpec("mlp", 784, 10, hidden=(128, 64))
        params = models.init_params(spec, seed=0)
        assert params.size == 784 * 128 + 128 + 128 * 64 + 64 + 64 * 10 + 10 == 109386

    def test_mlp_biases_zero_weights_bounded(self):
        params = models.init_params(SMALL_MLP, seed=4)
        for i, (fan_in, fan_out) in enumerate(zip(SMALL_MLP.layer_dims, SMALL_MLP.layer_dims[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(params.segment(f"w{i}")) <= limit)
            assert np.all(params.segment(f"b{i}") == 0.0)

    def test_deterministic(self):
        a = models.init_params(SMALL_MLP, seed=9)
        b = models.init_params(SMALL_MLP, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            models.ModelSpec("mlp", 10, 3, hidden=(8,))
        with pytest.raises(ValueError):
            models.ModelSpec("logistic", 10, 3, hidden=(8, 8))
        with pytest.raises(ValueError):
            models.ModelSpec("cnn", 10, 3)


class TestLoss:
    def test_uniform_softmax_at_zero(self):
        batch = random_batch(LOGISTIC, 32, seed=1)
        params = models.init_params(LOGISTIC)
        assert models.loss(LOGISTIC, params, batch) == pytest.approx(math.log(10), abs=1e-12)

    def test_large_margin_goes_to_zero(self):
        spec = models.ModelSpec("logistic", 3, 4)
        params = models.init_params(spec)
        batch = SampleSet(np.array([[1.0, 0.0, 0.0]]), np.array([2]))
        params.segment("w0")[0, 2] = 50.0
        assert models.loss(spec, params, batch) <= 1e-6

    def test_binary_closed_form(self):
        spec = models.ModelSpec("logistic", 2, 2)
        params = models.init_params(spec)
        params.segment("w0")[0, 0] = 1.0  # logit difference of 1 for x = e_0
        batch = SampleSet(np.array([[1.0, 0.0]]), np.array([0]))
        assert models.loss(spec, params, batch) == pytest.approx(math.log(1 + math.e**-1), abs=1e-12)

    def test_permutation_invariant(self):
        batch = random_batch(SMALL_MLP, 16, seed=2)
        params = random_params(SMALL_MLP, seed=3)
        perm = np.random.default_rng(0).permutation(16)
        assert models.loss(SMALL_MLP, params, batch) == pytest.approx(
            models.loss(SMALL_MLP, params, batch.subset(perm)), rel=1e-12
        )

    def test_concat_is_size_weighted_mean(self):
        a = random_batch(LOGISTIC, 10, seed=5)
        b = random_batch(LOGISTIC, 30, seed=6)
        params = random_params(LOGISTIC, seed=7, scale=0.1)
        both = SampleSet(
            np.concatenate([a.features, b.features]), np.concatenate([a.labels, b.labels])
        )
        expected = (10 * models.loss(LOGISTIC, params, a) + 30 * models.loss(LOGISTIC, params, b)) / 40
        assert models.loss(LOGISTIC, params, both) == pytest.approx(expected, rel=1e-12)

    def test_stable_at_huge_logits(self):
        spec = models.ModelSpec("logistic", 2, 3)
        params = models.init_params(spec)
        params.segment("w0")[...] = np.array([[1e4, -1e4, 0.0], [0.0, 1e4, -1e4]])
        batch = SampleSet(np.array([[1.0, 1.0], [-1.0, 1.0]]), np.array([0, 2]))
        value = models.loss(spec, params, batch)
        evaluation = models.loss_and_grad(spec, params, batch)
        assert np.isfinite(value)
        assert np.all(np.isfinite(evaluation.gradient.values))

    def test_empty_batch_rejected(self):
        params = models.init_params(LOGISTIC)
        with pytest.raises(ValueError):
            models.loss(LOGISTIC, params, SampleSet.empty(60))

    def test_dim_mismatch_rejected(self):
        params = models.init_params(LOGISTIC)
        with pytest.raises(ValueError, match="feature dim"):
            models.loss(LOGISTIC, params, random_batch(models.ModelSpec("logistic", 3, 10), 4))


class TestLossAndGrad:
    def test_mean_loss_identical_to_loss(self):
        for spec, seed in [(LOGISTIC, 0), (SMALL_MLP, 1)]:
            batch = random_batch(spec, 20, seed=seed)
            params = random_params(spec, seed=seed + 10)
            assert models.loss_and_grad(spec, params, batch).mean_loss == models.loss(spec, params, batch)

    def test_bias_gradient_at_zero(self):
        # softmax is uniform at w=0, so the bias gradient is 1/C minus the
        # class frequencies.
        labels = np.array([0] * 5 + [1] * 3 + [2] * 2)
        batch = random_batch(LOGISTIC, 10, seed=3, labels=labels)
        params = models.init_params(LOGISTIC)
        grad = models.loss_and_grad(LOGISTIC, params, batch).gradient
        freq = np.bincount(labels, minlength=10) / 10
        assert np.allclose(grad.segment("b0"), 0.1 - freq, atol=1e-12)

    def test_duplicated_batch_is_invariant(self):
        batch = random_batch(SMALL_MLP, 8, seed=4)
        doubled = SampleSet(
            np.concatenate([batch.features, batch.features]),
            np.concatenate([batch.labels, batch.labels]),
        )
        params = random_params(SMALL_MLP, seed=5)
        one = models.loss_and_grad(SMALL_MLP, params, batch)
        two = models.loss_and_grad(SMALL_MLP, params, doubled)
        assert one.mean_loss == pytest.approx(two.mean_loss, rel=1e-12)
        assert np.allclose(one.gradient.values, two.gradient.values, atol=1e-12)

    @pytest.mark.parametrize("spec", [LOGISTIC, SMALL_MLP], ids=["logistic", "mlp"])
    def test_finite_difference_directions(self, spec):
        rng = np.random.default_rng(2024)
        for trial in range(20):
            batch = random_batch(spec, 12, seed=trial)
            params = random_params(spec, seed=trial + 100)
            grad = models.loss_and_grad(spec, params, batch).gradient.values
            for _ in range(5):
                direction = rng.normal(size=params.size)
                direction /= np.linalg.norm(direction)
                eps = 1e-5
                plus, minus = params.copy(), params.copy()
                plus.values += eps * direction
                minus.values -= eps * direction
                numeric = (models.loss(spec, plus, batch) - models.loss(spec, minus, batch)) / (2 * eps)
                analytic = float(grad @ direction)
                denom = max(abs(numeric), abs(analytic), 1e-8)
                assert abs(numeric - analytic) / denom < 1e-4


class TestAccuracy:
    def test_zero_params_tie_break_predicts_class_zero(self):
        labels = np.array([0] * 3 + [4] * 7)
        batch = random_batch(LOGISTIC, 10, seed=8, labels=labels)
        params = models.init_params(LOGISTIC)
        assert models.accuracy(LOGISTIC, params, batch) == pytest.approx(0.3)

    def test_separable_fixture_is_perfect(self):
        spec = models.ModelSpec("logistic", 2, 2)
        params = models.init_params(spec)
        params.segment("w0")[...] = np.array([[10.0, -10.0], [0.0, 0.0]])
        feats = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 1.0], [-2.0, 1.0]])
        batch = SampleSet(feats, np.array([0, 1, 0, 1]))
        assert models.accuracy(spec, params, batch) == 1.0

    def test_random_labels_stay_near_chance(self):
        # Fit logistic regression on noise labels, then score it on fresh
        # noise: hits are Binomial(10^4, 0.1), so [0.07, 0.13] is a ±10
        # standard-error interval.
        rng = np.random.default_rng(42)
        train = SampleSet(rng.normal(size=(10000, 60)), rng.integers(0, 10, size=10000))
        params = models.init_params(LOGISTIC)
        for _ in range(50):
            evaluation = models.loss_and_grad(LOGISTIC, params, train)
            params.values -= 0.5 * evaluation.gradient.values
        fresh = SampleSet(rng.normal(size=(10000, 60)), rng.integers(0, 10, size=10000))
        acc = models.accuracy(LOGISTIC, params, fresh)
        assert 0.07 <= acc <= 0.13


class TestSerialization:
    @pytest.mark.parametrize("spec", [LOGISTIC, SMALL_MLP], ids=["logistic", "mlp"])
    def test_roundtrip(self, spec, tmp_path):
        params = random_params(spec, seed=3)
        models.save_params(params, tmp_path / "params.bin")
        back = models.load_params(tmp_path / "params.bin")
        assert back.layout == params.layout
        assert np.array_equal(back.values, params.values)

    def test_rejects_foreign_bytes(self):
        with pytest.raises(ValueError):
            models.params_from_bytes(b"garbage data here")

    def test_layout_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match layout"):
            models.ParamVector(np.zeros(5), models.layout_for(LOGISTIC))


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=10**6))
def test_loss_positive_and_finite(n, seed):
    batch = random_batch(LOGISTIC, n, seed=seed)
    params = random_params(LOGISTIC, seed=seed, scale=1.0)
    value = models.loss(LOGISTIC, params, batch)
    assert np.isfinite(value) and value >= 0.0
