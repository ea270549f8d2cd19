import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from temporal_recourse import benchmarks
from temporal_recourse.experiment import split
from temporal_recourse.predictors import (
    BoundedLinearClassifier,
    ColumnSubset,
    PredictorError,
    TrainConfig,
    accuracy,
    fit_bounded_linear,
    from_document,
    init_mlp,
    input_gradient,
    predict,
    to_document,
    train_mlp,
)
from temporal_recourse.scm import simulate


def blobs(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 1, 2.0, -2.0)
    return x, y


def central_difference(h, x, step=1e-5):
    g = np.zeros_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = step
        g[..., j] = (h.predict(x + e) - h.predict(x - e)) / (2 * step)
    return g


def test_separable_blobs():
    x, y = blobs(600, 0)
    xt, yt = blobs(400, 1)
    h = train_mlp(x, y, TrainConfig(epochs=30, learning_rate=0.01))
    assert accuracy(h, xt, yt) >= 0.95


def test_linear_anm_accuracy_in_reported_band():
    panel = simulate(benchmarks.build("linear-anm", "none", 0.0), 0, 4000, seed=0)
    tr, te = split(4000, 0.5)
    x, y = panel.states[:, 0], panel.labels[:, 0]
    h = train_mlp(x[tr], y[tr], TrainConfig(seed=1))
    assert 0.80 <= accuracy(h, x[te], y[te]) <= 0.90


def test_training_loss_decreases():
    x, y = blobs(500, 3)
    _, hist = train_mlp(x, y, TrainConfig(epochs=10), return_history=True)
    assert hist[-1] < hist[0]


def test_training_is_deterministic():
    x, y = blobs(300, 4)
    a = to_document(train_mlp(x, y, TrainConfig(epochs=3, seed=9)))
    b = to_document(train_mlp(x, y, TrainConfig(epochs=3, seed=9)))
    assert a == b


def test_training_rejects_bad_labels():
    x = np.zeros((10, 2))
    with pytest.raises(PredictorError, match="single class"):
        train_mlp(x, np.ones(10))
    with pytest.raises(PredictorError):
        train_mlp(x, np.full(10, 2.0))
    with pytest.raises(PredictorError):
        train_mlp(x, np.ones(9))
    with pytest.raises(PredictorError):
        TrainConfig(epochs=0)


def test_zero_network_predicts_half():
    h = init_mlp(3)
    for w, b in zip(h.weights, h.biases):
        w[:] = 0.0
        b[:] = 0.0
    np.testing.assert_array_equal(predict(h, np.random.default_rng(0).normal(size=(5, 3))), 0.5)
    np.testing.assert_array_equal(input_gradient(h, np.ones((2, 3))), 0.0)


def test_zero_output_layer_has_zero_gradient():
    h = init_mlp(4, seed=2)
    h.weights[-1][:] = 0.0
    np.testing.assert_array_equal(input_gradient(h, np.ones((3, 4))), 0.0)


def test_bounded_linear_orthogonal_input():
    h = BoundedLinearClassifier(np.array([1.0, 0.0]), bound=1.0)
    assert predict(h, np.array([0.0, 5.0])) == 0.5
    np.testing.assert_array_equal(h.score_gradient(np.ones((4, 2))), np.tile([1.0, 0.0], (4, 1)))


def test_dimension_mismatch():
    with pytest.raises(PredictorError):
        init_mlp(3).predict(np.zeros(2))
    with pytest.raises(PredictorError):
        BoundedLinearClassifier(np.ones(2), 1.0).predict(np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(
    d=st.integers(1, 6),
    h1=st.integers(1, 12),
    h2=st.integers(1, 12),
    seed=st.integers(0, 2**31),
    scale=st.floats(0.1, 3.0),
)
def test_mlp_gradient_matches_finite_differences(d, h1, h2, seed, scale):
    rng = np.random.default_rng(seed)
    h = init_mlp(d, (h1, h2), seed, mean=rng.normal(size=d), std=rng.uniform(0.5, 2, d))
    x = rng.normal(size=(4, d)) * scale
    g = input_gradient(h, x)
    fd = central_difference(h, x)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(d=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_linear_gradient_matches_finite_differences(d, seed):
    rng = np.random.default_rng(seed)
    h = BoundedLinearClassifier(rng.uniform(-1, 1, d), 1.0, float(rng.normal()))
    x = rng.normal(size=(3, d))
    np.testing.assert_allclose(input_gradient(h, x), central_difference(h, x), rtol=1e-4, atol=1e-9)


def test_column_subset_pads_gradient():
    inner = init_mlp(2, seed=0)
    h = ColumnSubset(inner, (0, 2), 4)
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(h.predict(x), inner.predict(x[:, [0, 2]]))
    g = h.input_gradient(x)
    assert np.all(g[:, [1, 3]] == 0.0)
    np.testing.assert_allclose(g, central_difference(h, x), rtol=1e-4, atol=1e-9)


def test_bounded_fit_matches_ols_inside_box():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    y = x @ np.array([0.5, -0.2, 0.1]) + 0.01 * rng.normal(size=200)
    ols = np.linalg.lstsq(x, y, rcond=None)[0]
    h = fit_bounded_linear(x, y, bound=10.0)
    np.testing.assert_allclose(h.beta, ols, atol=1e-6)


def test_bounded_fit_saturates():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 3))
    y = 1000.0 * x.sum(axis=1)
    h = fit_bounded_linear(x, y, bound=0.01)
    np.testing.assert_allclose(np.abs(h.beta), 0.01)


def test_bounded_fit_single_point():
    h = fit_bounded_linear(np.array([[1.0]]), np.array([1.0]), bound=10.0)
    assert h.beta[0] == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), bound=st.floats(0.01, 2.0), intercept=st.booleans())
def test_bounded_fit_respects_box_and_descends(seed, bound, intercept):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 4)) * rng.uniform(0.1, 5)
    y = rng.normal(size=60) * 3
    h, hist = fit_bounded_linear(x, y, bound, fit_intercept=intercept, max_iter=2000, return_history=True)
    assert np.all(np.abs(h.beta) <= bound)
    assert np.all(np.diff(hist) <= 1e-12 * np.maximum(1.0, np.abs(hist[:-1])))


def test_bounded_fit_rejects_empty_data():
    with pytest.raises(PredictorError):
        fit_bounded_linear(np.zeros((0, 2)), np.zeros(0), 1.0)
    with pytest.raises(PredictorError):
        fit_bounded_linear(np.zeros((3, 2)), np.zeros(3), 0.0)


def test_box_violation_rejected():
    with pytest.raises(PredictorError):
        BoundedLinearClassifier(np.array([2.0]), bound=1.0)


@pytest.mark.parametrize(
    "model",
    [
        init_mlp(3, seed=5, mean=[1.0, 2.0, 3.0], std=[0.5, 1.0, 2.0]),
        BoundedLinearClassifier(np.array([0.1, -0.3]), 0.5, 0.25),
        ColumnSubset(init_mlp(2, seed=1), (1, 2), 3),
    ],
)
def test_document_roundtrip(model):
    text = to_document(model)
    back = from_document(text)
    assert to_document(back) == text
    x = np.random.default_rng(0).normal(size=(5, model.d if hasattr(model, "d") else 3))
    np.testing.assert_array_equal(back.predict(x), model.predict(x))


def test_document_version_checked():
    with pytest.raises(PredictorError):
        from_document('{"schema_version": 99, "kind": "mlp"}')


def test_loan_classifier_income_probe():
    # single probes may dip (the network is not monotone), the average effect may not
    scm = benchmarks.build("loan", "none", 0.0)
    panel = simulate(scm, 0, 2000, seed=0)
    h = train_mlp(panel.states[:, 0], panel.labels[:, 0], TrainConfig(seed=0))
    probes = panel.states[:100, 0]
    bumped = probes.copy()
    bumped[:, scm.index("income")] += 1.0
    gain = h.predict(bumped) - h.predict(probes)
    assert gain.mean() > 0
