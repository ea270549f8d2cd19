import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from temporal_recourse import benchmarks
from temporal_recourse.scm import (
    Intervention,
    LabelSpec,
    NoiseSpec,
    Panel,
    ScmError,
    ScmSpec,
    SimulationDivergence,
    StructuralEquation,
    Term,
    TrendSpec,
    UnsupportedAbduction,
    Variable,
    abduct_and_counterfactual,
    evaluate_trend,
    forecast_uncertainty_set,
    interventional_sample,
    non_descendants,
    sample_trajectory,
    simulate,
)


def ar1(alpha=0.5, std=0.0, mean=0.0, slope=0.0):
    trend = TrendSpec(sign=1, custom={"kind": "ramp", "slope": slope, "offset": 0.0}) if slope else None
    eq = StructuralEquation("x", (Term.linear("x", alpha, lag=1),), NoiseSpec.gaussian(mean, std), trend=trend)
    return ScmSpec((Variable("x", actionable=True),), (eq,), LabelSpec({"x": 1.0}), burn_in=0)


def chain(std=1.0):
    """a -> b -> c with an AR(1) component on every node."""
    eqs = (
        StructuralEquation("a", (Term.linear("a", 0.3, 1),), NoiseSpec.gaussian(0, std)),
        StructuralEquation("b", (Term.linear("b", 0.3, 1), Term.linear("a", 2.0)), NoiseSpec.gaussian(0, std)),
        StructuralEquation("c", (Term.linear("c", 0.3, 1), Term.square("b", 0.5)), NoiseSpec.gaussian(0, std)),
    )
    return ScmSpec(tuple(Variable(n, actionable=True) for n in "abc"), eqs, LabelSpec({"c": 1.0}))


def example1_mean(alpha, c, mu, t):
    # E[X^t] for X^t = alpha X^{t-1} - c t + U, E[U] = mu, started from zero at t = -1
    i = np.arange(t + 1)
    return float(np.sum(alpha ** (t - i) * (-c * i + mu)))


# ---------------------------------------------------------------- trends


@pytest.mark.parametrize(
    "spec,t,expected",
    [
        (TrendSpec(1.0, 1.0, 0.0), 10, 0.5),
        (TrendSpec(0.0, 1.0, 1.5), 37, 0.0),
        (TrendSpec(1.0, 1.0, 0.0), 500, 10.0),
    ],
)
def test_trend_values(spec, t, expected):
    assert evaluate_trend(spec, t) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=1000, deadline=None)
@given(
    alpha=st.floats(0, 1),
    bl=st.floats(0, 10),
    bs=st.floats(0, 10),
    t=st.integers(0, 1000),
)
def test_trend_matches_formula(alpha, bl, bs, t):
    want = alpha * (bl * min(0.05 * t, 10.0) + bs * abs(np.sin(0.5 * t)))
    assert evaluate_trend(TrendSpec(alpha, bl, bs), t) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_step_trend_switches_on_at_start():
    spec = TrendSpec(custom={"kind": "step", "start": 4, "level": -2.5})
    assert [float(evaluate_trend(spec, t)) for t in (0, 3, 4, 9)] == [0.0, 0.0, -2.5, -2.5]


def test_trend_rejects_bad_parameters():
    with pytest.raises(ScmError):
        TrendSpec(alpha=1.5)
    with pytest.raises(ScmError):
        TrendSpec(beta_linear=-1)
    with pytest.raises(ScmError):
        TrendSpec(sign=0)
    with pytest.raises(ScmError):
        evaluate_trend(TrendSpec(1, 1, 0), -1)


# ------------------------------------------------------------ noise specs


def test_noise_validation():
    with pytest.raises(ScmError):
        NoiseSpec.gaussian(0, -1)
    with pytest.raises(ScmError):
        NoiseSpec.mixture([(0.3, 0, 1), (0.3, 1, 1)])
    with pytest.raises(ScmError):
        NoiseSpec.bernoulli(1.2)
    with pytest.raises(ScmError):
        NoiseSpec.poisson(0)


@pytest.mark.parametrize(
    "spec",
    [
        NoiseSpec.gaussian(1.0, 2.0),
        NoiseSpec.mixture([(0.5, -1.0, 1.5), (0.5, 1.0, 1.0)]),
        NoiseSpec.bernoulli(0.3),
        NoiseSpec.poisson(2.5),
        NoiseSpec.gamma(2.0, 1.5),
    ],
)
def test_noise_moments(spec):
    draws = spec.sample(np.random.default_rng(0), 200_000)
    se = np.sqrt(spec.variance / draws.size)
    assert abs(draws.mean() - spec.mean) < 4 * se
    assert draws.var() == pytest.approx(spec.variance, rel=0.03)


# ------------------------------------------------------------ simulation


def test_zero_noise_ar1_stays_at_zero():
    panel = simulate(ar1(0.5, 0.0), 3, 4, seed=1)
    assert np.all(panel.states == 0.0)


def test_example1_mean_matches_closed_form():
    alpha, c, mu = 0.5, 1.0, 0.0
    scm = benchmarks.ar1_trend_process(alpha, c, mu_x=mu)
    panel = simulate(scm, 12, 20_000, seed=3, burn_in=0, labels=False)
    for t in (0, 3, 7, 12):
        col = panel.states[:, t, 0]
        se = col.std(ddof=1) / np.sqrt(col.size)
        assert abs(col.mean() - example1_mean(alpha, c, mu, t)) < 3 * se


def test_stationary_anm_mean_is_flat():
    panel = simulate(benchmarks.build("linear-anm", "none", 0.0), 60, 4000, seed=5, labels=False)
    for t, tau in [(0, 10), (10, 50), (0, 60)]:
        diff = panel.states[:, t + tau] - panel.states[:, t]
        se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
        assert np.all(np.abs(diff.mean(axis=0)) < 4 * se)


def test_simulation_is_seed_deterministic():
    scm = benchmarks.build("nonlinear-anm", "linear+seasonal", 0.5)
    a = simulate(scm, 10, 50, seed=7)
    b = simulate(scm, 10, 50, seed=7)
    c = simulate(scm, 10, 50, seed=8)
    assert a.to_csv() == b.to_csv()
    assert not np.array_equal(a.states, c.states)


def test_individual_streams_do_not_depend_on_batch():
    scm = chain()
    full = simulate(scm, 5, 10, seed=2)
    part = simulate(scm, 5, 3, seed=2, individuals=[4, 5, 6])
    np.testing.assert_array_equal(full.states[4:7], part.states)


def test_frozen_variables_are_copied():
    scm = benchmarks.build("adult", "none", 0.0)
    panel = simulate(scm, 6, 30, seed=0)
    for j, eq in enumerate(scm.equations):
        if eq.frozen:
            assert np.all(panel.states[:, :, j] == panel.states[:, :1, j])


def test_divergence_names_variable_and_time():
    eq = StructuralEquation("x", (Term.square("x", 10.0, lag=1),), NoiseSpec.point(10.0))
    scm = ScmSpec((Variable("x"),), (eq,), burn_in=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(SimulationDivergence) as err:
            simulate(scm, 30, 1, seed=0, labels=False)
    assert err.value.variable == "x" and err.value.t > 0


def test_trajectory_csv_roundtrip():
    scm = benchmarks.build("linear-anm", "linear", 1.0)
    panel = simulate(scm, 4, 6, seed=1)
    text = panel.to_csv()
    assert text.splitlines()[0] == "individual,t,x1,x2,x3,label"
    back = Panel.from_csv(text)
    np.testing.assert_array_equal(back.states, panel.states)
    np.testing.assert_array_equal(back.labels, panel.labels)


def test_sample_trajectory_windows():
    trajs = sample_trajectory(chain(), 5, 2, seed=0)
    assert len(trajs) == 2
    w = trajs[0].window(3, 1)
    np.testing.assert_array_equal(w, trajs[0].states[2:4])


def test_spec_validation():
    eq = StructuralEquation("x", (Term.linear("y", 1.0),))
    with pytest.raises(ScmError):
        ScmSpec((Variable("x"),), (eq,))
    cyc = (
        StructuralEquation("a", (Term.linear("b", 1.0),)),
        StructuralEquation("b", (Term.linear("a", 1.0),)),
    )
    with pytest.raises(ScmError, match="cycle"):
        ScmSpec((Variable("a"), Variable("b")), cyc)
    frozen = StructuralEquation("a", (), frozen=True)
    with pytest.raises(ScmError):
        ScmSpec((Variable("a", actionable=True),), (frozen,))


@pytest.mark.parametrize("name", benchmarks.BENCHMARKS)
def test_spec_document_roundtrip(name):
    scm = benchmarks.build(name, "linear+seasonal", 0.7)
    again = ScmSpec.loads(scm.dumps())
    assert again.dumps() == scm.dumps()
    a = simulate(scm, 3, 5, seed=4)
    b = simulate(again, 3, 5, seed=4)
    np.testing.assert_array_equal(a.states, b.states)


# ------------------------------------------------------------ graph queries


def test_non_descendants_on_anm():
    scm = benchmarks.build("linear-anm")
    assert non_descendants(scm, ["x1"]) == []
    assert non_descendants(scm, ["x3"]) == ["x1", "x2"]
    assert non_descendants(scm, scm.names) == []
    with pytest.raises(ScmError):
        non_descendants(scm, ["nope"])


@st.composite
def random_dags(draw):
    d = draw(st.integers(1, 8))
    names = [f"v{i}" for i in range(d)]
    perm = draw(st.permutations(range(d)))
    edges = set()
    for a, b in itertools.combinations(range(d), 2):
        if draw(st.booleans()):
            edges.add((perm[a], perm[b]))
    eqs = tuple(
        StructuralEquation(names[j], tuple(Term.linear(names[i], 1.0) for i, k in sorted(edges) if k == j))
        for j in range(d)
    )
    scm = ScmSpec(tuple(Variable(n) for n in names), eqs)
    subset = draw(st.lists(st.sampled_from(names), unique=True, max_size=d))
    return scm, edges, subset


@settings(max_examples=300, deadline=None)
@given(random_dags())
def test_non_descendants_match_transitive_closure(case):
    scm, edges, subset = case
    d = scm.d
    reach = np.eye(d, dtype=bool)
    for a, b in edges:
        reach[a, b] = True
    for k in range(d):
        reach |= reach[:, [k]] & reach[[k], :]
    hit = [any(reach[scm.index(s), j] for s in subset) for j in range(d)]
    want = [scm.names[j] for j in range(d) if not hit[j]]
    assert non_descendants(scm, subset) == want


# ------------------------------------------------ interventions, abduction


def test_hard_intervention_on_everything_ignores_history():
    scm = chain()
    iv = Intervention(("a", "b", "c"), (1.0, -2.0, 0.5), "hard", apply_at=4)
    for hist in (np.zeros((2, 3)), np.full((2, 3), 9.0)):
        out = interventional_sample(scm, hist, 2, iv, 50, seed=1)
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (50, 1)))


def test_null_soft_intervention_matches_rollout_without_noise():
    scm = chain(std=0.0)
    hist = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, -1.0]])
    iv = Intervention(("b",), (0.0,), apply_at=3)
    out = interventional_sample(scm, hist, 0, iv, 4, seed=0)
    want = forecast_uncertainty_set(scm, hist, 0, 3, n_samples=4, seed=9)
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-14)


def test_example1_intervened_label_score_matches_closed_form():
    alpha, c, theta = 0.5, 1.0, 0.7
    scm = benchmarks.ar1_trend_process(alpha, c)
    hist = np.array([[0.0], [0.4]])
    t, tau = 2, 3
    iv = Intervention(("x",), (theta,), apply_at=t + tau)
    out = interventional_sample(scm, hist, t, iv, 40_000, seed=11)[:, 0]
    i = np.arange(1, tau + 1)
    mean = alpha**tau * 0.4 + np.sum(alpha ** (tau - i) * (-c * (t + i))) + theta
    se = out.std(ddof=1) / np.sqrt(out.size)
    assert abs(out.mean() - mean) < 3 * se


def test_counterfactual_propagates_linear_coefficient():
    scm = benchmarks.build("linear-anm", "none", 0.0)
    window = simulate(scm, 3, 1, seed=0).window(3, 1)[0]
    base = abduct_and_counterfactual(scm, window, Intervention(("x2",), (0.0,), apply_at=3))
    moved = abduct_and_counterfactual(scm, window, Intervention(("x1",), (1.0,), apply_at=3))
    np.testing.assert_allclose(base, window[-1], rtol=1e-12, atol=1e-12)
    assert moved[0] - base[0] == pytest.approx(1.0)
    assert moved[1] - base[1] == pytest.approx(-0.25)
    assert moved[2] - base[2] == pytest.approx(0.05 + 0.25 * -0.25)


@settings(max_examples=50, deadline=None)
@given(name=st.sampled_from(benchmarks.BENCHMARKS), seed=st.integers(0, 10_000), t=st.integers(0, 15))
def test_abduction_roundtrip(name, seed, t):
    scm = benchmarks.build(name, "linear+seasonal", 1.0)
    panel = simulate(scm, 15, 8, seed=seed, labels=False)
    window = panel.window(t, scm.lag)
    feat = scm.actionable[0]
    try:
        out = abduct_and_counterfactual(scm, window, Intervention((feat,), (0.0,), apply_at=t))
    except UnsupportedAbduction:
        pytest.skip("observation outside an invertible link's range")
    x = window[:, -1]
    assert np.all(np.abs(out - x) <= 1e-12 * np.maximum(1.0, np.abs(x)))


def test_counterfactual_equals_interventional_without_noise():
    scm = chain(std=0.0)
    hist = np.array([[0.5, 0.0, 1.0], [1.0, 2.0, 3.0]])
    now = interventional_sample(scm, hist, 0, Intervention(("a",), (0.0,), apply_at=1), 1, 0)[0]
    window = np.vstack([hist[-1], now])
    iv = Intervention(("a",), (1.5,), apply_at=1)
    cf = abduct_and_counterfactual(scm, window, iv)
    it = interventional_sample(scm, hist, 0, iv, 3, seed=5)
    np.testing.assert_allclose(it, np.tile(cf, (3, 1)), atol=1e-12)


def test_thresholded_equation_with_random_noise_is_not_invertible():
    eqs = (
        StructuralEquation("a", (), NoiseSpec.gaussian()),
        StructuralEquation("b", (), NoiseSpec.gaussian(), link="step", inner=(Term.linear("a", 1.0),)),
    )
    scm = ScmSpec((Variable("a", actionable=True), Variable("b")), eqs)
    with pytest.raises(UnsupportedAbduction):
        abduct_and_counterfactual(scm, np.zeros((2, 2)), Intervention(("a",), (1.0,), apply_at=0))


def test_intervention_validation():
    scm = benchmarks.build("loan")
    with pytest.raises(ScmError):
        Intervention((), ())
    with pytest.raises(ScmError):
        Intervention(("income",), (1.0, 2.0))
    with pytest.raises(ScmError, match="not actionable"):
        Intervention(("gender",), (1.0,)).validate(scm)


def test_forecast_set_without_noise_is_deterministic_rollout():
    scm = ar1(0.5, 0.0)
    out = forecast_uncertainty_set(scm, np.array([[0.0], [8.0]]), 0, 3, n_samples=20, seed=1)
    assert out.shape == (20, 1)
    np.testing.assert_array_equal(out, 1.0)


def test_forecast_set_tracks_example1_mean():
    alpha, c = 0.5, 1.0
    scm = benchmarks.ar1_trend_process(alpha, c)
    x_now, t, tau = 1.0, 4, 5
    out = forecast_uncertainty_set(scm, np.array([[0.0], [x_now]]), t, tau, n_samples=20_000, seed=2)[:, 0]
    i = np.arange(1, tau + 1)
    mean = alpha**tau * x_now + np.sum(alpha ** (tau - i) * (-c * (t + i)))
    assert abs(out.mean() - mean) < 3 * out.std(ddof=1) / np.sqrt(out.size)


def test_forecast_set_rejects_nonpositive_lag():
    with pytest.raises(ScmError):
        forecast_uncertainty_set(ar1(), np.zeros((2, 1)), 0, 0)
