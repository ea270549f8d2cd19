import numpy as np
import pytest

from temporal_recourse import benchmarks
from temporal_recourse.estimator import Estimator, FitDegenerate, fit, forecast_quality
from temporal_recourse.scm import (
    LabelSpec,
    NoiseSpec,
    ScmError,
    ScmSpec,
    StructuralEquation,
    Term,
    TrendSpec,
    Variable,
    rollout,
    simulate,
)


def linear_pair(std=1.0, drift=0.05, burn_in=0):
    eqs = (
        StructuralEquation("a", (Term.linear("a", 0.6, 1), Term.time(drift)), NoiseSpec.gaussian(0, std)),
        StructuralEquation("b", (Term.linear("b", 0.4, 1), Term.linear("a", -0.8)), NoiseSpec.gaussian(0, std)),
    )
    return ScmSpec((Variable("a", actionable=True), Variable("b", actionable=True)), eqs,
                   LabelSpec({"b": 1.0}), burn_in=burn_in)


def ramp_ar1(slope=0.1, std=1.0, alpha=0.5):
    trend = TrendSpec(sign=1, custom={"kind": "ramp", "slope": slope, "offset": 0.0})
    eq = StructuralEquation("x", (Term.linear("x", alpha, 1),), NoiseSpec.gaussian(0, std), trend=trend)
    return ScmSpec((Variable("x", actionable=True),), (eq,), LabelSpec({"x": 1.0}), burn_in=0)


def ols_standard_errors(X, y):
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    resid = y - X @ coef
    s2 = resid @ resid / (len(y) - X.shape[1])
    return np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))


def test_recovers_linear_coefficients():
    truth = linear_pair()
    panel = simulate(truth, 40, 500, seed=3, labels=False)
    est = fit(panel, truth, cutoff=40, targets="endogenous")
    s = panel.states
    t = np.broadcast_to(np.arange(1, 41, dtype=float), (500, 40)).reshape(-1)
    one = np.ones_like(t)
    a_prev, a_now = s[:, :-1, 0].reshape(-1), s[:, 1:, 0].reshape(-1)
    b_prev, b_now = s[:, :-1, 1].reshape(-1), s[:, 1:, 1].reshape(-1)
    se_a = ols_standard_errors(np.column_stack([a_prev, t, one]), a_now)
    se_b = ols_standard_errors(np.column_stack([b_prev, a_now, t, one]), b_now)
    fa, fb = est.fit_for("a"), est.fit_for("b")
    assert fa.inputs == (("a", 1), ("t", 0), ("1", 0))
    assert fb.inputs == (("b", 1), ("a", 0), ("t", 0), ("1", 0))
    assert np.all(np.abs(np.array(fa.coefficients) - [0.6, 0.05, 0.0]) < 3 * se_a)
    assert np.all(np.abs(np.array(fb.coefficients) - [0.4, -0.8, 0.0, 0.0]) < 3 * se_b)
    assert fa.residual_variance == pytest.approx(1.0, rel=0.05)


def test_only_actionable_equations_are_replaced_by_default():
    truth = benchmarks.build("loan", "linear", 1.0)
    est = fit(simulate(truth, 30, 300, seed=0), truth)
    assert {f.target for f in est.fits} == {"income", "savings"}
    for eq, orig in zip(est.scm.equations, truth.equations):
        assert (eq == orig) == (eq.target not in ("income", "savings"))


def test_constant_feature_gives_intercept_only_fit():
    eqs = (
        StructuralEquation("c", (), NoiseSpec.point(2.0)),
        StructuralEquation("x", (Term.linear("x", 0.5, 1),), NoiseSpec.gaussian(0, 1)),
    )
    truth = ScmSpec((Variable("c", actionable=True), Variable("x", actionable=True)), eqs, burn_in=0)
    est = fit(simulate(truth, 20, 50, seed=0, labels=False), truth, cutoff=20, targets="endogenous")
    np.testing.assert_allclose(est.fit_for("c").coefficients, [0.0, 0.0, 2.0], atol=1e-9)


def test_collinear_parents_are_reported():
    eqs = (
        StructuralEquation("a", (), NoiseSpec.gaussian(0, 1)),
        StructuralEquation("c", (Term.linear("a", 2.0),), NoiseSpec.point(0.0)),
        StructuralEquation("b", (Term.linear("a", 1.0), Term.linear("c", 1.0)), NoiseSpec.gaussian(0, 1)),
    )
    truth = ScmSpec(tuple(Variable(n, actionable=True) for n in "acb"), eqs, burn_in=0)
    with pytest.raises(FitDegenerate) as err:
        fit(simulate(truth, 10, 100, seed=0, labels=False), truth, targets="endogenous")
    assert err.value.variable == "b"


def test_fit_rejects_bad_arguments():
    truth = linear_pair()
    panel = simulate(truth, 10, 20, seed=0, labels=False)
    with pytest.raises(ScmError):
        fit(panel, truth, cutoff=11)
    with pytest.raises(ScmError):
        fit(panel, truth, targets="all")
    with pytest.raises(ScmError):
        fit(panel, benchmarks.build("linear-anm"))
    with pytest.raises(ScmError):
        fit([], truth)


def test_document_roundtrip_keeps_provenance():
    truth = linear_pair()
    panel = simulate(truth, 10, 40, seed=0, labels=False)
    est = fit(panel, truth, cutoff=8, seed=5, targets="endogenous")
    back = Estimator.loads(est.dumps())
    assert back == est
    assert back.provenance["cutoff"] == 8 and back.provenance["seed"] == 5
    assert len(back.provenance["data_hash"]) == 64
    assert fit(panel, truth, cutoff=8, seed=5, targets="endogenous").dumps() == est.dumps()
    with pytest.raises(ScmError):
        Estimator.loads("schema_version: 7\nkind: estimator\n")


# ------------------------------------------------------- forecast quality


def test_true_model_mean_forecast_error_is_noise_variance():
    alpha, std = 0.5, 1.5
    truth = ramp_ar1(slope=0.0, std=std, alpha=alpha)
    q = forecast_quality(truth, truth, 6, 20_000, seed=1, stochastic=False, share_known_noise=False)
    want = std**2 * np.cumsum(alpha ** (2 * np.arange(6)))
    se = want * np.sqrt(2 / 20_000)
    assert np.all(np.abs(q["per_step"] - want) < 4 * se)


def test_exact_model_without_noise_has_zero_error():
    truth = linear_pair(std=0.0)
    q = forecast_quality(truth, truth, 10, 50, seed=2, stochastic=False)
    assert q["overall"] == 0.0
    q = forecast_quality(linear_pair(std=1.0), linear_pair(std=1.0), 10, 50, seed=2)
    assert q["overall"] == 0.0  # every equation shared, so every draw shared


def test_held_out_one_step_error_near_irreducible():
    truth = linear_pair()
    est = fit(simulate(truth, 40, 500, seed=0, labels=False), truth, cutoff=40, targets="endogenous")
    q = forecast_quality(est, truth, 1, 5000, seed=11, start=20, stochastic=False, share_known_noise=False)
    # b inherits the unforecastable part of a through its -0.8 edge
    irreducible = np.array([1.0, 1.0 + 0.8**2])
    assert np.all(q["per_feature"] <= 1.2 * irreducible)


def test_dropping_time_makes_error_grow_with_horizon():
    truth = ramp_ar1(slope=0.2)
    panel = simulate(truth, 50, 500, seed=0, labels=False)
    blind = fit(panel, truth, cutoff=50, use_time=False)
    steps = forecast_quality(blind, truth, 50, 2000, seed=4, start=50, stochastic=False)["per_step"]
    coarse = steps.reshape(10, 5).mean(axis=1)
    assert np.all(np.diff(coarse) > 0)
    aware = fit(panel, truth, cutoff=50, use_time=True)
    assert forecast_quality(aware, truth, 50, 2000, seed=4, start=50, stochastic=False)["overall"] < steps.mean()


def test_linear_trend_extrapolates_beyond_cutoff():
    truth = ramp_ar1(slope=0.2)
    panel = simulate(truth, 50, 500, seed=0, labels=False)
    est = fit(panel, truth, cutoff=50)
    window = panel.window(50, 1)
    zero = np.zeros((500, 50, 1))
    far_est = rollout(est.scm, window, 50, 50, zero)[:, -1].mean()
    far_true = rollout(truth, window, 50, 50, zero)[:, -1].mean()
    assert abs(far_est - far_true) <= 0.1 * abs(far_true)


def test_forecast_quality_checks_arguments():
    truth = linear_pair()
    with pytest.raises(ScmError):
        forecast_quality(benchmarks.build("linear-anm"), truth, 5, 10)
    with pytest.raises(ScmError):
        forecast_quality(truth, truth, 0, 10)
    with pytest.raises(ScmError):
        forecast_quality(truth, truth, 5, 10, start=-1)


@pytest.mark.xfail(strict=True, reason="least-squares fit of the published graph gives 6.4, not 10.4")
def test_loan_estimator_mse_matches_reported_value():
    truth = benchmarks.build("loan", "linear+seasonal", 1.0)
    est = fit(simulate(truth, 100, 2000, seed=1), truth, cutoff=50)
    q = forecast_quality(est, truth, 50, 2000, seed=7)
    assert abs(q["overall"] - 10.4) <= 0.5
