"""Ready-made temporal SCMs: two synthetic additive-noise models and three
realistic graphs (adult, compas, loan).

Every variable follows a first-order autoregressive structural equation.
A trend ``m(t)`` is attached to one designated variable per benchmark.

The adult and compas graphs use nonlinear structural functions.  They are
realized as small tanh regressors fitted (deterministically) to the
reference functions below, sampled on the variables' marginal distributions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .scm import (
    LabelSpec,
    NoiseSpec,
    ScmError,
    ScmSpec,
    StructuralEquation,
    Term,
    TrendSpec,
    Variable,
    sample_labels,
    sigmoid,
)

BENCHMARKS = ("linear-anm", "nonlinear-anm", "adult", "compas", "loan")
TREND_KINDS = ("none", "linear", "seasonal", "linear+seasonal")

# (beta_linear, beta_seasonal) when the component is switched on, and sign
_TREND_PARAMS = {
    "linear-anm": (1.0, 1.5, -1),
    "nonlinear-anm": (2.0, 5.0, -1),
    "adult": (1.0, 1.0, -1),
    "compas": (0.3, 1.0, +1),
    "loan": (0.5, 5.0, -1),
}
TREND_TARGET = {
    "linear-anm": "x3",
    "nonlinear-anm": "x3",
    "adult": "hours",
    "compas": "priors",
    "loan": "income",
}
SYNTHETIC = ("linear-anm", "nonlinear-anm")


@dataclass(frozen=True)
class BenchmarkId:
    name: str
    trend: str = "linear+seasonal"
    alpha: float = 0.0

    def __post_init__(self):
        if self.name not in BENCHMARKS:
            raise ScmError(f"unknown benchmark {self.name!r}; choose from {BENCHMARKS}")
        if self.trend not in TREND_KINDS:
            raise ScmError(f"unknown trend kind {self.trend!r}; choose from {TREND_KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ScmError("alpha must lie in [0, 1]")


def trend_spec(name: str, kind: str = "linear+seasonal", alpha: float = 0.0) -> TrendSpec:
    bl, bs, sign = _TREND_PARAMS[name]
    return TrendSpec(
        alpha=float(alpha) if kind != "none" else 0.0,
        beta_linear=bl if "linear" in kind else 0.0,
        beta_seasonal=bs if "seasonal" in kind else 0.0,
        sign=sign,
    )


def build(name: str | BenchmarkId, trend: str = "linear+seasonal", alpha: float = 0.0) -> ScmSpec:
    bid = name if isinstance(name, BenchmarkId) else BenchmarkId(name, trend, alpha)
    builder = {
        "linear-anm": _linear_anm,
        "nonlinear-anm": _nonlinear_anm,
        "adult": _adult,
        "compas": _compas,
        "loan": _loan,
    }[bid.name]
    return builder(trend_spec(bid.name, bid.trend, bid.alpha))


def label_sampler(name: str, states: np.ndarray, seed: int, center: float | None = None) -> np.ndarray:
    """Bernoulli labels for ``states`` of shape (n, T, d) or (n, d)."""
    return sample_labels(build(name), states, seed, center=center)


def _ar(var: str, coef: float = 0.5) -> Term:
    return Term.linear(var, coef, lag=1)


# --------------------------------------------------------------------------
# synthetic additive-noise models
# --------------------------------------------------------------------------

_ANM_LABEL = LabelSpec({"x1": 1.0, "x2": 1.0, "x3": 1.0}, scale=2.5, center=None)
_ANM_VARS = tuple(Variable(n, actionable=True) for n in ("x1", "x2", "x3"))


def _linear_anm(trend: TrendSpec) -> ScmSpec:
    eqs = (
        StructuralEquation("x1", (_ar("x1"),), NoiseSpec.mixture([(0.5, -1.0, 1.5), (0.5, 1.0, 1.0)])),
        StructuralEquation("x2", (_ar("x2"), Term.linear("x1", -0.25)), NoiseSpec.gaussian(0.0, 0.1)),
        StructuralEquation(
            "x3",
            (_ar("x3"), Term.linear("x1", 0.05), Term.linear("x2", 0.25)),
            NoiseSpec.gaussian(0.0, 1.0),
            trend=trend,
        ),
    )
    return ScmSpec(_ANM_VARS, eqs, _ANM_LABEL, lag=1, name="linear-anm")


def _nonlinear_anm(trend: TrendSpec) -> ScmSpec:
    eqs = (
        StructuralEquation("x1", (_ar("x1"),), NoiseSpec.mixture([(0.5, -2.0, 1.5), (0.5, 1.0, 1.0)])),
        StructuralEquation(
            "x2",
            (_ar("x2"), Term.const(-1.0), Term.sigmoid("x1", coef=3.0, scale=2.0)),
            NoiseSpec.gaussian(0.0, 0.1),
        ),
        StructuralEquation(
            "x3",
            (_ar("x3"), Term.linear("x1", 0.05), Term.square("x2", 0.25)),
            NoiseSpec.gaussian(0.0, 1.0),
            trend=trend,
        ),
    )
    return ScmSpec(_ANM_VARS, eqs, _ANM_LABEL, lag=1, name="nonlinear-anm")


def ar1_trend_process(alpha: float, c: float, *, beta: float = 1.0, mu_x: float = 0.0,
                      sigma_x: float = 1.0, mu_m: float = 0.0, sigma_m: float = 0.0) -> ScmSpec:
    """Single-feature process ``X^t = alpha X^{t-1} - c t + U_m + U_x`` with
    classifier score ``beta * x``.

    The two Gaussian noise terms are merged into one.
    """
    noise = NoiseSpec.gaussian(mu_x + mu_m, float(np.hypot(sigma_x, sigma_m)))
    trend = TrendSpec(sign=+1, custom={"kind": "ramp", "slope": -float(c), "offset": 0.0})
    eq = StructuralEquation("x", (_ar("x", alpha),), noise, trend=trend)
    return ScmSpec((Variable("x", actionable=True),), (eq,),
                   LabelSpec({"x": float(beta)}, center=0.0), lag=1, name="ar1-trend")


def noise_sweep_anm(name: str = "linear-anm", sigma_u: float = 1.0, burn_in: int = 60) -> ScmSpec:
    """Trend-free synthetic ANM whose exogenous noise is ``N(0, sigma_u)`` for
    every variable, on top of a persistent per-individual offset.

    Each ``x_i`` gains a frozen parent ``u_<x_i>`` drawn once from the
    original noise distribution of ``x_i``, so the population stays
    heterogeneous when ``sigma_u = 0`` and every individual then rests at its
    own fixed point.  The offsets are not actionable and are not read by the
    label; they occupy the last three columns.
    """
    if name not in SYNTHETIC:
        raise ScmError(f"noise sweeps are defined for {SYNTHETIC}")
    if sigma_u < 0:
        raise ScmError("sigma_u must be non-negative")
    base = build(name, "none", 0.0)
    eqs = [replace(eq, outer=tuple(eq.outer) + (Term.linear(f"u_{eq.target}", 1.0),),
                   noise=NoiseSpec.gaussian(0.0, sigma_u)) for eq in base.equations]
    eqs += [StructuralEquation(f"u_{eq.target}", (), eq.noise, frozen=True) for eq in base.equations]
    variables = tuple(base.variables) + tuple(Variable(f"u_{v.name}") for v in base.variables)
    return ScmSpec(variables, tuple(eqs), base.label, lag=1, burn_in=burn_in,
                   name=f"{name}-sigma{sigma_u:g}")


# --------------------------------------------------------------------------
# fitted structural functions
# --------------------------------------------------------------------------


def _fit_tanh_regressor(reference, inputs: np.ndarray, hidden: int, seed: int):
    """Random tanh features with a least-squares read-out."""
    rng = np.random.default_rng(seed)
    p = inputs.shape[1]
    mu = inputs.mean(axis=0)
    sd = inputs.std(axis=0) + 1e-12
    w1 = rng.normal(0.0, 1.0, (hidden, p)) / sd / np.sqrt(p)
    b1 = rng.uniform(-1.0, 1.0, hidden) - w1 @ mu
    feats = np.tanh(inputs @ w1.T + b1)
    design = np.hstack([feats, np.ones((len(inputs), 1))])
    target = reference(inputs)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return w1, b1, coef[:-1], float(coef[-1])


def _regressor_term(parents, reference, sampler, hidden=24, seed=0) -> Term:
    inputs = sampler(np.random.default_rng(seed + 1), 4000)
    w1, b1, w2, b2 = _fit_tanh_regressor(reference, inputs, hidden, seed)
    return Term.mlp([(p, 0) for p in parents], w1, b1, w2, b2)


def _squashed_regressor_term(parents, reference, sampler, hidden=24, seed=0) -> Term:
    """Regressor for ``sigmoid(reference)``: fitted on the logit scale, squashed on output."""
    inputs = sampler(np.random.default_rng(seed + 1), 4000)
    w1, b1, w2, b2 = _fit_tanh_regressor(reference, inputs, hidden, seed)
    return Term.mlp([(p, 0) for p in parents], w1, b1, w2, b2, squash=True)


# reference structural functions; columns follow the parent order given
def adult_married_ref(z):
    sex, age, nat = z.T
    return 1.0 * age + 0.6 * sex + 0.3 * nat - 0.8 + 0.2 * np.tanh(age * sex)


def adult_education_ref(z):
    sex, age, nat, mar = z.T
    return 0.4 * age - 0.2 * age**2 + 0.3 * nat + 0.3 * mar - 0.1 * sex + 0.1


def adult_hours_ref(z):
    sex, age, nat, mar = z.T
    return 0.4 * sex + 0.3 * mar - 0.3 * age**2 + 0.2 * nat - 0.1 + 0.2 * np.tanh(age)


def compas_charge_ref(z):
    sex, age = z.T
    return 0.5 * sex - 0.3 * age + 0.2


def compas_priors_ref(z):
    sex, age, charge = z.T
    return 0.6 * sex - 0.4 * age + 0.5 * charge + 0.2 + 0.1 * np.tanh(age - 1.0)


def _adult_inputs(with_married: bool):
    def sampler(rng, n):
        sex = (rng.random(n) < 0.9).astype(float)
        age = rng.standard_normal(n)
        nat = (rng.random(n) < 0.9).astype(float)
        cols = [sex, age, nat]
        if with_married:
            cols.append((adult_married_ref(np.column_stack(cols)) > 0).astype(float))
        return np.column_stack(cols)

    return sampler


def _compas_inputs(with_charge: bool):
    def sampler(rng, n):
        sex = (rng.random(n) < 0.8).astype(float)
        age = rng.poisson(1.0, n).astype(float)
        cols = [sex, age]
        if with_charge:
            cols.append(sigmoid(compas_charge_ref(np.column_stack(cols))) + rng.standard_normal(n))
        return np.column_stack(cols)

    return sampler


@lru_cache(maxsize=None)
def _adult_terms():
    return (
        _regressor_term(("sex", "age", "nationality"), adult_married_ref, _adult_inputs(False), seed=11),
        _regressor_term(("sex", "age", "nationality", "married"), adult_education_ref,
                        _adult_inputs(True), seed=12),
        _regressor_term(("sex", "age", "nationality", "married"), adult_hours_ref,
                        _adult_inputs(True), seed=13),
    )


@lru_cache(maxsize=None)
def _compas_terms():
    return (
        _squashed_regressor_term(("sex", "age"), compas_charge_ref, _compas_inputs(False), seed=21),
        _regressor_term(("sex", "age", "charge"), compas_priors_ref, _compas_inputs(True), seed=22),
    )


# --------------------------------------------------------------------------
# realistic graphs
# --------------------------------------------------------------------------


def _adult(trend: TrendSpec) -> ScmSpec:
    f_m, f_e, f_h = _adult_terms()
    variables = (
        Variable("sex", categorical=True),
        Variable("age"),
        Variable("nationality", categorical=True),
        Variable("married", categorical=True),
        Variable("education", actionable=True, monotone=True),
        Variable("hours", actionable=True),
    )
    eqs = (
        StructuralEquation("sex", (), NoiseSpec.bernoulli(0.9), frozen=True),
        StructuralEquation("age", (), NoiseSpec.gaussian(0.0, 1.0), frozen=True),
        StructuralEquation("nationality", (), NoiseSpec.bernoulli(0.9), frozen=True),
        StructuralEquation("married", (), NoiseSpec.point(0.0), link="step", inner=(f_m,), frozen=True),
        StructuralEquation("education", (_ar("education"), f_e), NoiseSpec.gaussian(0.0, 1.0)),
        StructuralEquation("hours", (_ar("hours"), f_h), NoiseSpec.gaussian(0.0, 1.0), trend=trend),
    )
    label = LabelSpec(
        {"education": 1.0, "hours": 1.0, "married": 0.5, "age": 0.3}, scale=1.5, center=None
    )
    return ScmSpec(variables, eqs, label, lag=1, name="adult", burn_in=0)


def _compas(trend: TrendSpec) -> ScmSpec:
    f_c, f_p = _compas_terms()
    variables = (
        Variable("sex", categorical=True),
        Variable("age"),
        Variable("charge"),
        Variable("priors", actionable=True),
    )
    eqs = (
        StructuralEquation("sex", (), NoiseSpec.bernoulli(0.8), frozen=True),
        StructuralEquation("age", (), NoiseSpec.poisson(1.0), frozen=True),
        StructuralEquation("charge", (f_c,), NoiseSpec.gaussian(0.0, 1.0), frozen=True),
        StructuralEquation("priors", (_ar("priors"), f_p), NoiseSpec.gaussian(0.0, 1.0), trend=trend),
    )
    label = LabelSpec({"priors": -1.0, "age": 0.3, "charge": -0.2}, scale=1.2, center=None)
    return ScmSpec(variables, eqs, label, lag=1, name="compas", burn_in=0)


def _loan(trend: TrendSpec) -> ScmSpec:
    variables = (
        Variable("gender", categorical=True),
        Variable("age"),
        Variable("education"),
        Variable("loan_amount"),
        Variable("duration"),
        Variable("income", actionable=True),
        Variable("savings", actionable=True),
    )
    eqs = (
        StructuralEquation("gender", (), NoiseSpec.bernoulli(0.5), frozen=True),
        StructuralEquation("age", (_ar("age"), Term.const(-35.0)), NoiseSpec.gamma(10.0, 3.5)),
        StructuralEquation(
            "education",
            (_ar("education"), Term.const(-0.5)),
            NoiseSpec.gaussian(0.0, 0.5),
            link="sigmoid",
            inner=(Term.const(-1.0), Term.linear("gender", 0.5), Term.sigmoid("age", scale=0.1)),
        ),
        StructuralEquation(
            "loan_amount",
            (_ar("loan_amount"), Term.const(1.0), Term.square("age", -0.01, shift=-5.0),
             Term.linear("gender", 1.0)),
            NoiseSpec.gaussian(0.0, 2.0),
        ),
        StructuralEquation(
            "duration",
            (_ar("duration"), Term.const(-1.0), Term.linear("age", 0.1), Term.linear("gender", 2.0),
             Term.linear("loan_amount", 1.0)),
            NoiseSpec.gaussian(0.0, 3.0),
        ),
        StructuralEquation(
            "income",
            (_ar("income"), Term.const(-4.0 + 3.5), Term.linear("age", 0.1), Term.linear("gender", 2.0),
             Term.product("gender", "education")),
            NoiseSpec.gaussian(0.0, 2.0),
            trend=trend,
        ),
        StructuralEquation(
            "savings",
            (_ar("savings"), Term.const(-4.0), Term.positive_part("income", 1.5)),
            NoiseSpec.gaussian(0.0, 5.0),
        ),
    )
    label = LabelSpec(
        {"loan_amount": -1.0, "duration": -1.0, "income": 1.0, "savings": 1.0},
        scale=0.3,
        interactions=(("income", "savings", 1.0),),
        center=0.0,
    )
    return ScmSpec(variables, eqs, label, lag=1, name="loan", burn_in=0)


__all__ = [
    "BENCHMARKS", "TREND_KINDS", "TREND_TARGET", "SYNTHETIC", "BenchmarkId", "build", "trend_spec",
    "label_sampler", "ar1_trend_process", "noise_sweep_anm",
]
