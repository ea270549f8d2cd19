"""Discrete-time structural causal models with independent additive noise.

An :class:`ScmSpec` describes a time series in which every variable at time
``t`` is a function of its contemporaneous parents, its own (and other
variables') lagged values, an optional deterministic trend and a freshly drawn
noise term.  All arrays handled here are float64 numpy arrays; batches of
individuals are stacked along the first axis.

State windows are chronological: ``window[:, -1]`` is the current state and
``window[:, -1 - k]`` is the state ``k`` steps earlier.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

SCHEMA_VERSION = 1


class ScmError(ValueError):
    """Invalid model specification or query."""


class SimulationDivergence(RuntimeError):
    """A structural equation produced a non-finite value."""

    def __init__(self, variable: str, t: int):
        super().__init__(f"non-finite value for variable {variable!r} at t={t}")
        self.variable = variable
        self.t = t


class UnsupportedAbduction(ScmError):
    """The noise of an equation cannot be recovered from an observation."""


def sigmoid(z):
    # exp(-|z|) never overflows and stays nonzero far into the left tail
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

_NOISE_KINDS = ("gaussian", "mixture", "bernoulli", "poisson", "gamma", "point")


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of one exogenous noise term.

    ``params`` holds the kind-specific parameters:

    * gaussian: ``mean``, ``std``
    * mixture: ``components`` as a tuple of ``(weight, mean, std)``
    * bernoulli: ``p``
    * poisson: ``rate``
    * gamma: ``shape``, ``scale``
    * point: ``value``
    """

    kind: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise ScmError(f"unknown noise kind {self.kind!r}")
        p = self.params
        if self.kind == "gaussian":
            if float(p["std"]) < 0:
                raise ScmError("gaussian std must be non-negative")
        elif self.kind == "mixture":
            comps = p["components"]
            if not comps:
                raise ScmError("mixture needs at least one component")
            w = np.array([c[0] for c in comps], dtype=float)
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ScmError("mixture weights must be positive and sum to 1")
            if any(float(c[2]) < 0 for c in comps):
                raise ScmError("mixture std must be non-negative")
        elif self.kind == "bernoulli":
            if not 0.0 <= float(p["p"]) <= 1.0:
                raise ScmError("bernoulli p must lie in [0, 1]")
        elif self.kind == "poisson":
            if float(p["rate"]) <= 0:
                raise ScmError("poisson rate must be positive")
        elif self.kind == "gamma":
            if float(p["shape"]) <= 0 or float(p["scale"]) <= 0:
                raise ScmError("gamma shape and scale must be positive")

    @staticmethod
    def gaussian(mean: float = 0.0, std: float = 1.0) -> "NoiseSpec":
        return NoiseSpec("gaussian", {"mean": float(mean), "std": float(std)})

    @staticmethod
    def mixture(components: Sequence[tuple[float, float, float]]) -> "NoiseSpec":
        comps = tuple((float(w), float(m), float(s)) for w, m, s in components)
        return NoiseSpec("mixture", {"components": comps})

    @staticmethod
    def bernoulli(p: float) -> "NoiseSpec":
        return NoiseSpec("bernoulli", {"p": float(p)})

    @staticmethod
    def poisson(rate: float) -> "NoiseSpec":
        return NoiseSpec("poisson", {"rate": float(rate)})

    @staticmethod
    def gamma(shape: float, scale: float) -> "NoiseSpec":
        return NoiseSpec("gamma", {"shape": float(shape), "scale": float(scale)})

    @staticmethod
    def point(value: float = 0.0) -> "NoiseSpec":
        return NoiseSpec("point", {"value": float(value)})

    @property
    def mean(self) -> float:
        p = self.params
        if self.kind == "gaussian":
            return float(p["mean"])
        if self.kind == "mixture":
            return float(sum(w * m for w, m, _ in p["components"]))
        if self.kind == "bernoulli":
            return float(p["p"])
        if self.kind == "poisson":
            return float(p["rate"])
        if self.kind == "gamma":
            return float(p["shape"]) * float(p["scale"])
        return float(p["value"])

    @property
    def variance(self) -> float:
        p = self.params
        if self.kind == "gaussian":
            return float(p["std"]) ** 2
        if self.kind == "mixture":
            m = self.mean
            return float(sum(w * (s * s + (mu - m) ** 2) for w, mu, s in p["components"]))
        if self.kind == "bernoulli":
            return float(p["p"]) * (1 - float(p["p"]))
        if self.kind == "poisson":
            return float(p["rate"])
        if self.kind == "gamma":
            return float(p["shape"]) * float(p["scale"]) ** 2
        return 0.0

    @property
    def degenerate(self) -> bool:
        return self.variance == 0.0

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = self.params
        if self.kind == "gaussian":
            if p["std"] == 0:
                return np.full(size, float(p["mean"]))
            return rng.normal(p["mean"], p["std"], size)
        if self.kind == "mixture":
            comps = p["components"]
            w = np.array([c[0] for c in comps])
            mu = np.array([c[1] for c in comps])
            sd = np.array([c[2] for c in comps])
            k = rng.choice(len(comps), size=size, p=w)
            return mu[k] + sd[k] * rng.standard_normal(size)
        if self.kind == "bernoulli":
            return (rng.random(size) < p["p"]).astype(float)
        if self.kind == "poisson":
            return rng.poisson(p["rate"], size).astype(float)
        if self.kind == "gamma":
            return rng.gamma(p["shape"], p["scale"], size)
        return np.full(size, float(p["value"]))

    def to_dict(self) -> dict:
        params = dict(self.params)
        if self.kind == "mixture":
            params["components"] = [list(c) for c in params["components"]]
        return {"kind": self.kind, **params}

    @staticmethod
    def from_dict(d: Mapping) -> "NoiseSpec":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "mixture":
            return NoiseSpec.mixture(d["components"])
        return NoiseSpec(kind, {k: float(v) for k, v in d.items()})


# --------------------------------------------------------------------------
# trends
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrendSpec:
    """Deterministic trend ``m(t)``.

    The default form is ``alpha * (beta_linear * min(0.05 t, 10) +
    beta_seasonal * |sin(0.5 t)|)``.  ``custom`` replaces it:

    * ``{"kind": "step", "start": s, "level": v}``: ``v`` for ``t >= s``, else 0
    * ``{"kind": "ramp", "slope": c, "offset": b}``: ``c * t + b``

    ``sign`` is applied when the trend enters a structural equation.
    """

    alpha: float = 0.0
    beta_linear: float = 0.0
    beta_seasonal: float = 0.0
    sign: int = -1
    custom: Mapping[str, float] | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ScmError("trend alpha must lie in [0, 1]")
        if self.beta_linear < 0 or self.beta_seasonal < 0:
            raise ScmError("trend betas must be non-negative")
        if self.sign not in (1, -1):
            raise ScmError("trend sign must be +1 or -1")
        if self.custom is not None and self.custom.get("kind") not in ("step", "ramp"):
            raise ScmError(f"unknown custom trend {self.custom!r}")

    def to_dict(self) -> dict:
        d = {
            "alpha": self.alpha,
            "beta_linear": self.beta_linear,
            "beta_seasonal": self.beta_seasonal,
            "sign": self.sign,
        }
        if self.custom is not None:
            d["custom"] = dict(self.custom)
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "TrendSpec":
        return TrendSpec(
            alpha=float(d.get("alpha", 0.0)),
            beta_linear=float(d.get("beta_linear", 0.0)),
            beta_seasonal=float(d.get("beta_seasonal", 0.0)),
            sign=int(d.get("sign", -1)),
            custom=dict(d["custom"]) if d.get("custom") is not None else None,
        )


def evaluate_trend(spec: TrendSpec, t) -> float | np.ndarray:
    """Value of ``m(t)`` before the sign is applied.  ``t`` must be >= 0."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ScmError("trend is defined for t >= 0")
    return _trend_value(spec, t_arr)


def _trend_value(spec: TrendSpec | None, t):
    # Burn-in steps run at negative t, where every trend is switched off.
    t = np.asarray(t, dtype=float)
    if spec is None:
        return np.zeros_like(t)[()]
    if spec.custom is not None:
        c = spec.custom
        if c["kind"] == "step":
            out = np.where(t >= float(c["start"]), float(c["level"]), 0.0)
        else:
            out = float(c["slope"]) * t + float(c.get("offset", 0.0))
        return np.where(t < 0, 0.0, out)[()]
    if spec.alpha == 0.0:
        return np.zeros_like(t)[()]
    val = spec.alpha * (
        spec.beta_linear * np.minimum(0.05 * t, 10.0) + spec.beta_seasonal * np.abs(np.sin(0.5 * t))
    )
    return np.where(t < 0, 0.0, val)[()]


# --------------------------------------------------------------------------
# equation terms
# --------------------------------------------------------------------------

Parent = tuple  # (variable name, lag)


@dataclass(frozen=True)
class Term:
    """One additive summand of a structural equation.

    kinds and their value (``p``, ``q`` are parent values):

    * const: ``coef``
    * linear: ``coef * p``
    * square: ``coef * (p + shift)**2``
    * sigmoid: ``coef * sigmoid(scale * p + shift)``
    * positive_part: ``coef * max(p, 0)``
    * product: ``coef * p * q``
    * time: ``coef * t``
    * mlp: ``w2 . tanh(W1 @ parents + b1) + b2`` (a fitted regressor),
      passed through a logistic function when ``weights["squash"]`` is set
    """

    kind: str
    parents: tuple = ()
    coef: float = 1.0
    scale: float = 1.0
    shift: float = 0.0
    weights: Mapping[str, object] | None = None

    def __post_init__(self):
        arity = {"const": 0, "time": 0, "linear": 1, "square": 1, "sigmoid": 1,
                 "positive_part": 1, "product": 2}
        if self.kind == "mlp":
            if self.weights is None:
                raise ScmError("mlp term needs weights")
        elif self.kind not in arity:
            raise ScmError(f"unknown term kind {self.kind!r}")
        elif len(self.parents) != arity[self.kind]:
            raise ScmError(f"{self.kind} term takes {arity[self.kind]} parent(s)")

    # convenience constructors
    @staticmethod
    def const(value: float) -> "Term":
        return Term("const", coef=float(value))

    @staticmethod
    def linear(var: str, coef: float, lag: int = 0) -> "Term":
        return Term("linear", ((var, lag),), coef=float(coef))

    @staticmethod
    def square(var: str, coef: float, shift: float = 0.0, lag: int = 0) -> "Term":
        return Term("square", ((var, lag),), coef=float(coef), shift=float(shift))

    @staticmethod
    def sigmoid(var: str, coef: float = 1.0, scale: float = 1.0, shift: float = 0.0, lag: int = 0) -> "Term":
        return Term("sigmoid", ((var, lag),), coef=float(coef), scale=float(scale), shift=float(shift))

    @staticmethod
    def positive_part(var: str, coef: float, lag: int = 0) -> "Term":
        return Term("positive_part", ((var, lag),), coef=float(coef))

    @staticmethod
    def product(a: str, b: str, coef: float = 1.0, lags: tuple[int, int] = (0, 0)) -> "Term":
        return Term("product", ((a, lags[0]), (b, lags[1])), coef=float(coef))

    @staticmethod
    def time(coef: float) -> "Term":
        return Term("time", coef=float(coef))

    @staticmethod
    def mlp(parents: Sequence[Parent], w1, b1, w2, b2, squash: bool = False) -> "Term":
        weights = {
            "w1": np.asarray(w1, dtype=float),
            "b1": np.asarray(b1, dtype=float),
            "w2": np.asarray(w2, dtype=float),
            "b2": float(b2),
            "squash": bool(squash),
        }
        return Term("mlp", tuple((v, int(l)) for v, l in parents), weights=weights)

    def evaluate(self, vals: list, t: float, need_grad: bool):
        """Return ``(value, partials)``; partials align with ``self.parents``."""
        k = self.kind
        if k == "const":
            return self.coef, []
        if k == "time":
            return self.coef * t, []
        if k == "linear":
            return self.coef * vals[0], [np.full_like(vals[0], self.coef)] if need_grad else None
        if k == "square":
            z = vals[0] + self.shift
            return self.coef * z * z, [2.0 * self.coef * z] if need_grad else None
        if k == "sigmoid":
            s = sigmoid(self.scale * vals[0] + self.shift)
            return self.coef * s, [self.coef * self.scale * s * (1 - s)] if need_grad else None
        if k == "positive_part":
            pos = vals[0] > 0
            return self.coef * np.where(pos, vals[0], 0.0), [self.coef * pos] if need_grad else None
        if k == "product":
            a, b = vals
            return self.coef * a * b, [self.coef * b, self.coef * a] if need_grad else None
        w = self.weights
        inp = np.stack(vals, axis=-1)
        hid = np.tanh(inp @ w["w1"].T + w["b1"])
        out = hid @ w["w2"] + w["b2"]
        if w["squash"]:
            out = sigmoid(out)
        if not need_grad:
            return out, None
        dh = (1 - hid * hid) * w["w2"]
        jac = dh @ w["w1"]
        if w["squash"]:
            jac = jac * (out * (1 - out))[..., None]
        return out, [jac[..., j] for j in range(len(vals))]

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.parents:
            d["parents"] = [[v, int(l)] for v, l in self.parents]
        if self.kind == "mlp":
            w = self.weights
            d["weights"] = {
                "w1": w["w1"].tolist(),
                "b1": w["b1"].tolist(),
                "w2": w["w2"].tolist(),
                "b2": float(w["b2"]),
                "squash": bool(w["squash"]),
            }
            return d
        d["coef"] = self.coef
        if self.kind == "sigmoid":
            d["scale"] = self.scale
        if self.kind in ("sigmoid", "square"):
            d["shift"] = self.shift
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "Term":
        parents = tuple((str(v), int(l)) for v, l in d.get("parents", []))
        if d["kind"] == "mlp":
            w = d["weights"]
            return Term.mlp(parents, w["w1"], w["b1"], w["w2"], w["b2"], w.get("squash", False))
        return Term(
            d["kind"],
            parents,
            coef=float(d.get("coef", 1.0)),
            scale=float(d.get("scale", 1.0)),
            shift=float(d.get("shift", 0.0)),
        )


_LINKS = ("identity", "sigmoid", "step")


@dataclass(frozen=True)
class StructuralEquation:
    """``x = sum(outer) + sign*m(t) + link(sum(inner) + u)``.

    With the identity link this is the usual additive-noise equation (the
    split between ``outer`` and ``inner`` is then immaterial).  ``frozen``
    variables are evaluated once when a simulation starts and copied after.
    """

    target: str
    outer: tuple = ()
    noise: NoiseSpec = field(default_factory=NoiseSpec.gaussian)
    link: str = "identity"
    inner: tuple = ()
    trend: TrendSpec | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ScmError(f"unknown link {self.link!r}")

    @property
    def terms(self) -> tuple:
        return tuple(self.outer) + tuple(self.inner)

    @property
    def parents(self) -> list:
        seen = []
        for term in self.terms:
            for p in term.parents:
                if p not in seen:
                    seen.append(p)
        return seen

    def to_dict(self) -> dict:
        d = {
            "target": self.target,
            "outer": [t.to_dict() for t in self.outer],
            "link": self.link,
            "inner": [t.to_dict() for t in self.inner],
            "noise": self.noise.to_dict(),
            "frozen": self.frozen,
        }
        if self.trend is not None:
            d["trend"] = self.trend.to_dict()
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "StructuralEquation":
        return StructuralEquation(
            target=d["target"],
            outer=tuple(Term.from_dict(t) for t in d.get("outer", [])),
            noise=NoiseSpec.from_dict(d["noise"]),
            link=d.get("link", "identity"),
            inner=tuple(Term.from_dict(t) for t in d.get("inner", [])),
            trend=TrendSpec.from_dict(d["trend"]) if d.get("trend") is not None else None,
            frozen=bool(d.get("frozen", False)),
        )


@dataclass(frozen=True)
class Variable:
    name: str
    actionable: bool = False
    monotone: bool = False
    categorical: bool = False


@dataclass(frozen=True)
class LabelSpec:
    """``P(Y=1 | x) = sigmoid(scale * (intercept + sum coef*x + sum c*x_a*x_b - center))``.

    ``center=None`` means the offset is estimated as the sample mean of the
    score at t=0, which yields roughly balanced classes
    (see :func:`label_center`).
    """

    coefficients: Mapping[str, float]
    scale: float = 1.0
    intercept: float = 0.0
    interactions: tuple = ()
    center: float | None = 0.0

    def score(self, names: Sequence[str], states: np.ndarray) -> np.ndarray:
        idx = {n: i for i, n in enumerate(names)}
        x = np.asarray(states, dtype=float)
        s = np.full(x.shape[:-1], float(self.intercept))
        for name, c in self.coefficients.items():
            s = s + c * x[..., idx[name]]
        for a, b, c in self.interactions:
            s = s + c * x[..., idx[a]] * x[..., idx[b]]
        return s

    def to_dict(self) -> dict:
        return {
            "coefficients": dict(self.coefficients),
            "scale": self.scale,
            "intercept": self.intercept,
            "interactions": [list(i) for i in self.interactions],
            "center": self.center,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "LabelSpec":
        return LabelSpec(
            coefficients={k: float(v) for k, v in d["coefficients"].items()},
            scale=float(d.get("scale", 1.0)),
            intercept=float(d.get("intercept", 0.0)),
            interactions=tuple((a, b, float(c)) for a, b, c in d.get("interactions", [])),
            center=None if d.get("center") is None else float(d["center"]),
        )


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScmSpec:
    variables: tuple
    equations: tuple
    label: LabelSpec | None = None
    lag: int = 1
    name: str = ""
    burn_in: int = 10

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ScmError("duplicate variable names")
        targets = [e.target for e in self.equations]
        if sorted(targets) != sorted(names) or len(targets) != len(names):
            raise ScmError("exactly one equation per variable is required")
        # keep equations aligned with variable order
        by_target = {e.target: e for e in self.equations}
        object.__setattr__(self, "equations", tuple(by_target[n] for n in names))
        if self.lag < 1:
            raise ScmError("lag horizon must be a positive integer")
        if self.burn_in < 0:
            raise ScmError("burn-in must be non-negative")
        for v, e in zip(self.variables, self.equations):
            if v.actionable and e.frozen:
                raise ScmError(f"actionable variable {v.name!r} cannot be frozen")
            for pv, pl in e.parents:
                if pv not in names:
                    raise ScmError(f"equation for {v.name!r} references unknown {pv!r}")
                if not 0 <= pl <= self.lag:
                    raise ScmError(f"lag {pl} of {pv!r} in {v.name!r} outside 0..{self.lag}")
                if pl == 0 and pv == v.name:
                    raise ScmError(f"{v.name!r} cannot be its own contemporaneous parent")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})
        object.__setattr__(self, "_order", _topological_order(names, self.equations))
        if self.label is not None:
            for n in self.label.coefficients:
                if n not in names:
                    raise ScmError(f"label references unknown variable {n!r}")

    # ---- basic queries ------------------------------------------------
    @property
    def names(self) -> list:
        return [v.name for v in self.variables]

    @property
    def d(self) -> int:
        return len(self.variables)

    @property
    def order(self) -> list:
        return list(self._order)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ScmError(f"unknown variable {name!r}") from None

    def indices(self, names: Iterable[str]) -> list:
        return [self.index(n) for n in names]

    @property
    def actionable(self) -> list:
        return [v.name for v in self.variables if v.actionable]

    def children(self) -> dict:
        out = {n: set() for n in self.names}
        for e in self.equations:
            for pv, pl in e.parents:
                if pl == 0:
                    out[pv].add(e.target)
        return out

    def with_equation(self, eq: StructuralEquation) -> "ScmSpec":
        eqs = tuple(eq if e.target == eq.target else e for e in self.equations)
        return replace(self, equations=eqs)

    def with_trends(self, trends: Mapping[str, TrendSpec | None]) -> "ScmSpec":
        eqs = tuple(
            replace(e, trend=trends[e.target]) if e.target in trends else e for e in self.equations
        )
        return replace(self, equations=eqs)

    def with_noise(self, noise: Mapping[str, NoiseSpec]) -> "ScmSpec":
        eqs = tuple(
            replace(e, noise=noise[e.target]) if e.target in noise else e for e in self.equations
        )
        return replace(self, equations=eqs)

    # ---- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "scm",
            "name": self.name,
            "lag": self.lag,
            "burn_in": self.burn_in,
            "variables": [
                {"name": v.name, "actionable": v.actionable, "monotone": v.monotone,
                 "categorical": v.categorical}
                for v in self.variables
            ],
            "equations": [e.to_dict() for e in self.equations],
            "label": None if self.label is None else self.label.to_dict(),
        }

    @staticmethod
    def from_dict(d: Mapping) -> "ScmSpec":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ScmError(f"unsupported schema version {d.get('schema_version')!r}")
        return ScmSpec(
            variables=tuple(Variable(**v) for v in d["variables"]),
            equations=tuple(StructuralEquation.from_dict(e) for e in d["equations"]),
            label=None if d.get("label") is None else LabelSpec.from_dict(d["label"]),
            lag=int(d["lag"]),
            name=d.get("name", ""),
            burn_in=int(d.get("burn_in", 10)),
        )

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @staticmethod
    def loads(text: str) -> "ScmSpec":
        return ScmSpec.from_dict(yaml.safe_load(text))


def _topological_order(names: list, equations: Sequence[StructuralEquation]) -> tuple:
    idx = {n: i for i, n in enumerate(names)}
    parents = [
        sorted({idx[pv] for pv, pl in e.parents if pl == 0}) for e in equations
    ]
    remaining = set(range(len(names)))
    order = []
    while remaining:
        ready = [i for i in sorted(remaining) if all(p not in remaining for p in parents[i])]
        if not ready:
            raise ScmError("contemporaneous graph contains a cycle")
        order.append(ready[0])
        remaining.remove(ready[0])
    return tuple(order)


def non_descendants(scm: ScmSpec, I: Iterable[str]) -> list:
    """Variables with no lag-0 directed path from any member of ``I``.

    Members of ``I`` themselves are never non-descendants.
    """
    I = list(I)
    for n in I:
        scm.index(n)
    children = scm.children()
    reached = set(I)
    stack = list(I)
    while stack:
        for c in children[stack.pop()]:
            if c not in reached:
                reached.add(c)
                stack.append(c)
    return [n for n in scm.names if n not in reached]


def descendants_mask(scm: ScmSpec, I: Iterable[str]) -> np.ndarray:
    nd = set(non_descendants(scm, I))
    return np.array([n not in nd for n in scm.names])


# --------------------------------------------------------------------------
# interventions and trajectories
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Intervention:
    """Shift (``soft``) or overwrite (``hard``) of the variables in ``features``.

    ``theta`` is aligned with ``features``.  ``apply_at`` is the absolute
    time step of application.
    """

    features: tuple
    theta: tuple
    mode: str = "soft"
    apply_at: int = 0

    def __post_init__(self):
        if not self.features:
            raise ScmError("intervention set must be nonempty")
        if len(self.features) != len(self.theta):
            raise ScmError("theta must have one entry per intervened feature")
        if self.mode not in ("soft", "hard"):
            raise ScmError("mode must be 'soft' or 'hard'")

    def validate(self, scm: ScmSpec) -> None:
        for name, th in zip(self.features, self.theta):
            v = scm.variables[scm.index(name)]
            if not v.actionable:
                raise ScmError(f"variable {name!r} is not actionable")
            if v.monotone and self.mode == "soft" and th < 0:
                raise ScmError(f"monotone variable {name!r} needs theta >= 0")

    def dense(self, scm: ScmSpec) -> tuple[np.ndarray, np.ndarray]:
        mask = np.zeros(scm.d, dtype=bool)
        vec = np.zeros(scm.d)
        for name, th in zip(self.features, self.theta):
            mask[scm.index(name)] = True
            vec[scm.index(name)] = th
        return mask, vec


@dataclass
class Trajectory:
    """One individual's realized states ``x^0..x^T`` (rows) and labels.

    ``prefix`` holds the ``lag`` states preceding t=0 so that the state at
    any time can be used as a conditioning window.
    """

    states: np.ndarray
    labels: np.ndarray | None
    seed: int
    individual: int = 0
    prefix: np.ndarray | None = None

    def window(self, t: int, lag: int) -> np.ndarray:
        full = self.states if self.prefix is None else np.vstack([self.prefix, self.states])
        off = 0 if self.prefix is None else len(self.prefix)
        lo = t + off - lag
        if lo < 0:
            pad = np.zeros((-lo, self.states.shape[1]))
            return np.vstack([pad, full[: t + off + 1]])
        return full[lo : t + off + 1].copy()


@dataclass
class Panel:
    """A batch of trajectories: ``states`` has shape (n, T+1, d)."""

    names: list
    states: np.ndarray
    prefix: np.ndarray
    labels: np.ndarray | None
    seed: int

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def window(self, t: int, lag: int) -> np.ndarray:
        """States ``x^{t-lag}..x^t`` for every individual, shape (n, lag+1, d)."""
        full = np.concatenate([self.prefix, self.states], axis=1)
        off = self.prefix.shape[1]
        lo = t + off - lag
        if lo < 0:
            pad = np.zeros((self.n, -lo, self.states.shape[2]))
            return np.concatenate([pad, full[:, : t + off + 1]], axis=1)
        return full[:, lo : t + off + 1].copy()

    def trajectories(self) -> list:
        return [
            Trajectory(
                states=self.states[i].copy(),
                labels=None if self.labels is None else self.labels[i].copy(),
                seed=self.seed,
                individual=i,
                prefix=self.prefix[i].copy(),
            )
            for i in range(self.n)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["individual", "t", *self.names, "label"])
        n, T, _ = self.states.shape
        lag = self.prefix.shape[1]
        for i in range(n):
            # the lagged states before t=0 are written with negative times
            for s in range(lag):
                w.writerow([i, s - lag, *[repr(float(v)) for v in self.prefix[i, s]], ""])
            for t in range(T):
                lab = "" if self.labels is None else int(self.labels[i, t])
                w.writerow([i, t, *[repr(float(v)) for v in self.states[i, t]], lab])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, lag: int = 1, seed: int = 0) -> "Panel":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if header[:2] != ["individual", "t"] or header[-1] != "label":
            raise ScmError("unexpected trajectory CSV header")
        names = header[2:-1]
        body = rows[1:]
        if not body:
            raise ScmError("trajectory CSV has no rows")
        n = max(int(r[0]) for r in body) + 1
        T = max(int(r[1]) for r in body) + 1
        states = np.zeros((n, T, len(names)))
        prefix = np.zeros((n, lag, len(names)))
        labels = np.zeros((n, T))
        has_labels = True
        for r in body:
            i, t = int(r[0]), int(r[1])
            vals = [float(v) for v in r[2:-1]]
            if t < 0:
                if t >= -lag:
                    prefix[i, lag + t] = vals
                continue
            states[i, t] = vals
            if r[-1] == "":
                has_labels = False
            else:
                labels[i, t] = float(r[-1])
        return Panel(names, states, prefix, labels if has_labels else None, seed)


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

STREAM_TAGS = {"simulate": 1, "label": 2, "rollout": 3, "fresh": 4, "ball": 5, "eval": 6}


def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Independent generator for one (purpose, individual, ...) combination."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAM_TAGS[tag], *map(int, keys)))
    return np.random.Generator(np.random.PCG64(ss))


def draw_noise(scm: ScmSpec, seed: int, tag: str, individuals: Sequence[int], shape: tuple,
               key: int = 0) -> np.ndarray:
    """Noise of shape ``(len(individuals), *shape, d)``.

    Each individual gets its own stream, and inside it each variable a fixed
    slice of draws, so the values do not depend on batch composition.
    """
    out = np.empty((len(individuals), *shape, scm.d))
    for row, ind in enumerate(individuals):
        rng = stream(seed, tag, ind, key)
        for j, eq in enumerate(scm.equations):
            out[row, ..., j] = eq.noise.sample(rng, shape)
    return out


# --------------------------------------------------------------------------
# evaluation of one time step
# --------------------------------------------------------------------------


def _parent_value(scm, x, lags, parent):
    name, lag = parent
    j = scm._index[name]
    if lag == 0:
        return x[:, j]
    return lags[:, -lag, j]


def _structural_parts(scm, eq, x, lags, t, tangent):
    """Return ``(outer, inner, d_outer, d_inner)`` for one equation.

    ``d_*`` are derivatives w.r.t. the tangent directions (rows, k) or None.
    """
    rows = x.shape[0]
    need = tangent is not None
    parts = []
    for group in (eq.outer, eq.inner):
        val = np.zeros(rows)
        dval = None if not need else np.zeros((rows, tangent.shape[2]))
        for term in group:
            vals = [_parent_value(scm, x, lags, p) for p in term.parents]
            v, partials = term.evaluate(vals, t, need)
            val = val + v
            if need:
                for p, g in zip(term.parents, partials):
                    if p[1] == 0:
                        dval = dval + g[:, None] * tangent[:, scm._index[p[0]], :]
        parts.append((val, dval))
    (outer, d_outer), (inner, d_inner) = parts
    if eq.trend is not None:
        outer = outer + eq.trend.sign * _trend_value(eq.trend, t)
    return outer, inner, d_outer, d_inner


def step(scm: ScmSpec, lags: np.ndarray, t: int, u: np.ndarray, *,
         shift: np.ndarray | None = None,
         hard_mask: np.ndarray | None = None,
         hard_values: np.ndarray | None = None,
         fixed_mask: np.ndarray | None = None,
         fixed: np.ndarray | None = None,
         initial: bool = False,
         theta_columns: Sequence[int] | None = None,
         check: bool = True):
    """Evaluate every variable at time ``t``.

    Args:
        lags: previous states, shape (rows, lag, d), chronological.
        u: noise, shape (rows, d).
        shift: additive offsets applied after structural evaluation.
        hard_mask, hard_values: variables overwritten with given values.
        fixed_mask, fixed: variables copied from ``fixed`` (conditioning).
        initial: evaluate frozen variables instead of copying them.
        theta_columns: when given, also return d x / d shift[:, theta_columns]
            as an array of shape (rows, d, k).
    """
    rows = u.shape[0]
    x = np.zeros((rows, scm.d))
    tangent = None
    if theta_columns is not None:
        tangent = np.zeros((rows, scm.d, len(theta_columns)))
        col_of = {c: k for k, c in enumerate(theta_columns)}
    for j in scm._order:
        eq = scm.equations[j]
        if fixed_mask is not None and fixed_mask[j]:
            x[:, j] = fixed[:, j]
            continue
        if hard_mask is not None and hard_mask[j]:
            x[:, j] = hard_values[:, j]
            continue
        if eq.frozen and not initial:
            x[:, j] = lags[:, -1, j]
        else:
            outer, inner, d_outer, d_inner = _structural_parts(scm, eq, x, lags, t, tangent)
            z = inner + u[:, j]
            if eq.link == "identity":
                x[:, j] = outer + z
                if tangent is not None:
                    tangent[:, j] = d_outer + d_inner
            elif eq.link == "sigmoid":
                s = sigmoid(z)
                x[:, j] = outer + s
                if tangent is not None:
                    tangent[:, j] = d_outer + (s * (1 - s))[:, None] * d_inner
            else:
                x[:, j] = outer + (z > 0)
                if tangent is not None:
                    tangent[:, j] = d_outer
        if shift is not None:
            x[:, j] += shift[:, j]
            if tangent is not None and j in col_of:
                tangent[:, j, col_of[j]] += 1.0
        if check and not np.all(np.isfinite(x[:, j])):
            raise SimulationDivergence(scm.names[j], t)
    if tangent is not None:
        return x, tangent
    return x


def abduct(scm: ScmSpec, window: np.ndarray, t: int) -> np.ndarray:
    """Recover the noise consistent with the current state ``window[:, -1]``.

    Frozen variables carry no noise after their first step; zeros are returned.
    """
    x = window[:, -1]
    lags = window[:, :-1]
    u = np.zeros_like(x)
    for j in scm._order:
        eq = scm.equations[j]
        if eq.frozen:
            continue
        outer, inner, _, _ = _structural_parts(scm, eq, x, lags, t, None)
        if eq.link == "identity":
            u[:, j] = x[:, j] - outer - inner
        elif eq.link == "sigmoid":
            v = x[:, j] - outer
            if np.any((v <= 0) | (v >= 1)):
                raise UnsupportedAbduction(f"observation of {eq.target!r} outside the link's range")
            u[:, j] = logit(v) - inner
        else:
            if not eq.noise.degenerate:
                raise UnsupportedAbduction(f"thresholded equation for {eq.target!r} has random noise")
            u[:, j] = eq.noise.mean
    return u


def counterfactual(scm: ScmSpec, window: np.ndarray, t: int, shift: np.ndarray, *,
                   hard_mask=None, hard_values=None, theta_columns=None, noise=None):
    """Counterfactual state at ``t`` under additive ``shift`` (and hard overrides).

    ``window`` has shape (rows, lag+1, d).  Returns the state, plus tangents
    if ``theta_columns`` is given.
    """
    u = abduct(scm, window, t) if noise is None else noise
    lags = window[:, :-1]
    out = step(scm, lags, t, u, shift=shift, hard_mask=hard_mask, hard_values=hard_values,
               theta_columns=theta_columns, check=False)
    if theta_columns is None:
        # frozen variables are copies; keep the observed ones exactly
        out = _restore_frozen(scm, out, window, shift, hard_mask)
        return out
    x, tan = out
    return _restore_frozen(scm, x, window, shift, hard_mask), tan


def _restore_frozen(scm, x, window, shift, hard_mask):
    for j, eq in enumerate(scm.equations):
        if eq.frozen and (hard_mask is None or not hard_mask[j]):
            x[:, j] = window[:, -1, j] + (0.0 if shift is None else shift[:, j])
    return x


def abduct_and_counterfactual(scm: ScmSpec, observed: np.ndarray, intervention: Intervention,
                              t: int | None = None) -> np.ndarray:
    """Counterfactual of an observed state under ``intervention``.

    ``observed`` is a window of shape (lag+1, d) or (n, lag+1, d) ending at
    the state to explain; ``t`` defaults to ``intervention.apply_at``.
    """
    intervention.validate(scm)
    obs = np.asarray(observed, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    t = intervention.apply_at if t is None else t
    mask, vec = intervention.dense(scm)
    rows = obs.shape[0]
    if intervention.mode == "soft":
        out = counterfactual(scm, obs, t, np.broadcast_to(vec, (rows, scm.d)))
    else:
        out = counterfactual(scm, obs, t, None, hard_mask=mask,
                             hard_values=np.broadcast_to(vec, (rows, scm.d)))
    return out[0] if single else out


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def rollout(scm: ScmSpec, window: np.ndarray, t0: int, steps: int, noise: np.ndarray,
            record: bool = False):
    """Advance ``window`` (state at ``t0`` last) by ``steps`` steps.

    ``noise`` has shape (rows, steps, d).  Returns the final window, and the
    visited states (rows, steps, d) if ``record``.
    """
    lag = scm.lag
    hist = window if window.shape[1] >= lag + 1 else _pad(window, lag + 1)
    hist = hist[:, -(lag + 1):].copy()
    visited = np.empty((hist.shape[0], steps, scm.d)) if record else None
    for s in range(steps):
        x = step(scm, hist[:, 1:], t0 + s + 1, noise[:, s])
        hist = np.concatenate([hist[:, 1:], x[:, None]], axis=1)
        if record:
            visited[:, s] = x
    return (hist, visited) if record else hist


def _pad(window, lag):
    pad = np.zeros((window.shape[0], lag - window.shape[1], window.shape[2]))
    return np.concatenate([pad, window], axis=1)


def simulate(scm: ScmSpec, t_max: int, n: int, seed: int, burn_in: int | None = None,
             labels: bool = True, individuals: Sequence[int] | None = None) -> Panel:
    """Sample ``n`` independent trajectories for t = 0..t_max.

    Lagged values before the first simulated step are zero.  The first
    ``burn_in`` steps (default: ``scm.burn_in``) run at negative times with
    trends switched off and are discarded, apart from the ``lag`` states
    kept as the prefix.
    """
    if t_max < 0 or n < 1:
        raise ScmError("need t_max >= 0 and n >= 1")
    burn_in = scm.burn_in if burn_in is None else int(burn_in)
    ids = list(range(n)) if individuals is None else list(individuals)
    steps = burn_in + t_max + 1
    noise = draw_noise(scm, seed, "simulate", ids, (steps,))
    lag = scm.lag
    win = np.zeros((len(ids), lag, scm.d))
    out = np.empty((len(ids), steps, scm.d))
    for s in range(steps):
        t = s - burn_in
        x = step(scm, win, t, noise[:, s], initial=(s == 0))
        out[:, s] = x
        win = np.concatenate([win[:, 1:], x[:, None]], axis=1)
    full = np.concatenate([np.zeros((len(ids), lag, scm.d)), out], axis=1)
    prefix = full[:, burn_in : burn_in + lag].copy()
    states = out[:, burn_in:]
    # frozen attributes are constant, also before the first recorded step
    for j, eq in enumerate(scm.equations):
        if eq.frozen:
            prefix[:, :, j] = states[:, :1, j]
    lab = None
    if labels and scm.label is not None:
        lab = sample_labels(scm, states, seed, ids)
    return Panel(scm.names, states, prefix, lab, seed)


def sample_trajectory(scm: ScmSpec, t_max: int, n: int, seed: int, burn_in: int | None = None) -> list:
    return simulate(scm, t_max, n, seed, burn_in).trajectories()


def label_center(scm: ScmSpec, states_t0: np.ndarray) -> float:
    """Offset subtracted from the label score; estimated from ``states_t0`` if unset."""
    lab = scm.label
    if lab.center is not None:
        return float(lab.center)
    return float(np.mean(lab.score(scm.names, states_t0)))


def label_probability(scm: ScmSpec, states: np.ndarray, center: float) -> np.ndarray:
    lab = scm.label
    return sigmoid(lab.scale * (lab.score(scm.names, states) - center))


def sample_labels(scm: ScmSpec, states: np.ndarray, seed: int,
                  individuals: Sequence[int] | None = None, center: float | None = None) -> np.ndarray:
    """Bernoulli labels for states of shape (n, T, d) (or (n, d) for one step)."""
    st = np.asarray(states, dtype=float)
    if st.shape[-1] != scm.d:
        raise ScmError(f"states have {st.shape[-1]} columns, model has {scm.d}")
    squeeze = st.ndim == 2
    if squeeze:
        st = st[:, None]
    if center is None:
        center = label_center(scm, st[:, 0])
    p = label_probability(scm, st, center)
    ids = range(st.shape[0]) if individuals is None else individuals
    r = np.stack([stream(seed, "label", i).random(st.shape[1]) for i in ids])
    y = (r < p).astype(float)
    return y[:, 0] if squeeze else y


def interventional_sample(scm: ScmSpec, window: np.ndarray, t: int, intervention: Intervention,
                          n: int, seed: int, individual: int = 0) -> np.ndarray:
    """Draw ``n`` states at ``intervention.apply_at`` given the history ``window``.

    The process is rolled forward from ``t`` with fresh noise; at the target
    time the intervention is applied and every descendant of the intervened
    set is re-evaluated with fresh noise while non-descendants keep their
    rolled-out values.
    """
    intervention.validate(scm)
    t_target = intervention.apply_at
    if t_target < t:
        raise ScmError("intervention must be applied at or after the observation time")
    win = np.broadcast_to(np.asarray(window, dtype=float), (n, *np.shape(window))).copy()
    steps = t_target - t
    if steps:
        noise = draw_noise(scm, seed, "rollout", [individual], (n, steps))[0]
        win = rollout(scm, win, t, steps, noise)
    fresh = draw_noise(scm, seed, "fresh", [individual], (n,))[0]
    return intervene_at(scm, win, t_target, intervention, fresh)


def intervene_at(scm: ScmSpec, window: np.ndarray, t: int, intervention: Intervention,
                 fresh: np.ndarray) -> np.ndarray:
    """Apply an intervention to the state ``window[:, -1]`` at time ``t``."""
    rows = window.shape[0]
    mask, vec = intervention.dense(scm)
    desc = descendants_mask(scm, intervention.features)
    vals = np.broadcast_to(vec, (rows, scm.d))
    lags = window[:, :-1][:, -scm.lag:] if window.shape[1] > 1 else np.zeros((rows, scm.lag, scm.d))
    if intervention.mode == "soft":
        return step(scm, lags, t, fresh, shift=vals, fixed_mask=~desc, fixed=window[:, -1])
    return step(scm, lags, t, fresh, hard_mask=mask, hard_values=vals, fixed_mask=~desc,
                fixed=window[:, -1])


def forecast_uncertainty_set(scm: ScmSpec, window: np.ndarray, t: int, tau: int,
                             n_samples: int = 20, seed: int = 0, individual: int = 0) -> np.ndarray:
    """``n_samples`` states at ``t + tau`` rolled out from ``window`` without intervention."""
    if tau <= 0 or n_samples < 1:
        raise ScmError("need tau > 0 and n_samples >= 1")
    win = np.broadcast_to(np.asarray(window, dtype=float), (n_samples, *np.shape(window))).copy()
    noise = draw_noise(scm, seed, "rollout", [individual], (n_samples, tau))[0]
    return rollout(scm, win, t, tau, noise)[:, -1]


__all__ = [
    "NoiseSpec", "TrendSpec", "Term", "StructuralEquation", "Variable", "LabelSpec", "ScmSpec",
    "Intervention", "Trajectory", "Panel", "ScmError", "SimulationDivergence",
    "UnsupportedAbduction", "evaluate_trend", "non_descendants", "descendants_mask", "simulate",
    "sample_trajectory", "sample_labels", "label_center", "label_probability", "abduct",
    "counterfactual", "abduct_and_counterfactual", "interventional_sample", "intervene_at",
    "forecast_uncertainty_set", "rollout", "step", "draw_noise", "stream", "sigmoid", "logit",
]
