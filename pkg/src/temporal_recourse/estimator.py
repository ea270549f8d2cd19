"""Linear-Gaussian approximation of an unknown temporal SCM.

The causal graph is taken as known.  Each non-frozen variable is regressed
by least squares on its own lagged value, its contemporaneous parents, the
time index and an intercept; the fitted model uses unit-variance Gaussian
noise regardless of the residual variance, which is kept as a diagnostic.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
import numpy as np
import yaml

from .scm import (
    NoiseSpec,
    Panel,
    ScmError,
    ScmSpec,
    StructuralEquation,
    Term,
    Trajectory,
    draw_noise,
    rollout,
    simulate,
)

SCHEMA_VERSION = 1


class FitDegenerate(ScmError):
    def __init__(self, variable: str):
        super().__init__(f"design matrix for {variable!r} is rank deficient")
        self.variable = variable


@dataclass(frozen=True)
class FittedEquation:
    target: str
    inputs: tuple  # ((name, lag) | ("t", 0) | ("1", 0), ...)
    coefficients: tuple
    residual_variance: float
    n_rows: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients)):
            raise ScmError(f"non-finite coefficient for {self.target!r}")

    def to_equation(self, noise_std: float = 1.0) -> StructuralEquation:
        terms = []
        for (name, lag), c in zip(self.inputs, self.coefficients):
            if name == "1":
                terms.append(Term.const(c))
            elif name == "t":
                terms.append(Term.time(c))
            else:
                terms.append(Term.linear(name, c, lag))
        return StructuralEquation(self.target, tuple(terms), NoiseSpec.gaussian(0.0, noise_std))

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "inputs": [list(i) for i in self.inputs],
            "coefficients": [float(c) for c in self.coefficients],
            "residual_variance": float(self.residual_variance),
            "n_rows": int(self.n_rows),
        }


@dataclass(frozen=True)
class Estimator:
    """A fitted SCM plus the per-equation fits and provenance."""

    scm: ScmSpec
    fits: tuple
    provenance: dict = field(default_factory=dict)

    def fit_for(self, name: str) -> FittedEquation:
        for f in self.fits:
            if f.target == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "estimator",
            "scm": self.scm.to_dict(),
            "fits": [f.to_dict() for f in self.fits],
            "provenance": dict(self.provenance),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @staticmethod
    def loads(text: str) -> "Estimator":
        d = yaml.safe_load(text)
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "estimator":
            raise ScmError("not an estimator document of a supported version")
        fits = tuple(
            FittedEquation(f["target"], tuple((a, int(b)) for a, b in f["inputs"]),
                           tuple(f["coefficients"]), f["residual_variance"], f["n_rows"])
            for f in d["fits"]
        )
        return Estimator(ScmSpec.from_dict(d["scm"]), fits, d.get("provenance", {}))


def _as_panel(data, lag: int) -> Panel:
    if isinstance(data, Panel):
        return data
    trajs = list(data)
    if not trajs or not all(isinstance(t, Trajectory) for t in trajs):
        raise ScmError("fit needs a Panel or a nonempty list of trajectories")
    T = min(len(t.states) for t in trajs)
    d = trajs[0].states.shape[1]
    states = np.stack([t.states[:T] for t in trajs])
    prefix = np.stack([
        t.prefix[-lag:] if t.prefix is not None and len(t.prefix) >= lag else np.zeros((lag, d))
        for t in trajs
    ])
    return Panel([], states, prefix, None, trajs[0].seed)


def _data_hash(states: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(states, dtype=np.float64).tobytes()).hexdigest()


TARGETS = ("actionable", "endogenous")


def fit(data, graph: ScmSpec, cutoff: int | None = None, use_time: bool = True, seed: int = 0,
        noise_std: float = 1.0, targets: str = "actionable") -> Estimator:
    """Fit linear structural equations on times ``0..cutoff``.

    ``graph`` supplies the topology (lag-0 parents of every equation), the
    variables and the label.  ``cutoff`` defaults to half of the observed
    horizon.  ``targets`` selects which equations are learned: the actionable
    variables only (the rest keep the mechanisms of ``graph``) or every
    non-frozen variable.  With ``use_time=False`` the time index is left out
    of the regressors.
    """
    if targets not in TARGETS:
        raise ScmError(f"targets must be one of {TARGETS}")
    learn = set(graph.actionable) if targets == "actionable" else {
        e.target for e in graph.equations if not e.frozen}
    panel = _as_panel(data, graph.lag)
    states = panel.states
    if states.ndim != 3 or states.shape[2] != graph.d:
        raise ScmError(f"data has {states.shape[-1]} features, graph has {graph.d}")
    horizon = states.shape[1] - 1
    cutoff = horizon // 2 if cutoff is None else int(cutoff)
    if not 0 <= cutoff <= horizon:
        raise ScmError(f"cutoff {cutoff} outside the observed horizon 0..{horizon}")
    full = np.concatenate([panel.prefix[:, -1:], states[:, : cutoff + 1]], axis=1)
    prev, cur = full[:, :-1], full[:, 1:]
    n, T, _ = cur.shape
    tgrid = np.broadcast_to(np.arange(T, dtype=float), (n, T))
    equations, fits = [], []
    for j, eq in enumerate(graph.equations):
        if eq.target not in learn:
            equations.append(eq)
            continue
        name = eq.target
        parents = sorted({p for p, lag in eq.parents if lag == 0 and p != name}, key=graph.index)
        inputs = [(name, 1)] + [(p, 0) for p in parents]
        cols = [prev[..., j]] + [cur[..., graph.index(p)] for p in parents]
        if use_time:
            inputs.append(("t", 0))
            cols.append(tgrid)
        inputs.append(("1", 0))
        cols.append(np.ones((n, T)))
        X = np.stack([c.reshape(-1) for c in cols], axis=1)
        y = cur[..., j].reshape(-1)
        # constant regressors (other than the intercept) carry no information
        keep = np.array([i == len(inputs) - 1 or np.ptp(X[:, i]) > 0 for i in range(len(inputs))])
        if np.linalg.matrix_rank(X[:, keep]) < keep.sum():
            raise FitDegenerate(name)
        coef = np.zeros(len(inputs))
        coef[keep], _, _, _ = np.linalg.lstsq(X[:, keep], y, rcond=None)
        resid = y - X @ coef
        fe = FittedEquation(name, tuple(inputs), tuple(float(c) for c in coef),
                            float(resid.var()), int(len(y)))
        fits.append(fe)
        equations.append(fe.to_equation(noise_std))
    est = replace(graph, equations=tuple(equations), name=f"{graph.name}-estimate" if graph.name else "estimate")
    prov = {"cutoff": cutoff, "data_hash": _data_hash(states), "seed": int(seed),
            "use_time": bool(use_time), "n_individuals": int(n), "targets": targets}
    return Estimator(est, tuple(fits), prov)


def forecast_quality(estimate: ScmSpec | Estimator, truth: ScmSpec, horizon: int, n: int,
                     seed: int = 0, start: int = 0, stochastic: bool = True,
                     share_known_noise: bool = True) -> dict:
    """Per-feature and per-step mean squared error of estimator rollouts.

    Truth trajectories are simulated from ``seed``; the estimate is rolled
    forward ``horizon`` steps from the same windows at ``start``.  With
    ``stochastic=False`` the estimate is rolled forward without noise (a mean
    forecast).  With ``share_known_noise`` every equation the estimate copies
    verbatim from the truth is driven by the truth's own noise draw, so the
    error isolates the learned equations.  Returns ``{"names", "per_feature"
    (d,), "per_step" (horizon,), "overall"}``.
    """
    est = estimate.scm if isinstance(estimate, Estimator) else estimate
    if est.names != truth.names:
        raise ScmError("estimator and truth must share variable ids")
    if horizon < 1 or n < 1:
        raise ScmError("horizon and n must be positive")
    if start < 0:
        raise ScmError("start must be non-negative")
    panel = simulate(truth, start + horizon, n, seed, labels=False)
    ids = list(range(n))
    if stochastic:
        noise = draw_noise(est, seed, "rollout", ids, (horizon,), key=1)
    else:
        noise = np.zeros((n, horizon, est.d))
        for j, eq in enumerate(est.equations):
            noise[:, :, j] = eq.noise.mean
    if share_known_noise:
        steps = truth.burn_in + start + horizon + 1
        true_noise = draw_noise(truth, seed, "simulate", ids, (steps,))
        lo = truth.burn_in + start + 1
        for j, (a, b) in enumerate(zip(est.equations, truth.equations)):
            if a == b:
                noise[:, :, j] = true_noise[:, lo : lo + horizon, j]
    window = panel.window(start, est.lag)
    _, visited = rollout(est, window, start, horizon, noise, record=True)
    target = panel.states[:, start + 1 : start + horizon + 1]
    err = (visited - target) ** 2
    return {
        "names": list(truth.names),
        "per_feature": err.mean(axis=(0, 1)),
        "per_step": err.mean(axis=(0, 2)),
        "overall": float(err.mean()),
    }


__all__ = ["TARGETS", "FittedEquation", "Estimator", "FitDegenerate", "fit", "forecast_quality"]
