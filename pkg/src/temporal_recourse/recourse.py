"""Recourse search: robust IMF, CAR and SAR over an epsilon-ball, and the
time-aware sub-population engine (T-SAR) over a forecast sample.

All four share one min-max template.  Each outer step picks the member of
the finite uncertainty set with the lowest expected response, then takes a
proximal gradient step on ``-log ER + lambda * cost(theta)``: a gradient step
on the log-response followed by the shrinkage map of the cost.  The cost weight decays
geometrically per epoch.  Many individuals are solved at once; each has its
own random streams, so results do not depend on the batch composition.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .scm import (
    Intervention,
    ScmError,
    ScmSpec,
    abduct,
    descendants_mask,
    draw_noise,
    interventional_sample,
    rollout,
    step,
    stream,
)

METHODS = ("imf", "car", "sar", "t-sar")
COST_NORMS = ("l1", "l2", "weighted-l1")


@dataclass(frozen=True)
class RecourseConfig:
    """Hyperparameters of the search.

    ``feature_scale`` expresses ``epsilon``, the step size and the cost in
    per-feature units (typically the population standard deviation); the
    default is the raw feature scale.  ``stop`` selects the convergence rule:
    ``"first-feasible"`` stops as soon as the worst member of the uncertainty
    set is valid and then bisects back along the last step to the cheapest
    feasible point; ``"loss-plateau"`` additionally waits until the loss
    changes by less than ``loss_tol`` for ``loss_window`` iterations.
    """

    method: str = "car"
    epsilon: float = 0.0
    tau: int = 0
    lam: float = 1.0
    eta: float = 0.5
    gamma: float = 0.02
    epochs: int = 30
    inner_steps: int = 10
    n_uncertainty_samples: int = 20
    n_interventional_samples: int = 10
    cost_norm: str = "l1"
    cost_weights: tuple | None = None
    feature_scale: tuple | None = None
    subsets: str = "enumerate"
    max_subset_size: int | None = None
    features: tuple | None = None
    stop: str = "first-feasible"
    refine_steps: int = 12
    loss_tol: float = 1e-4
    loss_window: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ScmError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epsilon < 0:
            raise ScmError("epsilon must be non-negative")
        if self.method == "t-sar" and self.tau <= 0:
            raise ScmError("t-sar needs a positive lag tau")
        if self.lam <= 0 or self.eta <= 0:
            raise ScmError("lambda and eta must be positive")
        if not 0 < self.gamma < 1:
            raise ScmError("gamma must lie in (0, 1)")
        if self.epochs < 1 or self.inner_steps < 1 or self.n_uncertainty_samples < 1:
            raise ScmError("epochs, inner steps and sample counts must be positive")
        if self.cost_norm not in COST_NORMS:
            raise ScmError(f"unknown cost norm {self.cost_norm!r}")
        if self.cost_norm == "weighted-l1" and self.cost_weights is None:
            raise ScmError("weighted-l1 needs cost_weights")
        if self.subsets not in ("enumerate", "fixed"):
            raise ScmError("subsets must be 'enumerate' or 'fixed'")
        if self.subsets == "fixed" and not self.features:
            raise ScmError("a fixed intervention set needs features")
        if self.stop not in ("first-feasible", "loss-plateau"):
            raise ScmError("stop must be 'first-feasible' or 'loss-plateau'")

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @staticmethod
    def from_dict(d) -> "RecourseConfig":
        kw = {}
        for k, v in d.items():
            if k not in RecourseConfig.__dataclass_fields__:
                raise ScmError(f"unknown recourse option {k!r}")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return RecourseConfig(**kw)


@dataclass
class RecourseOutcome:
    features: tuple
    theta: tuple
    converged: bool
    issue_time: int
    tau: int
    epochs_used: int
    expected_response: float
    worst_case_response: float
    cost: float
    method: str = ""
    epsilon: float = 0.0
    individual: int = 0

    @property
    def sparsity(self) -> int:
        return int(sum(1 for v in self.theta if v != 0.0))

    def intervention(self, apply_at: int | None = None) -> Intervention:
        at = self.issue_time + self.tau if apply_at is None else apply_at
        return Intervention(tuple(self.features), tuple(self.theta), "soft", at)

    def dense(self, scm: ScmSpec) -> np.ndarray:
        out = np.zeros(scm.d)
        for f, v in zip(self.features, self.theta):
            out[scm.index(f)] = v
        return out


# --------------------------------------------------------------------------
# expected response
# --------------------------------------------------------------------------


def expected_response(scm: ScmSpec, window: np.ndarray, t: int, intervention: Intervention, h,
                      mode: str = "interventional", n: int = 10_000, seed: int = 0,
                      individual: int = 0) -> tuple[float, float]:
    """``E[h(x_hat)]`` and its Monte-Carlo standard error.

    ``window`` ends at the observed state at time ``t``.  Modes:

    * interventional: states drawn by :func:`interventional_sample` at
      ``intervention.apply_at``
    * counterfactual: the abducted counterfactual of the observed state
    * plain: ``h(x + theta)``
    """
    window = np.asarray(window, dtype=float)
    if mode == "interventional":
        xs = interventional_sample(scm, window, t, intervention, n, seed, individual)
        p = h.predict(xs)
        return float(p.mean()), float(p.std(ddof=1) / np.sqrt(len(p))) if len(p) > 1 else 0.0
    mask, vec = intervention.dense(scm)
    if mode == "counterfactual":
        from .scm import abduct_and_counterfactual

        x = abduct_and_counterfactual(scm, window, replace(intervention, apply_at=t))
        return float(h.predict(x)), 0.0
    if mode == "plain":
        return float(h.predict(window[-1] + vec)), 0.0
    raise ScmError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# uncertainty sets and response models
# --------------------------------------------------------------------------


def ball_offsets(scm: ScmSpec, cfg: RecourseConfig, seed: int, individuals: Sequence[int]) -> np.ndarray:
    """Centre plus points on the epsilon-sphere, shape (n, B, d).

    Categorical variables are never perturbed.
    """
    n_pts = 1 if cfg.epsilon == 0 else cfg.n_uncertainty_samples
    d = scm.d
    free = np.array([not v.categorical for v in scm.variables])
    scale = _scale(scm, cfg)
    out = np.zeros((len(individuals), n_pts, d))
    if n_pts == 1:
        return out
    k = int(free.sum())
    for row, ind in enumerate(individuals):
        rng = stream(seed, "ball", ind)
        v = rng.standard_normal((n_pts - 1, k))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        out[row, 1:, free] = (cfg.epsilon * v * scale[free]).T
    return out


def _scale(scm: ScmSpec, cfg: RecourseConfig) -> np.ndarray:
    if cfg.feature_scale is None:
        return np.ones(scm.d)
    s = np.asarray(cfg.feature_scale, dtype=float)
    if s.shape != (scm.d,) or np.any(s <= 0):
        raise ScmError("feature_scale needs one positive entry per variable")
    return s


class _ResponseModel:
    """Expected response and its gradient for every member of the uncertainty set."""

    def __init__(self, scm: ScmSpec, h, windows: np.ndarray, t: int, cfg: RecourseConfig,
                 cols: list, seed: int, individuals: Sequence[int]):
        self.scm, self.h, self.cfg, self.cols = scm, h, cfg, cols
        self.method = cfg.method
        n = windows.shape[0]
        d = scm.d
        self.n = n
        if self.method == "t-sar":
            B = cfg.n_uncertainty_samples
            noise = draw_noise(scm, seed, "rollout", individuals, (B, cfg.tau))
            win = np.repeat(windows[:, None], B, axis=1).reshape(n * B, *windows.shape[1:])
            win = rollout(scm, win, t, cfg.tau, noise.reshape(n * B, cfg.tau, d))
            self.points = win[:, -1].reshape(n, B, d)
            self.lags = win[:, :-1].reshape(n, B, win.shape[1] - 1, d)
            self.time = t + cfg.tau
        else:
            offsets = ball_offsets(scm, cfg, seed, individuals)
            B = offsets.shape[1]
            self.time = t
            self.lags = np.repeat(windows[:, None, :-1], B, axis=1)
            if self.method == "imf":
                self.points = windows[:, -1][:, None] + offsets
            else:
                self.u = abduct(scm, windows, t)
                self.offsets = offsets
                self.current = windows[:, -1]
                if self.method == "car":
                    self.points = None
                else:
                    rows = n * B
                    x = step(scm, self.lags.reshape(rows, -1, d), t,
                             np.repeat(self.u, B, axis=0), shift=offsets.reshape(rows, d), check=False)
                    x = _keep_frozen(scm, x, np.repeat(windows[:, -1], B, axis=0), offsets.reshape(rows, d))
                    self.points = x.reshape(n, B, d)
        self.B = B
        if self.method in ("sar", "t-sar"):
            M = cfg.n_interventional_samples
            self.M = M
            self.fresh = draw_noise(scm, seed, "fresh", individuals, (B, M))
            names = [scm.names[c] for c in cols]
            self.desc = descendants_mask(scm, names)

    def _states(self, theta, rows, members, need_grad):
        """States for the chosen uncertainty members (all when ``members`` is None).

        Returns ``x`` of shape (r, b, M, d) (M = 1 unless sub-population) and
        tangents (r, b, M, d, k) or None.
        """
        scm, d = self.scm, self.scm.d
        r = len(rows)
        k = len(self.cols)
        pick = (lambda a: a[rows]) if members is None else (lambda a: a[rows, members][:, None])
        b = self.B if members is None else 1
        shift = np.zeros((r, d))
        shift[:, self.cols] = theta[rows]
        cols = self.cols if need_grad else None
        if self.method == "imf":
            x = (pick(self.points) + shift[:, None])[:, :, None]
            tan = None
            if need_grad:
                tan = np.zeros((r, b, 1, d, k))
                tan[..., self.cols, np.arange(k)] = 1.0
            return x, tan
        if self.method == "car":
            total = (pick(self.offsets) + shift[:, None]).reshape(r * b, d)
            u = np.repeat(self.u[rows], b, axis=0)
            lags = pick(self.lags).reshape(r * b, -1, d)
            out = step(scm, lags, self.time, u, shift=total, theta_columns=cols, check=False)
            x, tan = out if need_grad else (out, None)
            x = _keep_frozen(scm, x, np.repeat(self.current[rows], b, axis=0), total)
            if tan is not None:
                tan = tan.reshape(r, b, 1, d, k)
            return x.reshape(r, b, 1, d), tan
        # sub-population: non-descendants fixed to the uncertainty point
        M = self.M
        n_all = r * b * M
        fixed = np.repeat(pick(self.points).reshape(r * b, d), M, axis=0)
        lags = np.repeat(pick(self.lags).reshape(r * b, *self.lags.shape[2:]), M, axis=0)
        u = pick(self.fresh).reshape(n_all, d)
        sh = np.repeat(shift, b * M, axis=0)
        out = step(scm, lags, self.time, u, shift=sh, fixed_mask=~self.desc, fixed=fixed,
                   theta_columns=cols, check=False)
        x, tan = out if need_grad else (out, None)
        if tan is not None:
            tan = tan.reshape(r, b, M, d, k)
        return x.reshape(r, b, M, d), tan

    def evaluate(self, theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Expected response of every uncertainty member, shape (r, B)."""
        x, _ = self._states(theta, rows, None, False)
        return self.h.predict(x).mean(axis=2)

    def gradient(self, theta: np.ndarray, rows: np.ndarray, members: np.ndarray) -> np.ndarray:
        """Gradient of the expected response of one member per row, shape (r, k)."""
        x, tan = self._states(theta, rows, members, True)
        _, g = self.h.predict_and_gradient(x)
        return np.einsum("rbmd,rbmdk->rk", g, tan) / x.shape[2]


def _keep_frozen(scm, x, current, shift):
    # frozen variables keep their observed value (plus any offset)
    for j, eq in enumerate(scm.equations):
        if eq.frozen:
            x[:, j] = current[:, j] + (0.0 if shift is None else shift[:, j])
    return x


# --------------------------------------------------------------------------
# the search
# --------------------------------------------------------------------------


def _cost(theta_std: np.ndarray, cfg: RecourseConfig, cols: list) -> np.ndarray:
    if cfg.cost_norm == "l1":
        return np.abs(theta_std).sum(axis=-1)
    if cfg.cost_norm == "l2":
        return np.sqrt((theta_std**2).sum(axis=-1))
    w = np.asarray(cfg.cost_weights, dtype=float)[cols]
    return (np.abs(theta_std) * w).sum(axis=-1)


def _prox(u: np.ndarray, step: float, cfg: RecourseConfig, cols: list) -> np.ndarray:
    """Proximal map of ``step * cost``: shrinks towards zero without crossing it."""
    if cfg.cost_norm == "l2":
        nrm = np.sqrt((u**2).sum(axis=-1, keepdims=True))
        keep = np.maximum(1.0 - step / np.where(nrm > 0, nrm, 1.0), 0.0)
        return u * keep
    thr = step if cfg.cost_norm == "l1" else step * np.asarray(cfg.cost_weights, dtype=float)[cols]
    return np.sign(u) * np.maximum(np.abs(u) - thr, 0.0)


@dataclass
class _SubsetResult:
    theta: np.ndarray  # standardized units, (n, k)
    converged: np.ndarray
    epochs: np.ndarray
    worst: np.ndarray
    nominal: np.ndarray


def _search(model: _ResponseModel, cfg: RecourseConfig, scale: np.ndarray, monotone: np.ndarray) -> _SubsetResult:
    n, k = model.n, len(model.cols)
    z = np.zeros((n, k))
    done = np.zeros(n, dtype=bool)
    epochs_used = np.full(n, cfg.epochs)
    best_z = z.copy()
    best_worst = np.full(n, -np.inf)
    final_worst = np.zeros(n)
    lam = cfg.lam
    plateau = np.zeros(n, dtype=int)
    last_loss = np.full(n, np.inf)
    feasible_z = np.full((n, k), np.nan)
    prev_z = np.full((n, k), np.nan)  # iterate before the last step

    def theta_of(zz):
        return zz * scale

    for epoch in range(cfg.epochs):
        for _ in range(cfg.inner_steps):
            rows = np.flatnonzero(~done)
            if rows.size == 0:
                break
            th = np.zeros((n, k))
            th[rows] = theta_of(z[rows])
            er = model.evaluate(th, rows)
            worst_idx = np.argmin(er, axis=1)  # first index on ties
            worst = er[np.arange(rows.size), worst_idx]
            improved = worst > best_worst[rows]
            best_worst[rows[improved]] = worst[improved]
            best_z[rows[improved]] = z[rows[improved]]
            ok = worst >= 0.5
            loss = -np.log(np.maximum(worst, 1e-300)) + lam * _cost(z[rows], cfg, model.cols)
            if cfg.stop == "first-feasible":
                finished = ok
            else:
                small = np.abs(loss - last_loss[rows]) < cfg.loss_tol
                plateau[rows] = np.where(small, plateau[rows] + 1, 0)
                feasible_z[rows[ok]] = z[rows[ok]]
                finished = ok & (plateau[rows] >= cfg.loss_window)
            last_loss[rows] = loss
            if finished.any():
                fin = rows[finished]
                done[fin] = True
                epochs_used[fin] = epoch + 1
                final_worst[fin] = worst[finished]
                feasible_z[fin] = z[fin]
            live = ~finished
            if not live.any():
                continue
            lr = rows[live]
            g_er = model.gradient(th, lr, worst_idx[live]) * scale
            w = np.maximum(worst[live], 1e-300)[:, None]
            prev = z[lr].copy()
            z[lr] = _prox(z[lr] + cfg.eta * g_er / w, cfg.eta * lam, cfg, model.cols)
            z[lr] = np.where(monotone, np.maximum(z[lr], 0.0), z[lr])
            prev_z[lr] = prev
        lam *= cfg.gamma
        if done.all():
            break

    converged = done.copy()
    # unconverged: best iterate seen
    out_z = np.where(converged[:, None], feasible_z, best_z)
    worst_final = np.where(converged, final_worst, best_worst)
    if cfg.stop == "first-feasible" and cfg.refine_steps > 0:
        out_z, worst_final = _refine(model, out_z, prev_z, converged, worst_final, cfg, scale)
    th = np.zeros((n, k))
    th[:] = out_z * scale
    er_nom = model.evaluate(th, np.arange(n))
    nominal = er_nom[:, 0] if model.method != "t-sar" else er_nom.mean(axis=1)
    worst_all = er_nom.min(axis=1)
    return _SubsetResult(out_z, converged, epochs_used, worst_all, nominal)


def _refine(model, z_end, z_start, converged, worst, cfg, scale):
    """Bisect between the last infeasible and the first feasible iterate."""
    rows = np.flatnonzero(converged & np.all(np.isfinite(z_start), axis=1))
    if rows.size == 0:
        return z_end, worst
    n, k = z_end.shape
    lo = np.zeros(rows.size)  # fraction along start -> end known infeasible
    hi = np.ones(rows.size)
    a = z_start[rows]
    b = z_end[rows]
    for _ in range(cfg.refine_steps):
        mid = 0.5 * (lo + hi)
        zz = a + mid[:, None] * (b - a)
        th = np.zeros((n, k))
        th[rows] = zz * scale
        er = model.evaluate(th, rows)
        ok = er.min(axis=1) >= 0.5
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    z_new = z_end.copy()
    z_new[rows] = a + hi[:, None] * (b - a)
    th = np.zeros((n, k))
    th[rows] = z_new[rows] * scale
    er = model.evaluate(th, rows)
    w = worst.copy()
    w[rows] = er.min(axis=1)
    return z_new, w


def _subsets(scm: ScmSpec, cfg: RecourseConfig) -> list:
    if cfg.method == "imf" or cfg.subsets == "fixed":
        feats = tuple(cfg.features) if cfg.features else tuple(scm.actionable)
        for f in feats:
            if not scm.variables[scm.index(f)].actionable:
                raise ScmError(f"variable {f!r} is not actionable")
        return [feats]
    act = scm.actionable
    m = len(act) if cfg.max_subset_size is None else min(cfg.max_subset_size, len(act))
    out = []
    for size in range(1, m + 1):
        out.extend(itertools.combinations(act, size))
    return out


def solve_batch(scm: ScmSpec, windows: np.ndarray, cfg: RecourseConfig, h, seed: int, t: int = 0,
                individuals: Sequence[int] | None = None) -> list:
    """Solve recourse for every window in ``windows`` (shape (n, lag+1, d)).

    ``scm`` is the model used for planning (the true SCM or an estimate).
    """
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3 or windows.shape[2] != scm.d:
        raise ScmError("windows must have shape (n, lag+1, d)")
    if windows.shape[1] < scm.lag + 1:
        pad = np.zeros((windows.shape[0], scm.lag + 1 - windows.shape[1], scm.d))
        windows = np.concatenate([pad, windows], axis=1)
    windows = windows[:, -(scm.lag + 1):]
    n = windows.shape[0]
    ids = list(range(n)) if individuals is None else list(individuals)
    if len(ids) != n:
        raise ScmError("one individual id per window is required")
    if n == 0:
        return []
    scale_all = _scale(scm, cfg)
    tau = cfg.tau if cfg.method == "t-sar" else 0
    best = [None] * n
    fallback = [None] * n
    for feats in _subsets(scm, cfg):
        cols = scm.indices(feats)
        monotone = np.array([scm.variables[c].monotone for c in cols])
        model = _ResponseModel(scm, h, windows, t, cfg, cols, seed, ids)
        res = _search(model, cfg, scale_all[cols], monotone)
        theta = res.theta * scale_all[cols]
        cost = _cost(res.theta, cfg, cols)
        for i in range(n):
            out = RecourseOutcome(
                features=tuple(feats),
                theta=tuple(float(v) for v in theta[i]),
                converged=bool(res.converged[i]),
                issue_time=t,
                tau=tau,
                epochs_used=int(res.epochs[i]),
                expected_response=float(res.nominal[i]),
                worst_case_response=float(res.worst[i]),
                cost=float(cost[i]),
                method=cfg.method,
                epsilon=cfg.epsilon if cfg.method != "t-sar" else 0.0,
                individual=ids[i],
            )
            if out.converged:
                if best[i] is None or out.cost < best[i].cost:
                    best[i] = out
            elif fallback[i] is None or out.worst_case_response > fallback[i].worst_case_response:
                fallback[i] = out
    return [b if b is not None else f for b, f in zip(best, fallback)]


def solve(scm: ScmSpec, window: np.ndarray, cfg: RecourseConfig, h, seed: int, t: int = 0,
          individual: int = 0) -> RecourseOutcome:
    """Recourse for one individual whose history ends at time ``t``."""
    window = np.asarray(window, dtype=float)
    return solve_batch(scm, window[None], cfg, h, seed, t, [individual])[0]


def adversarial_trend_for(theta, start: int):
    """Step trend that cancels ``theta`` from time ``start`` on.

    Returns one :class:`TrendSpec` for a scalar ``theta`` and a tuple of them
    (one per coordinate) for a vector.  The trends are meant to be added to
    the intervened variables (sign +1).
    """
    from .scm import TrendSpec

    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    specs = tuple(
        TrendSpec(sign=+1, custom={"kind": "step", "start": int(start), "level": float(-v)}) for v in arr
    )
    return specs[0] if np.ndim(theta) == 0 else specs


__all__ = [
    "METHODS", "RecourseConfig", "RecourseOutcome", "expected_response", "solve", "solve_batch",
    "adversarial_trend_for", "ball_offsets",
]
