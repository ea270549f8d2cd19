"""Evaluation of issued recourse over time, the invalidation rate, and
executable checks of the linear-classifier stability bounds.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .recourse import RecourseOutcome
from .scm import (
    Intervention,
    ScmError,
    ScmSpec,
    TrendSpec,
    abduct,
    descendants_mask,
    draw_noise,
    evaluate_trend,
    intervene_at,
    interventional_sample,
    non_descendants,
    rollout,
    step,
)


class BoundPreconditionError(ValueError):
    """Inputs exceed the box ``[-k, k]`` a bound is stated for."""


@dataclass(frozen=True)
class ValidityRecord:
    method: str
    epsilon: float
    issue_time: int
    eval_time: int
    n: int
    validity: float
    stderr: float
    mean_cost: float
    mean_sparsity: float

    def __post_init__(self):
        if not 0.0 <= self.validity <= 1.0:
            raise ValueError("validity must lie in [0, 1]")
        if self.mean_cost < 0 and not np.isnan(self.mean_cost):
            raise ValueError("cost must be non-negative")

    @property
    def tau(self) -> int:
        return self.eval_time - self.issue_time


@dataclass(frozen=True)
class BoundReport:
    empirical: float
    bound: float
    ci: float
    k: float
    d: int
    t: int = 0
    tau: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.bound - self.empirical

    @property
    def holds(self) -> bool:
        return self.slack >= -self.ci


@dataclass(frozen=True)
class PreferenceWeights:
    """Per-feature cost weights bounded by ``k`` in absolute value."""

    w: tuple
    k: float

    def __post_init__(self):
        if np.any(np.abs(np.asarray(self.w, dtype=float)) > self.k):
            raise BoundPreconditionError("preference weights exceed the bound k")


# --------------------------------------------------------------------------
# validity over time
# --------------------------------------------------------------------------


def _check_common_issue_time(outcomes):
    times = {o.issue_time for o in outcomes}
    if len(times) > 1:
        raise ScmError("outcomes must share one issue time")
    return times.pop() if times else 0


MODES = ("counterfactual", "interventional", "native", "population", "population-share")
# the uncertainty model each method is solved under
NATIVE_MODE = {"imf": "counterfactual", "car": "counterfactual", "sar": "interventional",
               "t-sar": "interventional"}


def validity_over_time(scm: ScmSpec, h, outcomes: Sequence[RecourseOutcome], windows: np.ndarray,
                       taus: Sequence[int], n_rollouts: int = 20, seed: int = 0,
                       mode: str = "counterfactual", reference: np.ndarray | None = None,
                       require_converged: bool = False, n_fresh: int = 100) -> list:
    """Validity of each issued intervention when applied ``tau`` steps later.

    ``scm`` is the world the interventions are evaluated in, ``windows`` the
    observed histories (n, lag+1, d) at the common issue time.  Every
    individual is rolled forward ``n_rollouts`` times; at ``t + tau`` the
    intervention is applied to the realized state and ``h >= 1/2`` is
    counted.  Modes:

    * ``counterfactual``: the realized state's counterfactual under the
      additive shift (IMF outcomes use ``x + theta`` directly in every mode)
    * ``interventional``: the realized history and non-descendants are kept,
      the intervened variables and their descendants are redrawn with
      ``n_fresh`` fresh noise samples, and their mean response is compared
      with 1/2
    * ``native``: counterfactual for IMF and CAR, interventional for SAR and
      T-SAR
    * ``population``: the expected response over ``reference`` windows at
      ``t + tau`` (shape (T, m, lag+1, d), indexed by evaluation time) whose
      non-descendants are set to the individual's realized values
    * ``population-share``: as ``population``, but each rollout scores the
      share of the intervened reference members with ``h >= 1/2`` instead
      of thresholding their mean

    Rollouts share one noise draw across lags, so curves over ``tau`` use
    common random numbers.  With ``require_converged`` unconverged outcomes
    count as invalid; otherwise their best iterate is evaluated.
    """
    if mode not in MODES:
        raise ScmError(f"unknown evaluation mode {mode!r}")
    outcomes = list(outcomes)
    windows = np.asarray(windows, dtype=float)[:, -(scm.lag + 1):]
    n = len(outcomes)
    if windows.shape[0] != n:
        raise ScmError("one window per outcome is required")
    t0 = _check_common_issue_time(outcomes)
    taus = [int(v) for v in taus]
    if any(v < 0 for v in taus):
        raise ScmError("lags must be non-negative")
    if mode.startswith("population") and reference is None:
        raise ScmError("population mode needs reference windows")
    R = n_rollouts
    d = scm.d
    ids = [o.individual for o in outcomes]
    tmax = max(taus) if taus else 0
    noise = draw_noise(scm, seed, "eval", ids, (R, tmax))
    start = np.repeat(windows, R, axis=0)
    if tmax:
        _, visited = rollout(scm, start, t0, tmax, noise.reshape(n * R, tmax, d), record=True)
        path = np.concatenate([start, visited], axis=1)
    else:
        path = start
    lag = scm.lag
    theta = np.stack([o.dense(scm) for o in outcomes]) if n else np.zeros((0, d))
    ok_mask = np.array([o.converged or not require_converged for o in outcomes])
    costs = np.array([o.cost for o in outcomes])
    sparsity = np.array([o.sparsity for o in outcomes], dtype=float)
    records = []
    groups = _group_by_method(outcomes)
    for tau in taus:
        win = path[:, tau : tau + lag + 1]
        if mode in ("population", "population-share"):
            valid = _population_valid(scm, h, outcomes, win, t0 + tau, theta, R,
                                      np.asarray(reference[t0 + tau], dtype=float), seed,
                                      share=mode == "population-share")
        else:
            valid = np.zeros((n, R))
            kinds = [NATIVE_MODE[o.method] if mode == "native" else mode for o in outcomes]
            for kind, fn in (("counterfactual", _counterfactual_valid),
                             ("interventional", _interventional_valid)):
                sel = np.array([k == kind for k in kinds])
                if not sel.any():
                    continue
                sub = [o for o, keep in zip(outcomes, sel) if keep]
                rows = np.repeat(sel, R)
                args = (scm, h, sub, win[rows], t0 + tau, theta[sel], R)
                valid[sel] = fn(*args, seed=seed, n_fresh=n_fresh) if kind == "interventional" else fn(*args)
        valid = valid * ok_mask[:, None]
        for (method, eps), rows in groups.items():
            rows = np.asarray(rows)
            per = valid[rows].mean(axis=1)
            v = float(per.mean()) if rows.size else 0.0
            se = float(per.std(ddof=1) / np.sqrt(rows.size)) if rows.size > 1 else 0.0
            wsum = valid[rows].sum()
            mc = float((valid[rows].sum(axis=1) * costs[rows]).sum() / wsum) if wsum > 0 else float("nan")
            records.append(ValidityRecord(method, eps, t0, t0 + tau, int(rows.size), v, se, mc,
                                          float(sparsity[rows].mean()) if rows.size else 0.0))
    return records


def _group_by_method(outcomes):
    groups = {}
    for i, o in enumerate(outcomes):
        groups.setdefault((o.method, float(o.epsilon)), []).append(i)
    return groups


def _counterfactual_valid(scm, h, outcomes, win, t, theta, R):
    n, d = theta.shape
    shift = np.repeat(theta, R, axis=0)
    is_imf = np.repeat(np.array([o.method == "imf" for o in outcomes]), R)
    x = win[:, -1] + shift
    causal = ~is_imf
    if causal.any():
        w = win[causal]
        u = abduct(scm, w, t)
        xc = step(scm, w[:, :-1], t, u, shift=shift[causal], check=False)
        for j, eq in enumerate(scm.equations):
            if eq.frozen:
                xc[:, j] = w[:, -1, j] + shift[causal][:, j]
        x[causal] = xc
    return (h.predict(x) >= 0.5).reshape(n, R).astype(float)


def _interventional_valid(scm, h, outcomes, win, t, theta, R, seed, n_fresh):
    n, d = theta.shape
    K = int(n_fresh)
    valid = np.zeros((n, R))
    groups = {}
    for i, o in enumerate(outcomes):
        key = None if o.method == "imf" else tuple(sorted(o.features))
        groups.setdefault(key, []).append(i)
    for feats, idx in groups.items():
        idx = np.asarray(idx)
        rows = (idx[:, None] * R + np.arange(R)).reshape(-1)
        if feats is None or not feats:
            x = win[rows, -1] + np.repeat(theta[idx], R, axis=0)
            valid[idx] = (h.predict(x) >= 0.5).reshape(len(idx), R)
            continue
        w = np.repeat(win[rows], K, axis=0)
        fresh = draw_noise(scm, seed, "fresh", [outcomes[i].individual for i in idx], (R, K), key=t + 1)
        shift = np.repeat(theta[idx], R * K, axis=0)
        desc = descendants_mask(scm, feats)
        x = step(scm, w[:, :-1][:, -scm.lag:], t, fresh.reshape(-1, d), shift=shift, fixed_mask=~desc,
                 fixed=w[:, -1], check=False)
        p = h.predict(x).reshape(len(idx), R, K).mean(axis=2)
        valid[idx] = p >= 0.5
    return valid


def _population_valid(scm, h, outcomes, win, t, theta, R, ref, seed, share=False):
    n, d = theta.shape
    m = ref.shape[0]
    score = (lambda p: float((p >= 0.5).mean())) if share else (lambda p: float(p.mean() >= 0.5))
    valid = np.zeros((n, R))
    for i, o in enumerate(outcomes):
        feats = list(o.features)
        realized = win[i * R : (i + 1) * R, -1]
        if o.method == "imf" or not feats:
            valid[i] = score(h.predict(ref[:, -1] + theta[i]))
            continue
        nd = scm.indices(non_descendants(scm, feats))
        iv = Intervention(tuple(o.features), tuple(o.theta), "soft", t)
        fresh = draw_noise(scm, seed, "fresh", [o.individual], (m,), key=t + 1)[0]
        if not nd:
            # nothing individual to keep: every rollout sees the same population
            valid[i] = score(h.predict(intervene_at(scm, ref, t, iv, fresh)))
            continue
        for r in range(R):
            w = ref.copy()
            w[:, -1, nd] = realized[r, nd]
            valid[i, r] = score(h.predict(intervene_at(scm, w, t, iv, fresh)))
    return valid


def invalidation_rate(scm: ScmSpec, h_sequence, intervention: Intervention, window: np.ndarray,
                      t: int, tau: int, n: int = 10_000, seed: int = 0, individual: int = 0,
                      response: str = "probability") -> tuple[float, float]:
    """Monte-Carlo ``E|h_{t+tau}(x_hat_{t+tau}) - h_t(x_hat_t)|`` and its standard error.

    ``x_hat`` are interventional samples at ``t`` and at ``t + tau`` given
    the history ``window`` ending at ``t``; the two draws share fresh noise.
    ``h_sequence`` is a classifier, a list indexed by time, or a callable of
    time.  ``response="score"`` uses the linear score instead of the
    probability.
    """
    if tau < 0:
        raise ScmError("tau must be non-negative")
    h_now, h_later = _classifier_at(h_sequence, t), _classifier_at(h_sequence, t + tau)
    a = interventional_sample(scm, window, t, _at(intervention, t), n, seed, individual)
    b = interventional_sample(scm, window, t, _at(intervention, t + tau), n, seed, individual)
    diff = np.abs(_response(h_later, b, response) - _response(h_now, a, response))
    se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(diff.mean()), se


def _at(iv: Intervention, t: int) -> Intervention:
    return Intervention(iv.features, iv.theta, iv.mode, t)


def _classifier_at(seq, t):
    if callable(seq) and not hasattr(seq, "predict"):
        return seq(t)
    if isinstance(seq, (list, tuple)):
        return seq[min(t, len(seq) - 1)]
    return seq


def _response(h, x, kind):
    if kind == "probability":
        return h.predict(x)
    if kind == "score":
        return h.score(x)
    raise ScmError(f"unknown response {kind!r}")


# --------------------------------------------------------------------------
# stability bounds for linear scores
# --------------------------------------------------------------------------


def _as_samples(a, n=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if n is not None and a.shape[0] == 1:
        a = np.repeat(a, n, axis=0)
    return a


def _check_box(name, a, k):
    if k <= 0:
        raise BoundPreconditionError("k must be positive")
    if np.any(np.abs(a) > k * (1 + 1e-12)):
        raise BoundPreconditionError(f"{name} leaves the box [-k, k]")


def _ci(terms: np.ndarray) -> float:
    if terms.size < 2:
        return 0.0
    return float(1.96 * terms.std(ddof=1) / np.sqrt(terms.size))


def linear_invalidation_bound(k: float, beta_t, beta_later, x_t, x_later, t: int = 0,
                              tau: int = 0) -> BoundReport:
    """Bound on ``E|<b', x'> - <b, x>|`` for scores with weights and states in ``[-k, k]``.

    Rows of the four arrays are paired draws (a single weight row is
    broadcast).  The bound is ``k sqrt(d) (E||b' - b|| + E||x' - x||)``;
    ``extra["bound_k_on_weights_only"]`` carries the variant with the factor
    on the weight term alone.
    """
    x_t, x_later = _as_samples(x_t), _as_samples(x_later)
    n, d = x_t.shape
    if x_later.shape != x_t.shape:
        raise BoundPreconditionError("state samples must be paired")
    b, b2 = _as_samples(beta_t, n), _as_samples(beta_later, n)
    for name, a in (("beta", b), ("beta'", b2), ("x", x_t), ("x'", x_later)):
        _check_box(name, a, k)
    gap = np.abs(np.einsum("nd,nd->n", b2, x_later) - np.einsum("nd,nd->n", b, x_t))
    db = np.linalg.norm(b2 - b, axis=1)
    dx = np.linalg.norm(x_later - x_t, axis=1)
    c = k * np.sqrt(d)
    per_bound = c * (db + dx)
    alt = c * db.mean() + dx.mean()
    return BoundReport(float(gap.mean()), float(per_bound.mean()), _ci(per_bound - gap), k, d, t, tau,
                       {"bound_k_on_weights_only": float(alt)})


def trend_invalidation_bound(k: float, beta_t, beta_later, trends: Sequence[TrendSpec | None],
                             t: int, tau: int, base_states) -> BoundReport:
    """Bound for a trend-stationary process ``x_t = s + m(t)``.

    ``base_states`` holds draws of the stationary part ``s`` shared by both
    times; ``trends`` has one entry per feature (None for no trend).  The
    bound is ``k (sqrt(d) E||b' - b|| + d max_i |m_i(t+tau) - m_i(t)|)``.
    """
    s = _as_samples(base_states)
    n, d = s.shape
    if len(trends) != d:
        raise BoundPreconditionError("one trend entry per feature is required")
    m_now = np.array([_signed_trend(tr, t) for tr in trends])
    m_later = np.array([_signed_trend(tr, t + tau) for tr in trends])
    x_t, x_later = s + m_now, s + m_later
    b, b2 = _as_samples(beta_t, n), _as_samples(beta_later, n)
    for name, a in (("beta", b), ("beta'", b2), ("x", x_t), ("x'", x_later)):
        _check_box(name, a, k)
    gap = np.abs(np.einsum("nd,nd->n", b2, x_later) - np.einsum("nd,nd->n", b, x_t))
    db = np.linalg.norm(b2 - b, axis=1)
    m_star = float(np.max(np.abs(m_later - m_now))) if d else 0.0
    per_bound = k * (np.sqrt(d) * db + d * m_star)
    return BoundReport(float(gap.mean()), float(per_bound.mean()), _ci(per_bound - gap), k, d, t, tau,
                       {"largest_trend_change": m_star})


def _signed_trend(spec, t):
    if spec is None:
        return 0.0
    return float(spec.sign * evaluate_trend(spec, t))


def cost_variation_bound(k: float, w_t, w_later, x_t, xhat_t, x_later, xhat_later, t: int = 0,
                         tau: int = 0) -> BoundReport:
    """Bound on the change of the weighted cost ``<|x_hat - x|, w>`` between two times.

    Weights and per-feature displacements must lie in ``[-k, k]``.  The bound
    is ``k sqrt(d) E[||w' - w|| + || |x_hat' - x'| - |x_hat - x| ||]``.
    """
    x_t, xhat_t = _as_samples(x_t), _as_samples(xhat_t)
    x_later, xhat_later = _as_samples(x_later), _as_samples(xhat_later)
    n, d = x_t.shape
    if not (xhat_t.shape == x_later.shape == xhat_later.shape == x_t.shape):
        raise BoundPreconditionError("state samples must be paired")
    w, w2 = _as_samples(w_t, n), _as_samples(w_later, n)
    a, a2 = np.abs(xhat_t - x_t), np.abs(xhat_later - x_later)
    for name, arr in (("w", w), ("w'", w2), ("displacement", a), ("displacement'", a2)):
        _check_box(name, arr, k)
    gap = np.abs(np.einsum("nd,nd->n", a2, w2) - np.einsum("nd,nd->n", a, w))
    per_bound = k * np.sqrt(d) * (np.linalg.norm(w2 - w, axis=1) + np.linalg.norm(a2 - a, axis=1))
    return BoundReport(float(gap.mean()), float(per_bound.mean()), _ci(per_bound - gap), k, d, t, tau)


# --------------------------------------------------------------------------
# closed forms and summaries
# --------------------------------------------------------------------------


def ar1_optimal_intervention(alpha: float, c: float, x_prev: float, t: int, tau: int,
                             mu_m: float = 0.0, mu_x: float = 0.0, beta: float = 1.0) -> float:
    """Smallest shift making ``E[sigmoid(beta * (X + theta))] >= 1/2`` at ``t + tau``.

    For ``X_t = alpha X_{t-1} - c t + U`` with ``E[U] = mu_m + mu_x`` and the
    history ending at ``x_prev`` (time ``t - 1``).  The answer does not depend
    on a positive ``beta``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if beta <= 0:
        raise ValueError("beta must be positive")
    i = np.arange(tau + 1)
    drift = -c * (t + i) + mu_m + mu_x
    return float(-(alpha ** (tau + 1)) * x_prev - np.sum(alpha ** (tau - i) * drift))


def mean_sparsity(outcomes: Sequence[RecourseOutcome]) -> float:
    return float(np.mean([o.sparsity for o in outcomes])) if outcomes else 0.0


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------


def records_to_csv(records: Sequence) -> str:
    """Dataclass records (ValidityRecord, BoundReport, RecourseOutcome) as CSV."""
    rows = [_flat(r) for r in records]
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _flat(rec) -> dict:
    d = asdict(rec)
    if isinstance(rec, BoundReport):
        extra = d.pop("extra")
        d["slack"] = rec.slack
        d.update(extra)
    out = {}
    for key, v in d.items():
        if isinstance(v, (tuple, list)):
            v = ";".join(_fmt(x) for x in v)
        out[key] = _fmt(v)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


__all__ = [
    "ValidityRecord", "BoundReport", "PreferenceWeights", "BoundPreconditionError",
    "MODES", "NATIVE_MODE", "validity_over_time", "invalidation_rate", "linear_invalidation_bound",
    "trend_invalidation_bound", "cost_variation_bound", "ar1_optimal_intervention",
    "mean_sparsity", "records_to_csv",
]
