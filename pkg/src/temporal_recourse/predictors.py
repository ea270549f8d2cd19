"""Small differentiable classifiers: a two-hidden-layer MLP and a box-bounded
linear model, each exposing ``predict`` and an exact input gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scm import sigmoid

SCHEMA_VERSION = 1


class PredictorError(ValueError):
    pass


def _hidden(z):
    # logistic via tanh: cheaper than the output sigmoid, same values up to rounding
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 15
    learning_rate: float = 0.001
    seed: int = 0
    hidden: tuple = (50, 50)

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.learning_rate <= 0:
            raise PredictorError("batch size, epochs and learning rate must be positive")


@dataclass
class MlpClassifier:
    """``d -> h1 -> h2 -> 1`` with logistic hidden units and a sigmoid output.

    Inputs are standardized with the stored ``mean``/``std`` before the first
    layer, so gradients are with respect to raw feature units.
    """

    weights: list
    biases: list
    mean: np.ndarray
    std: np.ndarray

    @property
    def d(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> list:
        return [self.d] + [w.shape[0] for w in self.weights]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise PredictorError(f"expected {self.d} features, got {x.shape[-1]}")
        return x

    def _forward(self, x):
        acts = [(x - self.mean) / self.std]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(_hidden(acts[-1] @ w.T + b))
        z = acts[-1] @ self.weights[-1].T + self.biases[-1]
        return acts, z[..., 0]

    def logit(self, x) -> np.ndarray:
        return self._forward(self._check(x))[1]

    def predict(self, x) -> np.ndarray:
        return sigmoid(self.logit(x))

    def predict_and_gradient(self, x):
        """Probability and its gradient w.r.t. ``x`` (same leading shape as ``x``)."""
        x = self._check(x)
        acts, z = self._forward(x)
        p = sigmoid(z)
        g = (p * (1 - p))[..., None] * self.weights[-1][0]
        for k in range(len(self.weights) - 1, 0, -1):
            a = acts[k]
            g = (g * a * (1 - a)) @ self.weights[k - 1]
        return p, g / self.std

    def input_gradient(self, x) -> np.ndarray:
        return self.predict_and_gradient(x)[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "mlp",
            "sizes": self.sizes,
            "activation": "logistic",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_mean": self.mean.tolist(),
            "input_std": self.std.tolist(),
        }


@dataclass
class BoundedLinearClassifier:
    """``sigmoid(<beta, x> + intercept)`` with ``|beta_i| <= bound``."""

    beta: np.ndarray
    bound: float
    intercept: float = 0.0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.bound <= 0:
            raise PredictorError("bound must be positive")
        if np.any(np.abs(self.beta) > self.bound * (1 + 1e-12)):
            raise PredictorError("beta violates the box constraint")

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise PredictorError(f"expected {self.d} features, got {x.shape[-1]}")
        return x

    def score(self, x) -> np.ndarray:
        return self._check(x) @ self.beta + self.intercept

    logit = score

    def predict(self, x) -> np.ndarray:
        return sigmoid(self.score(x))

    def score_gradient(self, x) -> np.ndarray:
        x = self._check(x)
        return np.broadcast_to(self.beta, x.shape).copy()

    def predict_and_gradient(self, x):
        p = self.predict(x)
        return p, (p * (1 - p))[..., None] * self.beta

    def input_gradient(self, x) -> np.ndarray:
        return self.predict_and_gradient(x)[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "bounded-linear",
            "beta": self.beta.tolist(),
            "bound": self.bound,
            "intercept": self.intercept,
        }


@dataclass
class ColumnSubset:
    """Applies ``model`` to the columns ``columns`` of a ``d``-feature state.

    The input gradient is zero on every other column.
    """

    model: object
    columns: tuple
    d: int

    def __post_init__(self):
        self.columns = tuple(int(c) for c in self.columns)
        if len(set(self.columns)) != len(self.columns) or not all(0 <= c < self.d for c in self.columns):
            raise PredictorError("columns must be distinct indices below d")
        if len(self.columns) != self.model.d:
            raise PredictorError(f"the model reads {self.model.d} features, {len(self.columns)} selected")

    def _take(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise PredictorError(f"expected {self.d} features, got {x.shape[-1]}")
        return x[..., list(self.columns)]

    def logit(self, x) -> np.ndarray:
        return self.model.logit(self._take(x))

    def predict(self, x) -> np.ndarray:
        return self.model.predict(self._take(x))

    def predict_and_gradient(self, x):
        p, g = self.model.predict_and_gradient(self._take(x))
        full = np.zeros(g.shape[:-1] + (self.d,))
        full[..., list(self.columns)] = g
        return p, full

    def input_gradient(self, x) -> np.ndarray:
        return self.predict_and_gradient(x)[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "column-subset",
            "columns": list(self.columns),
            "d": self.d,
            "model": self.model.to_dict(),
        }


def predict(h, x) -> np.ndarray:
    return h.predict(x)


def input_gradient(h, x) -> np.ndarray:
    return h.input_gradient(x)


def init_mlp(d: int, hidden=(50, 50), seed: int = 0, mean=None, std=None) -> MlpClassifier:
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
        biases.append(rng.uniform(-lim, lim, fan_out))
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    std = np.ones(d) if std is None else np.asarray(std, dtype=float)
    return MlpClassifier(weights, biases, mean, std)


def _bce_and_grads(model: MlpClassifier, x, y):
    acts, z = model._forward(x)
    p = sigmoid(z)
    eps = 1e-12
    loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    delta = ((p - y) / len(y))[:, None]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            a = acts[k]
            delta = (delta @ model.weights[k]) * a * (1 - a)
    return loss, gw, gb


def bce(model, x, y) -> float:
    p = model.predict(x)
    eps = 1e-12
    return float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))


def train_mlp(states, labels, cfg: TrainConfig = TrainConfig(), return_history: bool = False):
    """Minibatch training on binary cross-entropy with Adam updates."""
    x = np.asarray(states, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if len(x) != len(y) or len(y) == 0:
        raise PredictorError("states and labels must be nonempty and aligned")
    if not np.all((y == 0) | (y == 1)):
        raise PredictorError("labels must be 0/1")
    if y.min() == y.max():
        raise PredictorError("training data contains a single class")
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    model = init_mlp(x.shape[1], cfg.hidden, cfg.seed, x.mean(axis=0), std)
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(y))
        for lo in range(0, len(y), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            _, gw, gb = _bce_and_grads(model, x[idx], y[idx])
            step += 1
            for k, g in enumerate(gw + gb):
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1**step)
                vhat = m2[k] / (1 - b2**step)
                params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        history.append(bce(model, x, y))
    return (model, history) if return_history else model


def accuracy(h, x, y) -> float:
    return float(np.mean((h.predict(x) >= 0.5) == (np.asarray(y) == 1)))


def fit_bounded_linear(x, y, bound: float, fit_intercept: bool = False, max_iter: int = 200000,
                       tol: float = 1e-15, return_history: bool = False):
    """Least squares ``min ||X beta + b - y||^2 / 2n`` subject to ``|beta_i| <= bound``.

    Solved by projected gradient descent with step ``1/L``, which keeps the
    objective non-increasing.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or len(x) == 0 or len(x) != len(y):
        raise PredictorError("need a nonempty design matrix aligned with targets")
    if bound <= 0:
        raise PredictorError("bound must be positive")
    n, d = x.shape
    design = np.hstack([x, np.ones((n, 1))]) if fit_intercept else x
    lip = np.linalg.eigvalsh(design.T @ design / n).max()
    if lip <= 0:
        lip = 1.0
    w = np.zeros(design.shape[1])
    lo = np.full(design.shape[1], -bound)
    hi = np.full(design.shape[1], bound)
    if fit_intercept:
        lo[-1], hi[-1] = -np.inf, np.inf

    def objective(w):
        r = design @ w - y
        return 0.5 * float(r @ r) / n

    history = [objective(w)]
    for _ in range(max_iter):
        grad = design.T @ (design @ w - y) / n
        new = np.clip(w - grad / lip, lo, hi)
        history.append(objective(new))
        done = np.max(np.abs(new - w)) <= tol * max(1.0, np.max(np.abs(w)))
        w = new
        if done:
            break
    beta = w[:d]
    model = BoundedLinearClassifier(beta, bound, float(w[d]) if fit_intercept else 0.0)
    return (model, history) if return_history else model


def to_document(h) -> str:
    return json.dumps(h.to_dict(), indent=1)


def from_document(text: str):
    d = json.loads(text)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise PredictorError(f"unsupported schema version {d.get('schema_version')!r}")
    if d["kind"] == "column-subset":
        return ColumnSubset(from_document(json.dumps(d["model"])), tuple(d["columns"]), int(d["d"]))
    if d["kind"] == "mlp":
        return MlpClassifier(
            [np.asarray(w, dtype=float) for w in d["weights"]],
            [np.asarray(b, dtype=float) for b in d["biases"]],
            np.asarray(d["input_mean"], dtype=float),
            np.asarray(d["input_std"], dtype=float),
        )
    if d["kind"] == "bounded-linear":
        return BoundedLinearClassifier(np.asarray(d["beta"]), float(d["bound"]), float(d["intercept"]))
    raise PredictorError(f"unknown model kind {d['kind']!r}")


__all__ = [
    "TrainConfig", "MlpClassifier", "BoundedLinearClassifier", "ColumnSubset", "predict", "input_gradient",
    "init_mlp", "train_mlp", "fit_bounded_linear", "accuracy", "bce", "to_document",
    "from_document", "PredictorError",
]
