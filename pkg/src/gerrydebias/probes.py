"""Linear logistic probes trained by mini-batch gradient descent.

Several binary probes that share the same features are trained jointly as
the columns of one weight matrix; each column still follows its own
independent optimisation path.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateTargetError, InvalidInputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    l2: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.l2 < 0:
            raise InvalidInputError("l2 must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    def with_seed(self, seed):
        return ProbeConfig(self.learning_rate, self.epochs, self.l2, self.batch_size, int(seed))


@dataclass(frozen=True, eq=False)
class LinearProbe:
    weights: np.ndarray  # (r, d); r == 1 for a binary target
    intercepts: np.ndarray  # (r,)
    target: str = ""
    classes: tuple = (0, 1)
    loss_history: np.ndarray = field(default=None, repr=False)  # (epochs + 1, r)

    @property
    def dim(self):
        return self.weights.shape[1]

    @property
    def is_binary(self):
        return self.weights.shape[0] == 1 and len(self.classes) == 2

    def to_json(self):
        return {
            "target": self.target,
            "classes": [c if isinstance(c, str) else int(c) for c in self.classes],
            "weights": self.weights.tolist(),
            "intercepts": self.intercepts.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            np.asarray(obj["weights"], dtype=float),
            np.asarray(obj["intercepts"], dtype=float),
            obj.get("target", ""),
            tuple(obj.get("classes", (0, 1))),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def logistic_loss_and_grad(weights, intercepts, features, targets, l2):
    """Per-column regularised logistic loss and gradients.

    ``targets`` is (n, r) in {0, 1}. Returns ``(loss (r,), grad_w (r, d),
    grad_b (r,))`` for ``mean BCE + 0.5 * l2 * ||w||^2``.
    """
    z = features @ weights.T + intercepts
    loss = np.mean(softplus(z) - targets * z, axis=0)
    loss += 0.5 * l2 * np.sum(weights * weights, axis=1)
    g = (_sigmoid(z) - targets) / features.shape[0]
    return loss, g.T @ features + l2 * weights, g.sum(axis=0)


def softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _full_loss(w, b, x, y, l2):
    z = x @ w.T + b
    return np.mean(softplus(z) - y * z, axis=0) + 0.5 * l2 * np.sum(w * w, axis=1)


def fit_logistic(features, targets, config: ProbeConfig):
    """Fit independent binary logistic regressions, one per target column.

    Plain mini-batch gradient descent with a fixed step. An epoch that would
    raise a column's full training loss is rolled back for that column and
    its step halved, so every column's loss history is non-increasing.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, d = x.shape
    r = y.shape[1]
    w = np.zeros((r, d))
    b = np.zeros(r)
    lr = np.full(r, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    bs = config.batch_size
    l2 = config.l2

    history = np.empty((config.epochs + 1, r))
    history[0] = loss = _full_loss(w, b, x, y, l2)
    for epoch in range(1, config.epochs + 1):
        w0, b0 = w.copy(), b.copy()
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            xb, yb = x[idx], y[idx]
            g = (_sigmoid(xb @ w.T + b) - yb) / idx.size
            w -= lr[:, None] * (g.T @ xb + l2 * w)
            b -= lr * g.sum(axis=0)
        new = _full_loss(w, b, x, y, l2)
        worse = ~(new <= loss)
        if np.any(worse):
            w[worse], b[worse] = w0[worse], b0[worse]
            new[worse] = loss[worse]
            lr[worse] *= 0.5
        history[epoch] = loss = new
    return w, b, history


def train_probe(features, targets, config: ProbeConfig = ProbeConfig(), target="") -> LinearProbe:
    """Logistic-regression probe for a categorical target.

    Two classes give a single weight row; more classes give one-vs-rest rows in
    sorted class order.
    """
    x = np.asarray(features, dtype=float)
    t = np.asarray(targets)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise InvalidInputError(f"features {x.shape} and targets {t.shape} disagree")
    classes = np.unique(t)
    if classes.size < 2:
        raise DegenerateTargetError(f"target {target!r} has a single class")
    if classes.size == 2:
        y = (t == classes[1]).astype(float)[:, None]
    else:
        y = (t[:, None] == classes[None, :]).astype(float)
    w, b, hist = fit_logistic(x, y, config)
    return LinearProbe(w, b, target, tuple(c.item() for c in classes), hist)


def train_membership_probes(features, masks, config: ProbeConfig = ProbeConfig(), labels=None):
    """One-vs-rest membership probes, one per row of ``masks`` (G, n).

    Rows whose membership is all-true or all-false are skipped with a warning.
    Returns ``{group index: LinearProbe}`` in group order.
    """
    masks = np.asarray(masks, dtype=bool)
    labels = labels or [str(i) for i in range(masks.shape[0])]
    counts = masks.sum(axis=1)
    ok = (counts > 0) & (counts < masks.shape[1])
    for i in np.flatnonzero(~ok):
        log.warning("skipping probe for group %s: single-class membership", labels[i])
    keep = np.flatnonzero(ok)
    if keep.size == 0:
        return {}
    w, b, hist = fit_logistic(features, masks[keep].T.astype(float), config)
    return {
        int(g): LinearProbe(w[j : j + 1], b[j : j + 1], labels[g], (False, True), hist[:, j : j + 1])
        for j, g in enumerate(keep)
    }


def decision_scores(probe, features):
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != probe.dim:
        raise InvalidInputError(f"feature dim {x.shape[1]} does not match probe dim {probe.dim}")
    return x @ probe.weights.T + probe.intercepts


def predict(probe, features):
    """Class predictions; ties go to the lower class index."""
    s = decision_scores(probe, features)
    classes = np.asarray(probe.classes)
    if probe.weights.shape[0] == 1:
        return classes[(s[:, 0] > 0).astype(int)]
    return classes[np.argmax(s, axis=1)]


def probe_accuracy(probe, features, targets) -> float:
    return float(np.mean(predict(probe, features) == np.asarray(targets)))


def majority_rate(targets) -> float:
    _, counts = np.unique(np.asarray(targets), return_counts=True)
    return float(counts.max() / counts.sum())
