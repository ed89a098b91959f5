"""Bias-constrained training as a two-player Lagrangian game.

The task model minimises cross-entropy subject to, for every group ``g``,
``gamma_g * |tpr_g - tpr| <= nu``. The absolute value is split into two
one-sided constraints with their own multipliers. The primal player runs Adam
on a hinge-relaxed (differentiable) version of the constraints; the dual
player takes projected gradient-ascent steps on the multipliers using the
exact, indicator-based constraint values measured over the training split.
"""
import json
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    DivergenceError,
    InvalidInputError,
    NoIncludedGroupsError,
    UnconstrainedFallbackError,
)
from .groups import build_group_set, gerry_group_set
from .metrics import DEFAULT_MIN_POSITIVES, f1_score, tpr_violations
from .probes import softplus

log = logging.getLogger(__name__)

MODEL_KINDS = ("linear", "mlp")
GAMMA_MODES = ("uniform", "inverse_positive_rate")

Batch = namedtuple("Batch", ["features", "labels", "masks"])


# ---------------------------------------------------------------- task model


@dataclass
class TaskModel:
    kind: str
    input_dim: int
    hidden_dim: int = 0
    params: dict = field(default_factory=dict)

    def copy(self):
        return TaskModel(self.kind, self.input_dim, self.hidden_dim, {k: v.copy() for k, v in self.params.items()})

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def with_flat(self, vec):
        out, i = {}, 0
        for k in sorted(self.params):
            size = self.params[k].size
            out[k] = np.asarray(vec[i : i + size], dtype=float).reshape(self.params[k].shape)
            i += size
        return TaskModel(self.kind, self.input_dim, self.hidden_dim, out)


def init_model(kind, input_dim, hidden_dim=300, rng=None) -> TaskModel:
    if kind not in MODEL_KINDS:
        raise InvalidInputError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    if kind == "linear":
        return TaskModel(kind, input_dim, 0, {"w": np.zeros(input_dim), "b": np.zeros(1)})
    if hidden_dim < 1:
        raise InvalidInputError("hidden_dim must be >= 1")
    params = {
        "W1": rng.standard_normal((input_dim, hidden_dim)) * np.sqrt(2.0 / input_dim),
        "b1": np.zeros(hidden_dim),
        "w2": rng.standard_normal(hidden_dim) * np.sqrt(1.0 / hidden_dim),
        "b2": np.zeros(1),
    }
    return TaskModel(kind, input_dim, hidden_dim, params)


def _forward(model, x):
    p = model.params
    if model.kind == "linear":
        return x @ p["w"] + p["b"][0], None
    pre = x @ p["W1"] + p["b1"]
    hid = np.maximum(pre, 0.0)
    return hid @ p["w2"] + p["b2"][0], (pre, hid)


def _backward(model, x, cache, dz):
    p = model.params
    if model.kind == "linear":
        return {"w": x.T @ dz, "b": np.array([dz.sum()])}
    pre, hid = cache
    dhid = np.outer(dz, p["w2"]) * (pre > 0)
    return {"W1": x.T @ dhid, "b1": dhid.sum(axis=0), "w2": hid.T @ dz, "b2": np.array([dz.sum()])}


def logits(model, features):
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise InvalidInputError(f"feature dim {x.shape[-1]} does not match model input {model.input_dim}")
    return _forward(model, x)[0]


def model_predict(model, features):
    return (logits(model, features) > 0).astype(np.int8)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- constraints


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    group_set: object  # GroupSet built on the training split
    nu: float = 0.05
    gamma_mode: str = "uniform"
    metric: str = "tpr"

    def __post_init__(self):
        if self.nu < 0:
            raise InvalidInputError("nu must be >= 0")
        if self.gamma_mode not in GAMMA_MODES:
            raise InvalidInputError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.metric != "tpr":
            raise InvalidInputError("only the TPR constraint is supported")

    @property
    def active(self):
        return np.asarray(self.group_set.positive_counts) >= 1

    @property
    def gamma(self):
        g = len(self.group_set)
        if self.gamma_mode == "uniform":
            return np.ones(g)
        pos = np.asarray(self.group_set.positive_counts, dtype=float)
        size = np.asarray(self.group_set.sizes, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(pos > 0, size / np.maximum(pos, 1), 0.0)


def _bce(s, y):
    return float(np.mean(softplus(s) - y * s))


def _proxy_constraints(s, y, masks, gamma, nu, active):
    """Hinge-relaxed one-sided constraints on a batch, shape (2, G)."""
    pos = y == 1
    npos = int(pos.sum())
    g = masks.shape[0]
    h = np.maximum(0.0, 1.0 + s)
    if npos == 0:
        return np.zeros((2, g)), np.zeros(g, dtype=bool), h, pos, None, 0
    overall = h[pos].sum() / npos
    gp = masks & pos[None, :]
    cnt = gp.sum(axis=1)
    act = (cnt > 0) & active
    rate = np.where(act, (gp @ h) / np.maximum(cnt, 1), 0.0)
    diff = gamma * (rate - overall)
    c = np.where(act, np.stack([diff - nu, -diff - nu]), 0.0)
    return c, act, h, pos, gp, npos


def hinge_rates(model, batch):
    """``(hinge_rates, indicator_rates)`` per group over the batch positives."""
    s = logits(model, batch.features)
    pos = np.asarray(batch.labels) == 1
    gp = np.asarray(batch.masks, dtype=bool) & pos[None, :]
    cnt = np.maximum(gp.sum(axis=1), 1)
    return (gp @ np.maximum(0.0, 1.0 + s)) / cnt, (gp @ (s > 0).astype(float)) / cnt


def _lagrangian(model, lam, batch, spec, need_grad):
    x = np.asarray(batch.features, dtype=float)
    y = np.asarray(batch.labels, dtype=float)
    masks = np.asarray(batch.masks, dtype=bool)
    s, cache = _forward(model, x)
    active = spec.active
    gamma = np.where(active, spec.gamma, 0.0)
    c, act, h, pos, gp, npos = _proxy_constraints(s, y, masks, gamma, spec.nu, active)
    lam = np.asarray(lam, dtype=float)
    value = _bce(s, y) + float(np.sum(lam * c))
    if not need_grad:
        return value, None
    dz = (0.5 * (1.0 + np.tanh(0.5 * s)) - y) / s.size
    if npos:
        a = np.where(act, (lam[0] - lam[1]) * gamma, 0.0)
        dh = (s > -1.0).astype(float)
        per_row = gp.T.astype(float) @ (a / np.maximum(gp.sum(axis=1), 1)) - pos * (a.sum() / npos)
        dz = dz + dh * per_row
    return value, _backward(model, x, cache, dz)


def lagrangian_value(theta, lam, batch, spec) -> float:
    """Proxy Lagrangian: mean cross-entropy plus ``sum(lam * proxy constraints)``.

    ``lam`` has shape (2, G): upper- and lower-side multipliers per group.
    """
    return _lagrangian(theta, lam, batch, spec, need_grad=False)[0]


def lagrangian_grad(theta, lam, batch, spec):
    """Returns ``(value, grads)`` with ``grads`` keyed like ``theta.params``."""
    return _lagrangian(theta, lam, batch, spec, need_grad=True)


def _group_tprs(preds, labels, masks):
    pos = labels == 1
    gp = masks & pos[None, :]
    cnt = gp.sum(axis=1)
    hits = (gp & (preds == 1)[None, :]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr_g = np.where(cnt > 0, hits / np.maximum(cnt, 1), np.nan)
    tpr = float(np.mean(preds[pos] == 1)) if pos.any() else np.nan
    return tpr_g, tpr


def one_sided_violations(theta, dataset, spec, masks=None):
    """Exact ``(2, G)`` one-sided constraint values; NaN for absent groups."""
    if masks is None:
        masks = build_group_set(spec.group_set.defs, dataset).masks
    preds = model_predict(theta, dataset.features)
    tpr_g, tpr = _group_tprs(preds, dataset.labels, np.asarray(masks, dtype=bool))
    diff = spec.gamma * (tpr_g - tpr)
    return np.stack([diff - spec.nu, -diff - spec.nu])


def true_violations(theta, dataset, spec):
    """Exact ``gamma_g * |tpr_g - tpr| - nu`` per group; NaN where a group has no positives."""
    masks = build_group_set(spec.group_set.defs, dataset).masks
    preds = model_predict(theta, dataset.features)
    tpr_g, tpr = _group_tprs(preds, dataset.labels, masks)
    return spec.gamma * np.abs(tpr_g - tpr) - spec.nu


# ---------------------------------------------------------------- training


@dataclass
class ConstrainedTrainState:
    theta: TaskModel
    lam: np.ndarray  # (2, G)
    iterate_log: list
    T: int
    retained: dict  # iteration -> TaskModel
    group_labels: list = field(default_factory=list)
    dropped: list = field(default_factory=list)


def _dev_snapshot(model, dev, dev_gerry, min_positives):
    preds = model_predict(model, dev.features)
    snap = {"dev_f1": f1_score(preds, dev.labels)}
    try:
        rep = tpr_violations(preds, dev.labels, dev_gerry, min_positives)
        snap["dev_avg_violation"], snap["dev_max_violation"] = rep.avg, rep.max
    except NoIncludedGroupsError:
        snap["dev_avg_violation"] = snap["dev_max_violation"] = None
    return snap


def _check_T(T):
    if not 1 <= T <= 500:
        raise InvalidInputError(f"T must lie in [1, 500], got {T}")


def _run(train, dev, model_kind, T, seed, hidden_dim, lr, batch_size, min_positives,
         retain_every, on_iteration, spec=None, dual_lr=0.0, lam0=None):
    _check_T(T)
    rng = np.random.default_rng(seed)
    model = init_model(model_kind, train.d, hidden_dim, rng)
    opt = Adam(model.params, lr)
    dev_gerry = gerry_group_set(dev)
    x, y = train.features, train.labels
    n = train.n
    retain_every = retain_every or max(1, T // 50)

    if spec is not None:
        g = len(spec.group_set)
        lam = np.zeros((2, g)) if lam0 is None else np.array(lam0, dtype=float).reshape(2, g)
        train_masks = np.asarray(spec.group_set.masks, dtype=bool)
        active = spec.active
    else:
        lam = np.zeros((2, 0))

    log_, retained = [], {}
    for t in range(1, T + 1):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if spec is None:
                s, cache = _forward(model, x[idx])
                yb = y[idx].astype(float)
                value = _bce(s, yb)
                dz = (0.5 * (1.0 + np.tanh(0.5 * s)) - yb) / idx.size
                grads = _backward(model, x[idx], cache, dz)
            else:
                value, grads = lagrangian_grad(model, lam, Batch(x[idx], y[idx], train_masks[:, idx]), spec)
            if not np.isfinite(value):
                raise DivergenceError("non-finite training loss", t)
            losses.append(value)
            opt.step(model.params, grads)
        if spec is not None:
            c = one_sided_violations(model, train, spec, train_masks)
            c = np.where(np.isfinite(c) & active[None, :], c, 0.0)
            lam = np.maximum(0.0, lam + dual_lr * c)

        snap = {"t": t, "train_loss": float(np.mean(losses))}
        snap.update(_dev_snapshot(model, dev, dev_gerry, min_positives))
        snap["lambda_l1"] = float(lam.sum())
        snap["lambda_max"] = float(lam.max()) if lam.size else 0.0
        log_.append(snap)
        if t % retain_every == 0 or t == T:
            retained[t] = model.copy()
        if on_iteration is not None:
            on_iteration(t, model, lam)
    return model, lam, log_, retained


def constrained_train(train, dev, spec: ConstraintSpec, model_kind="linear", T=100, seed=0, *,
                      hidden_dim=300, lr=1e-3, dual_lr=0.05, batch_size=64,
                      min_positives=DEFAULT_MIN_POSITIVES, retain_every=None,
                      on_iteration=None, lam0=None) -> ConstrainedTrainState:
    """Train with the proxy-Lagrangian game for ``T`` epochs.

    Each outer iteration is one primal epoch of Adam over shuffled mini-batches
    with the multipliers frozen, followed by one dual step
    ``lam <- max(0, lam + dual_lr * exact_constraints(train))``. The dev split
    is scored after every iteration and ``on_iteration(t, model, lam)`` is
    called. Parameters are retained every ``max(1, T // 50)`` iterations and at
    ``T``.
    """
    active = spec.active
    labels = spec.group_set.labels
    dropped = [labels[i] for i in np.flatnonzero(~active)]
    for lab in dropped:
        log.warning("dropping constraint for group %s: no positive training examples", lab)
    if not active.any():
        raise UnconstrainedFallbackError("every constrained group lacks positive training examples")
    if spec.group_set.masks.shape[1] != train.n:
        raise InvalidInputError("constraint group set was not built on the training split")
    model, lam, log_, retained = _run(
        train, dev, model_kind, T, seed, hidden_dim, lr, batch_size, min_positives,
        retain_every, on_iteration, spec=spec, dual_lr=dual_lr, lam0=lam0,
    )
    return ConstrainedTrainState(model, lam, log_, T, retained, labels, dropped)


def train_unconstrained(train, dev, model_kind="linear", T=100, seed=0, *, hidden_dim=300, lr=1e-3,
                        batch_size=64, min_positives=DEFAULT_MIN_POSITIVES, retain_every=None,
                        on_iteration=None) -> ConstrainedTrainState:
    """Plain cross-entropy training with the same schedule; the biased baseline."""
    model, lam, log_, retained = _run(
        train, dev, model_kind, T, seed, hidden_dim, lr, batch_size, min_positives,
        retain_every, on_iteration,
    )
    return ConstrainedTrainState(model, lam, log_, T, retained)


# ---------------------------------------------------------------- persistence


def save_model(model, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "model.json", "w") as f:
        json.dump({"kind": model.kind, "input_dim": model.input_dim, "hidden_dim": model.hidden_dim,
                   "params": sorted(model.params)}, f, indent=2)
    for k, v in model.params.items():
        with open(out / f"{k}.csv", "w") as f:
            for row in np.atleast_2d(v if v.ndim == 2 else v[None, :]):
                f.write(",".join(repr(float(a)) for a in row) + "\n")
    return out


def load_model(path) -> TaskModel:
    p = Path(path)
    meta = json.loads((p / "model.json").read_text())
    params = {}
    for k in meta["params"]:
        rows = [[float(a) for a in line.split(",")] for line in (p / f"{k}.csv").read_text().split()]
        arr = np.array(rows)
        params[k] = arr if k == "W1" else arr.ravel()
    return TaskModel(meta["kind"], meta["input_dim"], meta["hidden_dim"], params)


def save_train_state(state, out_dir):
    """Final parameters, retained iterates, multipliers and the iterate log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(state.theta, out / "model")
    for t, m in state.retained.items():
        save_model(m, out / "iterates" / f"t{t:04d}")
    with open(out / "lambda.csv", "w") as f:
        for row in np.atleast_2d(state.lam):
            f.write(",".join(repr(float(a)) for a in row) + "\n")
    with open(out / "iterate_log.jsonl", "w") as f:
        for rec in state.iterate_log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "groups.json", "w") as f:
        json.dump({"groups": state.group_labels, "dropped": state.dropped, "T": state.T}, f, indent=2)
    return out
