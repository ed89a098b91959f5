"""Iterative nullspace projection over multiple protected attributes.

Two variants share one loop. ``naive`` projects out the full row space of the
stacked probe weights every iteration. ``principal`` removes only the top
singular direction of that stack and keeps the removed directions mutually
orthogonal, so the accumulated projector is the nullspace of a sum of rank-one
projectors.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .exceptions import DegenerateBiasError, DegenerateTargetError, InvalidInputError
from .groups import GroupKind, build_group_set
from .metrics import f1_score
from .probes import (
    LinearProbe,
    ProbeConfig,
    majority_rate,
    predict,
    train_membership_probes,
    train_probe,
)

log = logging.getLogger(__name__)

VARIANTS = ("naive", "principal")


@dataclass(frozen=True)
class InlpConfig:
    group_kind: GroupKind = GroupKind.GERRY
    variant: str = "principal"
    max_iterations: int = 10
    probe_config: ProbeConfig = ProbeConfig()
    audit_every: int = 1
    directions_per_iteration: int = 1
    early_stop: bool = True
    leakage_margin: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "group_kind", GroupKind.parse(self.group_kind))
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if self.audit_every < 1 or self.directions_per_iteration < 1:
            raise InvalidInputError("audit_every and directions_per_iteration must be >= 1")


@dataclass
class ProjectionState:
    projector: linalg.Projector
    direction_sum: np.ndarray
    directions: np.ndarray  # (m, d) orthonormal rows
    iteration: int = 0
    audit_log: list = field(default_factory=list)
    status: str = "running"
    variant: str = "principal"

    @classmethod
    def initial(cls, d, variant="principal"):
        return cls(linalg.Projector(np.eye(d), d), np.zeros((d, d)), np.zeros((0, d)), variant=variant)

    @property
    def rank(self):
        return self.projector.rank

    @property
    def dim(self):
        return self.projector.dim


def apply_projection(state, features):
    """Project each row of ``features``; accepts a state, Projector or matrix."""
    if isinstance(state, ProjectionState):
        p = state.projector.matrix
    else:
        p = np.asarray(state, dtype=float)
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != p.shape[0]:
        raise InvalidInputError(f"feature dim {x.shape[-1]} does not match projector dim {p.shape[0]}")
    return x @ p.T


def projector_from_directions(directions, d):
    dirs = np.asarray(directions, dtype=float).reshape(-1, d)
    if dirs.shape[0] == 0:
        return linalg.Projector(np.eye(d), d)
    return linalg.nullspace_of_sum(dirs.T @ dirs)


# ---------------------------------------------------------------- probes per setting


@dataclass
class _BiasTargets:
    labels: list
    train: list  # per probe, target vector (categorical or bool)
    dev: list
    kind: GroupKind


def _bias_targets(train, dev, group_set, kind):
    if kind is GroupKind.INDEP:
        attrs = sorted({a for g in group_set.defs for a in g.fixed})
        names = train.schema.names
        return _BiasTargets(
            [names[a] for a in attrs],
            [train.protected[:, a] for a in attrs],
            [dev.protected[:, a] for a in attrs],
            kind,
        )
    dev_set = build_group_set(group_set.defs, dev)
    return _BiasTargets(group_set.labels, list(group_set.masks), list(dev_set.masks), kind)


def _train_bias_probes(x_train, x_dev, targets, config):
    """Returns ``(probes, dev_acc, dev_majority)`` keyed by probe label."""
    probes = {}
    if targets.kind is GroupKind.INDEP:
        for label, t in zip(targets.labels, targets.train):
            try:
                probes[label] = train_probe(x_train, t, config, target=label)
            except DegenerateTargetError:
                log.warning("skipping probe for attribute %s: single class in training data", label)
    else:
        fitted = train_membership_probes(x_train, np.stack(targets.train), config, targets.labels)
        probes = {targets.labels[i]: p for i, p in fitted.items()}
    acc, maj = {}, {}
    for label, t in zip(targets.labels, targets.dev):
        if label in probes:
            acc[label] = float(np.mean(predict(probes[label], x_dev) == t))
            maj[label] = majority_rate(t)
    return probes, acc, maj


def _stack(probes):
    return np.vstack([p.weights for p in probes.values()])


# ---------------------------------------------------------------- main loop


def inlp_run(dataset_train, dataset_dev, group_set, config: InlpConfig, on_iteration=None) -> ProjectionState:
    """Run iterative nullspace projection and return the final state.

    Each iteration trains the bias probes on the currently projected
    training features, stops early if none of them beats its dev majority
    rate by more than ``config.leakage_margin``, and otherwise removes the
    bias directions. A main-task probe is refit every ``audit_every``
    iterations and ``on_iteration(state, main_probe)`` is called after it.
    """
    d = dataset_train.d
    if config.max_iterations > d:
        raise InvalidInputError(f"max_iterations {config.max_iterations} exceeds feature dim {d}")
    if group_set.kind is not None and group_set.kind is not config.group_kind:
        raise InvalidInputError(f"group set is {group_set.kind.value}, config expects {config.group_kind.value}")
    if group_set.masks.shape[1] != dataset_train.n:
        raise InvalidInputError("group set was not built on the training split")

    targets = _bias_targets(dataset_train, dataset_dev, group_set, config.group_kind)
    state = ProjectionState.initial(d, config.variant)
    base_seed = config.probe_config.seed
    x_train0, x_dev0 = dataset_train.features, dataset_dev.features

    for it in range(1, config.max_iterations + 1):
        x_train = apply_projection(state, x_train0)
        x_dev = apply_projection(state, x_dev0)
        cfg = config.probe_config.with_seed(base_seed + it)
        probes, acc, maj = _train_bias_probes(x_train, x_dev, targets, cfg)
        if not probes:
            state.status = "no-probes"
            break
        if config.early_stop and all(acc[k] <= maj[k] + config.leakage_margin for k in acc):
            state.status = "converged"
            break

        w = _stack(probes)
        if config.variant == "naive":
            removed = _naive_step(state, w)
        else:
            removed = _principal_step(state, w, config.directions_per_iteration)
            if removed == 0:
                # retry once with fresh probes before declaring exhaustion
                cfg = config.probe_config.with_seed(base_seed + 1_000_003 * it)
                probes, acc, maj = _train_bias_probes(x_train, x_dev, targets, cfg)
                removed = _principal_step(state, _stack(probes), config.directions_per_iteration) if probes else 0
                if removed == 0:
                    state.status = "exhausted"
                    break

        state.iteration = it
        record = {"iter": it, "rank": state.rank, "removed": removed, "probe_acc": acc, "dev_f1": None}
        main = None
        if it % config.audit_every == 0 or it == config.max_iterations:
            main = train_probe(apply_projection(state, x_train0), dataset_train.labels, cfg, target="label")
            dev_pred = predict(main, apply_projection(state, x_dev0))
            record["dev_f1"] = f1_score(dev_pred, dataset_dev.labels)
        state.audit_log.append(record)
        if on_iteration is not None:
            on_iteration(state, main)
    else:
        state.status = "max_iterations"
    return state


def _naive_step(state, w):
    # rows of w already lie in range(P), so P_new @ P is again a projector
    p_new = linalg.nullspace_projector(w)
    p = p_new.matrix @ state.projector.matrix
    p = 0.5 * (p + p.T)
    rank = int(round(np.trace(p)))
    removed = state.rank - rank
    state.projector = linalg.Projector(p, rank)
    return removed


def _principal_step(state, w, count=1):
    try:
        candidates = linalg.principal_directions(w, count)
    except DegenerateBiasError:
        return 0
    d = state.dim
    removed = 0
    dirs = state.directions
    for v in candidates:
        u, _ = linalg.gram_schmidt(v, dirs)
        if u is None:
            continue
        dirs = np.vstack([dirs, u[None, :]])
        state.direction_sum = state.direction_sum + linalg.rank_one_projector(u).matrix
        removed += 1
    if removed:
        state.directions = dirs
        state.projector = linalg.nullspace_of_sum(state.direction_sum)
        if state.projector.rank != d - dirs.shape[0]:
            raise AssertionError("rank accounting drifted")  # pragma: no cover
    return removed


# ---------------------------------------------------------------- persistence


def write_matrix(path, a):
    a = np.atleast_2d(a)
    with open(path, "w") as f:
        for row in a:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path, d):
    text = Path(path).read_text().strip()
    if not text:
        return np.zeros((0, d))
    return np.array([[float(v) for v in line.split(",")] for line in text.split("\n")])


def save_state(state, out_dir):
    """Write ``projector.csv``, ``directions.csv`` and ``audit.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "projector.csv", state.projector.matrix)
    write_matrix(out / "directions.csv", state.directions)
    with open(out / "audit.jsonl", "w") as f:
        for rec in state.audit_log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "state.json", "w") as f:
        json.dump({"iteration": state.iteration, "status": state.status, "variant": state.variant,
                   "rank": state.rank}, f, indent=2)
    return out


def load_state(path):
    p = Path(path)
    proj = read_matrix(p / "projector.csv", None)
    d = proj.shape[0]
    dirs = read_matrix(p / "directions.csv", d)
    meta = json.loads((p / "state.json").read_text())
    audit = [json.loads(line) for line in (p / "audit.jsonl").read_text().splitlines() if line]
    return ProjectionState(
        linalg.Projector(proj, meta["rank"]),
        dirs.T @ dirs,
        dirs,
        meta["iteration"],
        audit,
        meta["status"],
        meta["variant"],
    )
