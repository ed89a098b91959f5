"""Predictive and fairness metrics, Pareto frontiers and tradeoff selection."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidInputError, NoIncludedGroupsError, SelectionError

DEFAULT_MIN_POSITIVES = 5


def f1_score(preds, labels) -> float:
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise InvalidInputError("preds and labels differ in length")
    tp = np.sum(p & y)
    fp = np.sum(p & ~y)
    fn = np.sum(~p & y)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


@dataclass
class ViolationReport:
    avg: float
    max: float
    per_group: list  # [(label, |tpr_g - tpr|), ...] for included groups
    skipped: list  # labels of groups below min_positives
    overall_tpr: float
    denominator: str = "included groups"

    @property
    def included(self):
        return len(self.per_group)


def tpr_violations(preds, labels, group_set, min_positives=DEFAULT_MIN_POSITIVES) -> ViolationReport:
    """Average and maximum ``|tpr_g - tpr|`` over the groups of ``group_set``.

    Groups with fewer than ``min_positives`` positive rows are left out of
    both statistics; the average divides by the number of included groups.
    """
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    masks = np.asarray(group_set.masks, dtype=bool)
    if masks.shape[1] != y.size or p.shape != y.shape:
        raise InvalidInputError("group masks, preds and labels must share length")
    if not y.any():
        raise NoIncludedGroupsError("no positive examples; TPR undefined")
    tpr = float(np.mean(p[y]))
    pos = masks & y[None, :]
    npos = pos.sum(axis=1)
    hits = (pos & p[None, :]).sum(axis=1)
    keep = npos >= max(int(min_positives), 1)
    labels_ = group_set.labels
    if not keep.any():
        raise NoIncludedGroupsError(f"no group has >= {min_positives} positives")
    gaps = np.abs(hits[keep] / npos[keep] - tpr)
    per_group = [(labels_[i], float(g)) for i, g in zip(np.flatnonzero(keep), gaps)]
    skipped = [labels_[i] for i in np.flatnonzero(~keep)]
    return ViolationReport(float(gaps.mean()), float(gaps.max()), per_group, skipped, tpr)


@dataclass(frozen=True)
class EvalPoint:
    f1: float
    avg_violation: float
    max_violation: float
    method: str = ""
    grouping: str = ""
    hparams: dict = field(default_factory=dict, hash=False, compare=False)
    iterate: int = None
    split: str = "dev"
    rank: int = None

    def __post_init__(self):
        if not (self.max_violation + 1e-12 >= self.avg_violation >= 0):
            raise InvalidInputError(
                f"need max_violation >= avg_violation >= 0, got {self.max_violation}, {self.avg_violation}"
            )

    @property
    def fairness(self):
        return 1.0 - self.avg_violation

    @property
    def family(self):
        variant = self.hparams.get("variant") if self.hparams else None
        name = f"{self.method}-{self.grouping}" if self.grouping else self.method
        return f"{name}[{variant}]" if variant else name

    def key(self):
        """Provenance key identifying the model/iterate, independent of split."""
        return (self.method, self.grouping, json.dumps(self.hparams, sort_keys=True), self.iterate)

    def to_record(self):
        rec = {
            "method": self.method,
            "grouping": self.grouping,
            "hparams": self.hparams,
            "split": self.split,
            "f1": self.f1,
            "avg_violation": self.avg_violation,
            "max_violation": self.max_violation,
        }
        if self.rank is not None:
            rec["rank"] = self.rank
        if self.iterate is not None:
            rec["iterate"] = self.iterate
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(
            rec["f1"],
            rec["avg_violation"],
            rec["max_violation"],
            rec.get("method", ""),
            rec.get("grouping", ""),
            rec.get("hparams", {}),
            rec.get("iterate"),
            rec.get("split", "dev"),
            rec.get("rank"),
        )


def evaluate_predictions(preds, labels, gerry_set, min_positives=DEFAULT_MIN_POSITIVES, **provenance) -> EvalPoint:
    rep = tpr_violations(preds, labels, gerry_set, min_positives)
    return EvalPoint(f1_score(preds, labels), rep.avg, rep.max, **provenance)


def dominates(a, b) -> bool:
    """True when ``a`` is at least as good on both axes and better on one."""
    return (
        a.f1 >= b.f1
        and a.avg_violation <= b.avg_violation
        and (a.f1 > b.f1 or a.avg_violation < b.avg_violation)
    )


def pareto_frontier(points) -> list:
    """Points not dominated when maximising F1 and minimising avg violation.

    Sort by F1 descending (ties: lower violation first) and sweep, keeping a
    point only when it strictly lowers the best violation seen so far.
    """
    points = list(points)
    if not points:
        raise InvalidInputError("pareto_frontier needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (-points[i].f1, points[i].avg_violation, i))
    out = []
    best = np.inf
    for i in order:
        p = points[i]
        if p.avg_violation < best:
            out.append(p)
            best = p.avg_violation
    return out


def _selection_key(p):
    return (p.avg_violation, -p.f1, p.max_violation, p.iterate if p.iterate is not None else -1)


def select_dev_point(dev_points, tradeoff_fraction) -> EvalPoint:
    """Fairest dev point whose F1 is within ``tradeoff_fraction`` of the best."""
    dev_points = list(dev_points)
    if not dev_points:
        raise SelectionError("no dev points to select from")
    if not 0 < tradeoff_fraction < 1:
        raise InvalidInputError("tradeoff_fraction must lie in (0, 1)")
    threshold = (1.0 - tradeoff_fraction) * max(p.f1 for p in dev_points)
    ok = [p for p in dev_points if p.f1 >= threshold]
    if not ok:
        raise SelectionError(f"no point reaches F1 threshold {threshold:.4f}")
    return min(ok, key=_selection_key)


def select_under_tradeoff(dev_points, test_evaluator, tradeoff_fraction) -> EvalPoint:
    """Pick on dev, report on test.

    ``dev_points`` should all belong to one method family. ``test_evaluator``
    maps the chosen dev point to its test-split :class:`EvalPoint`; a mapping
    keyed by :meth:`EvalPoint.key` is also accepted.
    """
    chosen = select_dev_point(dev_points, tradeoff_fraction)
    if callable(test_evaluator):
        return test_evaluator(chosen)
    return test_evaluator[chosen.key()]


# ---------------------------------------------------------------- reports


def format_table(rows, tradeoffs, biased=None) -> str:
    """Aligned plain-text table: Approach, then F1 / Max / Avg per tradeoff.

    ``rows`` maps approach name to ``{tradeoff: EvalPoint}``; ``biased`` is a
    single EvalPoint repeated under every tradeoff.
    """
    cols = ("F1", "Max violation", "Avg violation")
    colw = [max(len(c), 5) for c in cols]
    w0 = max([len("Approach"), len("Biased model")] + [len(r) for r in rows])
    block = sum(colw) + 2 * (len(cols) - 1)

    def line(first, cells):
        return (first.ljust(w0) + "   " + "   ".join(cells)).rstrip()

    def fmt(name, by_t):
        cells = []
        for t in tradeoffs:
            p = by_t.get(t)
            vals = ("n/a",) * 3 if p is None else (f"{p.f1:.3f}", f"{p.max_violation:.3f}", f"{p.avg_violation:.3f}")
            cells.append("  ".join(v.rjust(w) for v, w in zip(vals, colw)))
        return line(name, cells)

    top = line("", [f"Trade-off {t * 100:g}%".center(block) for t in tradeoffs])
    hdr = line("Approach", ["  ".join(c.rjust(w) for c, w in zip(cols, colw)) for _ in tradeoffs])
    rule = "-" * len(hdr)
    lines = [rule, top, hdr, rule]
    lines += [fmt(name, by_t) for name, by_t in rows.items()]
    if biased is not None:
        lines += [rule, fmt("Biased model", {t: biased for t in tradeoffs})]
    lines.append(rule)
    return "\n".join(lines) + "\n"
