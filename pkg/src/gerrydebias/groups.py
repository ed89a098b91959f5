"""Subgroup enumeration for independent, intersectional and gerrymandering settings."""
import itertools
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import UnknownGroupAttributeError


class GroupKind(str, Enum):
    INDEP = "INDEP"
    INTER = "INTER"
    GERRY = "GERRY"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


@dataclass(frozen=True)
class GroupDef:
    """A subgroup as a partial assignment ``{attribute index: value}``."""

    assignment: tuple  # sorted ((attr_index, value), ...)
    kind: GroupKind
    label: str

    @property
    def fixed(self):
        return tuple(a for a, _ in self.assignment)

    def matches(self, protected):
        protected = np.asarray(protected)
        mask = np.ones(protected.shape[0], dtype=bool)
        for a, v in self.assignment:
            mask &= protected[:, a] == v
        return mask


def _make_def(schema, assignment, kind):
    names = schema.names
    label = ",".join(f"{names[a]}={v}" for a, v in assignment)
    return GroupDef(tuple(assignment), kind, label)


def enumerate_groups(schema, kind) -> list:
    """All group definitions of one setting, in a fixed order.

    Ordered by number of fixed attributes, then by the fixed attribute
    indices, then by values. GERRY omits the all-wildcard group.
    """
    kind = GroupKind.parse(kind)
    k = len(schema)
    card = schema.cardinalities
    if kind is GroupKind.INDEP:
        subsets = [(a,) for a in range(k)]
    elif kind is GroupKind.INTER:
        subsets = [tuple(range(k))]
    else:
        subsets = [s for r in range(1, k + 1) for s in itertools.combinations(range(k), r)]
    defs = []
    for attrs in subsets:
        for values in itertools.product(*(range(card[a]) for a in attrs)):
            defs.append(_make_def(schema, list(zip(attrs, values)), kind))
    return defs


@dataclass(frozen=True, eq=False)
class GroupSet:
    defs: tuple
    masks: np.ndarray  # (G, n) bool
    positive_counts: np.ndarray  # (G,)

    @property
    def sizes(self):
        return self.masks.sum(axis=1)

    @property
    def labels(self):
        return [g.label for g in self.defs]

    @property
    def kind(self):
        kinds = {g.kind for g in self.defs}
        return kinds.pop() if len(kinds) == 1 else None

    def __len__(self):
        return len(self.defs)

    def report(self):
        return [
            {"label": g.label, "size": int(s), "positives": int(p)}
            for g, s, p in zip(self.defs, self.sizes, self.positive_counts)
        ]

    def report_json(self):
        return json.dumps(self.report(), indent=2)


def build_group_set(defs, dataset) -> GroupSet:
    k = len(dataset.schema)
    defs = tuple(defs)
    for g in defs:
        for a, v in g.assignment:
            if not 0 <= a < k:
                raise UnknownGroupAttributeError(f"group {g.label!r} references attribute {a}, schema has {k}")
            if not 0 <= v < dataset.schema.cardinalities[a]:
                raise UnknownGroupAttributeError(f"group {g.label!r} value {v} out of range")
    if defs:
        masks = np.stack([g.matches(dataset.protected) for g in defs])
    else:
        masks = np.zeros((0, dataset.n), dtype=bool)
    pos = (masks & (dataset.labels == 1)[None, :]).sum(axis=1)
    masks.setflags(write=False)
    return GroupSet(defs, masks, pos)


def gerry_group_set(dataset) -> GroupSet:
    return build_group_set(enumerate_groups(dataset.schema, GroupKind.GERRY), dataset)
