"""Datasets, file ingestion, stratified splitting and the synthetic generator.

File formats
------------
features.csv    no header, one row of ``d`` floats per instance
metadata.jsonl  ``{"id": str, "label": 0|1, "attrs": {name: int, ...}}`` per line
schema.json     ``{"attributes": [{"name": str, "cardinality": int}, ...]}``
"""
import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import (
    InvalidInputError,
    MalformedRowError,
    NonBinaryLabelError,
    RowCountMismatchError,
    SplitError,
    UnknownAttributeError,
    ValueOutOfRangeError,
)

SPLITS = ("all", "train", "dev", "test")


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple  # ((name, cardinality), ...)

    def __post_init__(self):
        attrs = tuple((str(n), int(c)) for n, c in self.attributes)
        names = [n for n, _ in attrs]
        if not attrs:
            raise InvalidInputError("schema needs at least one attribute")
        if any(not n for n in names) or len(set(names)) != len(names):
            raise InvalidInputError(f"attribute names must be unique and non-empty: {names}")
        if any(c < 2 for _, c in attrs):
            raise InvalidInputError("every attribute needs cardinality >= 2")
        object.__setattr__(self, "attributes", attrs)

    @property
    def names(self):
        return [n for n, _ in self.attributes]

    @property
    def cardinalities(self):
        return [c for _, c in self.attributes]

    def __len__(self):
        return len(self.attributes)

    def index(self, name):
        return self.names.index(name)

    def to_json(self):
        return {"attributes": [{"name": n, "cardinality": c} for n, c in self.attributes]}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(tuple((a["name"], a["cardinality"]) for a in obj["attributes"]))
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"malformed schema object: {e}") from e

    @classmethod
    def binary(cls, *names):
        return cls(tuple((n, 2) for n in names))


def load_schema(path) -> AttributeSchema:
    with open(path) as f:
        return AttributeSchema.from_json(json.load(f))


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray
    schema: AttributeSchema
    split: str = "all"
    ids: tuple = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        z = np.asarray(self.protected)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidInputError(f"features must be n x d with n, d >= 1, got {x.shape}")
        n = x.shape[0]
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("features contain non-finite values")
        if y.shape != (n,) or not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("labels must be a binary vector of length n")
        if z.ndim == 1:
            z = z[:, None]
        if z.shape != (n, len(self.schema)):
            raise InvalidInputError(f"protected must be n x k = {(n, len(self.schema))}, got {z.shape}")
        card = np.array(self.schema.cardinalities)
        if np.any(z < 0) or np.any(z >= card[None, :]):
            raise InvalidInputError("protected value outside schema cardinality")
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = tuple(str(i) for i in range(n)) if self.ids is None else tuple(map(str, self.ids))
        if len(ids) != n:
            raise InvalidInputError("ids length must equal n")
        x = x.copy()
        y = y.astype(np.int8)
        z = z.astype(np.int64)
        for a in (x, y, z):
            a.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "protected", z)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, index, split=None):
        index = np.asarray(index)
        return Dataset(
            self.features[index],
            self.labels[index],
            self.protected[index],
            self.schema,
            split or self.split,
            tuple(self.ids[i] for i in index),
        )

    def with_features(self, features):
        return Dataset(features, self.labels, self.protected, self.schema, self.split, self.ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.split == other.split
            and self.ids == other.ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.protected, other.protected)
        )


# ---------------------------------------------------------------- file I/O


def save_dataset(dataset: Dataset, out_dir, prefix=""):
    """Write ``features.csv``, ``metadata.jsonl`` and ``schema.json``.

    Floats are written with ``repr`` so that loading gives back identical bits.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": out / f"{prefix}features.csv",
        "metadata": out / f"{prefix}metadata.jsonl",
        "schema": out / f"{prefix}schema.json",
    }
    with open(paths["features"], "w") as f:
        for row in dataset.features:
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")
    names = dataset.schema.names
    with open(paths["metadata"], "w") as f:
        for i in range(dataset.n):
            rec = {
                "id": dataset.ids[i],
                "label": int(dataset.labels[i]),
                "attrs": {nm: int(v) for nm, v in zip(names, dataset.protected[i])},
            }
            f.write(json.dumps(rec) + "\n")
    with open(paths["schema"], "w") as f:
        json.dump(dataset.schema.to_json(), f, indent=2)
        f.write("\n")
    return paths


def _read_features(path):
    rows = []
    with open(path, newline="") as f:
        for lineno, rec in enumerate(csv.reader(f), start=1):
            if not rec or all(not c.strip() for c in rec):
                raise MalformedRowError("empty feature row", lineno, path)
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                raise MalformedRowError("non-numeric feature value", lineno, path) from None
            if not all(math.isfinite(v) for v in vals):
                raise MalformedRowError("non-finite feature value", lineno, path)
            if rows and len(vals) != len(rows[0]):
                raise MalformedRowError(
                    f"expected {len(rows[0])} features, got {len(vals)}", lineno, path
                )
            rows.append(vals)
    return rows


def _read_metadata(path, schema):
    names = schema.names
    card = dict(schema.attributes)
    ids, labels, prot = [], [], []
    with open(path) as f:
        lines = f.read().split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise MalformedRowError("invalid JSON", lineno, path) from None
        if not isinstance(rec, dict) or not {"id", "label", "attrs"} <= rec.keys():
            raise MalformedRowError("record needs id, label and attrs", lineno, path)
        label = rec["label"]
        if isinstance(label, bool) or label not in (0, 1):
            raise NonBinaryLabelError(f"label must be 0 or 1, got {label!r}", lineno, path)
        attrs = rec["attrs"]
        if not isinstance(attrs, dict):
            raise MalformedRowError("attrs must be an object", lineno, path)
        for k in attrs:
            if k not in card:
                raise UnknownAttributeError(f"unknown attribute {k!r}", lineno, path)
        row = []
        for nm in names:
            if nm not in attrs:
                raise MalformedRowError(f"missing protected attribute {nm!r}", lineno, path)
            v = attrs[nm]
            if isinstance(v, bool) or not isinstance(v, int):
                raise MalformedRowError(f"attribute {nm!r} must be an integer", lineno, path)
            if not 0 <= v < card[nm]:
                raise ValueOutOfRangeError("value out of range", lineno, path)
            row.append(v)
        ids.append(str(rec["id"]))
        labels.append(label)
        prot.append(row)
    return ids, labels, prot


def load_dataset(features_path, metadata_path, schema, split="all") -> Dataset:
    """Load a dataset from a features CSV and a metadata JSONL file.

    ``schema`` may be an :class:`AttributeSchema` or a path to a schema file.
    """
    if not isinstance(schema, AttributeSchema):
        schema = load_schema(schema)
    feats = _read_features(features_path)
    ids, labels, prot = _read_metadata(metadata_path, schema)
    if len(feats) != len(labels):
        line = min(len(feats), len(labels)) + 1
        raise RowCountMismatchError(
            f"row count mismatch: {len(feats)} feature rows vs {len(labels)} metadata rows",
            line,
        )
    if not feats:
        raise MalformedRowError("dataset is empty", 1, features_path)
    return Dataset(np.array(feats), np.array(labels), np.array(prot), schema, split, tuple(ids))


def load_dataset_dir(path, prefix="", split="all") -> Dataset:
    p = Path(path)
    return load_dataset(
        p / f"{prefix}features.csv", p / f"{prefix}metadata.jsonl", p / f"{prefix}schema.json", split
    )


# ---------------------------------------------------------------- splitting


def _split_sizes(n, fractions):
    raw = np.asarray(fractions, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    rem = n - sizes.sum()
    # largest remainder, ties to the earlier split
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split_indices(dataset, fractions=(0.7, 0.15, 0.15), seed=0, stratify_groups=False):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SplitError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)!r}")
    n = dataset.n
    sizes = _split_sizes(n, fractions)
    if np.any(sizes == 0):
        raise SplitError(f"a split would receive 0 rows (sizes {tuple(sizes)})")

    rng = np.random.default_rng(seed)
    if stratify_groups:
        keys = np.column_stack([dataset.labels, dataset.protected])
        _, stratum = np.unique(keys, axis=0, return_inverse=True)
        stratum = stratum.ravel()
    else:
        stratum = dataset.labels.astype(np.int64)
    # Spread each stratum evenly along [0, 1) in random order, then sort: any
    # contiguous block of the result keeps the parent's stratum proportions.
    position = np.empty(n)
    jitter = rng.random(n)
    for s in np.unique(stratum):
        idx = np.flatnonzero(stratum == s)
        perm = rng.permutation(idx.size)
        position[idx[perm]] = (np.arange(idx.size) + jitter[idx]) / idx.size
    order = np.argsort(position, kind="stable")
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.sort(part) for part in np.split(order, bounds))


def split(dataset, fractions=(0.7, 0.15, 0.15), seed=0, stratify_groups=False):
    """Stratified train/dev/test split; returns three datasets."""
    parts = split_indices(dataset, fractions, seed, stratify_groups)
    return tuple(dataset.subset(idx, name) for idx, name in zip(parts, ("train", "dev", "test")))


# ---------------------------------------------------------------- synthetic


def _parse_combo(key, k):
    if isinstance(key, str):
        parts = [p.strip() for p in key.split(",")]
        key = tuple(None if p in ("*", "") else int(p) for p in parts)
    key = tuple(key)
    if len(key) != k:
        raise InvalidInputError(f"combination {key} must have one entry per attribute ({k})")
    return key


def _combo_str(key):
    return ",".join("*" if v is None else str(v) for v in key)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for :func:`generate_synthetic`.

    Combination keys are tuples with one entry per attribute, ``None`` acting
    as a wildcard (``"1,*,0"`` in JSON). All intersection terms share one
    feature direction unless ``shared_intersection_direction`` is false, so
    signed values can encode parity-style bias that no single attribute sees.
    """

    n: int
    d: int
    schema: AttributeSchema
    label_signal: float = 1.0
    attribute_signal: tuple = None
    intersection_signal: dict = field(default_factory=dict)
    label_bias: tuple = None
    noise_std: float = 1.0
    seed: int = 0
    positive_rate: float = 0.5
    intersection_label_bias: dict = field(default_factory=dict)
    shared_intersection_direction: bool = True

    def __post_init__(self):
        k = len(self.schema)

        def per_attr(v, name):
            if v is None:
                v = 0.0
            if np.isscalar(v):
                v = (float(v),) * k
            v = tuple(float(x) for x in v)
            if len(v) != k:
                raise InvalidInputError(f"{name} needs one value per attribute")
            return v

        attr_sig = per_attr(self.attribute_signal, "attribute_signal")
        lbias = per_attr(self.label_bias, "label_bias")
        if any(a < 0 for a in attr_sig):
            raise InvalidInputError("attribute_signal must be >= 0")
        if any(abs(b) > 1 for b in lbias):
            raise InvalidInputError("label_bias entries must lie in [-1, 1]")
        if self.n < 1 or self.d < 1:
            raise InvalidInputError("n and d must be positive")
        if self.label_signal < 0 or self.noise_std <= 0:
            raise InvalidInputError("label_signal must be >= 0 and noise_std > 0")
        if not 0 < self.positive_rate < 1:
            raise InvalidInputError("positive_rate must lie in (0, 1)")
        card = self.schema.cardinalities

        def combos(m, name):
            out = {}
            for key, val in dict(m).items():
                c = _parse_combo(key, k)
                if any(v is not None and not 0 <= v < card[i] for i, v in enumerate(c)):
                    raise InvalidInputError(f"{name} key {key!r} out of schema range")
                out[c] = float(val)
            return dict(sorted(out.items(), key=lambda kv: _combo_str(kv[0])))

        object.__setattr__(self, "attribute_signal", attr_sig)
        object.__setattr__(self, "label_bias", lbias)
        object.__setattr__(self, "intersection_signal", combos(self.intersection_signal, "intersection_signal"))
        object.__setattr__(
            self, "intersection_label_bias", combos(self.intersection_label_bias, "intersection_label_bias")
        )

    def to_json(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "schema":
                v = v.to_json()
            elif f.name in ("intersection_signal", "intersection_label_bias"):
                v = {_combo_str(c): x for c, x in v.items()}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise InvalidInputError(f"unknown synthetic spec fields: {sorted(extra)}")
        if "schema" not in obj:
            raise InvalidInputError("synthetic spec needs a schema")
        obj["schema"] = AttributeSchema.from_json(obj["schema"])
        return cls(**obj)


def _centered(rng, count, basis):
    # `count` zero-mean unit vectors inside span(basis rows); {+u, -u} for count == 2
    raw = rng.standard_normal((count, basis.shape[0]))
    raw -= raw.mean(axis=0)
    out = raw @ basis
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms == 0, 1.0, norms)


def _direction_frame(rng, d, card, n_combo):
    """Label, per-attribute and intersection directions.

    When they fit (``1 + sum(c - 1) + n_combo <= d``) every group of directions
    lives in its own slice of one random orthonormal frame, so the signals
    are mutually orthogonal; otherwise each is drawn independently.
    """
    need = 1 + sum(c - 1 for c in card) + n_combo
    if need <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, need)))
        frame = q.T
    else:
        frame = rng.standard_normal((need, d))
        frame /= np.linalg.norm(frame, axis=1, keepdims=True)
    mu_y = _centered(rng, 2, frame[:1])
    at = 1
    mu_attr = []
    for c in card:
        mu_attr.append(_centered(rng, c, frame[at : at + c - 1]))
        at += c - 1
    return mu_y, mu_attr, frame[at:]


def _matches(protected, combo):
    m = np.ones(protected.shape[0], dtype=bool)
    for j, v in enumerate(combo):
        if v is not None:
            m &= protected[:, j] == v
    return m


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset whose features mix label, attribute and intersection signal.

    ``x = label_signal * mu_y[y] + sum_j attribute_signal_j * mu_j[z_j]
         + sum_c intersection_signal_c * [row in c] * mu_c + noise``

    All directions are unit vectors fixed by the seed; ``mu_y`` and each
    ``mu_j`` are centred over their values.

    Attributes are uniform and independent. The positive probability is
    ``positive_rate + 0.5 * sum_j label_bias_j * s_j + 0.5 * sum_c
    intersection_label_bias_c * [row in c]``, clipped to ``[0.02, 0.98]``, where
    ``s_j`` maps the attribute value linearly onto ``[-1, 1]``.
    """
    rng = np.random.default_rng(spec.seed)
    n, d, k = spec.n, spec.d, len(spec.schema)
    card = spec.schema.cardinalities

    # directions first so they do not depend on n
    combos = list(spec.intersection_signal)
    n_combo = (1 if combos else 0) if spec.shared_intersection_direction else len(combos)
    mu_y, mu_attr, mu_int = _direction_frame(rng, d, card, n_combo)
    if spec.shared_intersection_direction:
        mu_combo = {c: mu_int[0] for c in combos}
    else:
        mu_combo = dict(zip(combos, mu_int))

    protected = np.column_stack([rng.integers(0, c, size=n) for c in card])

    p = np.full(n, spec.positive_rate)
    for j in range(k):
        s = 2.0 * protected[:, j] / (card[j] - 1) - 1.0
        p += 0.5 * spec.label_bias[j] * s
    for c, b in spec.intersection_label_bias.items():
        p += 0.5 * b * _matches(protected, c)
    p = np.clip(p, 0.02, 0.98)
    labels = (rng.random(n) < p).astype(np.int8)

    x = spec.label_signal * mu_y[labels]
    for j in range(k):
        x += spec.attribute_signal[j] * mu_attr[j][protected[:, j]]
    for c, s in spec.intersection_signal.items():
        x += s * _matches(protected, c)[:, None] * mu_combo[c][None, :]
    x += spec.noise_std * rng.standard_normal((n, d))
    return Dataset(x, labels, protected, spec.schema, "all")
