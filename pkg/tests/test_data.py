import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gerrydebias.data import (
    AttributeSchema,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    save_dataset,
    split,
    split_indices,
)
from gerrydebias.exceptions import (
    InvalidInputError,
    MalformedRowError,
    NonBinaryLabelError,
    RowCountMismatchError,
    SplitError,
    UnknownAttributeError,
    ValueOutOfRangeError,
)
from gerrydebias.probes import probe_accuracy, train_probe

SCHEMA = AttributeSchema.binary("gender", "race")


def write_files(tmp_path, feature_rows, meta_rows):
    f = tmp_path / "features.csv"
    m = tmp_path / "metadata.jsonl"
    f.write_text("".join(",".join(map(str, r)) + "\n" for r in feature_rows))
    m.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in meta_rows))
    return f, m


def meta(i, label=0, gender=0, race=1):
    return {"id": f"r{i}", "label": label, "attrs": {"gender": gender, "race": race}}


def random_dataset(seed, n=50, d=4):
    g = np.random.default_rng(seed)
    return Dataset(
        g.standard_normal((n, d)),
        g.integers(0, 2, n),
        g.integers(0, 2, (n, 2)),
        SCHEMA,
    )


# ---------------------------------------------------------------- schema


def test_schema_validation():
    with pytest.raises(InvalidInputError):
        AttributeSchema((("a", 2), ("a", 3)))
    with pytest.raises(InvalidInputError):
        AttributeSchema((("a", 1),))
    with pytest.raises(InvalidInputError):
        AttributeSchema(())
    s = AttributeSchema((("a", 2), ("b", 3)))
    assert AttributeSchema.from_json(s.to_json()) == s
    assert s.cardinalities == [2, 3]


def test_dataset_invariants():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 2)), [0, 2], [[0, 0], [0, 0]], SCHEMA)
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 2)), [0, 1], [[0, 2], [0, 0]], SCHEMA)
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 2)), [0, 1], [[0, 1], [0, 0]], SCHEMA, split="validation")
    ds = random_dataset(0)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


# ---------------------------------------------------------------- loading


def test_load_three_rows(tmp_path):
    f, m = write_files(tmp_path, [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [meta(0), meta(1, 1), meta(2, 0, 1, 0)])
    ds = load_dataset(f, m, SCHEMA)
    assert ds.n == 3 and ds.d == 2
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.protected.tolist() == [[0, 1], [0, 1], [1, 0]]
    assert ds.ids == ("r0", "r1", "r2")


def test_load_value_out_of_range(tmp_path):
    f, m = write_files(tmp_path, [[0.0], [1.0]], [meta(0), meta(1, gender=2)])
    with pytest.raises(ValueOutOfRangeError) as e:
        load_dataset(f, m, SCHEMA)
    assert "value out of range" in str(e.value)
    assert "line 2" in str(e.value)
    assert e.value.line == 2


def test_load_row_count_mismatch(tmp_path):
    f, m = write_files(tmp_path, [[0.0]] * 4, [meta(i) for i in range(3)])
    with pytest.raises(RowCountMismatchError):
        load_dataset(f, m, SCHEMA)


@pytest.mark.parametrize(
    "bad, exc",
    [
        ({"id": "x", "label": 2, "attrs": {"gender": 0, "race": 0}}, NonBinaryLabelError),
        ({"id": "x", "label": True, "attrs": {"gender": 0, "race": 0}}, NonBinaryLabelError),
        ({"id": "x", "label": 0, "attrs": {"gender": 0, "race": 0, "age": 1}}, UnknownAttributeError),
        ({"id": "x", "label": 0, "attrs": {"gender": 0}}, MalformedRowError),
        ({"id": "x", "label": 0}, MalformedRowError),
        ("{not json", MalformedRowError),
    ],
)
def test_load_distinct_errors_name_the_line(tmp_path, bad, exc):
    f, m = write_files(tmp_path, [[0.0]] * 3, [meta(0), meta(1), bad])
    with pytest.raises(exc) as e:
        load_dataset(f, m, SCHEMA)
    assert e.value.line == 3


def test_load_malformed_feature_row(tmp_path):
    f, m = write_files(tmp_path, [[0.0, 1.0], [0.0], [1.0, 2.0]], [meta(i) for i in range(3)])
    with pytest.raises(MalformedRowError) as e:
        load_dataset(f, m, SCHEMA)
    assert e.value.line == 2
    f.write_text("0.0,1.0\nabc,2\n1,1\n")
    with pytest.raises(MalformedRowError):
        load_dataset(f, m, SCHEMA)


@given(st.integers(0, 10**6), st.integers(1, 30), st.integers(1, 6))
def test_save_load_round_trip(tmp_path_factory, seed, n, d):
    ds = random_dataset(seed, n, d)
    out = tmp_path_factory.mktemp("rt")
    save_dataset(ds, out)
    back = load_dataset_dir(out)
    assert back == ds
    assert back.features.tobytes() == ds.features.tobytes()


# ---------------------------------------------------------------- splitting


def test_split_sizes_small():
    ds = random_dataset(1, n=10)
    parts = split_indices(ds, (0.8, 0.1, 0.1), seed=0)
    assert tuple(len(p) for p in parts) == (8, 1, 1)


def test_split_fraction_sum_error():
    with pytest.raises(SplitError):
        split(random_dataset(0), (0.5, 0.2, 0.2))


def test_split_empty_split_error():
    with pytest.raises(SplitError):
        split(random_dataset(0, n=3), (0.9, 0.05, 0.05))


def test_split_stratified_positive_rates():
    g = np.random.default_rng(5)
    n = 5000
    ds = Dataset(g.standard_normal((n, 3)), (g.random(n) < 0.3).astype(int), g.integers(0, 2, (n, 2)), SCHEMA)
    parent = ds.labels.mean()
    for part in split(ds, (0.7, 0.15, 0.15), seed=3):
        assert abs(part.labels.mean() - parent) <= 0.02


def test_split_group_stratified_keeps_group_rates():
    ds = random_dataset(9, n=4000)
    parent = np.bincount(ds.protected[:, 0] * 2 + ds.protected[:, 1], minlength=4) / ds.n
    for part in split(ds, (0.6, 0.2, 0.2), seed=1, stratify_groups=True):
        rates = np.bincount(part.protected[:, 0] * 2 + part.protected[:, 1], minlength=4) / part.n
        assert np.max(np.abs(rates - parent)) <= 0.02


@given(st.integers(3, 300), st.integers(0, 10**6))
def test_split_is_a_partition(n, seed):
    ds = random_dataset(seed, n=n, d=2)
    try:
        parts = split_indices(ds, (0.6, 0.2, 0.2), seed=seed)
    except SplitError:
        return
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(n))
    assert sum(len(p) for p in parts) == n
    a, b, c = split(ds, (0.6, 0.2, 0.2), seed=seed)
    assert (a.split, b.split, c.split) == ("train", "dev", "test")
    assert set(a.ids).isdisjoint(b.ids) and set(b.ids).isdisjoint(c.ids)


def test_split_is_seeded():
    ds = random_dataset(0, n=200)
    a = split_indices(ds, seed=4)
    b = split_indices(ds, seed=4)
    c = split_indices(ds, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


# ---------------------------------------------------------------- synthetic generator


def _halves(ds):
    h = ds.n // 2
    return ds.subset(np.arange(h)), ds.subset(np.arange(h, ds.n))


def test_synthetic_no_signal_is_chance():
    spec = SyntheticSpec(n=2000, d=16, schema=SCHEMA, label_signal=0.0, attribute_signal=0.0, seed=1)
    tr, te = _halves(generate_synthetic(spec))
    assert probe_accuracy(train_probe(tr.features, tr.labels), te.features, te.labels) <= 0.55
    for j in range(2):
        p = train_probe(tr.features, tr.protected[:, j])
        assert probe_accuracy(p, te.features, te.protected[:, j]) <= 0.55


def test_synthetic_label_signal_only():
    spec = SyntheticSpec(n=2000, d=16, schema=SCHEMA, label_signal=2.0, attribute_signal=0.0, seed=2)
    tr, te = _halves(generate_synthetic(spec))
    assert probe_accuracy(train_probe(tr.features, tr.labels), te.features, te.labels) >= 0.95
    for j in range(2):
        p = train_probe(tr.features, tr.protected[:, j])
        assert probe_accuracy(p, te.features, te.protected[:, j]) <= 0.55


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(n=300, d=8, schema=SCHEMA, label_signal=1.0, attribute_signal=[0.5, 1.0],
                         intersection_signal={"1,0": 2.0}, label_bias=[0.2, -0.1], seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for name in ("features.csv", "metadata.jsonl", "schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = generate_synthetic(SyntheticSpec.from_json({**spec.to_json(), "seed": 8}))
    assert not np.array_equal(a.features, c.features)


def test_synthetic_spec_json_round_trip():
    spec = SyntheticSpec(n=10, d=3, schema=SCHEMA, intersection_signal={(1, None): 1.5}, label_bias=[0.5, 0.0])
    again = SyntheticSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again == spec
    with pytest.raises(InvalidInputError):
        SyntheticSpec.from_json({**spec.to_json(), "bogus": 1})


def test_synthetic_label_bias_correlates_attribute():
    spec = SyntheticSpec(n=20000, d=4, schema=SCHEMA, label_bias=[0.6, 0.0], seed=3)
    ds = generate_synthetic(spec)
    z = ds.protected[:, 0]
    assert ds.labels[z == 1].mean() - ds.labels[z == 0].mean() > 0.4
    z = ds.protected[:, 1]
    assert abs(ds.labels[z == 1].mean() - ds.labels[z == 0].mean()) < 0.03


def test_synthetic_attribute_signal_is_decodable():
    spec = SyntheticSpec(n=2000, d=16, schema=SCHEMA, label_signal=0.0, attribute_signal=2.0, seed=4)
    tr, te = _halves(generate_synthetic(spec))
    for j in range(2):
        p = train_probe(tr.features, tr.protected[:, j])
        assert probe_accuracy(p, te.features, te.protected[:, j]) >= 0.9


def test_synthetic_rejects_bad_spec():
    with pytest.raises(InvalidInputError):
        SyntheticSpec(n=10, d=3, schema=SCHEMA, label_bias=[2.0, 0.0])
    with pytest.raises(InvalidInputError):
        SyntheticSpec(n=10, d=3, schema=SCHEMA, noise_std=0.0)
    with pytest.raises(InvalidInputError):
        SyntheticSpec(n=10, d=3, schema=SCHEMA, intersection_signal={"2,0": 1.0})
