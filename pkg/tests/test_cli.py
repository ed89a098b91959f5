import json
import subprocess
import sys

import numpy as np
import pytest

from gerrydebias import cli
from gerrydebias import experiment as ex
from gerrydebias.data import load_dataset_dir, load_schema
from gerrydebias.groups import enumerate_groups
from gerrydebias.metrics import EvalPoint, select_under_tradeoff


def synth(n=1200, d=24, k=2, seed=0, **kw):
    obj = {
        "n": n, "d": d,
        "schema": {"attributes": [{"name": f"a{i}", "cardinality": 2} for i in range(k)]},
        "label_signal": 1.5, "attribute_signal": 1.0, "label_bias": [0.3] + [0.0] * (k - 1), "seed": seed,
        "split": {"fractions": [0.6, 0.2, 0.2]},
    }
    obj.update(kw)
    return obj


def config(method, **sections):
    base = {"dataset": {"synthetic": synth()}, "method": method, "grouping": "GERRY",
            "probe": {"epochs": 20}, "seed": 0}
    base.update(sections)
    return base


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def records(run_dir):
    return [json.loads(l) for l in (run_dir / "points.jsonl").read_text().splitlines()]


# ---------------------------------------------------------------- generate


def test_generate_writes_files_and_manifest(tmp_path):
    spec = write(tmp_path, "spec.json", synth(n=100, d=8))
    assert cli.main(["generate", "--config", str(spec), "--out", str(tmp_path / "data")]) == 0
    names = sorted(p.name for p in (tmp_path / "data").iterdir())
    assert {"features.csv", "metadata.jsonl", "schema.json", "manifest.json"} <= set(names)
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    sizes = [len(manifest["splits"][s]) for s in ("train", "dev", "test")]
    assert sizes == [60, 20, 20]
    ds = load_dataset_dir(tmp_path / "data")
    assert (ds.n, ds.d) == (100, 8)
    ids = sum((manifest["splits"][s] for s in ("train", "dev", "test")), [])
    assert sorted(ids) == sorted(ds.ids)


def test_generate_is_byte_identical(tmp_path):
    spec = write(tmp_path, "spec.json", synth(n=100, d=8))
    for out in ("a", "b"):
        ex.cmd_generate(spec, tmp_path / out)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_four_attributes(tmp_path):
    spec = write(tmp_path, "spec.json", synth(n=100, d=8, k=4))
    ex.cmd_generate(spec, tmp_path / "d")
    schema = load_schema(tmp_path / "d" / "schema.json")
    assert schema.cardinalities == [2, 2, 2, 2]
    assert len(enumerate_groups(schema, "GERRY")) == 80


def test_generate_invalid_spec(tmp_path, capsys):
    bad = write(tmp_path, "bad.json", {"n": 10})
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InvalidInputError"
    assert json.loads((tmp_path / "o" / "error.json").read_text())["command"] == "generate"


# ---------------------------------------------------------------- run


def test_biased_baseline_single_point(tmp_path):
    out = ex.cmd_run(ex.ExperimentConfig.from_json(config("biased-baseline")), tmp_path / "run")
    recs = records(out)
    assert [r["split"] for r in recs] == ["dev", "test"]
    assert all(r["method"] == "biased-baseline" for r in recs)


def test_inlp_twenty_iterations(tmp_path):
    cfg = config("inlp", inlp={"max_iterations": 20})
    out = ex.cmd_run(ex.ExperimentConfig.from_json(cfg), tmp_path / "run")
    for split in ("dev", "test"):
        ranks = [r["rank"] for r in records(out) if r["split"] == split]
        assert len(ranks) == 20
        assert all(b < a for a, b in zip(ranks, ranks[1:]))
    audit = (out / "models" / "cell000" / "audit.jsonl").read_text().splitlines()
    assert len(audit) == 20


def test_constrained_fifty_iterates(tmp_path):
    cfg = config("constrained", constrained={"T": 50, "nu": 0.05})
    out = ex.cmd_run(ex.ExperimentConfig.from_json(cfg), tmp_path / "run")
    dev = [r for r in records(out) if r["split"] == "dev"]
    assert [r["iterate"] for r in dev] == list(range(1, 51))
    log = [json.loads(l) for l in (out / "models" / "cell000" / "iterate_log.jsonl").read_text().splitlines()]
    assert len(log) == 50
    assert all(r["lambda_l1"] >= 0 and r["lambda_max"] >= 0 for r in log)
    lam = np.loadtxt(out / "models" / "cell000" / "lambda.csv", delimiter=",")
    assert np.all(lam >= 0)


def test_grid_expansion_order(tmp_path):
    cfg = ex.ExperimentConfig.from_json(config("constrained", constrained={"T": 2, "nu": [0.1, 0.01],
                                                                           "gamma_mode": ["uniform", "inverse_positive_rate"]}))
    cells = ex.build_cells(cfg)
    # keys sorted by name, values taken in the order listed, last key varying fastest
    assert [(c.hparams["gamma_mode"], c.hparams["nu"]) for c in cells] == [
        ("uniform", 0.1), ("uniform", 0.01), ("inverse_positive_rate", 0.1), ("inverse_positive_rate", 0.01),
    ]
    assert [c.cell_id for c in cells] == ["cell000", "cell001", "cell002", "cell003"]


def test_run_is_deterministic_and_parallel_safe(tmp_path):
    cfg = write(tmp_path, "c.json", config("constrained", constrained={"T": 3, "nu": [0.01, 0.1]}))
    a = ex.cmd_run(cfg, tmp_path / "a")
    b = ex.cmd_run(cfg, tmp_path / "b")
    c = ex.cmd_run(cfg, tmp_path / "c", jobs=2)
    assert (a / "points.jsonl").read_bytes() == (b / "points.jsonl").read_bytes() == (c / "points.jsonl").read_bytes()


def test_run_resumes_by_skipping_completed_cells(tmp_path):
    cfg_obj = config("constrained", constrained={"T": 2, "nu": [0.01, 0.1]})
    cfg = write(tmp_path, "c.json", cfg_obj)
    full = ex.cmd_run(cfg, tmp_path / "full")
    part = tmp_path / "part"
    # simulate an interruption after the first cell
    first = ex.ExperimentConfig.from_json({**cfg_obj, "constrained": {"T": 2, "nu": 0.01}})
    ex.cmd_run(first, part)
    ex.cmd_run(cfg, part)
    assert (part / "points.jsonl").read_bytes() == (full / "points.jsonl").read_bytes()
    before = (part / "points.jsonl").read_bytes()
    ex.cmd_run(cfg, part)
    assert (part / "points.jsonl").read_bytes() == before


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, "c.json", config("constrained", constrained={"T": 2}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "s0"), "--seed", "0"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "s1"), "--seed", "1"]) == 0
    assert (tmp_path / "s0" / "points.jsonl").read_bytes() != (tmp_path / "s1" / "points.jsonl").read_bytes()


def test_run_error_record(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", config("inlp", inlp={"max_iterations": 99}))
    code = cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code != 0
    rec = json.loads((tmp_path / "run" / "error.json").read_text())
    assert rec["error"] == "InvalidInputError" and "max_iterations" in rec["message"]
    assert json.loads(capsys.readouterr().err)["command"] == "run"


def test_config_validation():
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json(config("svm"))
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json({**config("inlp"), "inlp": {"iterations": 3}})
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json({**config("inlp"), "extra": 1})
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json(config("constrained", constrained={"nu": [0.05, 2.0]}))
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json(config("constrained", constrained={"T": 501}))
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_json(config("inlp", inlp={"max_iterations": 0}))


def test_run_from_generated_directory(tmp_path):
    spec = write(tmp_path, "spec.json", synth(n=300, d=8))
    ex.cmd_generate(spec, tmp_path / "data")
    cfg = write(tmp_path, "c.json", {"dataset": {"dir": "data"}, "method": "biased-baseline"})
    out = ex.cmd_run(cfg, tmp_path / "run")
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    train, dev, test = ex.resolve_splits(ex.ExperimentConfig.load(cfg))
    assert list(test.ids) == manifest["splits"]["test"]
    assert len(records(out)) == 2


# ---------------------------------------------------------------- report / pareto / evaluate


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    runs = {}
    for name, cfg in (
        ("base", config("biased-baseline")),
        ("inlp", config("inlp", inlp={"max_iterations": 6, "variant": ["naive", "principal"]})),
        ("con", config("constrained", constrained={"T": 6, "nu": [0.01, 0.05]})),
    ):
        runs[name] = ex.cmd_run(ex.ExperimentConfig.from_json(cfg), root / name)
    return root, runs


def test_report_single_point(tmp_path):
    rec = {"method": "inlp", "grouping": "GERRY", "hparams": {}, "iterate": 1, "f1": 0.8,
           "avg_violation": 0.1, "max_violation": 0.2}
    (tmp_path / "points.jsonl").write_text(
        json.dumps({**rec, "split": "dev"}) + "\n" + json.dumps({**rec, "split": "test"}) + "\n")
    table, rows, biased, frontier = ex.cmd_report([tmp_path], (0.05, 0.10))
    assert len(frontier) == 1 and frontier[0]["f1"] == 0.8
    assert rows["INLP-GERRY"][0.05] == rows["INLP-GERRY"][0.10]
    assert rows["INLP-GERRY"][0.05].split == "test"
    assert biased is None


def test_report_empty_points(tmp_path):
    (tmp_path / "points.jsonl").write_text("")
    with pytest.raises(ValueError):
        ex.cmd_report([tmp_path])


def test_report_rows_and_files(sweep, tmp_path):
    root, runs = sweep
    code = cli.main(["report", *map(str, runs.values()), "--out", str(tmp_path / "rep"), "--tradeoff", "0.05,0.10"])
    assert code == 0
    table = (tmp_path / "rep" / "table.txt").read_text()
    body = [l.split()[0] for l in table.splitlines() if l and not l.startswith("-")][2:]
    assert body == ["INLP(naive)-GERRY", "INLP-GERRY", "CON-GERRY", "Biased"]
    sel = json.loads((tmp_path / "rep" / "selection.json").read_text())
    assert len(sel["rows"]) == 3 * 2
    assert (tmp_path / "rep" / "frontier.csv").read_text().startswith("approach,f1,avg_violation")


def test_report_selection_matches_manual_replay(sweep):
    root, runs = sweep
    points = ex.load_points(runs.values())
    _, rows, biased, _ = ex.cmd_report(list(runs.values()), (0.05, 0.10))
    assert biased.method == "biased-baseline" and biased.split == "test"
    for name in rows:
        dev = [p for p in points if p.split == "dev" and ex.approach_name(p) == name]
        test = {p.key(): p for p in points if p.split == "test"}
        for t in (0.05, 0.10):
            assert rows[name][t] == select_under_tradeoff(dev, test, t)


def test_pareto_subcommand(sweep, tmp_path, capsys):
    root, runs = sweep
    assert cli.main(["pareto", str(runs["con"]), "--out", str(tmp_path / "p"), "--split", "dev"]) == 0
    rows = json.loads(capsys.readouterr().out)
    f1s = [r["f1"] for r in rows]
    assert f1s == sorted(f1s, reverse=True)
    assert (tmp_path / "p" / "frontier.csv").exists()


@pytest.mark.parametrize("run, cell, iterate", [("inlp", "cell000", 2), ("inlp", "cell001", 4),
                                                 ("con", "cell001", 3), ("base", "cell000", None)])
def test_evaluate_reproduces_recorded_points(sweep, run, cell, iterate):
    root, runs = sweep
    cfg = ex.ExperimentConfig.load(runs[run] / "config.json")
    cfg.base_dir = "."
    _, _, test = ex.resolve_splits(cfg)
    got = ex.cmd_evaluate(runs[run] / "models" / cell, test, iterate)
    cells = json.loads((runs[run] / "cells.json").read_text())
    hp = next(c["hparams"] for c in cells if c["cell"] == cell)
    want = next(r for r in records(runs[run])
                if r["split"] == "test" and r["hparams"] == hp and r.get("iterate") == iterate)
    assert got.to_record() == want


def test_module_entry_point(tmp_path):
    spec = write(tmp_path, "spec.json", synth(n=50, d=4))
    res = subprocess.run([sys.executable, "-m", "gerrydebias", "generate", "--config", str(spec),
                          "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "manifest" in json.loads(res.stdout)
