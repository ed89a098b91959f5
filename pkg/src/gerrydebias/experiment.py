"""Experiment runner: dataset resolution, sweeps, points files and reports.

A run directory holds ``config.json``, ``points.jsonl`` (one record per
model iterate and split) and ``models/<cell>/`` with everything needed to
re-score any recorded iterate.
"""
import copy
import csv
import io
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constrained as con
from . import inlp as inlp_mod
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    save_dataset,
    split as split_dataset,
    split_indices,
)
from .exceptions import InvalidInputError
from .groups import GroupKind, build_group_set, enumerate_groups, gerry_group_set
from .metrics import (
    DEFAULT_MIN_POSITIVES,
    EvalPoint,
    evaluate_predictions,
    format_table,
    pareto_frontier,
    select_under_tradeoff,
)
from .probes import LinearProbe, ProbeConfig, predict, train_probe

log = logging.getLogger(__name__)

METHODS = ("biased-baseline", "inlp", "constrained")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)

INLP_DEFAULTS = {
    "variant": "principal",
    "max_iterations": 10,
    "directions_per_iteration": 1,
    "early_stop": False,
    "leakage_margin": 0.01,
}
PROBE_DEFAULTS = {"learning_rate": 0.1, "epochs": 100, "l2": 1e-4, "batch_size": 64}
CON_DEFAULTS = {
    "T": 50,
    "nu": 0.05,
    "gamma_mode": "uniform",
    "model_kind": "linear",
    "hidden_dim": 300,
    "dual_lr": 0.05,
    "lr": 1e-3,
    "batch_size": 64,
}
BASELINE_DEFAULTS = {"model_kind": "logistic", "T": 50, "hidden_dim": 300, "lr": 1e-3, "batch_size": 64}


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    dataset: dict
    method: str = "inlp"
    grouping: str = "GERRY"
    split: dict = field(default_factory=dict)
    inlp: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    constrained: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    min_positives: int = DEFAULT_MIN_POSITIVES
    seed: int = 0
    out: str = None
    base_dir: str = "."

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}, got {self.method!r}")
        self.grouping = GroupKind.parse(self.grouping).value
        if not isinstance(self.dataset, dict) or not self.dataset:
            raise InvalidInputError("config needs a dataset section")
        for name, known in (("inlp", INLP_DEFAULTS), ("probe", PROBE_DEFAULTS),
                            ("constrained", CON_DEFAULTS), ("baseline", BASELINE_DEFAULTS)):
            extra = set(getattr(self, name)) - set(known)
            if extra:
                raise InvalidInputError(f"unknown keys in {name}: {sorted(extra)}")
        _check_range(self.inlp, "max_iterations", 1, None)
        _check_range(self.constrained, "T", 1, 500)
        _check_range(self.constrained, "nu", 1e-4, 1.0)
        _check_range(self.baseline, "T", 1, 500)

    @classmethod
    def from_json(cls, obj, base_dir="."):
        known = {"dataset", "method", "grouping", "split", "inlp", "probe", "constrained",
                 "baseline", "min_positives", "seed", "out"}
        extra = set(obj) - known
        if extra:
            raise InvalidInputError(f"unknown config keys: {sorted(extra)}")
        return cls(**copy.deepcopy(obj), base_dir=str(base_dir))

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as f:
            return cls.from_json(json.load(f), base_dir=path.parent)

    def to_json(self):
        out = {
            "dataset": self.dataset,
            "method": self.method,
            "grouping": self.grouping,
            "split": self.split,
            "inlp": self.inlp,
            "probe": self.probe,
            "constrained": self.constrained,
            "baseline": self.baseline,
            "min_positives": self.min_positives,
            "seed": self.seed,
        }
        return copy.deepcopy(out)


def _check_range(section, key, lo, hi):
    vals = section.get(key, [])
    for v in vals if isinstance(vals, list) else [vals]:
        if not isinstance(v, (int, float)) or v < lo or (hi is not None and v > hi):
            raise InvalidInputError(f"{key}={v!r} outside the sweep range [{lo}, {hi or 'd'}]")


def _grid(section, defaults):
    """Expand list-valued settings into a lexicographic grid of dicts."""
    merged = {**defaults, **section}
    keys = sorted(merged)
    axes = [merged[k] if isinstance(merged[k], list) else [merged[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


# ---------------------------------------------------------------- datasets


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def synthetic_from_json(obj):
    """Split a synthetic-spec JSON object into ``(SyntheticSpec, split options)``."""
    obj = dict(obj)
    split_opts = obj.pop("split", {}) or {}
    return SyntheticSpec.from_json(obj), split_opts


def resolve_splits(cfg: ExperimentConfig):
    """Return ``(train, dev, test)`` for the configured dataset."""
    ds_cfg = cfg.dataset
    split_opts = dict(cfg.split)
    if "synthetic" in ds_cfg:
        syn = ds_cfg["synthetic"]
        if isinstance(syn, str):
            with open(_resolve(cfg.base_dir, syn)) as f:
                syn = json.load(f)
        spec, spec_split = synthetic_from_json(syn)
        full = generate_synthetic(spec)
        split_opts = {**spec_split, **split_opts}
        split_opts.setdefault("seed", spec.seed)
    elif "dir" in ds_cfg:
        d = _resolve(cfg.base_dir, ds_cfg["dir"])
        full = load_dataset_dir(d)
        manifest = d / "manifest.json"
        if manifest.exists() and not split_opts:
            return _splits_from_manifest(full, json.loads(manifest.read_text()))
    elif {"features", "metadata", "schema"} <= set(ds_cfg):
        full = load_dataset(
            _resolve(cfg.base_dir, ds_cfg["features"]),
            _resolve(cfg.base_dir, ds_cfg["metadata"]),
            _resolve(cfg.base_dir, ds_cfg["schema"]),
        )
    else:
        raise InvalidInputError("dataset needs 'synthetic', 'dir' or features/metadata/schema paths")
    return split_dataset(
        full,
        split_opts.get("fractions", DEFAULT_FRACTIONS),
        split_opts.get("seed", cfg.seed),
        split_opts.get("stratify_groups", False),
    )


def _splits_from_manifest(full, manifest):
    pos = {i: k for k, i in enumerate(full.ids)}
    out = []
    for name in ("train", "dev", "test"):
        try:
            idx = np.array([pos[i] for i in manifest["splits"][name]], dtype=int)
        except KeyError as e:
            raise InvalidInputError(f"manifest references unknown id or split: {e}") from e
        out.append(full.subset(idx, name))
    return tuple(out)


def cmd_generate(spec_path, out_dir):
    """Write a synthetic dataset plus a split manifest; returns the paths."""
    with open(spec_path) as f:
        obj = json.load(f)
    spec, split_opts = synthetic_from_json(obj)
    full = generate_synthetic(spec)
    out = Path(out_dir)
    paths = save_dataset(full, out)
    fractions = split_opts.get("fractions", DEFAULT_FRACTIONS)
    seed = split_opts.get("seed", spec.seed)
    parts = split_indices(full, fractions, seed, split_opts.get("stratify_groups", False))
    manifest = {
        "n": full.n,
        "d": full.d,
        "fractions": list(fractions),
        "seed": seed,
        "splits": {name: [full.ids[i] for i in idx] for name, idx in zip(("train", "dev", "test"), parts)},
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f)
        f.write("\n")
    with open(out / "spec.json", "w") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    paths["manifest"] = out / "manifest.json"
    return paths


# ---------------------------------------------------------------- cells


@dataclass
class Cell:
    index: int
    method: str
    grouping: str
    hparams: dict

    @property
    def cell_id(self):
        return f"cell{self.index:03d}"

    @property
    def hkey(self):
        return json.dumps(self.hparams, sort_keys=True)


def build_cells(cfg: ExperimentConfig):
    if cfg.method == "biased-baseline":
        grid = _grid(cfg.baseline, BASELINE_DEFAULTS)
        grid = [{k: v for k, v in g.items() if g["model_kind"] != "logistic" or k == "model_kind"} for g in grid]
    elif cfg.method == "inlp":
        grid = _grid(cfg.inlp, INLP_DEFAULTS)
    else:
        grid = _grid(cfg.constrained, CON_DEFAULTS)
    return [Cell(i, cfg.method, cfg.grouping, h) for i, h in enumerate(grid)]


class _Context:
    def __init__(self, cfg, splits):
        self.cfg = cfg
        self.train, self.dev, self.test = splits
        self.gerry = {s.split: gerry_group_set(s) for s in (self.dev, self.test)}

    def point(self, preds, ds, cell, iterate=None, rank=None):
        return evaluate_predictions(
            preds, ds.labels, self.gerry[ds.split], self.cfg.min_positives,
            method=cell.method, grouping=cell.grouping, hparams=cell.hparams,
            iterate=iterate, split=ds.split, rank=rank,
        )


def _probe_config(cfg):
    return ProbeConfig(**{**PROBE_DEFAULTS, **cfg.probe, "seed": cfg.seed})


def _run_baseline(ctx, cell, model_dir):
    h = cell.hparams
    if h["model_kind"] == "logistic":
        probe = train_probe(ctx.train.features, ctx.train.labels, _probe_config(ctx.cfg), target="label")
        model_dir.mkdir(parents=True, exist_ok=True)
        probe.save(model_dir / "main_probe.json")
        _write_kind(model_dir, "baseline-logistic")
        pred = lambda x: predict(probe, x)
    else:
        st = con.train_unconstrained(
            ctx.train, ctx.dev, h["model_kind"], h["T"], ctx.cfg.seed,
            hidden_dim=h["hidden_dim"], lr=h["lr"], batch_size=h["batch_size"],
            min_positives=ctx.cfg.min_positives,
        )
        con.save_train_state(st, model_dir)
        _write_kind(model_dir, "baseline-task-model")
        pred = lambda x: con.model_predict(st.theta, x)
    return [ctx.point(pred(ds.features), ds, cell) for ds in (ctx.dev, ctx.test)]


def _run_inlp(ctx, cell, model_dir):
    h = cell.hparams
    config = inlp_mod.InlpConfig(
        cell.grouping, h["variant"], h["max_iterations"], _probe_config(ctx.cfg),
        1, h["directions_per_iteration"], h["early_stop"], h["leakage_margin"],
    )
    groups = build_group_set(enumerate_groups(ctx.train.schema, cell.grouping), ctx.train)
    points = []
    model_dir.mkdir(parents=True, exist_ok=True)
    probes_file = open(model_dir / "main_probes.jsonl", "w")

    def record(state, main):
        it = state.iteration
        for ds in (ctx.dev, ctx.test):
            x = inlp_mod.apply_projection(state, ds.features)
            points.append(ctx.point(predict(main, x), ds, cell, iterate=it, rank=state.rank))
        probes_file.write(json.dumps({"iter": it, "probe": main.to_json()}) + "\n")
        if state.variant == "naive":
            d = model_dir / "iterates" / f"iter{it:04d}"
            d.mkdir(parents=True, exist_ok=True)
            inlp_mod.write_matrix(d / "projector.csv", state.projector.matrix)

    try:
        state = inlp_mod.inlp_run(ctx.train, ctx.dev, groups, config, on_iteration=record)
        if state.iteration == 0:
            # converged before any projection: the unprojected model is the result
            main = train_probe(ctx.train.features, ctx.train.labels, config.probe_config, target="label")
            record(state, main)
    finally:
        probes_file.close()
    inlp_mod.save_state(state, model_dir)
    _write_kind(model_dir, "inlp")
    return points


def _run_constrained(ctx, cell, model_dir):
    h = cell.hparams
    groups = build_group_set(enumerate_groups(ctx.train.schema, cell.grouping), ctx.train)
    spec = con.ConstraintSpec(groups, h["nu"], h["gamma_mode"])
    points = []

    def record(t, model, lam):
        for ds in (ctx.dev, ctx.test):
            points.append(ctx.point(con.model_predict(model, ds.features), ds, cell, iterate=t))

    st = con.constrained_train(
        ctx.train, ctx.dev, spec, h["model_kind"], h["T"], ctx.cfg.seed,
        hidden_dim=h["hidden_dim"], lr=h["lr"], dual_lr=h["dual_lr"], batch_size=h["batch_size"],
        min_positives=ctx.cfg.min_positives, retain_every=1, on_iteration=record,
    )
    con.save_train_state(st, model_dir)
    _write_kind(model_dir, "constrained")
    return points


def _write_kind(model_dir, kind):
    with open(Path(model_dir) / "kind.json", "w") as f:
        json.dump({"kind": kind}, f)


_RUNNERS = {"biased-baseline": _run_baseline, "inlp": _run_inlp, "constrained": _run_constrained}


def cmd_run(config, out_dir=None, seed=None, jobs=1):
    """Execute every sweep cell and append its points to ``points.jsonl``.

    Cells already present in an existing ``points.jsonl`` are skipped, so an
    interrupted run can be resumed. Returns the run directory.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    if seed is not None:
        cfg.seed = int(seed)
    out = Path(out_dir or (cfg.out and _resolve(cfg.base_dir, cfg.out)) or "run")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(cfg.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")

    cells = build_cells(cfg)
    points_path = out / "points.jsonl"
    done = set()
    if points_path.exists():
        done = {json.dumps(r["hparams"], sort_keys=True) for r in read_points_records(points_path)}
    todo = [c for c in cells if c.hkey not in done]
    with open(out / "cells.json", "w") as f:
        json.dump([{"cell": c.cell_id, "hparams": c.hparams} for c in cells], f, indent=2, sort_keys=True)
        f.write("\n")
    if not todo:
        return out

    ctx = _Context(cfg, resolve_splits(cfg))
    runner = _RUNNERS[cfg.method]

    def work(cell):
        return runner(ctx, cell, out / "models" / cell.cell_id)

    with open(points_path, "a") as f:
        if jobs and jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = pool.map(work, todo)
                for pts in results:
                    _append(f, pts)
        else:
            for cell in todo:
                _append(f, work(cell))
    return out


def _append(f, points):
    for p in points:
        f.write(json.dumps(p.to_record(), sort_keys=True) + "\n")
    f.flush()


# ---------------------------------------------------------------- reading back


def read_points_records(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_points(run_dirs):
    points = []
    for d in run_dirs:
        p = Path(d) / "points.jsonl" if Path(d).is_dir() else Path(d)
        if not p.exists():
            raise InvalidInputError(f"no points file at {p}")
        recs = read_points_records(p)
        if not recs:
            raise InvalidInputError(f"points file {p} is empty")
        points.extend(EvalPoint.from_record(r) for r in recs)
    return points


def approach_name(point):
    if point.method == "biased-baseline":
        return "Biased model"
    base = {"inlp": "INLP", "constrained": "CON"}.get(point.method, point.method)
    variant = (point.hparams or {}).get("variant")
    if variant and variant != "principal":
        base = f"{base}({variant})"
    return f"{base}-{point.grouping}"


def _families(points, split):
    fam = {}
    for p in points:
        if p.split == split:
            fam.setdefault(approach_name(p), []).append(p)
    return fam


def frontier_rows(points, split="test"):
    rows = []
    for name, pts in _families(points, split).items():
        for p in pareto_frontier(pts):
            rows.append({
                "approach": name,
                "f1": p.f1,
                "avg_violation": p.avg_violation,
                "fairness": p.fairness,
                "max_violation": p.max_violation,
                "iterate": p.iterate,
                "hparams": json.dumps(p.hparams, sort_keys=True),
            })
    return rows


def _frontier_csv(rows):
    buf = io.StringIO()
    cols = ["approach", "f1", "avg_violation", "fairness", "max_violation", "iterate", "hparams"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def cmd_pareto(run_dirs, out_dir=None, split="test"):
    rows = frontier_rows(load_points(run_dirs), split)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "frontier.csv").write_text(_frontier_csv(rows))
        (out / "frontier.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows


def selection_table(points, tradeoffs):
    """``(rows, biased)`` where rows maps approach -> {tradeoff: test EvalPoint}."""
    dev = _families(points, "dev")
    test_by_key = {p.key(): p for p in points if p.split == "test"}
    rows, biased = {}, None
    for name, pts in dev.items():
        if name == "Biased model":
            continue
        rows[name] = {t: select_under_tradeoff(pts, test_by_key, t) for t in tradeoffs}
    base = [p for p in points if p.method == "biased-baseline" and p.split == "test"]
    if base:
        biased = base[0]
    return rows, biased


def cmd_report(run_dirs, tradeoffs=(0.05, 0.10), out_dir=None):
    """Pareto frontier per approach plus the tradeoff selection table."""
    points = load_points(run_dirs)
    rows, biased = selection_table(points, tradeoffs)
    table = format_table(rows, tradeoffs, biased)
    frontier = frontier_rows(points, "test")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table)
        (out / "frontier.csv").write_text(_frontier_csv(frontier))
        sel = {
            "tradeoffs": list(tradeoffs),
            "rows": [
                {"approach": name, "tradeoff": t, **by_t[t].to_record()}
                for name, by_t in rows.items() for t in tradeoffs
            ],
            "biased": biased.to_record() if biased else None,
            "denominator": "groups with >= min_positives positives",
        }
        (out / "selection.json").write_text(json.dumps(sel, indent=2) + "\n")
    return table, rows, biased, frontier


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(model_dir, dataset, iterate=None, min_positives=DEFAULT_MIN_POSITIVES):
    """Re-score a stored model (optionally a specific iterate) on ``dataset``."""
    model_dir = Path(model_dir)
    kind = json.loads((model_dir / "kind.json").read_text())["kind"]
    x = dataset.features
    rank = None
    if kind == "baseline-logistic":
        preds = predict(LinearProbe.load(model_dir / "main_probe.json"), x)
    elif kind == "baseline-task-model":
        preds = con.model_predict(con.load_model(model_dir / "model"), x)
    elif kind == "constrained":
        if iterate is None:
            preds = con.model_predict(con.load_model(model_dir / "model"), x)
        else:
            path = model_dir / "iterates" / f"t{int(iterate):04d}"
            if not path.exists():
                raise InvalidInputError(f"iterate {iterate} was not retained")
            preds = con.model_predict(con.load_model(path), x)
    elif kind == "inlp":
        state = inlp_mod.load_state(model_dir)
        probes = {r["iter"]: r["probe"] for r in read_points_records(model_dir / "main_probes.jsonl")}
        it = state.iteration if iterate is None else int(iterate)
        if it not in probes:
            raise InvalidInputError(f"no main-task probe stored for iterate {it}")
        if it == 0:
            p = np.eye(dataset.d)
        elif state.variant == "principal":
            p = inlp_mod.projector_from_directions(state.directions[:it], dataset.d).matrix
        else:
            p = inlp_mod.read_matrix(model_dir / "iterates" / f"iter{it:04d}" / "projector.csv", dataset.d)
        rank = int(round(np.trace(p)))
        preds = predict(LinearProbe.from_json(probes[it]), inlp_mod.apply_projection(p, x))
        iterate = it
    else:
        raise InvalidInputError(f"unknown model kind {kind!r}")
    return evaluate_predictions(
        preds, dataset.labels, gerry_group_set(dataset), min_positives,
        **_provenance(model_dir, kind), iterate=iterate, split=dataset.split, rank=rank,
    )


def _provenance(model_dir, kind):
    # recover method/grouping/hparams from the enclosing run directory when present
    run_dir = model_dir.parent.parent
    try:
        cfg = json.loads((run_dir / "config.json").read_text())
        cells = json.loads((run_dir / "cells.json").read_text())
        hparams = next(c["hparams"] for c in cells if c["cell"] == model_dir.name)
        return {"method": cfg["method"], "grouping": cfg["grouping"], "hparams": hparams}
    except (OSError, ValueError, KeyError, StopIteration):
        return {"method": kind}
