# %% [markdown]
# # Command line workflow
#
# generate -> run (one config per method) -> report / pareto -> evaluate.
# Everything lands in a scratch directory; every artifact is plain JSON or
# CSV.

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp(prefix="gerrydebias_"))


def cli(*args):
    out = subprocess.run([sys.executable, "-m", "gerrydebias", *map(str, args)], capture_output=True, text=True)
    print("$ gerrydebias", *args, f"-> exit {out.returncode}")
    if out.returncode:
        print(out.stderr)
    return out


spec = {
    "n": 3000, "d": 24, "seed": 0, "label_signal": 1.5, "attribute_signal": 1.0, "label_bias": [0.3, 0.1, 0.0],
    "schema": {"attributes": [{"name": n, "cardinality": 2} for n in ("a0", "a1", "a2")]},
    "split": {"fractions": [0.6, 0.2, 0.2]},
}
(work / "spec.json").write_text(json.dumps(spec))
cli("generate", "--config", work / "spec.json", "--out", work / "data")

# %% [markdown]
# List-valued hyperparameters expand into a grid, one cell per
# combination.

# %%
configs = {
    "baseline": {"method": "biased-baseline"},
    "inlp": {"method": "inlp", "inlp": {"variant": ["naive", "principal"], "max_iterations": 10}},
    "con": {"method": "constrained", "constrained": {"T": 20, "nu": [0.01, 0.05]}},
}
for name, extra in configs.items():
    (work / f"{name}.json").write_text(json.dumps({"dataset": {"dir": str(work / "data")}, **extra}))
    cli("run", "--config", work / f"{name}.json", "--out", work / "runs" / name)

# %%
runs = [work / "runs" / n for n in configs]
cli("report", *runs, "--out", work / "report")
print((work / "report" / "table.txt").read_text())

# %%
cli("pareto", *runs, "--out", work / "pareto")
print((work / "pareto" / "frontier.csv").read_text()[:600])

# %% [markdown]
# A stored model can be re-scored on any split of the generated data.

# %%
out = cli("evaluate", work / "runs" / "inlp" / "models" / "cell001", "--data", work / "data", "--split", "test",
          "--iterate", 5)
print(out.stdout)
