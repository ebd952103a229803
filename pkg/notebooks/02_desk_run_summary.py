# %% [markdown]
# # Reading a finished desk run
#
# Loads the artifacts written by `headatlas all --out DIR` (the acceptance
# suite caches one under `.cache/desk`) and prints the headline numbers.
# Pass a different directory as the first argument.

# %%
import json
import sys
from pathlib import Path

from headatlas.atlas import HeadScoreTable
from headatlas.report import parse_heatmaps

out = Path(sys.argv[1] if len(sys.argv) > 1 else ".cache/desk")
load = lambda name: json.loads((out / name).read_text())

# %%
qa = load("qa_metrics.json")["metrics"]
for mode, m in qa.items():
    print(f"{mode:15s} recall {m['recall']:.3f}  em {m['em']:.3f}")

# %%
table = HeadScoreTable.from_csv((out / "head_scores.csv").read_text())
sets = load("heads.json")["sets"]
spec = load("specialization.json")
print("in-context heads:", sets["ctx"]["heads"])
print("parametric heads:", sets["param"]["heads"])
print("task heads:", spec["sets"]["task"]["heads"])
print("retrieval heads:", spec["sets"]["ret"]["heads"])
print("rho_task peaks before rho_ret:", spec["task_peaks_before_ret"])

# %%
ab = load("ablation.json")
for setting in ("open", "closed"):
    row = ab[setting]
    print(setting, {k: round(v, 3) for k, v in row.items() if k != "random_runs"})

# %%
fv, niah = load("fv.json"), load("niah.json")
print("task FV:", {k: round(fv["task"][k], 3) for k in ("fv", "random", "none")},
      "alpha", fv["task"]["alpha"])
print("parametric FV:", {k: round(fv["parametric"][k], 3) for k in ("fv", "random", "none")})
print("needle boost:", {k: round(niah[k], 3) for k in ("boost", "random", "none")})

# %%
probe = load("probe.json")
print(json.dumps(probe["metrics"], indent=1))
items = parse_heatmaps((out / "localization.html").read_text())["items"]
hits = sum(it["predicted"] == it["answer"] for it in items)
print(f"rendered heatmaps: {len(items)}, argmax on the answer token: {hits}")
