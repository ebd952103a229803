"""Command-line pipeline.

Each subcommand reads the artifacts of earlier steps from the output
directory and writes its own. Every artifact records the hash of the run
configuration that produced it, and inputs from a different configuration
are refused.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import corpus as cp
from . import experiments as xp
from . import interventions as iv
from .atlas import HeadScoreTable, HeadSet, layerwise_profile, overlap_fraction, select_heads
from .model import ModelConfig, load_weights, save_weights
from .provenance import localize_source, split_samples
from .report import functional_map_svg, localization_html

log = logging.getLogger("headatlas")

CONFIG_VERSION = 1
DEFAULT_OUT = "headatlas-out"
ENV_OUT = "HEADATLAS_OUT"

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "model": {"n_layers": 8, "n_heads": 8, "model_dim": 128, "mlp_dim": 256,
              "max_seq_len": 96, "norm_eps": 1e-5, "use_norm": True, "use_mlp": True},
    "corpus": {"n_entities": 512, "eval_fraction": 0.2},
    "train": {"steps": 6000, "batch_closed": 48, "batch_open": 24, "batch_bio": 8,
              "lr": 1e-3, "warmup": 100, "clip": 1.0, "head_dropout": 0.25,
              "open_mix": [0.25, 0.45, 0.2, 0.1], "bare_distractor": 0.5,
              "recall_threshold": 0.8,
              "probe_size": 200, "log_every": 50},
    "eval": {"n_examples": 200, "max_new_tokens": 20},
    "atlas": {"K_ctx": 16, "K_param": 16, "K_task": 8, "K_ret": 8,
              "n_open": 200, "n_closed": 200},
    # an empty alpha_grid skips the dev sweep and uses alpha as given
    "interventions": {"alpha": 2.0, "alpha_grid": [1.0, 2.0, 3.0], "n_dev": 40,
                      "boost_add": 5.0, "boost_mult": 1000.0,
                      "n_ablate": 200, "n_random": 5, "n_fv": 200, "n_niah": 100},
    "probe": {"n_prompts": 800, "split_seed": 0, "top_k": 10},
    # offsets added to the master seed for each random stream
    "seeds": {"corpus": 0, "split": 1, "init": 2, "train": 3, "eval": 4, "localize": 5,
              "ablate": 6, "fv": 7, "niah": 8, "probe": 9},
    "out": None,
}


class PipelineError(RuntimeError):
    """A subcommand cannot run: bad config, missing input or foreign lineage."""


# ------------------------------------------------------------ configuration

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise PipelineError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise PipelineError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


class RunConfig:
    """Validated run configuration; ``hash`` covers everything except ``out``."""

    def __init__(self, data: dict | None = None):
        data = dict(data or {})
        version = data.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise PipelineError(f"unsupported config version {version!r}")
        self.data = _merge(DEFAULTS, data)
        self.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise PipelineError(f"{path}: invalid JSON ({exc})") from None

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        d = self.data
        m = d["model"]
        if m["model_dim"] % m["n_heads"]:
            raise PipelineError("model_dim must be divisible by n_heads")
        n_total = m["n_layers"] * m["n_heads"]
        for k in ("K_ctx", "K_param", "K_task", "K_ret"):
            if not 0 < d["atlas"][k] <= n_total:
                raise PipelineError(f"atlas.{k} must be in 1..{n_total}")
        if not 0 < d["corpus"]["eval_fraction"] < 1:
            raise PipelineError("corpus.eval_fraction must be in (0, 1)")
        if d["corpus"]["n_entities"] < 4:
            raise PipelineError("corpus.n_entities must be at least 4")
        i = d["interventions"]
        if i["alpha"] <= 0 or any(a <= 0 for a in i["alpha_grid"]):
            raise PipelineError("interventions.alpha and alpha_grid must be > 0")
        if d["train"]["steps"] < 0:
            raise PipelineError("train.steps must be >= 0")
        if abs(sum(d["train"]["open_mix"]) - 1.0) > 1e-9 or len(d["train"]["open_mix"]) != 4:
            raise PipelineError("train.open_mix must be four weights summing to 1")
        for k in ("head_dropout", "bare_distractor"):
            if not 0 <= d["train"][k] < 1:
                raise PipelineError(f"train.{k} must be in [0, 1)")
        if not isinstance(d["seed"], int):
            raise PipelineError("seed must be an integer")

    def seed(self, stream: str) -> int:
        return int(self.data["seed"] + self.data["seeds"][stream])

    def canonical(self) -> dict:
        d = copy.deepcopy(self.data)
        d.pop("out")
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=len(cp.Tokenizer()), seed=self.seed("init"), **self["model"])

    def train_options(self):
        from .training import TrainOptions
        return TrainOptions.from_json({**self["train"], "seed": self.seed("train")})


# ------------------------------------------------------------ artifacts

PRODUCERS = {
    "corpus.jsonl": "gen-data", "split.json": "gen-data", "qa_eval.jsonl": "gen-data",
    "model.hatl": "train", "train_log.csv": "train",
    "qa_metrics.json": "eval-qa",
    "head_scores.csv": "localize-heads", "heads.json": "localize-heads",
    "specialization.json": "specialize-heads",
    "ablation.json": "ablate",
    "fv.json": "fv", "fv_bank.hatl": "fv",
    "niah.json": "niah",
    "probe.json": "probe", "localization.json": "probe",
    "functional_map.svg": "report", "localization.html": "report",
}


class Run:
    """Output directory bound to one configuration."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out
        self.threads = max(1, threads)
        self.written: list[Path] = []

    @property
    def hash(self) -> str:
        return self.cfg.hash

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, *names: str) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            lines = [f"  {n} (produced by `{PRODUCERS[n]}`)" for n in missing]
            raise PipelineError("missing prerequisite artifacts:\n" + "\n".join(lines))

    def _check_hash(self, name: str, found) -> None:
        if found != self.hash:
            raise PipelineError(f"{name} was produced by config {found}, current config is "
                                f"{self.hash}; rerun `{PRODUCERS[name]}` with this config")

    # -- writers: every write is read back and validated
    def write_json(self, name: str, obj: dict) -> None:
        text = json.dumps({"config_hash": self.hash, **obj}, sort_keys=True, indent=1) + "\n"
        self.path(name).write_text(text)
        self.read_json(name)
        self.written.append(self.path(name))

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)
        if self.hash not in self.path(name).read_text():
            raise PipelineError(f"{name} lost its config hash on write")
        self.written.append(self.path(name))

    def read_json(self, name: str) -> dict:
        self.require(name)
        d = json.loads(self.path(name).read_text())
        self._check_hash(name, d.get("config_hash"))
        return d

    def read_csv_table(self, name: str) -> HeadScoreTable:
        self.require(name)
        text = self.path(name).read_text()
        first = text.splitlines()[0] if text else ""
        self._check_hash(name, first.partition("config_hash=")[2].strip() or None)
        return HeadScoreTable.from_csv(text)

    def corpus(self) -> tuple[list[cp.BioRecord], list[int], list[int]]:
        self.require("corpus.jsonl", "split.json")
        header, records = cp.read_corpus(self.path("corpus.jsonl"))
        self._check_hash("corpus.jsonl", header.get("config_hash"))
        split = self.read_json("split.json")
        return records, split["train_ids"], split["eval_ids"]

    def weights(self):
        self.require("model.hatl")
        w = load_weights(self.path("model.hatl"))
        self._check_hash("model.hatl", w.meta.get("config_hash"))
        return w

    def workbench(self) -> xp.Workbench:
        records, tr, ev = self.corpus()
        return xp.Workbench(self.weights(), records, tr, ev,
                            max_new_tokens=self.cfg["eval"]["max_new_tokens"],
                            threads=self.threads)

    def head_sets(self) -> dict[str, HeadSet]:
        sets = {k: HeadSet.from_json(v) for k, v in self.read_json("heads.json")["sets"].items()}
        if self.path("specialization.json").exists():
            spec = self.read_json("specialization.json")
            sets.update({k: HeadSet.from_json(v) for k, v in spec["sets"].items()})
        return sets


# ------------------------------------------------------------ subcommands

def cmd_gen_data(run: Run) -> None:
    c = run.cfg
    records = cp.generate_corpus(c["corpus"]["n_entities"], c.seed("corpus"))
    train_ids, eval_ids = cp.split_entities(records, c["corpus"]["eval_fraction"], c.seed("split"))
    cp.write_corpus(run.path("corpus.jsonl"), records, c.seed("corpus"), config_hash=run.hash)
    run.written.append(run.path("corpus.jsonl"))
    run.write_json("split.json", {"train_ids": list(train_ids), "eval_ids": list(eval_ids),
                                  "seed": c.seed("split")})
    n = c["eval"]["n_examples"]
    exs = xp.counterfactual_examples(records, eval_ids, n, c.seed("eval"))
    by_id = {r.entity_id: r for r in records}
    rng = np.random.default_rng(c.seed("eval"))
    for k in range(n):
        r = by_id[eval_ids[rng.integers(len(eval_ids))]]
        attr = cp.ATTRIBUTES[rng.integers(4)]
        for mode in ("closed", "oracle"):
            ex = cp.build_qa_example(r, mode, attr)
            ex.example_id = f"{mode}{k}:{ex.example_id}"
            exs.append(ex)
    cp.write_examples(run.path("qa_eval.jsonl"), exs, c.seed("eval"), config_hash=run.hash)
    run.written.append(run.path("qa_eval.jsonl"))


def cmd_train(run: Run) -> None:
    from .training import train
    records, tr, _ = run.corpus()
    history: list = []
    weights = train(run.cfg.model_config(), records, tr, run.cfg.train_options(),
                    log_path=run.path("train_log.csv"), history=history)
    text = run.path("train_log.csv").read_text()
    run.write_text("train_log.csv", f"# config_hash={run.hash}\n" + text)
    save_weights(weights, run.path("model.hatl"), {"config_hash": run.hash})
    run.weights()
    run.written.append(run.path("model.hatl"))


def cmd_eval_qa(run: Run) -> None:
    wb = run.workbench()
    header, exs = cp.read_examples(run.path("qa_eval.jsonl"))
    run._check_hash("qa_eval.jsonl", header.get("config_hash"))
    modes = sorted({ex.mode for ex in exs})
    out = {m: xp.qa_metrics(wb, sorted((ex for ex in exs if ex.mode == m),
                                       key=lambda e: e.example_id)) for m in modes}
    run.write_json("qa_metrics.json", {"metrics": out})


def cmd_localize_heads(run: Run) -> None:
    wb = run.workbench()
    a = run.cfg["atlas"]
    res = xp.localize_heads(wb, a["n_open"], a["n_closed"], run.cfg.seed("localize"))
    table = res.table
    run.write_text("head_scores.csv", f"# config_hash={run.hash}\n" + table.to_csv())
    sets = {"ctx": select_heads(table, a["K_ctx"], "desc", "D"),
            "param": select_heads(table, a["K_param"], "asc", "D"),
            "awr": select_heads(table, a["K_ctx"], "desc", "awr")}
    run.write_json("heads.json", {
        "sets": {k: v.to_json() for k, v in sets.items()},
        "n_open": table.n_open, "n_closed": table.n_closed, "n_spec": table.n_spec,
        "awr": [[float(x) for x in row] for row in table.awr],
    })


def cmd_specialize_heads(run: Run) -> None:
    table = run.read_csv_table("head_scores.csv")
    a = run.cfg["atlas"]
    base = {k: HeadSet.from_json(v) for k, v in run.read_json("heads.json")["sets"].items()}
    sets = {"task": select_heads(table, a["K_task"], "desc", "rho_task"),
            "ret": select_heads(table, a["K_ret"], "desc", "rho_ret")}
    prof = layerwise_profile(table, base["ctx"], base["param"])
    run.write_json("specialization.json", {
        "sets": {k: v.to_json() for k, v in sets.items()},
        "profile": prof,
        "overlap": {"task_in_ctx": overlap_fraction(sets["task"], base["ctx"]),
                    "ret_in_ctx": overlap_fraction(sets["ret"], base["ctx"])},
        "task_peaks_before_ret": int(np.argmax(prof["rho_task"])) < int(np.argmax(prof["rho_ret"])),
    })


def cmd_ablate(run: Run) -> None:
    wb = run.workbench()
    table = run.read_csv_table("head_scores.csv")
    awr = np.asarray(run.read_json("heads.json")["awr"])
    table.awr = awr
    i = run.cfg["interventions"]
    res = xp.ablation_study(wb, table, run.cfg["atlas"]["K_ctx"], i["n_ablate"],
                            run.cfg.seed("ablate"), i["n_random"])
    run.write_json("ablation.json", res)


def cmd_fv(run: Run) -> None:
    wb = run.workbench()
    sets = run.head_sets()
    if "task" not in sets:
        run.require("specialization.json")
    i = run.cfg["interventions"]
    seed = run.cfg.seed("fv")
    task_heads, alpha, tuning = sets["task"].heads, i["alpha"], None
    if i["alpha_grid"]:
        tuning = xp.tune_alpha(wb, task_heads, i["alpha_grid"], i["n_dev"], seed + 2)
        alpha = tuning["alpha"]
    task = xp.task_fv_study(wb, task_heads, i["n_fv"], seed, alpha)
    task["dev_sweep"] = tuning
    par = xp.parametric_fv_study(wb, sets["param"].heads, i["n_fv"], seed + 1, i["alpha"])
    fvs = []
    src = wb.by_id[wb.eval_ids[0]]
    for attr in cp.ATTRIBUTES:
        ex = cp.build_qa_example(src, "oracle", attr)
        fvs += iv.extract_fv(wb.weights, wb.encode(ex), task_heads, ex.example_id)
    iv.save_fv_bank(run.path("fv_bank.hatl"), fvs, config_hash=run.hash)
    run.written.append(run.path("fv_bank.hatl"))
    run.write_json("fv.json", {"task": task, "parametric": par})


def cmd_niah(run: Run) -> None:
    wb = run.workbench()
    sets = run.head_sets()
    if "ret" not in sets:
        run.require("specialization.json")
    i = run.cfg["interventions"]
    res = xp.niah_study(wb, sets["ret"].heads, i["n_niah"], run.cfg.seed("niah"),
                        i["boost_add"], i["boost_mult"])
    run.write_json("niah.json", res)


def cmd_probe(run: Run) -> None:
    wb = run.workbench()
    sets = run.head_sets()
    if "ret" not in sets:
        run.require("specialization.json")
    p = run.cfg["probe"]
    probe, res = xp.probe_study(wb, sets["ret"].heads, p["n_prompts"], run.cfg.seed("probe"),
                                p["split_seed"])
    run.write_json("probe.json", {**probe.to_json(), "metrics": res})
    samples, _ = xp.collect_probe_samples(wb, sets["ret"].heads, p["n_prompts"],
                                          run.cfg.seed("probe"))
    test = split_samples(samples, p["split_seed"]).test
    items = []
    for s in sorted((s for s in test if s.label == 1), key=lambda s: s.example_id)[:20]:
        pos, amap = localize_source(probe, s)
        lo, hi = s.context_span
        ex_tokens = _prompt_tokens(wb, s.example_id, run.cfg.seed("probe"), p["n_prompts"])
        items.append({"example_id": s.example_id, "tokens": ex_tokens[lo:hi],
                      "scores": [float(x) for x in amap[lo:hi]],
                      "predicted": pos - lo, "answer": s.answer_span[0] - lo})
    run.write_json("localization.json", {"items": items})


def _prompt_tokens(wb: xp.Workbench, example_id: str, seed: int, n: int) -> list[str]:
    for ex in xp.counterfactual_examples(wb.records, wb.eval_ids, n, seed):
        if ex.example_id == example_id:
            return ex.prompt
    raise PipelineError(f"cannot regenerate prompt {example_id}")


def cmd_report(run: Run) -> None:
    run.require("head_scores.csv", "heads.json", "specialization.json", "localization.json")
    table = run.read_csv_table("head_scores.csv")
    sets = run.head_sets()
    run.write_text("functional_map.svg", functional_map_svg(table, sets, run.hash))
    items = run.read_json("localization.json")["items"]
    run.write_text("localization.html", localization_html(items, run.hash))


COMMANDS: dict[str, Callable[[Run], None]] = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-qa": cmd_eval_qa,
    "localize-heads": cmd_localize_heads, "specialize-heads": cmd_specialize_heads,
    "ablate": cmd_ablate, "fv": cmd_fv, "niah": cmd_niah, "probe": cmd_probe,
    "report": cmd_report,
}
PIPELINE = tuple(COMMANDS)


# ------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="headatlas",
                                 description="Locate and manipulate in-context and parametric "
                                             "attention heads in a small transformer.")
    ap.add_argument("command", choices=list(COMMANDS) + ["all"])
    ap.add_argument("--config", type=Path, help="JSON run configuration")
    ap.add_argument("--out", type=Path, help=f"output directory (default ${ENV_OUT} or {DEFAULT_OUT})")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def make_run(args: argparse.Namespace) -> Run:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = RunConfig({**cfg.data, "seed": args.seed})
    out = args.out or cfg["out"] or os.environ.get(ENV_OUT) or DEFAULT_OUT
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    text = json.dumps({**cfg.canonical(), "config_hash": cfg.hash}, sort_keys=True, indent=1) + "\n"
    cfg_path.write_text(text)
    return Run(cfg, out, args.threads)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = make_run(args)
        import torch
        torch.set_num_threads(run.threads)
        for name in (PIPELINE if args.command == "all" else (args.command,)):
            log.info("running %s", name)
            COMMANDS[name](run)
    except (PipelineError, ValueError, RuntimeError) as exc:
        print(f"headatlas: error: {exc}", file=sys.stderr)
        return 2
    for p in run.written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
