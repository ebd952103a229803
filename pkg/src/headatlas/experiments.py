"""End-to-end protocols on a trained model: head localisation, ablations,
function-vector patching, needle boosting and the source-tracking probe.

Every routine is deterministic given its seed. Results come back as plain
dicts of floats/lists so callers can serialise them directly.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import corpus as cp
from . import interventions as iv
from . import provenance as pv
from .atlas import (HeadScoreTable, HeadSet, attention_mass_scores, difference_scores,
                    random_heads, select_heads, specialization_scores)
from .attribution import attribute, head_relevance, input_heatmap
from .model import InterventionSpec, Weights, forward, generate

Head = tuple[int, int]
CORRECT_RECALL = 0.7


@dataclass
class Workbench:
    """A trained model plus the corpus and tokenizer it was trained on."""

    weights: Weights
    records: list[cp.BioRecord]
    train_ids: list[int]
    eval_ids: list[int]
    tok: cp.Tokenizer = field(default_factory=cp.Tokenizer)
    max_new_tokens: int = iv.MAX_NEW_TOKENS
    threads: int = 1

    def __post_init__(self):
        self.by_id = {r.entity_id: r for r in self.records}

    def encode(self, ex: cp.QAExample) -> list[int]:
        return self.tok.encode(ex.prompt)

    def generate(self, ids: Sequence[int], spec: InterventionSpec | None = None) -> list[str]:
        out = generate(self.weights, ids, self.max_new_tokens, spec, self.tok.eos)
        return self.tok.decode(out)

    def answer(self, ex: cp.QAExample, spec: InterventionSpec | None = None) -> list[str]:
        return self.generate(self.encode(ex), spec)

    def first_token(self, text: str) -> int:
        return self.tok.id(cp.words(text)[0])


def _shape(wb: Workbench) -> tuple[int, int]:
    return (wb.weights.config.n_layers, wb.weights.config.n_heads)


# ------------------------------------------------------------ example sets

def counterfactual_examples(records: Sequence[cp.BioRecord], ids: Sequence[int], n: int,
                            seed: int) -> list[cp.QAExample]:
    by_id = {r.entity_id: r for r in records}
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        r = by_id[ids[rng.integers(len(ids))]]
        attr = cp.ATTRIBUTES[rng.integers(4)]
        while True:
            other = records[rng.integers(len(records))]
            if other.value(attr) != r.value(attr) and \
                    cp.words(other.value(attr))[0] != cp.words(r.value(attr))[0]:
                break
        ex = cp.build_qa_example(r, "counterfactual", attr, other, int(rng.integers(2)))
        ex.example_id = f"cf{seed}:{k}:{ex.example_id}"
        out.append(ex)
    return out


def closed_examples(records: Sequence[cp.BioRecord], ids: Sequence[int], n: int,
                    seed: int) -> list[cp.QAExample]:
    by_id = {r.entity_id: r for r in records}
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        r = by_id[ids[rng.integers(len(ids))]]
        ex = cp.build_qa_example(r, "closed", cp.ATTRIBUTES[rng.integers(4)], None,
                                 int(rng.integers(2)))
        ex.example_id = f"cb{seed}:{k}:{ex.example_id}"
        out.append(ex)
    return out


def pmap(fn, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map, fanned out to a thread pool when ``threads > 1``."""
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def recall_of(wb: Workbench, examples: Sequence[cp.QAExample],
              spec: InterventionSpec | None = None) -> float:
    if not examples:
        return float("nan")
    rec = pmap(lambda ex: cp.score_answer(wb.answer(ex, spec), ex)["recall"], examples, wb.threads)
    return float(np.mean(rec))


def qa_metrics(wb: Workbench, examples: Sequence[cp.QAExample]) -> dict:
    rows = pmap(lambda ex: cp.score_answer(wb.answer(ex), ex), examples, wb.threads)
    kp = [r["k_precision"] for r in rows if r["k_precision"] is not None]
    return {"n": len(rows), "recall": float(np.mean([r["recall"] for r in rows])),
            "em": float(np.mean([r["em"] for r in rows])),
            "k_precision": float(np.mean(kp)) if kp else None}


# ------------------------------------------------------------ localisation

@dataclass
class LocalizationResult:
    table: HeadScoreTable
    open_examples: list[cp.QAExample]
    closed_examples: list[cp.QAExample]
    open_head_rel: list[np.ndarray]
    closed_head_rel: list[np.ndarray]


def _predicts_first(wb: Workbench, ids: Sequence[int], answer: str):
    trace = forward(wb.weights, ids)
    tgt = wb.first_token(answer)
    return trace, int(np.argmax(trace.logits[-1])) == tgt, tgt


def localize_heads(wb: Workbench, n_open: int, n_closed: int, seed: int,
                   ids: Sequence[int] | None = None) -> LocalizationResult:
    """Difference scores plus specialisation scores from one pass over both sets.

    Open-book traces explain the counterfactual first answer token on prompts
    where the model predicts it; closed-book traces explain the gold first
    token on prompts the model answers correctly.
    """
    ids = list(ids if ids is not None else wb.train_ids)
    open_rel, closed_rel, spec_items, opens, closeds = [], [], [], [], []
    awr_traces = []
    for ex in counterfactual_examples(wb.records, ids, n_open, seed):
        trace, ok, tgt = _predicts_first(wb, wb.encode(ex), ex.counterfactual)
        if not ok:
            continue
        rt = attribute(wb.weights, trace, tgt, len(ex.prompt) - 1)
        open_rel.append(head_relevance(rt))
        spec_items.append((rt, ex))
        awr_traces.append(trace)
        opens.append(ex)
    for ex in closed_examples(wb.records, ids, n_closed, seed + 1):
        ids_ = wb.encode(ex)
        trace, ok, tgt = _predicts_first(wb, ids_, ex.gold)
        if not ok:
            continue
        pred = wb.generate(ids_)
        if cp.score_answer(pred, ex)["recall"] < CORRECT_RECALL:
            continue
        rt = attribute(wb.weights, trace, tgt, len(ex.prompt) - 1)
        closed_rel.append(head_relevance(rt))
        closeds.append(ex)
    table = difference_scores(open_rel, closed_rel)
    spec = specialization_scores(spec_items)
    table = table.with_spec(spec)
    table.awr = attention_mass_scores(awr_traces, opens)
    return LocalizationResult(table, opens, closeds, open_rel, closed_rel)


# ------------------------------------------------------------ ablations

def ablation_study(wb: Workbench, table: HeadScoreTable, K: int, n: int, seed: int,
                   n_random: int = 5) -> dict:
    """Recall on counterfactual open-book and closed-book prompts under ablation."""
    cf = counterfactual_examples(wb.records, wb.eval_ids, n, seed)
    cb = [ex for ex in closed_examples(wb.records, wb.eval_ids, n, seed + 1)]
    ctx = select_heads(table, K, "desc", "D")
    par = select_heads(table, K, "asc", "D")
    awr = select_heads(table, K, "desc", "awr")
    spec = lambda hs: InterventionSpec(ablate_heads=frozenset(hs))
    res = {"K": K, "n": n, "heads": {"ctx": ctx.to_json(), "param": par.to_json(),
                                     "awr": awr.to_json()}}
    for name, exs in (("open", cf), ("closed", cb)):
        base = recall_of(wb, exs)
        row = {"none": base,
               "ctx": recall_of(wb, exs, spec(ctx)),
               "param": recall_of(wb, exs, spec(par)),
               "awr": recall_of(wb, exs, spec(awr))}
        rnd = [recall_of(wb, exs, spec(random_heads(table.shape, K, seed + 100 + i)))
               for i in range(n_random)]
        row["random"] = float(np.mean(rnd))
        row["random_runs"] = rnd
        res[name] = row
    return res


# ------------------------------------------------------------ task FVs

def task_fv_study(wb: Workbench, heads: Sequence[Head], n: int, seed: int,
                  alpha: float = iv.DEFAULT_ALPHA, random_seed: int | None = None,
                  ids: Sequence[int] | None = None, baselines: bool = True) -> dict:
    """Patch question-prompt head outputs into bare biographies.

    For each trial a source entity's oracle prompt asks about one attribute;
    the FVs of ``heads`` at its final token are patched into a different
    entity's biography without a question. Recall is scored against that
    entity's value of the asked attribute. ``ids`` defaults to the
    evaluation split.
    """
    rng = np.random.default_rng(seed)
    ids = list(ids if ids is not None else wb.eval_ids)
    heads = list(heads)
    rnd = random_heads(_shape(wb), len(heads), seed + 7 if random_seed is None else random_seed)
    per_attr = {a: {"fv": [], "random": [], "none": []} for a in cp.ATTRIBUTES}
    for k in range(n):
        src = wb.by_id[ids[rng.integers(len(ids))]]
        while True:
            dst = wb.by_id[ids[rng.integers(len(ids))]]
            if dst.entity_id != src.entity_id:
                break
        attr = cp.ATTRIBUTES[k % 4]
        src_ex = cp.build_qa_example(src, "oracle", attr, None, int(rng.integers(2)))
        dst_ex = cp.build_qa_example(dst, "bare", None)
        dst_ids = wb.encode(dst_ex)
        src_ids = wb.encode(src_ex)
        gold = dst.value(attr)
        for name, hs in (("fv", heads), ("random", rnd.heads))[:2 if baselines else 1]:
            fvs = iv.extract_fv(wb.weights, src_ids, hs, src_ex.example_id)
            spec = iv.fv_spec(fvs, alpha, len(dst_ids) - 1)
            per_attr[attr][name].append(cp.score_answer(wb.generate(dst_ids, spec), gold=gold)["recall"])
        if baselines:
            per_attr[attr]["none"].append(cp.score_answer(wb.generate(dst_ids), gold=gold)["recall"])
    names = ("fv", "random", "none") if baselines else ("fv",)
    summary = {name: float(np.mean([x for a in cp.ATTRIBUTES for x in per_attr[a][name]]))
               for name in names}
    summary["per_attribute"] = {a: {k: float(np.mean(v)) if v else None for k, v in d.items()}
                                for a, d in per_attr.items()}
    summary.update(alpha=alpha, n=n, heads=[list(h) for h in heads],
                   random_heads=[list(h) for h in rnd.heads])
    return summary


def tune_alpha(wb: Workbench, heads: Sequence[Head], alphas: Sequence[float], n: int,
               seed: int) -> dict:
    """FV scale with the best recall on training-split entities (smallest on ties)."""
    grid = [{"alpha": float(a),
             "recall": task_fv_study(wb, heads, n, seed, a, ids=wb.train_ids,
                                     baselines=False)["fv"]} for a in alphas]
    best = max(grid, key=lambda g: (g["recall"], -g["alpha"]))
    return {"alpha": best["alpha"], "n": n, "grid": grid}


# ------------------------------------------------------------ parametric FVs

def parametric_fv_study(wb: Workbench, heads: Sequence[Head], n: int, seed: int,
                        alpha: float = iv.DEFAULT_ALPHA) -> dict:
    """Patch cloze-statement head outputs into another entity's question prompt.

    Sources are entities the model answers correctly closed-book (recall at
    least 0.7 on the probed attribute). Recall is scored against the source
    entity's value of the attribute asked in the target prompt.
    """
    rng = np.random.default_rng(seed)
    pool = [r.entity_id for r in wb.records]
    rnd = random_heads(_shape(wb), len(heads), seed + 3)
    scores = {"fv": [], "random": [], "none": []}
    tries = 0
    while len(scores["fv"]) < n and tries < 20 * n:
        tries += 1
        src = wb.by_id[pool[rng.integers(len(pool))]]
        dst = wb.by_id[pool[rng.integers(len(pool))]]
        cloze_attr = cp.ATTRIBUTES[rng.integers(4)]
        ask = cp.ATTRIBUTES[rng.integers(4)]
        if dst.entity_id == src.entity_id or dst.value(ask) == src.value(ask):
            continue
        probe = cp.build_qa_example(src, "closed", ask)
        if cp.score_answer(wb.answer(probe), probe)["recall"] < CORRECT_RECALL:
            continue
        cloze = wb.tok.encode(cp.cloze_prompt(src, cloze_attr))
        dst_ex = cp.build_qa_example(dst, "closed", ask)
        dst_ids = wb.encode(dst_ex)
        for name, hs in (("fv", list(heads)), ("random", rnd.heads)):
            fvs = iv.extract_fv(wb.weights, cloze, hs, f"cloze:{src.entity_id}:{cloze_attr}")
            spec = iv.fv_spec(fvs, alpha, len(dst_ids) - 1)
            scores[name].append(cp.score_answer(wb.generate(dst_ids, spec), gold=src.value(ask))["recall"])
        scores["none"].append(cp.score_answer(wb.generate(dst_ids), gold=src.value(ask))["recall"])
    out = {k: float(np.mean(v)) if v else float("nan") for k, v in scores.items()}
    out.update(alpha=alpha, n=len(scores["fv"]))
    return out


# ------------------------------------------------------------ needles

def needle_examples(wb: Workbench, n: int, seed: int,
                    needles: Sequence[str] = cp.POEM_NEEDLES,
                    ids: Sequence[int] | None = None) -> list[cp.QAExample]:
    rng = np.random.default_rng(seed)
    ids = list(ids if ids is not None else wb.eval_ids)
    out = []
    for k in range(n):
        r = wb.by_id[ids[rng.integers(len(ids))]]
        base = cp.build_qa_example(r, "bare", None)
        needle = needles[k % len(needles)]
        out.append(cp.insert_needle(base, needle, seed * 100003 + k,
                                    wb.weights.config.max_seq_len - wb.max_new_tokens))
    return out


def niah_study(wb: Workbench, heads: Sequence[Head], n: int, seed: int,
               add: float = iv.BOOST_ADD, mult: float = iv.BOOST_MULT,
               ids: Sequence[int] | None = None) -> dict:
    rnd = random_heads(_shape(wb), len(heads), seed + 5)
    scores = {"boost": [], "random": [], "none": []}
    for ex in needle_examples(wb, n, seed, ids=ids):
        tid = wb.encode(ex)
        for name, hs in (("boost", list(heads)), ("random", rnd.heads)):
            spec = iv.boost_spec(hs, ex.needle_span, len(tid) - 1, add, mult)
            scores[name].append(cp.score_answer(wb.generate(tid, spec), ex)["recall"])
        scores["none"].append(cp.score_answer(wb.generate(tid), ex)["recall"])
    out = {k: float(np.mean(v)) for k, v in scores.items()}
    out.update(n=n, add=add, mult=mult, heads=[list(h) for h in heads])
    return out


def heatmap_needle_hits(wb: Workbench, n: int, seed: int) -> float:
    """Fraction of needle prompts whose input-heatmap argmax (context only)
    lands in the needle span, explaining the needle's first token."""
    hits = []
    for ex in needle_examples(wb, n, seed):
        ids = wb.encode(ex)
        trace = forward(wb.weights, ids)
        rt = attribute(wb.weights, trace, wb.first_token(ex.gold), len(ids) - 1)
        hm = input_heatmap(rt)
        lo, hi = ex.context_span
        k = lo + int(np.argmax(hm[lo:hi]))
        hits.append(ex.needle_span[0] <= k < ex.needle_span[1])
    return float(np.mean(hits))


# ------------------------------------------------------------ probe

def collect_probe_samples(wb: Workbench, heads: Sequence[Head], n: int, seed: int,
                          ids: Sequence[int] | None = None, top_k: int = 10,
                          with_heatmap: bool = False) -> tuple[list[pv.ProbeSample], dict]:
    """Counterfactual prompts where both the contextual and the parametric
    first answer tokens are among the top ``top_k`` predictions."""
    ids = list(ids if ids is not None else wb.eval_ids)
    samples, heat_hits, kept = [], [], 0
    for ex in counterfactual_examples(wb.records, ids, n, seed):
        tid = wb.encode(ex)
        trace = forward(wb.weights, tid)
        top = set(np.argsort(-trace.logits[-1])[:top_k].tolist())
        c_tok, p_tok = wb.first_token(ex.counterfactual), wb.first_token(ex.gold)
        if c_tok not in top or p_tok not in top:
            continue
        kept += 1
        samples += pv.make_samples(wb.weights, trace, heads, ex.example_id, c_tok, p_tok,
                                   ex.ret_span, ex.context_span)
        if with_heatmap:
            rt = attribute(wb.weights, trace, c_tok, len(tid) - 1)
            hm = input_heatmap(rt)
            lo, hi = ex.context_span
            heat_hits.append(lo + int(np.argmax(hm[lo:hi])) == ex.ret_span[0])
    info = {"n_prompts": n, "n_kept": kept}
    if with_heatmap:
        info["heatmap_localization"] = float(np.mean(heat_hits)) if heat_hits else float("nan")
    return samples, info


def shuffled(samples: Sequence[pv.ProbeSample], seed: int) -> list[pv.ProbeSample]:
    """Copy of ``samples`` with labels permuted (a permutation null)."""
    labels = np.random.default_rng(seed).permutation([s.label for s in samples])
    return [pv.ProbeSample(s.example_id, s.heads, s.features, s.token, int(y), s.attn,
                           s.answer_span, s.context_span, s.source)
            for s, y in zip(samples, labels)]


def probe_study(wb: Workbench, heads: Sequence[Head], n: int, seed: int,
                split_seed: int = 0) -> tuple[pv.ProbeModel, dict]:
    samples, info = collect_probe_samples(wb, heads, n, seed, with_heatmap=True)
    split = pv.split_samples(samples, split_seed)
    probe = pv.train_probe(split)
    test = pv.evaluate_probe(probe, split.test)
    null_split = pv.split_samples(shuffled(samples, split_seed + 1), split_seed)
    null_probe = pv.train_probe(null_split)
    res = {
        **info,
        "n_samples": len(samples),
        "dev_auc": probe.dev_auc,
        "test_auc": test["auc"],
        "test_accuracy": test["accuracy"],
        "shuffled_dev_auc": null_probe.dev_auc,
        "shuffled_test_auc": pv.evaluate_probe(null_probe, null_split.test)["auc"],
        "localization_weighted": pv.localization_accuracy(probe, split.test),
        "localization_uniform": pv.localization_accuracy(None, split.test, uniform=True),
    }
    return probe, res
