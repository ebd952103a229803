"""Head categorisation from relevance traces.

In-context vs parametric heads come from the difference between mean head
relevance on counterfactual open-book prompts and on correctly answered
closed-book prompts. Task vs retrieval heads come from positive
attention-weight relevance landing on question tokens vs on the answer
object inside the context.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attribution import RelevanceTrace, head_relevance, token_head_relevance

Head = tuple[int, int]
KINDS = ("ctx", "param", "task", "ret", "random", "awr")
SCORES = ("D", "rho_task", "rho_ret", "r_open", "r_closed", "awr")


@dataclass
class ScoreAccumulator:
    """Per-head running sums; merging partial accumulators is order-free."""

    shape: tuple[int, int]
    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, key: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ValueError(f"score shape {values.shape} != {self.shape} (mismatched model configs)")
        self.sums[key] = self.sums.get(key, np.zeros(self.shape)) + values
        self.counts[key] = self.counts.get(key, 0) + 1

    def merge(self, other: "ScoreAccumulator") -> "ScoreAccumulator":
        if other.shape != self.shape:
            raise ValueError("cannot merge accumulators of different model shapes")
        out = ScoreAccumulator(self.shape)
        for acc in (self, other):
            for k, v in acc.sums.items():
                out.sums[k] = out.sums.get(k, np.zeros(self.shape)) + v
                out.counts[k] = out.counts.get(k, 0) + acc.counts[k]
        return out

    def mean(self, key: str) -> np.ndarray:
        if not self.counts.get(key):
            raise ValueError(f"no samples for {key!r}")
        return self.sums[key] / self.counts[key]


@dataclass
class HeadScoreTable:
    """Per-head scores, all arrays shaped ``(n_layers, n_heads)``."""

    r_open: np.ndarray
    r_closed: np.ndarray
    rho_task: np.ndarray
    rho_ret: np.ndarray
    n_open: int = 0
    n_closed: int = 0
    n_spec: int = 0
    awr: np.ndarray | None = None

    @property
    def D(self) -> np.ndarray:
        return self.r_open - self.r_closed

    @property
    def shape(self) -> tuple[int, int]:
        return self.r_open.shape

    @property
    def n_heads_total(self) -> int:
        return int(np.prod(self.shape))

    def score(self, name: str) -> np.ndarray:
        if name not in SCORES:
            raise ValueError(f"unknown score {name!r}")
        val = getattr(self, name)
        if val is None:
            raise ValueError(f"score {name!r} not computed")
        return val

    def with_spec(self, other: "HeadScoreTable") -> "HeadScoreTable":
        """Combine the open/closed part of ``self`` with the specialisation part of ``other``."""
        return HeadScoreTable(self.r_open, self.r_closed, other.rho_task, other.rho_ret,
                              self.n_open, self.n_closed, other.n_spec, self.awr
                              if self.awr is not None else other.awr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "r_open", "r_closed", "D", "rho_task", "rho_ret"])
        D = self.D
        for l in range(self.shape[0]):
            for h in range(self.shape[1]):
                w.writerow([l, h] + [f"{float(x[l, h]):.9g}" for x in
                                     (self.r_open, self.r_closed, D, self.rho_task, self.rho_ret)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "HeadScoreTable":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        L = max(int(r["layer"]) for r in rows) + 1
        H = max(int(r["head"]) for r in rows) + 1
        arrs = {k: np.zeros((L, H)) for k in ("r_open", "r_closed", "rho_task", "rho_ret")}
        for r in rows:
            for k in arrs:
                arrs[k][int(r["layer"]), int(r["head"])] = float(r[k])
        return cls(**arrs)


@dataclass
class HeadSet:
    heads: list[Head]
    kind: str
    K: int

    def __post_init__(self):
        if len(set(self.heads)) != len(self.heads):
            raise ValueError("duplicate heads in HeadSet")
        if len(self.heads) > self.K:
            raise ValueError("HeadSet longer than K")

    def __iter__(self):
        return iter(self.heads)

    def __len__(self):
        return len(self.heads)

    def as_set(self) -> frozenset:
        return frozenset(self.heads)

    def to_json(self) -> dict:
        return {"kind": self.kind, "K": self.K, "heads": [list(h) for h in self.heads]}

    @classmethod
    def from_json(cls, d) -> "HeadSet":
        return cls([tuple(h) for h in d["heads"]], d["kind"], d["K"])


def _head_scores(items: Iterable) -> list[np.ndarray]:
    return [head_relevance(x) if isinstance(x, RelevanceTrace) else np.asarray(x, np.float64)
            for x in items]


def difference_scores(open_traces: Sequence, closed_traces: Sequence) -> HeadScoreTable:
    """Mean head relevance on open-book minus closed-book traces.

    Items may be :class:`RelevanceTrace` objects or precomputed ``(L, H)``
    head-relevance arrays.
    """
    if not open_traces or not closed_traces:
        raise ValueError("both open-book and closed-book sets must be non-empty")
    op, cl = _head_scores(open_traces), _head_scores(closed_traces)
    shape = op[0].shape
    acc = ScoreAccumulator(shape)
    for r in op:
        acc.add("open", r)
    for r in cl:
        acc.add("closed", r)
    zeros = np.zeros(shape)
    return HeadScoreTable(acc.mean("open"), acc.mean("closed"), zeros, zeros.copy(),
                          n_open=len(op), n_closed=len(cl))


def select_heads(table: HeadScoreTable, K: int, direction: str = "desc", score: str = "D",
                 kind: str | None = None) -> HeadSet:
    """Top ``K`` heads by ``score``; ties broken by (layer, head) ascending."""
    if K <= 0:
        raise ValueError("K must be positive")
    if direction not in ("desc", "asc"):
        raise ValueError("direction must be 'desc' or 'asc'")
    vals = table.score(score)
    L, H = vals.shape
    if K > L * H:
        raise ValueError(f"K={K} exceeds the {L * H} heads in the model")
    sign = -1.0 if direction == "desc" else 1.0
    order = sorted(((sign * float(vals[l, h]), l, h) for l in range(L) for h in range(H)))
    if kind is None:
        kind = {"D": "ctx" if direction == "desc" else "param", "rho_task": "task",
                "rho_ret": "ret", "awr": "awr"}.get(score, score)
    return HeadSet([(l, h) for _, l, h in order[:K]], kind, K)


def random_heads(shape: tuple[int, int], K: int, seed: int,
                 exclude: Iterable[Head] = ()) -> HeadSet:
    L, H = shape
    excl = set(exclude)
    pool = [(l, h) for l in range(L) for h in range(H) if (l, h) not in excl]
    idx = np.random.default_rng(seed).choice(len(pool), size=K, replace=False)
    return HeadSet([pool[i] for i in sorted(idx)], "random", K)


def specialization_scores(items: Sequence[tuple]) -> HeadScoreTable:
    """Mean task- and retrieval-span attention relevance per head.

    ``items`` holds ``(relevance_trace, example)`` pairs; every example must
    carry a question span and an answer-object span.
    """
    if not items:
        raise ValueError("no traces given")
    acc = None
    for rt, ex in items:
        if ex.task_span is None or ex.ret_span is None or ex.task_span[0] == ex.task_span[1] \
                or ex.ret_span[0] == ex.ret_span[1]:
            raise ValueError(f"example {ex.example_id!r} lacks a task or retrieval span")
        rho = token_head_relevance(rt)
        acc = acc or ScoreAccumulator(rho.shape[:2])
        acc.add("task", rho[:, :, ex.task_span[0]:ex.task_span[1]].sum(axis=2))
        acc.add("ret", rho[:, :, ex.ret_span[0]:ex.ret_span[1]].sum(axis=2))
    zeros = np.zeros(acc.shape)
    return HeadScoreTable(zeros, zeros.copy(), acc.mean("task"), acc.mean("ret"),
                          n_spec=len(items))


def attention_mass_scores(traces: Sequence, examples: Sequence) -> np.ndarray:
    """Baseline: mean attention mass the final position puts on the answer span.

    An approximation of attention-weight-recall style retrieval scoring.
    """
    acc = None
    for tr, ex in zip(traces, examples):
        lo, hi = ex.ret_span
        mass = np.stack([lt.attn[:, -1, lo:hi].sum(axis=1) for lt in tr.layers])
        acc = acc or ScoreAccumulator(mass.shape)
        acc.add("awr", mass)
    return acc.mean("awr")


def layerwise_profile(table: HeadScoreTable, ctx: HeadSet | None = None,
                      param: HeadSet | None = None) -> dict:
    """Per-layer sums of the specialisation scores and category counts."""
    L, H = table.shape
    count = lambda hs: [sum(1 for l, _ in hs if l == i) for i in range(L)] if hs else [0] * L
    return {
        "layer": list(range(L)),
        "rho_task": [float(x) for x in table.rho_task.sum(axis=1)],
        "rho_ret": [float(x) for x in table.rho_ret.sum(axis=1)],
        "D": [float(x) for x in table.D.sum(axis=1)],
        "n_ctx": count(ctx),
        "n_param": count(param),
    }


def overlap_fraction(a: HeadSet, b: HeadSet) -> float:
    return len(a.as_set() & b.as_set()) / len(a) if len(a) else 0.0
