"""Source tracking with retrieval heads.

Each retrieval head's final-position output is read through the logit lens
(per-head output projection, final RMS norm, one unembedding row). A linear
least-squares probe over those scores separates contextual from parametric
answer tokens, and the same weighted scores aggregate the heads' attention
rows into a map whose argmax points at the copied context token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.metrics import roc_auc_score, roc_curve

from . import numerics as nx
from .model import ForwardTrace, Weights

Head = tuple[int, int]
RIDGE = 1e-4
CONTEXTUAL, PARAMETRIC = "contextual", "parametric"


class ZeroInputError(ValueError):
    """Logit lens asked to normalise an all-zero head output."""


def logit_lens_score(weights: Weights, z: np.ndarray, head: Head, token: int) -> float:
    """How strongly one head output writes ``token``: ``norm(W_O^h z) . W_U[token]``."""
    cfg = weights.config
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token {token} not in vocabulary")
    z = nx.as_tensor(z)
    if not np.any(z):
        raise ZeroInputError(f"head {head} output is all zero; normalisation undefined")
    x = weights.W_O(*head) @ z
    if not np.any(x):
        raise ZeroInputError(f"head {head} writes an all-zero vector")
    if cfg.use_norm:
        x = nx.rms_norm(x, weights["ln_f.g"], cfg.norm_eps)[0]
    return float(x @ weights["W_U"][token])


def head_scores(weights: Weights, trace: ForwardTrace, heads: Sequence[Head], token: int,
                position: int = -1) -> np.ndarray:
    return np.array([logit_lens_score(weights, trace.layers[l].z[h, position], (l, h), token)
                     for l, h in heads])


@dataclass
class ProbeSample:
    """Logit-lens features for one (prompt, candidate token) pair.

    ``label`` is 1 when ``token`` is the contextual answer and 0 when it is
    the parametric one. ``attn`` holds the heads' final-position attention
    rows for localisation.
    """

    example_id: str
    heads: tuple[Head, ...]
    features: np.ndarray
    token: int
    label: int
    attn: np.ndarray | None = None
    answer_span: tuple[int, int] | None = None
    context_span: tuple[int, int] | None = None
    source: str = ""


def make_samples(weights: Weights, trace: ForwardTrace, heads: Sequence[Head], example_id: str,
                 ctx_token: int, param_token: int, answer_span, context_span) -> list[ProbeSample]:
    """One contextual and one parametric sample from the same prompt."""
    heads = tuple(heads)
    attn = np.stack([trace.layers[l].attn[h, -1] for l, h in heads])
    out = []
    for token, label in ((ctx_token, 1), (param_token, 0)):
        out.append(ProbeSample(example_id, heads, head_scores(weights, trace, heads, token),
                               int(token), label, attn, tuple(answer_span), tuple(context_span),
                               "context" if label else "parameters"))
    return out


@dataclass
class ProbeSplit:
    """Disjoint train/dev/test partition, grouped by prompt."""

    train: list[ProbeSample]
    dev: list[ProbeSample]
    test: list[ProbeSample]
    seed: int

    def __post_init__(self):
        ids = [{s.example_id for s in part} for part in (self.train, self.dev, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValueError("probe splits share prompts")


def split_samples(samples: Sequence[ProbeSample], seed: int,
                  fractions: tuple[float, float] = (0.5, 0.25)) -> ProbeSplit:
    ids = sorted({s.example_id for s in samples})
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_tr = int(round(fractions[0] * len(ids)))
    n_dev = int(round(fractions[1] * len(ids)))
    tr = {ids[i] for i in perm[:n_tr]}
    dev = {ids[i] for i in perm[n_tr:n_tr + n_dev]}
    parts = ([], [], [])
    for s in samples:
        parts[0 if s.example_id in tr else 1 if s.example_id in dev else 2].append(s)
    return ProbeSplit(*parts, seed=seed)


@dataclass
class ProbeModel:
    heads: tuple[Head, ...]
    weights: np.ndarray
    threshold: float
    dev_auc: float
    seed: int
    ridge: float = 0.0
    meta: dict = field(default_factory=dict)

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, np.float64) @ self.weights

    def to_json(self) -> dict:
        return {"heads": [list(h) for h in self.heads],
                "weights": [float(w) for w in self.weights],
                "threshold": float(self.threshold), "dev_auc": float(self.dev_auc),
                "seed": self.seed, "ridge": self.ridge, **self.meta}

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**self.to_json(), **extra}, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ProbeModel":
        d = json.loads(Path(path).read_text())
        meta = {k: v for k, v in d.items()
                if k not in ("heads", "weights", "threshold", "dev_auc", "seed", "ridge")}
        return cls(tuple(tuple(h) for h in d["heads"]), np.asarray(d["weights"], np.float64),
                   d["threshold"], d["dev_auc"], d["seed"], d.get("ridge", 0.0), meta)


def _design(samples: Sequence[ProbeSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, y


def roc_auc(labels, scores) -> float:
    return float(roc_auc_score(labels, scores))


def best_threshold(labels, scores) -> float:
    """Threshold maximising TPR - FPR; the highest one among ties."""
    fpr, tpr, thr = roc_curve(labels, scores)
    j = tpr - fpr
    i = int(np.argmax(j))
    return float(min(thr[i], np.max(scores)))


def train_probe(split: ProbeSplit, min_per_class: int = 20) -> ProbeModel:
    """Least-squares weights on the train part, threshold and AUC on dev."""
    if not split.train or not split.dev:
        raise ValueError("probe needs non-empty train and dev splits")
    heads = split.train[0].heads
    X, y = _design(split.train)
    for cls in (0, 1):
        if np.sum(y == cls) < min_per_class:
            raise ValueError(f"need >= {min_per_class} training samples of class {cls}")
    ridge = 0.0
    if np.linalg.matrix_rank(X) < X.shape[1]:
        ridge = RIDGE
        w = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ y)
    else:
        w = np.linalg.lstsq(X, y, rcond=None)[0]
    Xd, yd = _design(split.dev)
    if len(set(yd)) < 2:
        raise ValueError("dev split needs both labels")
    sd = Xd @ w
    return ProbeModel(heads, w, best_threshold(yd, sd), roc_auc(yd, sd), split.seed, ridge)


def evaluate_probe(probe: ProbeModel, samples: Sequence[ProbeSample]) -> dict:
    X, y = _design(samples)
    s = probe.score(X)
    pred = s >= probe.threshold
    return {"auc": roc_auc(y, s), "accuracy": float(np.mean(pred == (y == 1))), "n": len(samples)}


def classify_source(probe: ProbeModel, sample: ProbeSample) -> tuple[str, float]:
    """Contextual when the weighted score reaches the threshold (ties included)."""
    if tuple(sample.heads) != tuple(probe.heads):
        raise ValueError("sample heads do not match the probe's heads")
    s = float(probe.score(sample.features))
    return (CONTEXTUAL if s >= probe.threshold else PARAMETRIC), s


def aggregate_attention(probe: ProbeModel | None, sample: ProbeSample,
                        uniform: bool = False) -> np.ndarray:
    """Weighted (or plain mean) sum of the heads' final-position attention rows."""
    if sample.attn is None:
        raise ValueError("sample carries no attention rows")
    if uniform:
        return sample.attn.mean(axis=0)
    if tuple(sample.heads) != tuple(probe.heads):
        raise ValueError("sample heads do not match the probe's heads")
    coef = probe.weights * sample.features
    return coef @ sample.attn


def localize_source(probe: ProbeModel | None, sample: ProbeSample,
                    uniform: bool = False) -> tuple[int, np.ndarray]:
    """Argmax of the aggregated map over context positions, plus the map."""
    amap = aggregate_attention(probe, sample, uniform)
    lo, hi = sample.context_span if sample.context_span is not None else (0, len(amap))
    k = lo + int(np.argmax(amap[lo:hi]))
    return k, amap


def localization_accuracy(probe: ProbeModel | None, samples: Sequence[ProbeSample],
                          uniform: bool = False) -> float:
    """Top-1 rate at which the argmax hits the first token of the contextual answer."""
    ctx = [s for s in samples if s.label == 1]
    if not ctx:
        return float("nan")
    hits = [localize_source(probe, s, uniform)[0] == s.answer_span[0] for s in ctx]
    return float(np.mean(hits))
