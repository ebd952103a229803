"""Training on the synthetic corpus.

Training needs gradients, so this module mirrors the numpy forward in torch
(same parameter names, shapes and nonlinearities) and exports the result back
to a numpy :class:`~headatlas.model.Weights`. Inference and attribution never
touch torch.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import corpus as cp
from .model import ModelConfig, Weights, generate, init_weights

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainOptions:
    steps: int = 3000
    batch_closed: int = 48
    batch_open: int = 24
    batch_bio: int = 8
    lr: float = 3e-4
    warmup: int = 100
    clip: float = 1.0
    seed: int = 0
    head_dropout: float = 0.0
    # open-book mixture: oracle / entity swap / random-phrase swap / bare
    open_mix: tuple[float, float, float, float] = (0.25, 0.45, 0.2, 0.1)
    # share of question-less prompts that carry an inserted stray phrase
    bare_distractor: float = 0.5
    recall_threshold: float = 0.8
    probe_size: int = 200
    log_every: int = 50

    def to_json(self) -> dict:
        d = asdict(self)
        d["open_mix"] = list(self.open_mix)
        return d

    @classmethod
    def from_json(cls, d) -> "TrainOptions":
        d = dict(d)
        if "open_mix" in d:
            d["open_mix"] = tuple(d["open_mix"])
        return cls(**d)


@dataclass
class TrainSeq:
    tokens: list[int]
    loss_mask: list[bool] = field(default_factory=list)


# ------------------------------------------------------------ data sampling

class CurriculumSampler:
    """Draws closed-book QA, open-book QA and biography LM sequences."""

    def __init__(self, records: Sequence[cp.BioRecord], train_ids: Sequence[int],
                 tok: cp.Tokenizer, rng: np.random.Generator, open_mix=(0.25, 0.45, 0.2, 0.1),
                 bare_distractor: float = 0.5):
        self.records = list(records)
        self.by_id = {r.entity_id: r for r in records}
        self.train_ids = list(train_ids)
        self.tok = tok
        self.rng = rng
        self.open_mix = np.asarray(open_mix, float) / np.sum(open_mix)
        self.bare_distractor = bare_distractor
        self.phrase_pool = list(cp.FILLER_WORDS) + sorted(
            {w for n in cp.POEM_NEEDLES for w in cp.words(n)} - cp.ARTICLES)

    def _qa(self, ex: cp.QAExample) -> TrainSeq:
        prompt = self.tok.encode(ex.prompt)
        ans = self.tok.encode(ex.target) + [self.tok.eos]
        return TrainSeq(prompt + ans, [False] * (len(prompt) - 1) + [True] * len(ans) + [False])

    def closed(self) -> TrainSeq:
        r = self.records[self.rng.integers(len(self.records))]
        attr = cp.ATTRIBUTES[self.rng.integers(4)]
        return self._qa(cp.build_qa_example(r, "closed", attr, question_variant=int(self.rng.integers(2))))

    def random_phrase(self) -> str:
        n = int(self.rng.integers(1, 4))
        return " ".join(self.phrase_pool[i] for i in self.rng.choice(len(self.phrase_pool), n, replace=False))

    def open(self) -> TrainSeq:
        r = self.by_id[self.train_ids[self.rng.integers(len(self.train_ids))]]
        attr = cp.ATTRIBUTES[self.rng.integers(4)]
        qv = int(self.rng.integers(2))
        kind = self.rng.choice(4, p=self.open_mix)
        if kind == 0:
            ex = cp.build_qa_example(r, "oracle", attr, question_variant=qv)
        elif kind == 1:
            while True:
                other = self.records[self.rng.integers(len(self.records))]
                if other.value(attr) != r.value(attr):
                    break
            ex = cp.build_qa_example(r, "counterfactual", attr, other, question_variant=qv)
        elif kind == 2:
            ex = cp.build_qa_example(r, "counterfactual", attr, self.random_phrase(), question_variant=qv)
        else:
            ex = cp.build_qa_example(r, "bare", None)
            if self.rng.random() < self.bare_distractor:
                ex = cp.insert_needle(ex, self.random_phrase(), int(self.rng.integers(2**31)))
            prompt = self.tok.encode(ex.prompt)
            return TrainSeq(prompt + [self.tok.eos], [False] * (len(prompt) - 1) + [True, False])
        return self._qa(ex)

    def bio(self) -> TrainSeq:
        r = self.records[self.rng.integers(len(self.records))]
        ids = self.tok.encode([cp.BOS, cp.CTX] + cp.words(cp.render_bio(r)))
        return TrainSeq(ids, [False] + [True] * (len(ids) - 2) + [False])


def collate(seqs: Sequence[TrainSeq], pad_id: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad into ``(inputs, targets, mask)``; mask marks positions whose next token is scored."""
    n = max(len(s.tokens) for s in seqs)
    toks = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        toks[i, :len(s.tokens)] = s.tokens
        mask[i, :len(s.loss_mask)] = s.loss_mask
    t = torch.from_numpy(toks)
    return t[:, :-1], t[:, 1:], torch.from_numpy(mask[:, :-1])


# ------------------------------------------------------------ torch mirror

class TorchTransformer(torch.nn.Module):
    def __init__(self, weights: Weights):
        super().__init__()
        self.cfg = weights.config
        self.names = sorted(weights.tensors)
        self.params = torch.nn.ParameterList(
            [torch.nn.Parameter(torch.from_numpy(weights.tensors[n].copy())) for n in self.names])
        self.index = {n: i for i, n in enumerate(self.names)}

    def p(self, name: str) -> torch.Tensor:
        return self.params[self.index[name]]

    def _norm(self, x, name):
        if not self.cfg.use_norm:
            return x
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.cfg.norm_eps) * self.p(name)

    def forward(self, tokens: torch.Tensor, head_mask: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        B, S = tokens.shape
        x = self.p("tok_emb")[tokens] + self.p("pos_emb")[:S]
        causal = torch.ones(S, S, dtype=torch.bool).triu(1)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        for l in range(cfg.n_layers):
            pre = f"L{l}."
            n1 = self._norm(x, pre + "ln1.g")
            q = torch.einsum("hkd,bsd->bhsk", self.p(pre + "attn.W_Q"), n1)
            k = torch.einsum("hkd,bsd->bhsk", self.p(pre + "attn.W_K"), n1)
            v = torch.einsum("hkd,bsd->bhsk", self.p(pre + "attn.W_V"), n1)
            s = (q @ k.transpose(-1, -2)) * scale
            a = torch.softmax(s.masked_fill(causal, float("-inf")), dim=-1)
            z = a @ v
            if head_mask is not None:
                z = z * head_mask[:, l, :, None, None]
            x = x + torch.einsum("hdk,bhsk->bsd", self.p(pre + "attn.W_O"), z)
            if cfg.use_mlp:
                n2 = self._norm(x, pre + "ln2.g")
                h = torch.nn.functional.gelu(n2 @ self.p(pre + "mlp.W_in").T + self.p(pre + "mlp.b_in"),
                                             approximate="tanh")
                x = x + h @ self.p(pre + "mlp.W_out").T + self.p(pre + "mlp.b_out")
        x = self._norm(x, "ln_f.g")
        return x @ self.p("W_U").T

    def export(self) -> Weights:
        with torch.no_grad():
            tensors = {n: self.params[i].detach().numpy().astype(np.float32).copy()
                       for i, n in enumerate(self.names)}
        return Weights(self.cfg, tensors)


# ------------------------------------------------------------ training loop

def lr_at(step: int, opts: TrainOptions) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if step < opts.warmup:
        return opts.lr * (step + 1) / opts.warmup
    frac = (step - opts.warmup) / max(1, opts.steps - opts.warmup)
    return opts.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, frac))))


def closed_book_recall(weights: Weights, records: Sequence[cp.BioRecord], tok: cp.Tokenizer,
                       n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(records), size=min(n, len(records)), replace=False)
    scores = []
    for i in picks:
        attr = cp.ATTRIBUTES[rng.integers(4)]
        ex = cp.build_qa_example(records[i], "closed", attr)
        out = generate(weights, tok.encode(ex.prompt), 8, eos_id=tok.eos)
        scores.append(cp.score_answer(tok.decode(out), ex)["recall"])
    return float(np.mean(scores)) if scores else 0.0


def train(config: ModelConfig, records: Sequence[cp.BioRecord], train_ids: Sequence[int],
          opts: TrainOptions, log_path: str | Path | None = None,
          tokenizer: cp.Tokenizer | None = None, init: Weights | None = None,
          batches=None, history: list | None = None) -> Weights:
    """Train from scratch (or from ``init``) and return numpy weights.

    ``batches`` overrides the curriculum with a fixed list of sequences that
    is reused every step (used for overfitting sanity checks). ``history``
    receives ``(step, loss, lr)`` rows.
    """
    if not records and batches is None:
        raise ValueError("empty corpus")
    tok = tokenizer or cp.Tokenizer()
    if config.vocab_size < len(tok):
        raise ValueError(f"vocab_size {config.vocab_size} < tokenizer size {len(tok)}")
    torch.manual_seed(opts.seed)
    rng = np.random.default_rng(opts.seed)
    weights = init or init_weights(config)
    net = TorchTransformer(weights)
    decay = [p for n, p in zip(net.names, net.params) if not (n.endswith(".g") or ".b_" in n)]
    rest = [p for n, p in zip(net.names, net.params) if n.endswith(".g") or ".b_" in n]
    optim = torch.optim.AdamW([{"params": decay, "weight_decay": 0.01},
                               {"params": rest, "weight_decay": 0.0}],
                              lr=opts.lr, betas=(0.9, 0.98))
    sampler = None if batches is not None else CurriculumSampler(
        records, train_ids, tok, rng, opts.open_mix, opts.bare_distractor)
    rows = []
    for step in range(opts.steps):
        lr = lr_at(step, opts)
        for g in optim.param_groups:
            g["lr"] = lr
        if batches is not None:
            groups = [list(batches)]
        else:
            groups = [[sampler.closed() for _ in range(opts.batch_closed)],
                      [sampler.open() for _ in range(opts.batch_open)],
                      [sampler.bio() for _ in range(opts.batch_bio)]]
            groups = [g for g in groups if g]
        total, count = 0.0, 0
        optim.zero_grad()
        for seqs in groups:
            inp, tgt, mask = collate(seqs, tok.eos)
            hm = None
            if opts.head_dropout > 0:
                keep = rng.random((len(seqs), config.n_layers, config.n_heads)) >= opts.head_dropout
                hm = torch.from_numpy(keep.astype(np.float32))
            logits = net(inp, hm)
            loss = torch.nn.functional.cross_entropy(logits[mask], tgt[mask], reduction="sum")
            n = int(mask.sum())
            (loss / max(1, n) / len(groups)).backward()
            total += float(loss.detach())
            count += n
        mean_loss = total / max(1, count)
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"loss became {mean_loss} at step {step} (lr={lr:.3g})")
        torch.nn.utils.clip_grad_norm_(net.parameters(), opts.clip)
        optim.step()
        rows.append((step, mean_loss, lr))
        if opts.log_every and step % opts.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, mean_loss, lr)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for s, l, r in rows:
                w.writerow([s, f"{l:.6f}", f"{r:.6e}"])
    out = net.export()
    if batches is None and opts.probe_size:
        rec = closed_book_recall(out, records, tok, opts.probe_size, opts.seed + 1)
        log.info("closed-book probe recall %.3f", rec)
        if rec < opts.recall_threshold:
            warnings.warn(f"closed-book recall {rec:.3f} below threshold {opts.recall_threshold}")
    if history is not None:
        history.extend(rows)
    return out
