"""Relevance propagation from one output logit back through a forward trace.

Rules: epsilon rule through the unembedding, MLP matrices and per-head
projections; identity through GELU and RMS normalisation (scale treated as a
constant); epsilon rule at residual sums; even split at the attention-value
product. The attention-weight half is recorded per head and then terminated
into the ledger instead of flowing into queries and keys, so every unit of the
seeded logit ends up either on the input embeddings or in a named sink.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import ForwardTrace, Weights, write_records


class AttributionError(nx.NonFiniteError):
    pass


@dataclass
class RelevanceTrace:
    target_token: int
    target_position: int
    seed: float
    rel_z: np.ndarray          # (L, H, S, dh)
    rel_attn: np.ndarray       # (L, H, S, S)
    rel_embed: np.ndarray      # (S, d)
    ledger: nx.RelevanceLedger

    @property
    def n_layers(self) -> int:
        return self.rel_z.shape[0]

    @property
    def n_heads(self) -> int:
        return self.rel_z.shape[1]

    def audit(self) -> tuple[float, float]:
        """``(seed, input relevance + sinks)``; equal up to rounding."""
        inputs = float(np.sum(self.rel_embed, dtype=np.float64))
        return self.seed, inputs + self.ledger.total()

    def audit_error(self) -> float:
        seed, total = self.audit()
        return abs(seed - total) / max(abs(seed), 1e-12)


def _guard(where: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except nx.NonFiniteError as exc:
        raise AttributionError(f"{where}: {exc}") from None


def attribute(weights: Weights, trace: ForwardTrace, target_token: int, target_position: int,
              seed: float | None = None, eps: float = nx.DEFAULT_EPS) -> RelevanceTrace:
    """Explain ``logits[target_position, target_token]``.

    Args:
        weights: the weights that produced ``trace``.
        trace: an un-patched forward trace (ablations are fine).
        target_token: vocabulary id whose logit is explained.
        target_position: query position of that logit.
        seed: relevance placed on the logit; defaults to the logit itself.
        eps: epsilon-rule stabiliser.
    """
    cfg = weights.config
    W = weights.tensors
    S = len(trace.tokens)
    if not 0 <= target_position < S:
        raise ValueError(f"target_position {target_position} outside sequence of length {S}")
    if not 0 <= target_token < cfg.vocab_size:
        raise ValueError(f"target_token {target_token} not in vocabulary")
    L, H, dh, d = cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.model_dim
    logit = float(trace.logits[target_position, target_token])
    seed = logit if seed is None else float(seed)
    ledger = nx.RelevanceLedger()

    # unembedding row: a 1-output linear map at one position
    rel_out = np.array([seed], dtype=nx.DTYPE)
    out = np.array([logit], dtype=nx.DTYPE)
    r_pos, absorbed = _guard("unembedding", nx.lrp_linear_backward,
                             trace.final_norm[target_position], W["W_U"][target_token][None, :],
                             out, rel_out, eps)
    ledger.add("stab:unembed", absorbed)
    R = np.zeros((S, d), dtype=nx.DTYPE)
    R[target_position] = r_pos          # final norm: identity

    rel_z = np.zeros((L, H, S, dh), dtype=nx.DTYPE)
    rel_attn = np.zeros((L, H, S, S), dtype=nx.DTYPE)
    w_o_flat = {}
    for l in reversed(range(L)):
        t = trace.layers[l]
        p = f"L{l}."
        if cfg.use_mlp:
            (r_mid, r_mlp), ab = _guard(f"layer {l} residual (mlp)", nx.lrp_sum_split,
                                        [t.mid, t.mlp_out], t.out, R, eps)
            ledger.add(f"stab:{p}resid_mlp", ab)
            r_act, ab = _guard(f"layer {l} mlp out", nx.lrp_linear_backward,
                               t.mlp_act, W[p + "mlp.W_out"], t.mlp_out, r_mlp, eps)
            ledger.add(f"bias:{p}mlp_out", ab)
            # GELU: identity
            r_n2, ab = _guard(f"layer {l} mlp in", nx.lrp_linear_backward,
                              t.norm2, W[p + "mlp.W_in"], t.mlp_pre, r_act, eps)
            ledger.add(f"bias:{p}mlp_in", ab)
            R = (r_mid + r_n2).astype(nx.DTYPE)   # ln2: identity
        (r_x, r_attn_out), ab = _guard(f"layer {l} residual (attn)", nx.lrp_sum_split,
                                       [t.resid, t.attn_out], t.mid, R, eps)
        ledger.add(f"stab:{p}resid_attn", ab)

        if l not in w_o_flat:
            w_o_flat[l] = W[p + "attn.W_O"].transpose(1, 0, 2).reshape(d, H * dh)
        z_flat = t.z.transpose(1, 0, 2).reshape(S, H * dh)
        rz, ab = _guard(f"layer {l} W_O", nx.lrp_linear_backward,
                        z_flat, w_o_flat[l], t.attn_out, r_attn_out, eps)
        ledger.add(f"stab:{p}W_O", ab)
        rz = rz.reshape(S, H, dh).transpose(1, 0, 2)
        rel_z[l] = rz

        ra, rv = _guard(f"layer {l} attention-value product", nx.lrp_bilinear_split,
                        t.attn, t.v, t.z, rz, eps)
        rel_attn[l] = ra
        for h in range(H):
            a_sum = float(np.sum(ra[h], dtype=np.float64))
            ledger.add(f"qk-termination:{p}h{h}", a_sum)
            ledger.add(f"stab:{p}h{h}.AV", float(np.sum(rz[h], dtype=np.float64))
                       - a_sum - float(np.sum(rv[h], dtype=np.float64)))

        v_flat = t.v.transpose(1, 0, 2).reshape(S, H * dh)
        r_n1, ab = _guard(f"layer {l} W_V", nx.lrp_linear_backward,
                          t.norm1, W[p + "attn.W_V"].reshape(H * dh, d), v_flat,
                          rv.transpose(1, 0, 2).reshape(S, H * dh), eps)
        ledger.add(f"stab:{p}W_V", ab)
        R = (r_x + r_n1).astype(nx.DTYPE)     # ln1: identity
        nx.check_finite(R, f"relevance entering layer {l}")
    return RelevanceTrace(int(target_token), int(target_position), seed,
                          rel_z, rel_attn, R, ledger)


def head_relevance(rt: RelevanceTrace) -> np.ndarray:
    """Sum of positive relevance on each head's output over positions and dims, ``(L, H)``."""
    return np.sum(nx.clamp_positive(rt.rel_z), axis=(2, 3), dtype=np.float64)


def normalized_head_relevance(rt: RelevanceTrace) -> np.ndarray:
    r = head_relevance(rt)
    total = r.sum()
    return r / total if total > 0 else r


def token_head_relevance(rt: RelevanceTrace) -> np.ndarray:
    """Positive attention-weight relevance summed over query positions, ``(L, H, S)``."""
    return np.sum(nx.clamp_positive(rt.rel_attn), axis=2, dtype=np.float64)


def input_heatmap(rt: RelevanceTrace) -> np.ndarray:
    """Relevance reaching the embedding layer, one scalar per input token."""
    return np.sum(rt.rel_embed, axis=1, dtype=np.float64)


def export_relevance(rt: RelevanceTrace, path: str | Path, dense_path: str | Path | None = None,
                     **meta) -> dict:
    """Write a JSON summary; optionally dense arrays in the tensor-record format."""
    heads = head_relevance(rt)
    summary = {
        "target_token": rt.target_token,
        "target_position": rt.target_position,
        "seed": rt.seed,
        "audit_error": rt.audit_error(),
        "heads": [{"layer": l, "head": h, "relevance": float(heads[l, h])}
                  for l in range(rt.n_layers) for h in range(rt.n_heads)],
        "input_heatmap": [float(x) for x in input_heatmap(rt)],
        "ledger": rt.ledger.as_dict(),
        **meta,
    }
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=1))
    if dense_path is not None:
        write_records(dense_path, {"kind": "relevance", **meta},
                      {"rel_z": rt.rel_z, "rel_attn": rt.rel_attn, "rel_embed": rt.rel_embed})
    return summary


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr
    rho = spearmanr(np.ravel(a), np.ravel(b)).statistic
    return float(rho) if not math.isnan(rho) else 0.0
