"""Decoder-only transformer with an explicitly per-head attention block.

The forward pass runs in numpy float32 and records everything attribution
needs (``ForwardTrace``). Each head computes ``z_i = sum_j A_ij (W_V x_j)`` and
the block output is the sum over heads of ``W_O^h z^h``, which is what makes
per-head interventions (ablation, output patching, score boosting) direct.

Architecture: learned token + absolute position embeddings, pre-norm residual
blocks with RMS normalisation, tanh-GELU MLP with biases, final RMS norm and
an untied unembedding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx

Head = tuple[int, int]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 8
    model_dim: int = 128
    mlp_dim: int = 256
    vocab_size: int = 512
    max_seq_len: int = 96
    norm_eps: float = 1e-5
    seed: int = 0
    use_norm: bool = True
    use_mlp: bool = True

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "model_dim", "mlp_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def heads(self) -> list[Head]:
        return [(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, dh, m = cfg.model_dim, cfg.n_heads, cfg.head_dim, cfg.mlp_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d),
              "W_U": (cfg.vocab_size, d)}
    if cfg.use_norm:
        shapes["ln_f.g"] = (d,)
    for l in range(cfg.n_layers):
        p = f"L{l}."
        shapes.update({p + "attn.W_Q": (H, dh, d), p + "attn.W_K": (H, dh, d),
                       p + "attn.W_V": (H, dh, d), p + "attn.W_O": (H, d, dh)})
        if cfg.use_norm:
            shapes[p + "ln1.g"] = (d,)
        if cfg.use_mlp:
            shapes.update({p + "mlp.W_in": (m, d), p + "mlp.b_in": (m,),
                           p + "mlp.W_out": (d, m), p + "mlp.b_out": (d,)})
            if cfg.use_norm:
                shapes[p + "ln2.g"] = (d,)
    return shapes


@dataclass
class Weights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        shapes = tensor_shapes(self.config)
        missing = set(shapes) - set(self.tensors)
        extra = set(self.tensors) - set(shapes)
        if missing or extra:
            raise ValueError(f"weights do not match config: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, shape in shapes.items():
            t = nx.as_tensor(self.tensors[name])
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape} != {shape}")
            self.tensors[name] = t

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def W_O(self, layer: int, head: int) -> np.ndarray:
        """Per-head output projection, ``(d, d_h)``."""
        return self.tensors[f"L{layer}.attn.W_O"][head]


def init_weights(cfg: ModelConfig, seed: int | None = None) -> Weights:
    """Small random weights (GPT-2 style scale), deterministic under ``seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in sorted(tensor_shapes(cfg).items()):
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, nx.DTYPE)
        elif ".b_" in name:
            tensors[name] = np.zeros(shape, nx.DTYPE)
        else:
            std = 0.02 if "emb" in name or name == "W_U" else 1.0 / np.sqrt(shape[-1])
            tensors[name] = rng.normal(0.0, std, size=shape).astype(nx.DTYPE)
    return Weights(cfg, tensors)


# ------------------------------------------------------------ interventions

@dataclass(frozen=True)
class Boost:
    """Additive then multiplicative change of pre-softmax scores on needle keys."""

    heads: frozenset
    positions: tuple[int, ...]
    add: float = 5.0
    mult: float = 1000.0


@dataclass
class InterventionSpec:
    """Per-head interventions for one forward pass or generation.

    ``active_from`` is the index of the final prompt token; FV patches and the
    score boost act on that position and every later (generated) position.
    """

    ablate_heads: frozenset = frozenset()
    fv_patches: dict = field(default_factory=dict)
    boost: Boost | None = None
    active_from: int | None = None

    def is_empty(self) -> bool:
        return not self.ablate_heads and not self.fv_patches and (
            self.boost is None or not self.boost.heads)

    def validate(self, cfg: ModelConfig, prompt_len: int | None = None) -> None:
        heads = set(self.ablate_heads) | set(self.fv_patches)
        if self.boost is not None:
            heads |= set(self.boost.heads)
        for l, h in heads:
            if not (0 <= l < cfg.n_layers and 0 <= h < cfg.n_heads):
                raise ValueError(f"head ({l}, {h}) out of range for "
                                 f"{cfg.n_layers}x{cfg.n_heads} model")
        for (l, h), (vec, alpha) in self.fv_patches.items():
            if np.shape(vec) != (cfg.head_dim,):
                raise ValueError(f"FV for head ({l}, {h}) has shape {np.shape(vec)}")
            if not alpha > 0:
                raise ValueError("FV scale alpha must be > 0")
        if self.boost is not None:
            if not self.boost.positions:
                raise ValueError("boost needs at least one needle position")
            if prompt_len is not None and max(self.boost.positions) >= prompt_len:
                raise ValueError("needle position outside the prompt")
        if (self.fv_patches or self.boost is not None) and self.active_from is None:
            raise ValueError("active_from must be set for FV patches and boosts")

    def to_json(self) -> dict:
        return {
            "ablate_heads": sorted([list(h) for h in self.ablate_heads]),
            "fv_patches": [{"layer": l, "head": h, "alpha": float(a),
                            "vector": [float(x) for x in v]}
                           for (l, h), (v, a) in sorted(self.fv_patches.items())],
            "boost": None if self.boost is None else {
                "heads": sorted([list(h) for h in self.boost.heads]),
                "positions": list(self.boost.positions),
                "add": self.boost.add, "mult": self.boost.mult},
            "active_from": self.active_from,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "InterventionSpec":
        b = d.get("boost")
        return cls(
            ablate_heads=frozenset(tuple(h) for h in d.get("ablate_heads", [])),
            fv_patches={(p["layer"], p["head"]): (np.asarray(p["vector"], nx.DTYPE), p["alpha"])
                        for p in d.get("fv_patches", [])},
            boost=None if b is None else Boost(frozenset(tuple(h) for h in b["heads"]),
                                               tuple(b["positions"]), b["add"], b["mult"]),
            active_from=d.get("active_from"),
        )


# ------------------------------------------------------------------ forward

@dataclass
class LayerTrace:
    resid: np.ndarray          # (S, d) residual entering the block
    norm1: np.ndarray          # (S, d)
    q: np.ndarray              # (H, S, dh)
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray         # (H, S, S) pre-softmax, masked entries stored as 0
    attn: np.ndarray           # (H, S, S)
    z: np.ndarray              # (H, S, dh)
    attn_out: np.ndarray       # (S, d)
    mid: np.ndarray            # (S, d) resid + attn_out
    norm2: np.ndarray | None = None
    mlp_pre: np.ndarray | None = None
    mlp_act: np.ndarray | None = None
    mlp_out: np.ndarray | None = None
    out: np.ndarray | None = None


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    embed: np.ndarray          # (S, d)
    layers: list[LayerTrace]
    final_resid: np.ndarray
    final_norm: np.ndarray
    logits: np.ndarray         # (S, V)


def forward(weights: Weights, tokens, interventions: InterventionSpec | None = None
            ) -> ForwardTrace:
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    S = len(tokens)
    if S == 0:
        raise ValueError("empty token sequence")
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence of {S} tokens exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    iv = interventions
    if iv is not None:
        iv.validate(cfg)
    W = weights.tensors
    H, dh = cfg.n_heads, cfg.head_dim
    mask = nx.causal_mask(S)
    inv_sqrt = nx.DTYPE(1.0 / np.sqrt(dh))

    x = (W["tok_emb"][tokens] + W["pos_emb"][:S]).astype(nx.DTYPE)
    embed = x
    layers = []
    for l in range(cfg.n_layers):
        p = f"L{l}."
        n1 = nx.rms_norm(x, W[p + "ln1.g"], cfg.norm_eps)[0] if cfg.use_norm else x
        q = np.einsum("hkd,sd->hsk", W[p + "attn.W_Q"], n1, optimize=True)
        k = np.einsum("hkd,sd->hsk", W[p + "attn.W_K"], n1, optimize=True)
        v = np.einsum("hkd,sd->hsk", W[p + "attn.W_V"], n1, optimize=True)
        scores = (q @ np.swapaxes(k, 1, 2)) * inv_sqrt
        if iv is not None and iv.boost is not None and iv.boost.heads:
            rows = np.arange(iv.active_from, S)
            cols = np.asarray(iv.boost.positions)
            for (bl, bh) in iv.boost.heads:
                if bl == l and len(rows):
                    blk = scores[bh][np.ix_(rows, cols)]
                    scores[bh][np.ix_(rows, cols)] = (blk + iv.boost.add) * iv.boost.mult
        scores = np.where(mask, 0.0, scores).astype(nx.DTYPE)
        attn = nx.softmax(np.where(mask, -np.inf, scores))
        if iv is not None:
            for (al, ah) in iv.ablate_heads:
                if al == l:
                    attn[ah] = 0.0
        z = (attn @ v).astype(nx.DTYPE)
        if iv is not None and iv.fv_patches:
            for (fl, fh), (vec, alpha) in iv.fv_patches.items():
                if fl == l:
                    z[fh, iv.active_from:] = nx.DTYPE(alpha) * nx.as_tensor(vec)
        attn_out = np.einsum("hdk,hsk->sd", W[p + "attn.W_O"], z, optimize=True).astype(nx.DTYPE)
        mid = (x + attn_out).astype(nx.DTYPE)
        lt = LayerTrace(x, n1, q, k, v, scores, attn, z, attn_out, mid)
        if cfg.use_mlp:
            n2 = nx.rms_norm(mid, W[p + "ln2.g"], cfg.norm_eps)[0] if cfg.use_norm else mid
            pre = (n2 @ W[p + "mlp.W_in"].T + W[p + "mlp.b_in"]).astype(nx.DTYPE)
            act = nx.gelu(pre)
            mlp_out = (act @ W[p + "mlp.W_out"].T + W[p + "mlp.b_out"]).astype(nx.DTYPE)
            out = (mid + mlp_out).astype(nx.DTYPE)
            lt.norm2, lt.mlp_pre, lt.mlp_act, lt.mlp_out = n2, pre, act, mlp_out
        else:
            out = mid
        lt.out = out
        nx.check_finite(out, f"layer {l} output")
        layers.append(lt)
        x = out
    fn = nx.rms_norm(x, W["ln_f.g"], cfg.norm_eps)[0] if cfg.use_norm else x
    logits = (fn @ W["W_U"].T).astype(nx.DTYPE)
    nx.check_finite(logits, "logits")
    return ForwardTrace(tokens, embed, layers, x, fn, logits)


def generate(weights: Weights, prompt, max_new_tokens: int = 20,
             interventions: InterventionSpec | None = None, eos_id: int | None = None
             ) -> list[int]:
    """Greedy continuation of ``prompt``.

    Stops at ``eos_id`` (not included in the output), after ``max_new_tokens``
    or when the context window is full. Interventions are re-applied to the
    final prompt position and every generated position.
    """
    cfg = weights.config
    seq = [int(t) for t in prompt]
    if not seq:
        raise ValueError("empty prompt")
    if len(seq) > cfg.max_seq_len:
        raise ValueError(f"prompt of {len(seq)} tokens exceeds max_seq_len={cfg.max_seq_len}")
    if eos_id is not None and seq[-1] == eos_id:
        return []
    if interventions is not None:
        interventions.validate(cfg, prompt_len=len(seq))
    out: list[int] = []
    while len(out) < max_new_tokens and len(seq) < cfg.max_seq_len:
        trace = forward(weights, seq, interventions)
        nxt = int(np.argmax(trace.logits[-1]))
        if eos_id is not None and nxt == eos_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def next_token_logits(weights: Weights, tokens, interventions: InterventionSpec | None = None
                      ) -> np.ndarray:
    return forward(weights, tokens, interventions).logits[-1]


# --------------------------------------------------------- tensor records

MAGIC = b"HATL"
FORMAT_VERSION = 1


def write_records(path: str | Path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a header JSON plus named float32 tensors in name order."""
    meta = json.dumps(dict(header), sort_keys=True, ensure_ascii=False).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def read_records(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}: expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"truncated file {path}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (n,) = struct.unpack("<I", take(4))
    header = json.loads(take(n).decode("utf-8"))
    tensors = {}
    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(nx.DTYPE)
        tensors[name] = data.reshape(shape)
    expected = header.get("tensors")
    if expected is not None and sorted(expected) != sorted(tensors):
        raise ValueError(f"truncated file {path}: expected {len(expected)} tensors, "
                         f"found {len(tensors)}")
    return header, tensors


def save_weights(weights: Weights, path: str | Path, extra: Mapping | None = None) -> None:
    header = {"kind": "weights", "config": weights.config.to_json(),
              "tensors": sorted(weights.tensors), **(extra or {})}
    write_records(path, header, weights.tensors)


def load_weights(path: str | Path) -> Weights:
    header, tensors = read_records(path)
    if header.get("kind") != "weights":
        raise ValueError(f"{path} is not a weights checkpoint")
    meta = {k: v for k, v in header.items() if k not in ("kind", "config", "tensors")}
    return Weights(ModelConfig.from_json(header["config"]), tensors, meta)


def checkpoint_roundtrip(weights: Weights, path: str | Path) -> Weights:
    save_weights(weights, path)
    return load_weights(path)
