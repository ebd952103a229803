"""Causal manipulations of attention heads during greedy generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import (Boost, InterventionSpec, Weights, forward, generate, read_records,
                    write_records)

Head = tuple[int, int]

DEFAULT_ALPHA = 2.0
BOOST_ADD = 5.0
BOOST_MULT = 1000.0
MAX_NEW_TOKENS = 20


@dataclass
class FunctionVector:
    """One head's output at the final token of a source prompt."""

    layer: int
    head: int
    vector: np.ndarray
    source_id: str = ""
    position: int = -1

    def __post_init__(self):
        self.vector = nx.as_tensor(self.vector)
        if self.vector.ndim != 1:
            raise ValueError("function vector must be one-dimensional")
        nx.check_finite(self.vector, f"function vector ({self.layer}, {self.head})")

    @property
    def key(self) -> Head:
        return (self.layer, self.head)


def _check_heads(weights: Weights, heads: Iterable[Head]) -> list[Head]:
    cfg = weights.config
    out = []
    for l, h in heads:
        if not (0 <= l < cfg.n_layers and 0 <= h < cfg.n_heads):
            raise ValueError(f"head ({l}, {h}) out of range")
        out.append((int(l), int(h)))
    return out


def ablate_heads(weights: Weights, prompt: Sequence[int], heads: Iterable[Head],
                 max_new_tokens: int = MAX_NEW_TOKENS, eos_id: int | None = None) -> list[int]:
    """Generate with the listed heads' outputs zeroed everywhere."""
    spec = InterventionSpec(ablate_heads=frozenset(_check_heads(weights, heads)))
    return generate(weights, prompt, max_new_tokens, spec if not spec.is_empty() else None, eos_id)


def extract_fv(weights: Weights, prompt: Sequence[int], heads: Iterable[Head],
               source_id: str = "") -> list[FunctionVector]:
    """Head outputs at the final prompt position, from a single forward pass."""
    heads = _check_heads(weights, heads)
    trace = forward(weights, prompt)
    pos = len(prompt) - 1
    return [FunctionVector(l, h, trace.layers[l].z[h, pos].copy(), source_id, pos)
            for l, h in heads]


def fv_spec(fvs: Sequence[FunctionVector], alpha: float, active_from: int,
            ablate: Iterable[Head] = ()) -> InterventionSpec:
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    return InterventionSpec(ablate_heads=frozenset(ablate),
                            fv_patches={fv.key: (fv.vector, float(alpha)) for fv in fvs},
                            active_from=active_from)


def patch_fv(weights: Weights, prompt: Sequence[int], fvs: Sequence[FunctionVector],
             alpha: float = DEFAULT_ALPHA, max_new_tokens: int = MAX_NEW_TOKENS,
             eos_id: int | None = None) -> list[int]:
    """Replace each FV head's output with ``alpha * vector`` at the final prompt
    position and at every generated position."""
    _check_heads(weights, [fv.key for fv in fvs])
    spec = fv_spec(fvs, alpha, len(prompt) - 1)
    return generate(weights, prompt, max_new_tokens, spec, eos_id)


def boost_spec(heads: Iterable[Head], needle_span: tuple[int, int], active_from: int,
               add: float = BOOST_ADD, mult: float = BOOST_MULT) -> InterventionSpec:
    lo, hi = needle_span
    if hi <= lo:
        raise ValueError("empty needle span")
    return InterventionSpec(boost=Boost(frozenset(heads), tuple(range(lo, hi)), add, mult),
                            active_from=active_from)


def boost_attention(weights: Weights, prompt: Sequence[int], heads: Iterable[Head],
                    needle_span: tuple[int, int], max_new_tokens: int = MAX_NEW_TOKENS,
                    eos_id: int | None = None, add: float = BOOST_ADD,
                    mult: float = BOOST_MULT) -> list[int]:
    """Generate with needle-key scores raised as ``mult * (score + add)``.

    Applies to the listed heads at the final prompt position and every
    generated position; softmax renormalises afterwards.
    """
    heads = _check_heads(weights, heads)
    lo, hi = needle_span
    if hi <= lo:
        raise ValueError("empty needle span")
    if not (0 <= lo and hi <= len(prompt)):
        raise ValueError("needle span outside the prompt")
    if not heads:
        return generate(weights, prompt, max_new_tokens, None, eos_id)
    spec = boost_spec(heads, needle_span, len(prompt) - 1, add, mult)
    return generate(weights, prompt, max_new_tokens, spec, eos_id)


# ------------------------------------------------------------ FV banks

def save_fv_bank(path: str | Path, fvs: Sequence[FunctionVector], **meta) -> None:
    tensors = {f"fv/{i:05d}": fv.vector for i, fv in enumerate(fvs)}
    index = [{"layer": fv.layer, "head": fv.head, "source_id": fv.source_id,
              "position": fv.position} for fv in fvs]
    write_records(path, {"kind": "fv_bank", "tensors": sorted(tensors), "index": index, **meta},
                  tensors)


def load_fv_bank(path: str | Path) -> list[FunctionVector]:
    header, tensors = read_records(path)
    if header.get("kind") != "fv_bank":
        raise ValueError(f"{path} is not an FV bank")
    return [FunctionVector(e["layer"], e["head"], tensors[f"fv/{i:05d}"], e["source_id"],
                           e["position"]) for i, e in enumerate(header["index"])]


def save_spec(path: str | Path, spec: InterventionSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), sort_keys=True, indent=1))


def load_spec(path: str | Path) -> InterventionSpec:
    return InterventionSpec.from_json(json.loads(Path(path).read_text()))
