"""Dense float32 kernels: model forward pieces and relevance propagation rules.

Arrays are plain ``numpy.ndarray`` in float32. Relevance rules follow the
epsilon rule for linear maps, identity for elementwise nonlinearities and
normalisations, and an even split for bilinear products. Every backward
kernel reports the relevance it absorbed (bias share plus stabiliser loss) so
conservation can be audited end to end.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

DTYPE = np.float32
DEFAULT_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def stabilize(x: np.ndarray, eps: float) -> np.ndarray:
    """``x + eps * sign(x)`` with sign(0) taken as +1."""
    return x + np.where(x >= 0, eps, -eps).astype(x.dtype)


# ------------------------------------------------------------------ forward

def rms_norm(x: np.ndarray, gain: np.ndarray | None, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(normalized, scale)`` where ``normalized = x * scale * gain``."""
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + DTYPE(eps))
    y = x * scale
    if gain is not None:
        y = y * gain
    return y.astype(DTYPE), scale.astype(DTYPE)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, identical to torch's approximate="tanh"
    c = DTYPE(math.sqrt(2.0 / math.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))).astype(DTYPE)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(DTYPE)


def causal_mask(n: int) -> np.ndarray:
    """Boolean mask, True where key position ``j > i`` (not attendable)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# ------------------------------------------------------------------ relevance

class RelevanceLedger:
    """Named sinks for relevance that leaves the propagation graph.

    Sums are accumulated in float64.
    """

    def __init__(self):
        self.entries: dict[str, float] = defaultdict(float)

    def add(self, name: str, amount) -> None:
        amount = float(amount)
        if not math.isfinite(amount):
            raise NonFiniteError(f"non-finite relevance sunk into {name}")
        self.entries[name] += amount

    def total(self) -> float:
        return math.fsum(self.entries.values())

    def by_prefix(self, prefix: str) -> float:
        return math.fsum(v for k, v in self.entries.items() if k.startswith(prefix))

    def scaled(self, c: float) -> "RelevanceLedger":
        out = RelevanceLedger()
        for k, v in self.entries.items():
            out.entries[k] = v * c
        return out

    def as_dict(self) -> dict[str, float]:
        return dict(sorted(self.entries.items()))


def _sum64(x: np.ndarray) -> float:
    return float(np.sum(x, dtype=np.float64))


def lrp_linear_backward(inp: np.ndarray, weight: np.ndarray, output: np.ndarray,
                        rel_out: np.ndarray, eps: float = DEFAULT_EPS
                        ) -> tuple[np.ndarray, float]:
    """Epsilon rule through ``output = inp @ weight.T (+ bias)``.

    Args:
        inp: ``(..., n_in)`` activations entering the map.
        weight: ``(n_out, n_in)`` matrix.
        output: ``(..., n_out)`` recorded output, bias included.
        rel_out: relevance on ``output``, same shape.
        eps: stabiliser, must be positive.

    Returns:
        ``(rel_in, absorbed)`` where ``absorbed = sum(rel_out) - sum(rel_in)``
        is the bias share plus stabiliser loss.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    inp, weight, output, rel_out = map(as_tensor, (inp, weight, output, rel_out))
    if weight.ndim != 2 or inp.shape[-1] != weight.shape[1]:
        raise ValueError(f"shape mismatch: input {inp.shape} vs weight {weight.shape}")
    if output.shape != inp.shape[:-1] + (weight.shape[0],) or rel_out.shape != output.shape:
        raise ValueError(f"shape mismatch: output {output.shape}, rel_out {rel_out.shape}")
    ratio = rel_out / stabilize(output, eps)
    check_finite(ratio, "lrp_linear_backward ratio")
    rel_in = (inp * (ratio @ weight)).astype(DTYPE)
    check_finite(rel_in, "lrp_linear_backward")
    return rel_in, _sum64(rel_out) - _sum64(rel_in)


def lrp_bilinear_split(a: np.ndarray, b: np.ndarray, output: np.ndarray,
                       rel_out: np.ndarray, eps: float = DEFAULT_EPS
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Split relevance of ``output = a @ b`` evenly between both factors.

    ``a`` is ``(..., n, m)`` and ``b`` is ``(..., m, k)``. Within each branch the
    half share is distributed in proportion to the stabilised contributions
    ``a[n, m] * b[m, k] / output[n, k]``. Scalars and vectors are promoted.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    a, b, output, rel_out = map(as_tensor, (a, b, output, rel_out))
    a2 = a.reshape(1, 1) if a.ndim == 0 else (a[None, :] if a.ndim == 1 else a)
    b2 = b.reshape(1, 1) if b.ndim == 0 else (b[:, None] if b.ndim == 1 else b)
    if a2.shape[-1] != b2.shape[-2]:
        raise ValueError(f"shape mismatch: a {a.shape} vs b {b.shape}")
    expect = a2.shape[:-1] + b2.shape[-1:]
    out2 = output.reshape(expect) if output.size == math.prod(expect) else None
    if out2 is None or rel_out.size != out2.size:
        raise ValueError(f"shape mismatch: output {output.shape}, expected {expect}")
    ratio = 0.5 * rel_out.reshape(expect) / stabilize(out2, eps)
    check_finite(ratio, "lrp_bilinear_split ratio")
    # contribution c[n, m, k] = a[n, m] * b[m, k]
    rel_a = a2 * (ratio @ np.swapaxes(b2, -1, -2))
    rel_b = b2 * (np.swapaxes(a2, -1, -2) @ ratio)
    return rel_a.reshape(a.shape).astype(DTYPE), rel_b.reshape(b.shape).astype(DTYPE)


def lrp_sum_split(parts: list[np.ndarray], total: np.ndarray, rel_out: np.ndarray,
                  eps: float = DEFAULT_EPS) -> tuple[list[np.ndarray], float]:
    """Epsilon rule through an elementwise sum ``total = sum(parts)``."""
    ratio = as_tensor(rel_out) / stabilize(as_tensor(total), eps)
    check_finite(ratio, "lrp_sum_split ratio")
    rels = [(p * ratio).astype(DTYPE) for p in parts]
    return rels, _sum64(rel_out) - math.fsum(_sum64(r) for r in rels)


def clamp_positive(rel: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(rel), 0).astype(np.asarray(rel).dtype)
