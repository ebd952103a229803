"""Independent reference computations used by several test modules."""

import numpy as np
import torch

from headatlas.model import ModelConfig, init_weights


def linear_toy(seed: int, n_layers: int = 2, n_heads: int = 2, d: int = 16, vocab: int = 30):
    """No norms, no MLP, unit-scale weights so no activation sits near zero by accident."""
    cfg = ModelConfig(n_layers=n_layers, n_heads=n_heads, model_dim=d, mlp_dim=2 * d,
                      vocab_size=vocab, max_seq_len=16, use_norm=False, use_mlp=False)
    w = init_weights(cfg, seed)
    for k, v in w.tensors.items():
        scale = 1.0 if ("emb" in k or k == "W_U") else 0.25
        w.tensors[k] = (v / v.std() * scale).astype(np.float32)
    return w


def linear_input_contribution(weights, trace, token: int, pos: int) -> np.ndarray:
    """Closed-form embedding relevance for the linear toy.

    Attention weights are frozen at their traced values, which makes the
    logit linear in the embeddings. Half of every value-path contribution is
    credited to the attention weights instead of the values, so each attention
    block enters with factor 0.5. Relevance is input times the gradient of
    that map, read off column by column in float64.
    """
    cfg = weights.config
    W = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    A = [lt.attn.astype(np.float64) for lt in trace.layers]

    def f(x):
        for l in range(cfg.n_layers):
            v = np.einsum("hkd,sd->hsk", W[f"L{l}.attn.W_V"], x)
            x = x + 0.5 * np.einsum("hdk,hsk->sd", W[f"L{l}.attn.W_O"], A[l] @ v)
        return W["W_U"][token] @ x[pos]

    x = trace.embed.astype(np.float64)
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            e = np.zeros_like(x)
            e[i, j] = 1.0
            grad[i, j] = f(e)
    return x * grad


def fused_attention(weights, layer, x):
    """Reference multi-head attention with concatenated head matrices."""
    cfg = weights.config
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.model_dim
    W = {k: torch.from_numpy(v.astype(np.float64)) for k, v in weights.tensors.items()}
    p = f"L{layer}.attn."
    X = torch.from_numpy(x.astype(np.float64))
    Wq, Wk, Wv = (W[p + n].reshape(H * dh, d) for n in ("W_Q", "W_K", "W_V"))
    Wo = W[p + "W_O"].permute(1, 0, 2).reshape(d, H * dh)
    S = X.shape[0]
    q = (X @ Wq.T).reshape(S, H, dh).transpose(0, 1)
    k = (X @ Wk.T).reshape(S, H, dh).transpose(0, 1)
    v = (X @ Wv.T).reshape(S, H, dh).transpose(0, 1)
    o = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True)
    return (o.transpose(0, 1).reshape(S, H * dh) @ Wo.T).numpy()
