import json

import numpy as np
import pytest

from headatlas.attribution import (AttributionError, attribute, export_relevance, head_relevance,
                                   input_heatmap, normalized_head_relevance, spearman,
                                   token_head_relevance)
from headatlas.model import InterventionSpec, forward, read_records

from oracles import linear_input_contribution, linear_toy


def test_conservation_on_random_prompts(tiny, rng):
    for _ in range(20):
        toks = rng.integers(0, 50, rng.integers(1, 30))
        tr = forward(tiny, toks)
        rt = attribute(tiny, tr, int(np.argmax(tr.logits[-1])), len(toks) - 1)
        assert rt.audit_error() < 1e-3


def test_ledger_names(tiny):
    tr = forward(tiny, [1, 2, 3])
    rt = attribute(tiny, tr, 4, 2)
    keys = rt.ledger.as_dict()
    for l in range(2):
        for h in range(2):
            assert f"qk-termination:L{l}.h{h}" in keys
        assert f"bias:L{l}.mlp_out" in keys


@pytest.mark.parametrize("seed", range(4))
def test_linear_case_matches_closed_form(seed):
    w = linear_toy(seed)
    toks = np.random.default_rng(seed).integers(0, 30, 8)
    tr = forward(w, toks)
    t = int(np.argmax(tr.logits[7]))
    rt = attribute(w, tr, t, 7, eps=1e-9)
    ref = linear_input_contribution(w, tr, t, 7)
    assert np.max(np.abs(rt.rel_embed - ref)) <= 1e-5 * max(1.0, np.max(np.abs(ref)))


def test_fully_ablated_linear_model_is_gradient_times_input():
    w = linear_toy(0)
    toks = [3, 4, 5]
    spec = InterventionSpec(ablate_heads=frozenset(w.config.heads()))
    tr = forward(w, toks, spec)
    rt = attribute(w, tr, 2, 2, eps=1e-9)
    expect = np.zeros_like(rt.rel_embed)
    expect[2] = tr.embed[2] * w["W_U"][2]
    assert np.allclose(rt.rel_embed, expect, atol=1e-5)


def test_single_token_sequence(tiny):
    tr = forward(tiny, [5])
    rt = attribute(tiny, tr, 3, 0)
    assert rt.rel_embed.shape == (1, 16) and rt.audit_error() < 1e-3


def test_zero_seed_gives_zero_relevance(tiny):
    tr = forward(tiny, [1, 2, 3])
    rt = attribute(tiny, tr, 4, 2, seed=0.0)
    assert not rt.rel_embed.any() and not rt.rel_z.any()


def test_relevance_is_linear_in_seed(tiny):
    tr = forward(tiny, [1, 2, 3])
    a = attribute(tiny, tr, 4, 2, seed=1.0)
    b = attribute(tiny, tr, 4, 2, seed=3.0)
    assert np.allclose(3 * a.rel_embed, b.rel_embed, rtol=1e-4, atol=1e-7)


def test_bad_target(tiny):
    tr = forward(tiny, [1, 2, 3])
    with pytest.raises(ValueError):
        attribute(tiny, tr, 99, 2)
    with pytest.raises(ValueError):
        attribute(tiny, tr, 1, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_trace_raises(tiny):
    tr = forward(tiny, [1, 2, 3])
    tr.layers[1].z[0, 0, 0] = np.inf
    with pytest.raises(AttributionError):
        attribute(tiny, tr, 1, 2)


def test_future_positions_get_nothing(tiny):
    tr = forward(tiny, [1, 2, 3, 4, 5])
    rt = attribute(tiny, tr, 1, 2)
    assert not rt.rel_embed[3:].any()
    assert not rt.rel_z[:, :, 3:].any()


def test_summaries(tiny):
    tr = forward(tiny, [1, 2, 3, 4])
    rt = attribute(tiny, tr, 1, 3)
    hr = head_relevance(rt)
    assert hr.shape == (2, 2) and np.all(hr >= 0)
    assert np.isclose(normalized_head_relevance(rt).sum(), 1.0)
    assert token_head_relevance(rt).shape == (2, 2, 4)
    assert np.all(token_head_relevance(rt) >= 0)
    assert input_heatmap(rt).shape == (4,)


def test_export(tiny, tmp_path):
    tr = forward(tiny, [1, 2, 3, 4])
    rt = attribute(tiny, tr, 1, 3)
    export_relevance(rt, tmp_path / "r.json", tmp_path / "r.hatl", example_id="x")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["example_id"] == "x" and len(d["heads"]) == 4
    _, arrays = read_records(tmp_path / "r.hatl")
    assert np.array_equal(arrays["rel_attn"], rt.rel_attn)


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0
