import numpy as np
import pytest
import torch

from headatlas.model import (FORMAT_VERSION, MAGIC, Boost, InterventionSpec, ModelConfig,
                             checkpoint_roundtrip, forward, generate, init_weights,
                             load_weights, next_token_logits, read_records, save_weights,
                             tensor_shapes)

from oracles import fused_attention


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_per_head_sum_matches_fused_attention(seed):
    cfg = ModelConfig(n_layers=2, n_heads=4, model_dim=32, mlp_dim=64, vocab_size=40,
                      max_seq_len=24)
    w = init_weights(cfg, seed)
    toks = np.random.default_rng(seed).integers(0, 40, 17)
    tr = forward(w, toks)
    for l in range(cfg.n_layers):
        ref = fused_attention(w, l, tr.layers[l].norm1)
        assert np.max(np.abs(tr.layers[l].attn_out - ref)) < 1e-5


def test_shapes_and_trace(tiny):
    tr = forward(tiny, [1, 2, 3, 4])
    lt = tr.layers[0]
    assert tr.logits.shape == (4, 50)
    assert lt.attn.shape == (2, 4, 4) and lt.z.shape == (2, 4, 8)
    assert np.allclose(lt.attn.sum(-1), 1, atol=1e-6)
    assert np.all(np.triu(lt.attn[0], 1) == 0)


def test_single_token_forward(tiny):
    tr = forward(tiny, [7])
    assert tr.logits.shape == (1, 50)
    assert np.allclose(tr.layers[0].attn, 1.0)


def test_forward_errors(tiny):
    with pytest.raises(ValueError):
        forward(tiny, [])
    with pytest.raises(ValueError):
        forward(tiny, list(range(33)))
    with pytest.raises(ValueError):
        forward(tiny, [50])


def test_bad_config():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_init_is_deterministic():
    cfg = ModelConfig(n_layers=1, n_heads=2, model_dim=8, mlp_dim=16, vocab_size=10, max_seq_len=8)
    a, b = init_weights(cfg, 4), init_weights(cfg, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert set(a.tensors) == set(tensor_shapes(cfg))


def test_ablation_zeroes_head_output(tiny):
    spec = InterventionSpec(ablate_heads=frozenset({(1, 0)}))
    tr = forward(tiny, [1, 2, 3], spec)
    assert not tr.layers[1].z[0].any()
    assert tr.layers[1].z[1].any()


def test_empty_spec_matches_plain(tiny):
    toks = [3, 1, 4, 1, 5]
    assert np.array_equal(forward(tiny, toks).logits, forward(tiny, toks, InterventionSpec()).logits)


def test_fv_patch_leaves_earlier_layers(tiny):
    toks = [3, 1, 4, 1, 5]
    base = forward(tiny, toks)
    vec = np.ones(8, np.float32)
    spec = InterventionSpec(fv_patches={(1, 1): (vec, 2.0)}, active_from=4)
    tr = forward(tiny, toks, spec)
    assert np.array_equal(tr.layers[0].out, base.layers[0].out)
    assert np.array_equal(tr.layers[1].z[1, :4], base.layers[1].z[1, :4])
    assert np.allclose(tr.layers[1].z[1, 4], 2.0)


def test_self_patch_identity(tiny):
    toks = [3, 1, 4, 1, 5]
    base = forward(tiny, toks)
    spec = InterventionSpec(fv_patches={(0, 1): (base.layers[0].z[1, 4], 1.0)}, active_from=4)
    assert np.array_equal(forward(tiny, toks, spec).logits, base.logits)


def test_boost_scores_and_stochastic_rows(tiny):
    toks = [3, 1, 4, 1, 5, 9]
    spec = InterventionSpec(boost=Boost(frozenset({(0, 0)}), (1,), 5.0, 1000.0), active_from=5)
    tr = forward(tiny, toks, spec)
    assert np.allclose(tr.layers[0].attn.sum(-1), 1, atol=1e-5)
    assert tr.layers[0].attn[0, 5, 1] > 0.999
    base = forward(tiny, toks)
    assert np.array_equal(tr.layers[0].attn[0, :5], base.layers[0].attn[0, :5])
    assert np.array_equal(tr.layers[0].attn[1], base.layers[0].attn[1])


def test_invalid_interventions(tiny):
    with pytest.raises(ValueError):
        forward(tiny, [1, 2], InterventionSpec(ablate_heads=frozenset({(5, 0)})))
    with pytest.raises(ValueError):
        forward(tiny, [1, 2], InterventionSpec(fv_patches={(0, 0): (np.ones(3), 1.0)},
                                               active_from=1))
    with pytest.raises(ValueError):
        forward(tiny, [1, 2], InterventionSpec(fv_patches={(0, 0): (np.ones(8), 1.0)}))


def test_spec_json_roundtrip():
    spec = InterventionSpec(ablate_heads=frozenset({(0, 1)}),
                            fv_patches={(1, 0): (np.arange(8, dtype=np.float32), 2.0)},
                            boost=Boost(frozenset({(1, 1)}), (2, 3), 5.0, 1000.0), active_from=4)
    back = InterventionSpec.from_json(spec.to_json())
    assert back.to_json() == spec.to_json()


def test_generate_respects_limits(tiny):
    out = generate(tiny, [1, 2, 3], max_new_tokens=5)
    assert len(out) == 5
    logits = next_token_logits(tiny, [1, 2, 3])
    assert out[0] == int(np.argmax(logits))
    assert generate(tiny, [1, 2, 3], 5, eos_id=3) == []
    assert len(generate(tiny, list(range(30)), 10)) == 2    # context fills at 32


def test_generate_stops_at_eos(tiny):
    first = int(np.argmax(next_token_logits(tiny, [1, 2, 3])))
    assert generate(tiny, [1, 2, 3], 5, eos_id=first) == []


def test_checkpoint_roundtrip_bitwise(tiny, tmp_path):
    back = checkpoint_roundtrip(tiny, tmp_path / "w.hatl")
    assert back.config == tiny.config
    assert all(np.array_equal(back[k], tiny[k]) for k in tiny.tensors)
    raw = (tmp_path / "w.hatl").read_bytes()
    assert raw[:4] == MAGIC and int.from_bytes(raw[4:8], "little") == FORMAT_VERSION
    save_weights(tiny, tmp_path / "w2.hatl")
    assert (tmp_path / "w2.hatl").read_bytes() == raw


def test_checkpoint_corruption(tiny, tmp_path):
    p = tmp_path / "w.hatl"
    save_weights(tiny, p, {"note": "x"})
    assert load_weights(p).meta["note"] == "x"
    raw = p.read_bytes()
    (tmp_path / "trunc.hatl").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "trunc.hatl")
    (tmp_path / "magic.hatl").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_records(tmp_path / "magic.hatl")
    (tmp_path / "ver.hatl").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError):
        read_records(tmp_path / "ver.hatl")
