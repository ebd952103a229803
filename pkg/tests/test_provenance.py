import numpy as np
import pytest

from headatlas import provenance as pv
from headatlas.model import forward


def sample(i, label, feats, heads=((0, 0), (1, 1)), attn=None, span=(2, 3)):
    return pv.ProbeSample(f"ex{i}", tuple(heads), np.asarray(feats, float), 1, label, attn,
                          span, (1, 6))


def synthetic(n, seed, sep=3.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(sample(i, 1, rng.normal(sep, 1, 2)))
        out.append(sample(i, 0, rng.normal(0, 1, 2)))
    return out


def test_logit_lens_matches_manual(tiny):
    tr = forward(tiny, [1, 2, 3])
    z = tr.layers[1].z[0, -1]
    x = tiny.W_O(1, 0) @ z
    x = x / np.sqrt(np.mean(x * x) + tiny.config.norm_eps) * tiny["ln_f.g"]
    assert pv.logit_lens_score(tiny, z, (1, 0), 7) == pytest.approx(float(x @ tiny["W_U"][7]),
                                                                    rel=1e-5)


def test_logit_lens_errors(tiny):
    with pytest.raises(pv.ZeroInputError):
        pv.logit_lens_score(tiny, np.zeros(8), (0, 0), 1)
    with pytest.raises(ValueError):
        pv.logit_lens_score(tiny, np.ones(8), (0, 0), 500)


def test_split_is_grouped_by_prompt():
    split = pv.split_samples(synthetic(40, 0), 0)
    ids = [{s.example_id for s in p} for p in (split.train, split.dev, split.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert len(split.train) == 40 and len(split.dev) == 20 and len(split.test) == 20
    with pytest.raises(ValueError):
        pv.ProbeSplit(split.train, split.train[:2], [], 0)


def test_probe_separates_and_threshold_is_consistent():
    split = pv.split_samples(synthetic(100, 1), 0)
    probe = pv.train_probe(split)
    assert probe.dev_auc > 0.95 and probe.ridge == 0.0
    res = pv.evaluate_probe(probe, split.test)
    assert res["auc"] > 0.95 and res["accuracy"] > 0.85
    s = split.test[0]
    label, score = pv.classify_source(probe, s)
    assert (label == pv.CONTEXTUAL) == (score >= probe.threshold)
    tie = pv.ProbeSample("t", s.heads, np.zeros(2), 1, 1)
    tie_probe = pv.ProbeModel(s.heads, np.ones(2), 0.0, 1.0, 0)
    assert pv.classify_source(tie_probe, tie)[0] == pv.CONTEXTUAL


def test_probe_chance_on_identical_distributions():
    rng = np.random.default_rng(2)
    samples = [sample(i, i % 2, rng.normal(0, 1, 2)) for i in range(400)]
    split = pv.split_samples(samples, 0)
    assert abs(pv.train_probe(split).dev_auc - 0.5) < 0.15


def test_collinear_features_use_ridge():
    rng = np.random.default_rng(3)
    out = []
    for i in range(60):
        x = rng.normal(2, 1)
        out.append(sample(i, 1, [x, x]))
        y = rng.normal(0, 1)
        out.append(sample(i, 0, [y, y]))
    probe = pv.train_probe(pv.split_samples(out, 0))
    assert probe.ridge == pv.RIDGE and np.all(np.isfinite(probe.weights))


def test_probe_needs_both_classes():
    only = [sample(i, 1, [1.0, 2.0]) for i in range(100)]
    with pytest.raises(ValueError):
        pv.train_probe(pv.split_samples(only, 0))


def test_probe_save_load(tmp_path):
    probe = pv.train_probe(pv.split_samples(synthetic(60, 4), 0))
    probe.save(tmp_path / "p.json", config_hash="h")
    back = pv.ProbeModel.load(tmp_path / "p.json")
    assert np.array_equal(back.weights, probe.weights) and back.meta["config_hash"] == "h"


def test_localisation_weighted_vs_uniform():
    heads = ((0, 0), (0, 1))
    attn = np.zeros((2, 6))
    attn[0, 2] = 1.0      # the copying head looks at the answer
    attn[1, 4] = 1.0      # the other head looks elsewhere, slightly more on average
    attn[1, 2] = 0.0
    s = pv.ProbeSample("e", heads, np.array([2.0, 0.5]), 1, 1, attn, (2, 3), (1, 6))
    probe = pv.ProbeModel(heads, np.array([1.0, 0.1]), 0.0, 1.0, 0)
    pos, amap = pv.localize_source(probe, s)
    assert pos == 2 and np.allclose(amap, 2.0 * attn[0] + 0.05 * attn[1])
    assert pv.localization_accuracy(probe, [s]) == 1.0
    with pytest.raises(ValueError):
        pv.aggregate_attention(probe, pv.ProbeSample("e", heads, np.ones(2), 1, 1))


def test_make_samples(tiny):
    tr = forward(tiny, [1, 2, 3, 4, 5])
    s = pv.make_samples(tiny, tr, [(0, 0), (1, 1)], "x", 7, 8, (1, 2), (1, 4))
    assert [x.label for x in s] == [1, 0] and s[0].attn.shape == (2, 5)
    assert s[0].features.shape == (2,)
