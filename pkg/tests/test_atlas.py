import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headatlas import corpus as cp
from headatlas.atlas import (HeadScoreTable, HeadSet, ScoreAccumulator, attention_mass_scores,
                             difference_scores, layerwise_profile, overlap_fraction,
                             random_heads, select_heads, specialization_scores)
from headatlas.attribution import attribute, token_head_relevance
from headatlas.model import forward

scores = arrays(np.float64, (3, 4), elements=st.floats(-5, 5, allow_nan=False))


def table_from(D):
    z = np.zeros_like(D)
    return HeadScoreTable(D, z, z.copy(), z.copy())


def test_difference_arithmetic():
    op = [np.array([[0.8, 0.2]])]
    cl = [np.array([[0.1, 0.9]])]
    t = difference_scores(op, cl)
    assert np.allclose(t.D, [[0.7, -0.7]])
    assert t.n_open == 1 and t.n_closed == 1


def test_identical_means_give_zero():
    x = [np.ones((2, 2)), 3 * np.ones((2, 2))]
    assert not difference_scores(x, x[::-1]).D.any()


@settings(max_examples=30, deadline=None)
@given(scores, scores)
def test_antisymmetry(a, b):
    assert np.array_equal(difference_scores([a], [b]).D, -difference_scores([b], [a]).D)


def test_difference_errors():
    with pytest.raises(ValueError):
        difference_scores([], [np.ones((1, 1))])
    with pytest.raises(ValueError):
        difference_scores([np.ones((1, 2))], [np.ones((2, 2))])


def test_tie_break_and_full_sort():
    t = table_from(np.array([[5.0, 5.0, 1.0]]))
    assert select_heads(t, 1, "desc").heads == [(0, 0)]
    assert select_heads(t, 3, "desc").heads == [(0, 0), (0, 1), (0, 2)]
    with pytest.raises(ValueError):
        select_heads(t, 0)
    with pytest.raises(ValueError):
        select_heads(t, 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.integers(-3, 3).map(float)))
def test_desc_asc_reverse_up_to_ties(D):
    t = table_from(D)
    desc = select_heads(t, 12, "desc").heads
    asc = select_heads(t, 12, "asc").heads
    assert [D[h] for h in desc] == [D[h] for h in reversed(asc)]
    assert select_heads(t, 5, "desc").heads == desc[:5]


def test_headset_invariants():
    with pytest.raises(ValueError):
        HeadSet([(0, 0), (0, 0)], "ctx", 2)
    with pytest.raises(ValueError):
        HeadSet([(0, 0), (0, 1)], "ctx", 1)
    hs = HeadSet([(1, 0)], "ret", 4)
    assert HeadSet.from_json(hs.to_json()) == hs


def test_random_heads():
    a = random_heads((4, 4), 5, 0)
    assert a == random_heads((4, 4), 5, 0) and len(set(a.heads)) == 5
    b = random_heads((4, 4), 5, 0, exclude=a.heads)
    assert not set(a.heads) & set(b.heads)


def test_accumulator_merge_is_order_free():
    xs = [np.random.default_rng(i).normal(size=(2, 3)) for i in range(6)]
    a, b = ScoreAccumulator((2, 3)), ScoreAccumulator((2, 3))
    for x in xs[:2]:
        a.add("k", x)
    for x in xs[2:]:
        b.add("k", x)
    assert np.allclose(a.merge(b).mean("k"), b.merge(a).mean("k"))
    assert np.allclose(a.merge(b).mean("k"), np.mean(xs, axis=0))
    with pytest.raises(ValueError):
        a.add("k", np.ones((3, 3)))


def test_csv_roundtrip():
    rng = np.random.default_rng(0)
    t = HeadScoreTable(*(rng.random((2, 3)) for _ in range(4)))
    text = t.to_csv()
    assert text.splitlines()[0] == "layer,head,r_open,r_closed,D,rho_task,rho_ret"
    back = HeadScoreTable.from_csv("# comment\n" + text)
    assert np.allclose(back.D, t.D, rtol=1e-8) and np.allclose(back.rho_ret, t.rho_ret, rtol=1e-8)


def test_specialisation_on_real_traces(small_lm, records, tok):
    items = []
    for r, other in zip(records[:4], records[4:8]):
        attr = next(a for a in cp.ATTRIBUTES if r.value(a) != other.value(a))
        ex = cp.build_qa_example(r, "counterfactual", attr, other)
        tr = forward(small_lm, tok.encode(ex.prompt))
        items.append((attribute(small_lm, tr, tok.id(cp.words(ex.counterfactual)[0]),
                                len(ex.prompt) - 1), ex))
    t = specialization_scores(items)
    assert np.all(t.rho_task >= 0) and np.all(t.rho_ret >= 0)
    total = np.mean([token_head_relevance(rt).sum(axis=2) for rt, _ in items], axis=0)
    assert np.all(t.rho_task + t.rho_ret <= total + 1e-9)
    awr = attention_mass_scores([forward(small_lm, tok.encode(ex.prompt)) for _, ex in items],
                                [ex for _, ex in items])
    assert awr.shape == (2, 4) and np.all((awr >= 0) & (awr <= 1 + 1e-6))


def test_specialisation_needs_spans(small_lm, records, tok):
    ex = cp.build_qa_example(records[0], "closed", "occupation")
    tr = forward(small_lm, tok.encode(ex.prompt))
    with pytest.raises(ValueError):
        specialization_scores([(attribute(small_lm, tr, 5, len(ex.prompt) - 1), ex)])


def test_profile_single_layer_and_audit():
    z = np.zeros((5, 2))
    rt = z.copy()
    rt[3, 1] = 2.0
    t = HeadScoreTable(z, z, rt, z)
    prof = layerwise_profile(t)
    assert prof["rho_task"] == [0, 0, 0, 2.0, 0]
    rng = np.random.default_rng(0)
    t = HeadScoreTable(*(rng.random((5, 2)) for _ in range(4)))
    prof = layerwise_profile(t, HeadSet([(0, 0), (0, 1)], "ctx", 2))
    assert abs(sum(prof["rho_ret"]) - t.rho_ret.sum()) < 1e-6
    assert prof["n_ctx"] == [2, 0, 0, 0, 0]


def test_overlap():
    a = HeadSet([(0, 0), (0, 1)], "task", 2)
    b = HeadSet([(0, 1), (1, 1)], "ctx", 2)
    assert overlap_fraction(a, b) == 0.5
