import re

import numpy as np
import pytest

from headatlas.atlas import HeadScoreTable, HeadSet, layerwise_profile
from headatlas.report import functional_map_svg, head_categories, localization_html, parse_heatmaps


def table(L=3, H=4, seed=0):
    rng = np.random.default_rng(seed)
    return HeadScoreTable(*(rng.random((L, H)) for _ in range(4)))


def test_one_ctx_cell():
    svg = functional_map_svg(table(), {"ctx": HeadSet([(1, 2)], "ctx", 1)}, "h0")
    assert len(re.findall(r'class="cell ctx"', svg)) == 1
    assert len(re.findall(r'class="cell ', svg)) == 12
    assert '"config_hash": "h0"' in svg


def test_category_priority():
    cats = head_categories((2, 2), {"ctx": HeadSet([(0, 0), (0, 1)], "ctx", 2),
                                    "ret": HeadSet([(0, 0)], "ret", 1),
                                    "param": HeadSet([(1, 1)], "param", 1)})
    assert cats.tolist() == [["ret", "ctx"], ["none", "param"]]


def test_bar_profile_follows_layerwise_profile():
    t = table(L=5, H=2, seed=3)
    svg = functional_map_svg(t, {})
    prof = layerwise_profile(t)
    widths = [float(w) for w in re.findall(r'class="bar rho_ret"[^>]*width="([0-9.]+)"', svg)]
    assert len(widths) == 5
    assert np.argsort(widths).tolist() == np.argsort(prof["rho_ret"]).tolist()


def test_empty_table_rejected():
    z = np.zeros((0, 0))
    with pytest.raises(ValueError):
        functional_map_svg(HeadScoreTable(z, z, z, z), {})


def test_heatmap_values_roundtrip_bitwise():
    rng = np.random.default_rng(1)
    scores = (rng.random(7) @ rng.random((7, 7)) / 3).tolist()
    items = [{"example_id": "a</script>", "tokens": list("abcdefg"), "scores": scores,
              "predicted": 2, "answer": 2}]
    html = localization_html(items, "hh")
    back = parse_heatmaps(html)
    assert back["config_hash"] == "hh"
    assert back["items"][0]["scores"] == scores
    assert all(a == b for a, b in zip(back["items"][0]["scores"], scores))
    assert back["items"][0]["example_id"] == "a</script>"
