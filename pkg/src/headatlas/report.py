"""SVG functional map and HTML context heatmaps."""

from __future__ import annotations

import html
import json
from typing import Sequence

import numpy as np

from .atlas import HeadScoreTable, HeadSet, layerwise_profile

COLORS = {"ret": "#d95f02", "task": "#7570b3", "ctx": "#1b9e77", "param": "#e7298a",
          "none": "#e8e8e8"}
CELL = 22
BAR_W = 160


def head_categories(shape: tuple[int, int], sets: dict[str, HeadSet | None]) -> np.ndarray:
    """Category label per head; retrieval and task membership win over ctx/param."""
    cats = np.full(shape, "none", dtype=object)
    for kind in ("param", "ctx", "task", "ret"):
        hs = sets.get(kind)
        for l, h in (hs or ()):
            cats[l, h] = kind
    return cats


def functional_map_svg(table: HeadScoreTable, sets: dict[str, HeadSet | None],
                       config_hash: str = "") -> str:
    """Layer-by-head grid coloured by category, with per-layer rho bars on the right."""
    L, H = table.shape
    if L * H == 0:
        raise ValueError("empty score table")
    cats = head_categories((L, H), sets)
    prof = layerwise_profile(table, sets.get("ctx"), sets.get("param"))
    top = 30
    grid_w = 40 + H * CELL
    width = grid_w + 20 + BAR_W + 20
    height = top + L * CELL + 60
    peak = max(max(prof["rho_task"]), max(prof["rho_ret"]), 1e-12)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
           f'<metadata>{json.dumps({"config_hash": config_hash, "profile": prof}, sort_keys=True)}'
           '</metadata>']
    for h in range(H):
        out.append(f'<text x="{40 + h * CELL + CELL // 2}" y="{top - 6}" '
                   f'text-anchor="middle">{h}</text>')
    for l in range(L):
        y = top + l * CELL
        out.append(f'<text x="34" y="{y + 15}" text-anchor="end">L{l}</text>')
        for h in range(H):
            c = cats[l, h]
            out.append(f'<rect class="cell {c}" data-layer="{l}" data-head="{h}" '
                       f'x="{40 + h * CELL}" y="{y}" width="{CELL - 2}" height="{CELL - 2}" '
                       f'fill="{COLORS[c]}"/>')
        x0 = grid_w + 20
        for i, key in enumerate(("rho_task", "rho_ret")):
            w = BAR_W * prof[key][l] / peak
            out.append(f'<rect class="bar {key}" data-layer="{l}" x="{x0}" '
                       f'y="{y + 2 + i * 9}" width="{w:.3f}" height="8" '
                       f'fill="{COLORS["task" if key == "rho_task" else "ret"]}"/>')
    ly = top + L * CELL + 20
    for i, (k, col) in enumerate(COLORS.items()):
        out.append(f'<rect x="{40 + i * 70}" y="{ly}" width="10" height="10" fill="{col}"/>'
                   f'<text x="{54 + i * 70}" y="{ly + 9}">{k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def localization_html(items: Sequence[dict], config_hash: str = "") -> str:
    """Context tokens shaded by aggregated attention.

    Each item needs ``example_id``, ``tokens`` and ``scores`` (one per
    token); ``predicted`` and ``answer`` positions are optional. The raw
    arrays are embedded as JSON so values can be parsed back exactly.
    """
    data = [{"example_id": it["example_id"], "tokens": list(it["tokens"]),
             "scores": [float(s) for s in it["scores"]],
             "predicted": it.get("predicted"), "answer": it.get("answer")} for it in items]
    rows = []
    for it in data:
        s = np.asarray(it["scores"], np.float64)
        hi = float(np.max(np.abs(s))) if s.size else 0.0
        spans = []
        for j, (tok, v) in enumerate(zip(it["tokens"], s)):
            a = abs(v) / hi if hi > 0 else 0.0
            rgb = "217,95,2" if v >= 0 else "27,158,119"
            mark = " pred" if j == it["predicted"] else ""
            mark += " gold" if j == it["answer"] else ""
            spans.append(f'<span class="tok{mark}" title="{v:.4g}" '
                         f'style="background:rgba({rgb},{a:.3f})">{html.escape(tok)}</span>')
        rows.append(f'<div class="ex"><h3>{html.escape(it["example_id"])}</h3>'
                    f'<p>{" ".join(spans)}</p></div>')
    payload = json.dumps({"config_hash": config_hash, "items": data}, sort_keys=True)
    payload = payload.replace("</", "<\\/")
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<meta name=\"config-hash\" content=\"{html.escape(config_hash)}\">"
            "<title>source localization</title><style>"
            ".tok{padding:1px 2px;border-radius:2px}.pred{outline:2px solid #333}"
            ".gold{text-decoration:underline}</style></head><body>\n"
            + "\n".join(rows)
            + f'\n<script type="application/json" id="heatmaps">{payload}</script>\n'
            "</body></html>\n")


def parse_heatmaps(text: str) -> dict:
    """Recover the embedded JSON payload from :func:`localization_html` output."""
    start = text.index('<script type="application/json" id="heatmaps">')
    start = text.index(">", start) + 1
    end = text.index("</script>", start)
    return json.loads(text[start:end].replace("<\\/", "</"))
