"""Deterministic SVG rendering of cross-attention heatmaps with p_copy bars.

Each target token is one ``<g class="row">`` positioned only through its
``transform``; everything inside a row uses row-local coordinates, so
reordering target tokens reorders whole row groups and nothing else.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .seq2seq import AttentionTrace

CELL = 22
CHAR_W = 7
BAR_W = 60
GAP = 10
COLOR = "#1f4e99"
BAR_COLOR = "#c0392b"


def _labels(tokens: list[str], ids: list[int]) -> list[str]:
    return tokens if tokens else [str(i) for i in ids]


def render_svg(trace: AttentionTrace) -> str:
    trace.validate()
    src = _labels(trace.source_tokens, trace.source_ids)
    tgt = _labels(trace.target_tokens, trace.target_ids)
    left = GAP + CHAR_W * max([len(t) for t in tgt] + [1])
    top = GAP + CHAR_W * max([len(s) for s in src] + [1])
    grid_w = CELL * len(src)
    bar_x = left + grid_w + GAP
    width = bar_x + BAR_W + 6 * CHAR_W + GAP
    height = top + CELL * len(tgt) + GAP

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<style>text{font-family:monospace;font-size:11px}</style>",
        f'<text class="title" x="{GAP}" y="{GAP + 2}">step {trace.step}</text>',
        '<g class="source-labels">',
    ]
    for j, s in enumerate(src):
        x = left + j * CELL + CELL // 2
        out.append(f'<text class="src" x="{x}" y="{top - 4}" '
                   f'transform="rotate(-90 {x} {top - 4})">{escape(s)}</text>')
    out.append("</g>")
    if trace.p_copy is not None:
        out.append(f'<text class="pcopy-header" x="{bar_x}" y="{top - 4}">p_copy</text>')

    for i, label in enumerate(tgt):
        y = top + i * CELL
        out.append(f'<g class="row" transform="translate(0,{y})">')
        out.append(f'<text class="tgt" x="{left - 4}" y="{CELL - 7}" '
                   f'text-anchor="end">{escape(label)}</text>')
        for j, w in enumerate(trace.attention[i]):
            out.append(f'<rect class="cell" data-col="{j}" x="{left + j * CELL}" y="0" '
                       f'width="{CELL}" height="{CELL}" fill="{COLOR}" '
                       f'fill-opacity="{float(w):.4f}"/>')
        if trace.p_copy is not None:
            p = float(trace.p_copy[i])
            out.append(f'<rect class="pcopy" x="{bar_x}" y="3" width="{BAR_W * p:.2f}" '
                       f'height="{CELL - 6}" fill="{BAR_COLOR}"/>')
            out.append(f'<text class="pcopy-value" x="{bar_x + BAR_W + 4}" y="{CELL - 7}">'
                       f'{p:.3f}</text>')
        out.append("</g>")
    out.append(f"<desc>{len(tgt)}x{len(src)} cross-attention</desc>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(trace: AttentionTrace, out_path) -> Path:
    path = Path(out_path)
    path.write_text(render_svg(trace), encoding="utf-8")
    return path
