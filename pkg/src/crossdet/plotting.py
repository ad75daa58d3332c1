"""Deterministic SVG/CSV emission of precision-recall curves."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .evaluation import EvalReport

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
SIZE = 320  # plot area edge in px
MARGIN = 50


def _num(v: float) -> str:
    return f"{v:.6g}"


def curve_points(report: EvalReport) -> list[tuple[float, float]]:
    """(recall, precision) vertices, starting from recall 0 at the first precision."""
    pts = [(p.recall, p.precision) for p in report.curve]
    if pts and pts[0][0] > 0.0:
        pts.insert(0, (0.0, pts[0][1]))
    return pts


def render_svg(reports: Sequence[EvalReport]) -> str:
    width = SIZE + 2 * MARGIN + 200
    height = SIZE + 2 * MARGIN
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<g id="axes" stroke="black" fill="none">'
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}"/></g>',
    ]
    for k in range(11):
        t = k / 10
        x = MARGIN + t * SIZE
        y = MARGIN + SIZE - t * SIZE
        out.append(f'<text x="{_num(x)}" y="{MARGIN + SIZE + 15}" font-size="10" '
                   f'text-anchor="middle">{t:.1f}</text>')
        out.append(f'<text x="{MARGIN - 5}" y="{_num(y + 3)}" font-size="10" '
                   f'text-anchor="end">{t:.1f}</text>')
    out.append(f'<text x="{MARGIN + SIZE / 2:g}" y="{height - 10}" font-size="12" '
               f'text-anchor="middle">Recall</text>')
    out.append(f'<text x="15" y="{MARGIN + SIZE / 2:g}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 15 {MARGIN + SIZE / 2:g})">Precision</text>')
    # curves live in data coordinates: unit square flipped onto the plot area
    out.append(f'<g id="curves" transform="translate({MARGIN} {MARGIN + SIZE}) scale({SIZE} -{SIZE})">')
    for i, rep in enumerate(reports):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(r)},{_num(p)}" for r, p in curve_points(rep))
        out.append(f'<polyline data-detector="{escape(rep.detector_id)}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2" vector-effect="non-scaling-stroke"/>')
    out.append("</g>")
    out.append('<g id="legend" font-size="11">')
    for i, rep in enumerate(reports):
        y = MARGIN + 15 + 18 * i
        x = MARGIN + SIZE + 15
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 20}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        label = f"{rep.detector_id} ({rep.sequence_id}) AP {100 * rep.ap:.1f} F1 {rep.peak_f1:.2f}"
        out.append(f'<text x="{x + 25}" y="{y}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["detector", "threshold", "precision", "recall", "f1"])
    for rep in reports:
        for p in rep.curve:
            writer.writerow([rep.detector_id, repr(p.threshold),
                             repr(p.precision), repr(p.recall), repr(p.f1)])
    return buf.getvalue()


def plot_pr(reports: Sequence[EvalReport], out_svg: str | Path,
            out_csv: str | Path | None = None) -> Path:
    """Write the SVG plot and a CSV of all curve points (next to the SVG by default)."""
    if not reports:
        raise ValueError("plot_pr needs at least one report")
    out_svg = Path(out_svg)
    out_csv = Path(out_csv) if out_csv is not None else out_svg.with_suffix(".csv")
    out_svg.write_text(render_svg(reports))
    out_csv.write_text(render_csv(reports))
    return out_svg
