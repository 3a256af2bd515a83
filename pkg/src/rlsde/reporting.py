"""CSV tables, run manifests and dependency-free SVG line plots."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import astuple, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .stability import BoundReport

REPORT_COLUMNS = [f.name for f in fields(BoundReport)]


def fmt(value) -> str:
    """17-significant-digit floats; everything else via str()."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(csv_text(header, rows))


def write_reports(path: Path, reports: Sequence[BoundReport]) -> None:
    write_csv(path, REPORT_COLUMNS, (astuple(r) for r in reports))


def write_manifest(path: Path, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def svg_plot(
    series: Sequence[tuple[np.ndarray, np.ndarray]],
    references: Sequence[tuple[float, str]] = (),
    title: str = "",
    xlabel: str = "t",
    ylabel: str = "",
    width: int = 640,
    height: int = 400,
) -> str:
    """Polyline plot of ``series`` with horizontal reference lines."""
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series]) if series else np.array([0.0, 1.0])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series]) if series else np.array([0.0, 1.0])
    ys = np.concatenate([ys[np.isfinite(ys)], [v for v, _ in references]])
    xs = xs[np.isfinite(xs)]
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    span_w, span_h = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * span_w

    def py(y):
        return pad_t + (y1 - y) / (y1 - y0) * span_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{span_w}" height="{span_h}" fill="none" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2:.1f})">{_esc(ylabel)}</text>',
        f'<text x="{pad_l - 4}" y="{pad_t + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{pad_l - 4}" y="{pad_t + span_h}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{pad_l}" y="{pad_t + span_h + 14}" text-anchor="middle" font-size="10">{x0:.3g}</text>',
        f'<text x="{pad_l + span_w}" y="{pad_t + span_h + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>',
    ]
    for x, y in series:
        pts = [(px(a), py(b)) for a, b in zip(np.asarray(x, float), np.asarray(y, float)) if math.isfinite(a) and math.isfinite(b)]
        if len(pts) >= 2:
            coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="steelblue" stroke-width="1" stroke-opacity="0.6"/>')
    for value, label in references:
        yy = py(value)
        out.append(f'<line x1="{pad_l}" y1="{yy:.2f}" x2="{pad_l + span_w}" y2="{yy:.2f}" stroke="firebrick" stroke-dasharray="6 4"/>')
        out.append(f'<text x="{pad_l + span_w - 4}" y="{yy - 4:.2f}" text-anchor="end" font-size="11" fill="firebrick">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
