"""Learning-curve rendering: metrics log in, self-contained SVG out.

One panel per (task, metric) series of validation records, drawn with fixed
layout and fixed number formatting so the same log always produces the same
bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Tuple

PANEL_W = 280
PANEL_H = 200
MARGIN_L = 46
MARGIN_B = 34
MARGIN_T = 24
MARGIN_R = 12
COLUMNS = 3
STROKE = "#2b6cb0"


def _fmt(x: float) -> str:
    s = f"{x:.6g}"
    return "0" if s == "-0" else s


def read_metrics(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"bad metrics record on line {i + 1} of {path}") from exc
    return records


def collect_series(records: List[dict]) -> Dict[Tuple[str, str], List[Tuple[int, float]]]:
    """Validation series keyed by (task, metric), in first-seen order."""
    series: Dict[Tuple[str, str], List[Tuple[int, float]]] = {}
    for r in records:
        if r.get("split") != "val":
            continue
        key = (r["task"], r["metric_name"])
        series.setdefault(key, []).append((int(r["iteration"]), float(r["value"])))
    return series


def _panel(key: Tuple[str, str], points: List[Tuple[int, float]], ox: int, oy: int) -> List[str]:
    task, metric = key
    inner_w = PANEL_W - MARGIN_L - MARGIN_R
    inner_h = PANEL_H - MARGIN_T - MARGIN_B
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = 0, max(max(xs), 1)
    if metric in ("accuracy", "mAP", "mAP50"):
        y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))
    else:
        y_lo, y_hi = min(ys), max(ys)
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return MARGIN_L + inner_w * (x - x_lo) / (x_hi - x_lo)

    def py(y: float) -> float:
        return MARGIN_T + inner_h * (1.0 - (y - y_lo) / (y_hi - y_lo))

    left, right = _fmt(px(x_lo)), _fmt(px(x_hi))
    top, bottom = _fmt(py(y_hi)), _fmt(py(y_lo))
    out = [f'<g transform="translate({ox},{oy})">']
    out.append(
        f'<text x="{_fmt(PANEL_W / 2)}" y="14" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">{task} {metric}</text>'
    )
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#444"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#444"/>')
    out.append(
        f'<text x="{_fmt(PANEL_W / 2)}" y="{_fmt(PANEL_H - 6)}" text-anchor="middle" '
        f'font-size="10" font-family="sans-serif">iteration</text>'
    )
    out.append(
        f'<text x="12" y="{_fmt(PANEL_H / 2)}" text-anchor="middle" font-size="10" '
        f'font-family="sans-serif" transform="rotate(-90 12 {_fmt(PANEL_H / 2)})">{metric}</text>'
    )
    out.append(
        f'<text x="{left}" y="{_fmt(PANEL_H - MARGIN_B + 14)}" text-anchor="middle" '
        f'font-size="9" font-family="sans-serif">{_fmt(x_lo)}</text>'
    )
    out.append(
        f'<text x="{right}" y="{_fmt(PANEL_H - MARGIN_B + 14)}" text-anchor="middle" '
        f'font-size="9" font-family="sans-serif">{_fmt(x_hi)}</text>'
    )
    out.append(
        f'<text x="{_fmt(MARGIN_L - 4)}" y="{_fmt(py(y_lo) + 3)}" text-anchor="end" '
        f'font-size="9" font-family="sans-serif">{_fmt(y_lo)}</text>'
    )
    out.append(
        f'<text x="{_fmt(MARGIN_L - 4)}" y="{_fmt(py(y_hi) + 3)}" text-anchor="end" '
        f'font-size="9" font-family="sans-serif">{_fmt(y_hi)}</text>'
    )
    coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in points)
    out.append(f'<polyline fill="none" stroke="{STROKE}" stroke-width="1.5" points="{coords}"/>')
    for x, y in points:
        out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="2" fill="{STROKE}"/>')
    out.append("</g>")
    return out


def render_curves(records: List[dict]) -> str:
    series = collect_series(records)
    if not series:
        raise ValueError("metrics log contains no validation records to plot")
    n = len(series)
    cols = min(COLUMNS, n)
    rows = (n + cols - 1) // cols
    width = cols * PANEL_W
    height = rows * PANEL_H
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for i, (key, points) in enumerate(series.items()):
        ox = (i % cols) * PANEL_W
        oy = (i // cols) * PANEL_H
        parts.extend(_panel(key, points, ox, oy))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_learning_curves(log_path, out_path) -> None:
    records = read_metrics(log_path)
    if not records:
        raise ValueError(f"metrics log {log_path} is empty")
    Path(out_path).write_text(render_curves(records))
