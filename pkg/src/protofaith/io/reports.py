"""CSV / JSON / SVG report emission."""
from __future__ import annotations

import csv
import json
import math
import os
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from protofaith.errors import ArgumentError, InvariantError
from protofaith.metrics import aggregate_report

ROLES = ("prototype", "test-patch")
CSV_COLUMNS = (
    "model",
    "image_id",
    "prototype",
    "role",
    "method",
    "cell_h",
    "cell_w",
    "score",
    "audc",
    "relevance_fraction",
    "irrelevant",
    "erf_area",
    "grid",
    "fill",
    "seed",
    "rules",
)


@dataclass
class ReportRow:
    model: str
    image_id: str
    prototype: int
    role: str
    method: str
    cell_h: int
    cell_w: int
    score: float
    audc: Optional[float] = None
    relevance_fraction: Optional[float] = None
    irrelevant: Optional[bool] = None
    erf_area: Optional[float] = None
    grid: str = ""
    fill: str = ""
    seed: int = 0
    rules: str = ""
    timings: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.role not in ROLES:
            raise InvariantError(f"report row has unknown role {self.role!r}")
        for name in ("score", "audc", "relevance_fraction", "erf_area"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise InvariantError(f"report row field {name} is not finite ({v})")


@dataclass
class CurveRecord:
    image_id: str
    prototype: int
    role: str
    method: str
    areas: Sequence[float]
    ratios: Sequence[float]


def _cell(value, fmt: str) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return format(value, fmt) if fmt else str(value)


_FORMATS = {"audc": ".1f", "relevance_fraction": ".6f", "erf_area": ".4f", "score": ".6f"}


def format_row(row: ReportRow) -> list[str]:
    return [_cell(getattr(row, col), _FORMATS.get(col, "")) for col in CSV_COLUMNS]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def curve_filename(curve: CurveRecord) -> str:
    return _slug(f"{curve.image_id}__p{curve.prototype}__{curve.role}__{curve.method}") + ".csv"


def _mean_curves(curves: Sequence[CurveRecord]) -> dict:
    grouped = defaultdict(list)
    for c in curves:
        grouped[c.method].append(c)
    means = {}
    for method in sorted(grouped):
        group = grouped[method]
        areas = np.asarray(group[0].areas, dtype=np.float64)
        same = [c for c in group if len(c.areas) == len(areas)]
        means[method] = (areas, np.mean([np.asarray(c.ratios, dtype=np.float64) for c in same], axis=0))
    return means


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def render_svg(curves: Sequence[CurveRecord], width: int = 480, height: int = 320) -> str:
    """Mean similarity ratio against deletion area (%), one polyline per method."""
    means = _mean_curves(curves)
    margin = 48
    a_max = max(float(a[-1]) for a, _ in means.values()) or 1.0
    t_max = max(1.0, max(float(np.max(t)) for _, t in means.values()))
    pw, ph = width - 2 * margin, height - 2 * margin

    def xy(a, t):
        return margin + pw * a / a_max, height - margin - ph * t / t_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">deletion area (%)</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2:.1f})">similarity ratio</text>',
    ]
    for k in range(5):
        a = a_max * k / 4
        x, _ = xy(a, 0)
        parts.append(f'<text x="{x:.1f}" y="{height - margin + 16}" text-anchor="middle" font-size="10">{100 * a:.2f}</text>')
        t = t_max * k / 4
        _, y = xy(0, t)
        parts.append(f'<text x="{margin - 6}" y="{y + 3:.1f}" text-anchor="end" font-size="10">{t:.2f}</text>')
    for n, (method, (areas, ratios)) in enumerate(means.items()):
        colour = _COLOURS[n % len(_COLOURS)]
        pts = " ".join("%.2f,%.2f" % xy(a, t) for a, t in zip(areas, ratios))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - margin - 4}" y="{margin + 14 * (n + 1)}" text-anchor="end" font-size="11" fill="{colour}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_reports(
    rows: Sequence[ReportRow],
    out_dir,
    *,
    parameters: Optional[dict] = None,
    curves: Sequence[CurveRecord] = (),
    svg: bool = True,
    timings: bool = False,
) -> dict:
    """Write cases.csv, summary.json and, when given, per-curve CSVs and a plot.

    Returns the paths written, keyed by artifact name.
    """
    if not rows:
        raise ArgumentError("no report rows to write")
    for row in rows:
        row.validate()
    os.makedirs(out_dir, exist_ok=True)
    written = {}

    path = os.path.join(out_dir, "cases.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(format_row(row))
    written["cases"] = path

    summary = {
        "parameters": parameters or {},
        "groups": aggregate_report([asdict(r) for r in rows]),
        "total_cases": len(rows),
    }
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written["summary"] = path

    if curves:
        curve_dir = os.path.join(out_dir, "curves")
        os.makedirs(curve_dir, exist_ok=True)
        for curve in curves:
            cpath = os.path.join(curve_dir, curve_filename(curve))
            with open(cpath, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(("area", "tau"))
                for a, t in zip(curve.areas, curve.ratios):
                    writer.writerow((f"{a:.6f}", repr(float(t))))
        written["curves"] = curve_dir
        if svg:
            path = os.path.join(out_dir, "deletion_curves.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(render_svg(curves))
            written["svg"] = path

    if timings:
        path = os.path.join(out_dir, "timings.csv")
        keys = sorted({k for r in rows for k in r.timings})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("image_id", "prototype", "role", "method", *keys))
            for r in rows:
                writer.writerow((r.image_id, r.prototype, r.role, r.method, *(f"{r.timings.get(k, 0.0):.6f}" for k in keys)))
        written["timings"] = path
    return written
