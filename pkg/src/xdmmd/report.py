"""Self-contained SVG figures: removal curves, box plots and CDFs.

Output is byte-deterministic: fixed 800x600 viewport, fixed font, every
coordinate rounded to 4 decimals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from xdmmd.errors import DataError
from xdmmd.influence import box_stats, empirical_cdf

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 90, 30, 50, 70
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
FONT = "DejaVu Sans, Arial, sans-serif"


class PlotKind(str, Enum):
    LINE = "line"
    BOX = "box"
    CDF = "cdf"


@dataclass
class PlotSpec:
    """``series`` holds ``(label, points)``: (x, y) pairs for LINE and CDF
    plots (CDF points may also be bare scores), bare values for BOX."""

    kind: PlotKind
    series: list[tuple[str, list]]
    x_label: str = ""
    y_label: str = ""
    title: str = ""
    path: str | Path | None = None
    reference_y: list[float] = field(default_factory=list)


def _f(v: float) -> str:
    s = f"{round(float(v), 4):.4f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _padded(lo: float, hi: float) -> tuple[float, float]:
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
    else:
        pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, xr: tuple[float, float], yr: tuple[float, float]):
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        self.parts: list[str] = []

    def sx(self, x: float) -> float:
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def sy(self, y: float) -> float:
        return HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x: float, y: float, s: str, anchor: str = "middle", size: int = 12, rotate: bool = False) -> None:
        tr = f' transform="rotate(-90 {_f(x)} {_f(y)})"' if rotate else ""
        self.add(
            f'<text x="{_f(x)}" y="{_f(y)}" font-family="{FONT}" font-size="{size}"'
            f' text-anchor="{anchor}"{tr}>{escape(s)}</text>'
        )

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash: str | None = None) -> None:
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}"'
            f' stroke="{stroke}" stroke-width="{_f(width)}"{d}/>'
        )

    def axes(self, spec: PlotSpec, x_ticks: Sequence[tuple[float, str]] | None = None) -> None:
        bx0, bx1 = LEFT, WIDTH - RIGHT
        by0, by1 = HEIGHT - BOTTOM, TOP
        self.add(f'<rect x="{bx0}" y="{by1}" width="{bx1 - bx0}" height="{by0 - by1}" fill="none" stroke="#000"/>')
        for v in _nice_ticks(self.y0, self.y1):
            y = self.sy(v)
            self.line(bx0 - 5, y, bx0, y)
            self.text(bx0 - 8, y + 4, _f(v), anchor="end", size=11)
        ticks = x_ticks if x_ticks is not None else [(v, _f(v)) for v in _nice_ticks(self.x0, self.x1)]
        for v, label in ticks:
            x = self.sx(v)
            self.line(x, by0, x, by0 + 5)
            self.text(x, by0 + 20, label, size=11)
        self.text((bx0 + bx1) / 2, HEIGHT - 20, spec.x_label, size=13)
        self.text(25, (by0 + by1) / 2, spec.y_label, size=13, rotate=True)
        if spec.title:
            self.text(WIDTH / 2, 30, spec.title, size=15)

    def legend(self, labels: Sequence[str]) -> None:
        for i, label in enumerate(labels):
            y = TOP + 18 + 18 * i
            x = WIDTH - RIGHT - 170
            self.add(f'<rect x="{x}" y="{y - 9}" width="12" height="12" fill="{PALETTE[i % len(PALETTE)]}"/>')
            self.text(x + 18, y + 1, label, anchor="start", size=12)

    def svg(self) -> bytes:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}"'
            f' viewBox="0 0 {WIDTH} {HEIGHT}">\n<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>\n'
        )
        return (head + "\n".join(self.parts) + "\n</svg>\n").encode()


def _check(spec: PlotSpec) -> None:
    if not spec.series:
        raise DataError("plot needs at least one series")
    for label, pts in spec.series:
        if len(pts) == 0:
            raise DataError(f"series {label!r} is empty")
        if not np.all(np.isfinite(np.asarray(pts, dtype=np.float64))):
            raise DataError(f"series {label!r} contains NaN or infinite values")


def _xy_plot(spec: PlotSpec, step: bool) -> bytes:
    data = [(label, np.asarray(pts, dtype=np.float64).reshape(-1, 2)) for label, pts in spec.series]
    allx = np.concatenate([d[:, 0] for _, d in data])
    ally = np.concatenate([d[:, 1] for _, d in data] + [np.asarray(spec.reference_y, dtype=np.float64)])
    c = _Canvas(_padded(allx.min(), allx.max()), _padded(ally.min(), ally.max()))
    c.axes(spec)
    for ref in spec.reference_y:
        c.line(LEFT, c.sy(ref), WIDTH - RIGHT, c.sy(ref), stroke="#888", dash="4 4")
    for i, (label, d) in enumerate(data):
        color = PALETTE[i % len(PALETTE)]
        if len(d) > 1:
            cmds = [f"M{_f(c.sx(d[0, 0]))} {_f(c.sy(d[0, 1]))}"]
            for (x0, y0), (x1, y1) in zip(d[:-1], d[1:]):
                if step:
                    cmds.append(f"L{_f(c.sx(x1))} {_f(c.sy(y0))}")
                cmds.append(f"L{_f(c.sx(x1))} {_f(c.sy(y1))}")
            c.add(f'<path d="{" ".join(cmds)}" fill="none" stroke="{color}" stroke-width="2"/>')
        if not step or len(d) == 1:
            for x, y in d:
                c.add(f'<circle cx="{_f(c.sx(x))}" cy="{_f(c.sy(y))}" r="4" fill="{color}"/>')
    c.legend([label for label, _ in data])
    return c.svg()


def _box_plot(spec: PlotSpec) -> bytes:
    boxes = [(label, np.asarray(v, dtype=np.float64), box_stats(v)) for label, v in spec.series]
    ally = np.concatenate([v for _, v, _ in boxes] + [np.asarray(spec.reference_y, dtype=np.float64)])
    k = len(boxes)
    c = _Canvas((0.0, float(k)), _padded(ally.min(), ally.max()))
    c.axes(spec, x_ticks=[(i + 0.5, label) for i, (label, _, _) in enumerate(boxes)])
    for ref in spec.reference_y:
        c.line(LEFT, c.sy(ref), WIDTH - RIGHT, c.sy(ref), stroke="#888", dash="4 4")
    half = 0.3 * (c.sx(1) - c.sx(0))
    for i, (label, v, st) in enumerate(boxes):
        color = PALETTE[i % len(PALETTE)]
        cx = c.sx(i + 0.5)
        top, bot = c.sy(st["q3"]), c.sy(st["q1"])
        c.line(cx, c.sy(st["whisker_high"]), cx, top)
        c.line(cx, bot, cx, c.sy(st["whisker_low"]))
        for w in ("whisker_low", "whisker_high"):
            c.line(cx - half / 2, c.sy(st[w]), cx + half / 2, c.sy(st[w]))
        c.add(
            f'<rect x="{_f(cx - half)}" y="{_f(top)}" width="{_f(2 * half)}" height="{_f(bot - top)}"'
            f' fill="{color}" fill-opacity="0.35" stroke="{color}" stroke-width="1.5"/>'
        )
        c.line(cx - half, c.sy(st["median"]), cx + half, c.sy(st["median"]), stroke="#000", width=2)
        for j in st["outliers"]:
            c.add(f'<circle cx="{_f(cx)}" cy="{_f(c.sy(v[j]))}" r="3" fill="none" stroke="{color}"/>')
    return c.svg()


def plot(spec: PlotSpec) -> bytes:
    _check(spec)
    kind = PlotKind(spec.kind)
    if kind is PlotKind.BOX:
        out = _box_plot(spec)
    elif kind is PlotKind.CDF:
        series = []
        for label, pts in spec.series:
            arr = np.asarray(pts, dtype=np.float64)
            series.append((label, empirical_cdf(arr) if arr.ndim == 1 else arr))
        out = _xy_plot(PlotSpec(kind, series, spec.x_label, spec.y_label, spec.title, spec.path, spec.reference_y), step=True)
    else:
        out = _xy_plot(spec, step=False)
    if spec.path is not None:
        Path(spec.path).write_bytes(out)
    return out


# --- figure builders from pipeline outputs ----------------------------------


def _read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ablation_figure(curves: dict[str, str | Path], out: str | Path, alpha: float | None = 0.05) -> bytes:
    series = []
    for label, path in curves.items():
        rows = _read_rows(path)
        series.append((label, [(float(r["fraction"]), float(r["p_value"])) for r in rows]))
    return plot(PlotSpec(PlotKind.LINE, series, "fraction of samples removed", "p-value",
                         "Influence-ranked removal effect", out, [alpha] if alpha is not None else []))


def _influence_by_subgroup(path: str | Path) -> list[tuple[str, list[float]]]:
    groups: dict[str, list[float]] = {}
    for r in _read_rows(path):
        label = f'{r["group"]}:{r["subgroup"]}' if r["subgroup"] else r["group"]
        groups.setdefault(label, []).append(float(r["influence"]))
    return sorted(groups.items())


def box_figure(influence_csv: str | Path, out: str | Path) -> bytes:
    return plot(PlotSpec(PlotKind.BOX, _influence_by_subgroup(influence_csv), "group:subgroup",
                         "influence score", "Distribution of influence scores", out, [0.0]))


def cdf_figure(influence_csv: str | Path, out: str | Path) -> bytes:
    return plot(PlotSpec(PlotKind.CDF, _influence_by_subgroup(influence_csv), "influence score",
                         "empirical CDF", "CDF of influence scores", out))


def path_y_coordinates(svg: bytes) -> list[list[float]]:
    """y-coordinates of every ``<path>`` in an SVG produced by :func:`plot`."""
    import re

    out = []
    for d in re.findall(rb'<path d="([^"]+)"', svg):
        ys = [float(m.group(2)) for m in re.finditer(rb"[ML](-?[\d.]+) (-?[\d.]+)", d)]
        out.append(ys)
    return out


