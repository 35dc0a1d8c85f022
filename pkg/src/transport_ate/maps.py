"""Serialization of sensitivity grids to CSV and SVG heatmaps."""

from __future__ import annotations

import io
import xml.etree.ElementTree as ET

import contourpy
import numpy as np

from .exceptions import InputError
from .sensitivity import SensitivityGrid

SVG_NS = "http://www.w3.org/2000/svg"
CSV_HEADER = "delta_mis,shift,bias"

_NEG = np.array([33, 102, 172], dtype=float)   # blue
_POS = np.array([178, 24, 43], dtype=float)    # red
_MID = np.array([247, 247, 247], dtype=float)


def _num(x: float) -> str:
    return format(float(x), ".17g")


def grid_to_csv(grid: SensitivityGrid) -> bytes:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for d, s, b in grid.rows():
        buf.write(f"{_num(d)},{_num(s)},{_num(b)}\n")
    return buf.getvalue().encode("utf-8")


def diverging_color(value: float, vmax: float) -> str:
    """White at 0, blue for negative, red for positive; saturates at ``|vmax|``."""
    t = 0.0 if vmax <= 0 else float(np.clip(value / vmax, -1.0, 1.0))
    end = _POS if t > 0 else _NEG
    rgb = np.rint(_MID + abs(t) * (end - _MID)).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _edges(axis: np.ndarray) -> np.ndarray:
    if axis.size == 1:
        return np.array([axis[0] - 0.5, axis[0] + 0.5])
    mid = 0.5 * (axis[1:] + axis[:-1])
    return np.r_[2 * axis[0] - mid[0], mid, 2 * axis[-1] - mid[-1]]


def threshold_contours(grid: SensitivityGrid) -> list[np.ndarray]:
    """Polylines (in ``(shift, delta)`` coordinates) where ``|bias|`` equals the threshold."""
    if grid.threshold is None or min(grid.bias.shape) < 2:
        return []
    gen = contourpy.contour_generator(
        x=grid.shift_axis, y=grid.delta_axis, z=np.abs(grid.bias),
        line_type=contourpy.LineType.Separate,
    )
    return [np.asarray(line) for line in gen.lines(float(grid.threshold)) if len(line) >= 2]


def grid_to_svg(grid: SensitivityGrid, width: int = 480, height: int = 420) -> bytes:
    left, right, top, bottom = 70, 20, 20, 60
    pw, ph = width - left - right, height - top - bottom
    xe, ye = _edges(grid.shift_axis), _edges(grid.delta_axis)
    x0, x1, y0, y1 = xe[0], xe[-1], ye[0], ye[-1]
    if x1 < x0:
        x0, x1 = x1, x0
    if y1 < y0:
        y0, y1 = y1, y0
    px = lambda x: left + (x - x0) / (x1 - x0) * pw
    py = lambda y: top + (y1 - y) / (y1 - y0) * ph
    vmax = float(np.max(np.abs(grid.bias))) if grid.bias.size else 0.0

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(f"{{{SVG_NS}}}svg", {
        "version": "1.1", "width": str(width), "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })
    ET.SubElement(svg, f"{{{SVG_NS}}}title").text = "Sensitivity map of the asymptotic bias"
    cells = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"id": "heatmap", "shape-rendering": "crispEdges"})
    for i in range(grid.delta_axis.size):
        ya, yb = sorted((py(ye[i]), py(ye[i + 1])))
        for k in range(grid.shift_axis.size):
            xa, xb = sorted((px(xe[k]), px(xe[k + 1])))
            ET.SubElement(cells, f"{{{SVG_NS}}}rect", {
                "x": f"{xa:.3f}", "y": f"{ya:.3f}",
                "width": f"{xb - xa:.3f}", "height": f"{yb - ya:.3f}",
                "fill": diverging_color(grid.bias[i, k], vmax),
            })

    lines = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"id": "threshold", "fill": "none",
                                                   "stroke": "black", "stroke-width": "1.5"})
    for line in threshold_contours(grid):
        d = " ".join(
            f"{'M' if n == 0 else 'L'}{px(x):.3f},{py(y):.3f}" for n, (x, y) in enumerate(line)
        )
        ET.SubElement(lines, f"{{{SVG_NS}}}path", {"d": d})

    mk = grid.point_marker
    if mk:
        g = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"id": "marker", "stroke": "black", "fill": "none"})
        cx, cy = px(mk["shift"]), py(mk["delta"])
        for dx, dy in ((6, 6), (6, -6)):
            ET.SubElement(g, f"{{{SVG_NS}}}line", {
                "x1": f"{cx - dx:.3f}", "y1": f"{cy - dy:.3f}",
                "x2": f"{cx + dx:.3f}", "y2": f"{cy + dy:.3f}", "stroke-width": "2",
            })
        if mk.get("shift_ci") and mk.get("delta_ci"):
            xa, xb = sorted(px(v) for v in mk["shift_ci"])
            ya, yb = sorted(py(v) for v in mk["delta_ci"])
            ET.SubElement(g, f"{{{SVG_NS}}}rect", {
                "x": f"{xa:.3f}", "y": f"{ya:.3f}", "width": f"{xb - xa:.3f}",
                "height": f"{yb - ya:.3f}", "stroke-dasharray": "4 3",
            })

    axes = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"id": "axes", "font-family": "sans-serif",
                                                  "font-size": "11"})
    ET.SubElement(axes, f"{{{SVG_NS}}}rect", {
        "x": str(left), "y": str(top), "width": str(pw), "height": str(ph),
        "fill": "none", "stroke": "#444",
    })
    for x in (grid.shift_axis.min(), grid.shift_axis.max()):
        ET.SubElement(axes, f"{{{SVG_NS}}}text", {"x": f"{px(x):.3f}", "y": str(top + ph + 15),
                                                   "text-anchor": "middle"}).text = f"{x:.4g}"
    for y in (grid.delta_axis.min(), grid.delta_axis.max()):
        ET.SubElement(axes, f"{{{SVG_NS}}}text", {"x": str(left - 5), "y": f"{py(y):.3f}",
                                                   "text-anchor": "end"}).text = f"{y:.4g}"
    ET.SubElement(axes, f"{{{SVG_NS}}}text", {"x": str(left + pw / 2), "y": str(height - 20),
                                               "text-anchor": "middle"}).text = "shift of the missing covariate"
    ET.SubElement(axes, f"{{{SVG_NS}}}text", {
        "x": "15", "y": str(top + ph / 2), "text-anchor": "middle",
        "transform": f"rotate(-90 15 {top + ph / 2})",
    }).text = "CATE coefficient of the missing covariate"
    ET.SubElement(axes, f"{{{SVG_NS}}}text", {"x": str(left), "y": str(height - 5)}).text = (
        f"color range [-{vmax:.4g}, {vmax:.4g}]"
        + ("" if grid.threshold is None else f"; contour |bias| = {grid.threshold:.4g}")
    )
    return b'<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode").encode("utf-8")


def render_grid(grid: SensitivityGrid, format: str = "csv") -> bytes:
    """Render ``grid`` as long-format CSV or an SVG heatmap."""
    if grid.bias.size == 0:
        raise InputError("cannot render an empty grid")
    fmt = format.lower()
    if fmt == "csv":
        return grid_to_csv(grid)
    if fmt == "svg":
        return grid_to_svg(grid)
    raise InputError(f"unknown grid format {format!r}")
