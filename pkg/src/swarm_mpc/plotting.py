"""Static SVG figures of a simulation log, written as plain XML.

Every drawn element carries an ``id`` (``traj-<agent>``, ``comm-<agent>``,
``safe-<agent>``, ``pose-<agent>``, ``node-<k>-<agent>``, ``edge-<k>-<i>-<j>``)
so the output can be inspected by element counting. The viewBox is the
extent of everything drawn plus a 10% margin; output is byte-stable.
"""
from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .geometry import translate

_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
_NS = "http://www.w3.org/2000/svg"


def _f(v) -> str:
    return f"{float(v):.4f}"


def _points(P) -> str:
    # y is flipped so that +y points up on screen
    return " ".join(f"{_f(p[0])},{_f(-p[1])}" for p in P)


def _svg(lo, hi, width_px):
    span = np.maximum(hi - lo, 1e-9)
    lo = lo - 0.1 * span
    span = 1.2 * span
    height_px = width_px * span[1] / span[0]
    root = ET.Element("svg", {
        "xmlns": _NS, "width": _f(width_px), "height": _f(height_px),
        "viewBox": f"{_f(lo[0])} {_f(-(lo[1] + span[1]))} {_f(span[0])} {_f(span[1])}"})
    return root, float(span.max())


def _write(root, path) -> None:
    ET.indent(root)
    data = ET.tostring(root, encoding="unicode", xml_declaration=False)
    with open(path, "w", newline="\n") as fh:
        fh.write('<?xml version="1.0" encoding="utf-8"?>\n' + data + "\n")


def _pose_marker(x, size):
    """Triangle pointing along the heading (bicycle) or velocity (double integrator)."""
    if len(x) == 5:
        th = x[3]
    elif np.hypot(x[2], x[3]) > 1e-9:
        th = np.arctan2(x[3], x[2])
    else:
        th = 0.0
    c, s = np.cos(th), np.sin(th)
    local = size * np.array([[1.0, 0.0], [-0.6, 0.6], [-0.6, -0.6]])
    return x[:2] + local @ np.array([[c, s], [-s, c]])


def trajectories_svg(log, path, width_px: float = 600.0) -> None:
    """Paths, final poses, communication circles and safe sets at the final step."""
    from .sim import _Agent

    ids = log.ids
    P = log.positions()
    specs = {a.id: a for a in log.scenario.agents}
    final = P[-1]
    safe = {i: translate(_Agent(specs[i], log.scenario.ocp).safe_set, final[c]).vertices()
            for c, i in enumerate(ids)}
    pts = [P.reshape(-1, 2)] + [v for v in safe.values()]
    for c, i in enumerate(ids):
        r = specs[i].comm_radius
        pts.append(np.array([final[c] - r, final[c] + r]))
        pts.append(specs[i].ref[None, :2])
    allp = np.vstack(pts)
    root, scale = _svg(allp.min(axis=0), allp.max(axis=0), width_px)
    lw = _f(scale / 400)
    for c, i in enumerate(ids):
        col = _PALETTE[c % len(_PALETTE)]
        ET.SubElement(root, "polyline", {
            "id": f"traj-{i}", "points": _points(P[:, c]), "fill": "none", "stroke": col,
            "stroke-width": lw, "stroke-dasharray": f"{_f(scale / 100)},{_f(scale / 200)}"})
        ET.SubElement(root, "circle", {
            "id": f"comm-{i}", "cx": _f(final[c, 0]), "cy": _f(-final[c, 1]),
            "r": _f(specs[i].comm_radius), "fill": "none", "stroke": col,
            "stroke-width": lw, "stroke-opacity": "0.6"})
        ET.SubElement(root, "polygon", {
            "id": f"safe-{i}", "points": _points(safe[i]), "fill": "none", "stroke": col,
            "stroke-width": lw, "stroke-dasharray": f"{_f(scale / 300)},{_f(scale / 300)}"})
        x = log.steps[-1].agents[i].x
        g = ET.SubElement(root, "g", {"id": f"pose-{i}"})
        ET.SubElement(g, "polygon", {"points": _points(_pose_marker(x, specs[i].sigma)),
                                     "fill": col, "fill-opacity": "0.35", "stroke": col,
                                     "stroke-width": lw})
    _write(root, path)


def graph_strip_svg(log, path, every: int = 10, max_panels: int = 6,
                    panel_px: float = 200.0) -> None:
    """Communication graph at every ``every``-th logged step, panels side by side."""
    steps = [s for s in log.steps if s.k % every == 0][:max_panels]
    ids = log.ids
    P = log.positions().reshape(-1, 2)
    lo, hi = P.min(axis=0) - 1.0, P.max(axis=0) + 1.0
    span = hi - lo
    gap = 0.1 * span[0]
    n = len(steps)
    width = n * span[0] + (n - 1) * gap
    root, scale = _svg(np.array([lo[0], lo[1]]), np.array([lo[0] + width, hi[1]]), panel_px * n)
    r = _f(scale / 80)
    for p, st in enumerate(steps):
        dx = p * (span[0] + gap)
        g = ET.SubElement(root, "g", {"id": f"panel-{st.k}"})
        ET.SubElement(g, "rect", {"x": _f(lo[0] + dx), "y": _f(-hi[1]), "width": _f(span[0]),
                                  "height": _f(span[1]), "fill": "none", "stroke": "#999999",
                                  "stroke-width": _f(scale / 600)})
        ET.SubElement(g, "text", {"x": _f(lo[0] + dx + 0.05 * span[0]),
                                  "y": _f(-hi[1] + 0.08 * span[1]),
                                  "font-size": _f(0.06 * span[1])}).text = f"k={st.k}"
        pos = {i: st.agents[i].x[:2] + np.array([dx, 0.0]) for i in ids}
        for i, j in st.edges:
            ET.SubElement(g, "line", {
                "id": f"edge-{st.k}-{i}-{j}", "x1": _f(pos[i][0]), "y1": _f(-pos[i][1]),
                "x2": _f(pos[j][0]), "y2": _f(-pos[j][1]), "stroke": "#666666",
                "stroke-width": _f(scale / 400)})
        for c, i in enumerate(ids):
            ET.SubElement(g, "circle", {"id": f"node-{st.k}-{i}", "cx": _f(pos[i][0]),
                                        "cy": _f(-pos[i][1]), "r": r,
                                        "fill": _PALETTE[c % len(_PALETTE)]})
    _write(root, path)


def count_elements(svg_text: str, tag: str, id_prefix: str) -> int:
    """Number of ``<tag>`` elements whose id starts with ``id_prefix``."""
    root = ET.fromstring(svg_text)
    return sum(1 for e in root.iter(f"{{{_NS}}}{tag}") if e.get("id", "").startswith(id_prefix))
