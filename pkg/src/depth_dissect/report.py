"""Static HTML/SVG report for a run directory.

Looks for the JSON artifacts the CLI writes (selectivity reports, ablation
curves, metrics, correction results) and renders:

* per-unit dissection bar charts (|R| per depth bin, assigned bin highlighted),
* ablation curves with both orders overlaid,
* metric and correction tables.

Output is a pure function of the inputs, so re-rendering is idempotent.
"""
from __future__ import annotations

import html
import json
import xml.etree.ElementTree as ET
from pathlib import Path

SVG_NS = "http://www.w3.org/2000/svg"
REPORT_DIR = "report"


class EmptyRunError(ValueError):
    pass


def _svg(width: float, height: float) -> ET.Element:
    return ET.Element("svg", {"xmlns": SVG_NS, "width": f"{width:g}", "height": f"{height:g}",
                              "viewBox": f"0 0 {width:g} {height:g}"})


def _text(parent, x, y, s, size=10, anchor="start"):
    el = ET.SubElement(parent, "text", {"x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size),
                                        "font-family": "sans-serif", "text-anchor": anchor})
    el.text = s
    return el


def _write_svg(root: ET.Element, path: Path) -> None:
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def dissection_svg(report: dict, cols: int = 8, cell=(150, 80)) -> ET.Element:
    """Grid of per-unit bar charts of |R| over bins."""
    units = report["units"]
    rows_resp = report.get("responses") or []
    n = len(units)
    rows = (n + cols - 1) // cols
    cw, ch = cell
    top = 30
    root = _svg(cols * cw, rows * ch + top)
    _text(root, 6, 18, f"layer {report['layer']} ({report['split']}): mean DS {report.get('mean_ds', 0):.3f}", 13)
    for i, u in enumerate(units):
        ox, oy = (i % cols) * cw, top + (i // cols) * ch
        g = ET.SubElement(root, "g", {"transform": f"translate({ox},{oy})"})
        ET.SubElement(g, "rect", {"x": "2", "y": "2", "width": str(cw - 4), "height": str(ch - 4),
                                  "fill": "none", "stroke": "#ccc"})
        _text(g, 6, 13, f"unit {u['unit']} DS {u['ds']:.2f}", 9)
        resp = rows_resp[i] if i < len(rows_resp) else []
        mags = [abs(v) if v is not None else 0.0 for v in resp]
        peak = max(mags) if mags and max(mags) > 0 else 1.0
        plot_h = ch - 22
        bw = (cw - 10) / max(len(mags), 1)
        for d, m in enumerate(mags):
            h = plot_h * m / peak
            colour = "#d62728" if d == u.get("assigned_bin") else ("#1f77b4" if d == u["argmax_bin"] else "#9ecae1")
            ET.SubElement(g, "rect", {"x": f"{5 + d * bw:.2f}", "y": f"{ch - 4 - h:.2f}", "width": f"{max(bw - 0.3, 0.3):.2f}",
                                      "height": f"{h:.2f}", "fill": colour})
    return root


def ablation_svg(curves: list[dict], size=(420, 280)) -> ET.Element:
    w, h = size
    ml, mb, mt, mr = 45, 35, 25, 15
    pw, ph = w - ml - mr, h - mt - mb
    root = _svg(w, h)
    layer = curves[0]["layer"] if curves else ""
    _text(root, w / 2, 16, f"ordered ablation, layer {layer}", 12, "middle")
    ET.SubElement(root, "line", {"x1": str(ml), "y1": str(mt + ph), "x2": str(ml + pw), "y2": str(mt + ph), "stroke": "black"})
    ET.SubElement(root, "line", {"x1": str(ml), "y1": str(mt), "x2": str(ml), "y2": str(mt + ph), "stroke": "black"})
    _text(root, ml + pw / 2, h - 6, "units ablated", 10, "middle")
    _text(root, 4, mt - 6, "delta<1.25", 10)
    for v in (0.0, 0.5, 1.0):
        _text(root, ml - 4, mt + ph * (1 - v) + 3, f"{v:.1f}", 9, "end")
    colours = {"descending": "#d62728", "ascending": "#1f77b4"}
    for j, c in enumerate(curves):
        acc = c["accuracy"]
        steps = max(len(acc) - 1, 1)
        pts = " ".join(f"{ml + pw * t / steps:.2f},{mt + ph * (1 - a):.2f}" for t, a in enumerate(acc))
        colour = colours.get(c["order"], "#555")
        ET.SubElement(root, "polyline", {"points": pts, "fill": "none", "stroke": colour, "stroke-width": "1.5"})
        _text(root, ml + pw - 4, mt + 14 + 13 * j, f"{c['order']} (AUC {c.get('auc', 0):.3f})", 10, "end").set("fill", colour)
    return root


def _table(headers: list[str], rows: list[list]) -> str:
    head = "".join(f"<th>{html.escape(str(h))}</th>" for h in headers)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(_fmt(v))}</td>" for v in r) + "</tr>" for r in rows)
    return f"<table><tr>{head}</tr>{body}</table>"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _load(path: Path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def collect(run_dir) -> dict[str, list[tuple[str, dict]]]:
    run = Path(run_dir)
    found = {"selectivity": [], "ablation": [], "metrics": [], "correction": []}
    if not run.is_dir():
        raise EmptyRunError(f"{run} is not a directory")
    for kind in found:
        for p in sorted(run.glob(f"{kind}*.json")):
            found[kind].append((p.stem, _load(p)))
    if not any(found.values()):
        raise EmptyRunError(f"{run}: nothing to report (no selectivity/ablation/metrics/correction JSON)")
    return found


def render_report(run_dir) -> Path:
    """Write ``report/index.html`` plus SVGs under ``run_dir``; returns the HTML path."""
    run = Path(run_dir)
    found = collect(run)
    out = run / REPORT_DIR
    out.mkdir(exist_ok=True)
    parts = ["<!DOCTYPE html>", "<html><head><meta charset=\"utf-8\"><title>depth dissection report</title>",
             "<style>body{font-family:sans-serif}table{border-collapse:collapse}"
             "td,th{border:1px solid #999;padding:2px 6px}</style></head><body>",
             f"<h1>Run {html.escape(run.resolve().name)}</h1>"]

    if found["metrics"]:
        parts.append("<h2>Depth metrics</h2>")
        keys = ["delta1", "delta2", "delta3", "rms", "rel", "log10"]
        parts.append(_table(["file"] + keys, [[name] + [m.get(k) for k in keys] for name, m in found["metrics"]]))

    if found["correction"]:
        parts.append("<h2>Response correction</h2>")
        rows = []
        for name, c in found["correction"]:
            for stage in ("before", "after"):
                m = c[stage]
                rows.append([name, c["layer"], stage, m["delta1"], m["rms"], m["rel"]])
        parts.append(_table(["file", "layer", "stage", "delta1", "rms", "rel"], rows))

    for name, rep in found["selectivity"]:
        svg_name = f"{name}.svg"
        _write_svg(dissection_svg(rep), out / svg_name)
        parts.append(f"<h2>Dissection: {html.escape(name)}</h2><img src=\"{svg_name}\" alt=\"{html.escape(name)}\">")

    for name, abl in found["ablation"]:
        curves = abl["curves"] if "curves" in abl else [abl]
        svg_name = f"{name}.svg"
        _write_svg(ablation_svg(curves), out / svg_name)
        parts.append(f"<h2>Ablation: {html.escape(name)}</h2><img src=\"{svg_name}\" alt=\"{html.escape(name)}\">")

    parts.append("</body></html>")
    index = out / "index.html"
    index.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return index
