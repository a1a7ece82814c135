"""Report files: ``report.json`` and the two-level ``hierarchy.svg`` diagram.

The SVG is drawn from the report dictionary alone, so the same picture comes
out of a live run and of a report read back from disk. Every number shown is
copied from the report; nothing is recomputed beyond the flag strength, which
is one minus the p-value for aggregate tests and the p-value itself for
detailed tests.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ValidationError
from .inference import REPORT_FORMAT, REPORT_FORMAT_VERSION

RED = "#d62728"
GRAY = "#b0b0b0"
TEXT = "#1a1a1a"

NODE_W = 190
NODE_H = 84
GAP_X = 16
GAP_Y = 60
MARGIN = 20
RULE_CHARS = 34

BRANCHES = (("covariate", "Covariate shift"), ("outcome", "Outcome shift"))


def json_ready(obj):
    """Replace non-finite floats by ``None`` so the JSON is strict."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return json_ready(obj.item())
    return obj


def report_json(report) -> str:
    """Serialize a :class:`~shiftdiag.inference.HierarchicalReport` or its dict."""
    d = report if isinstance(report, dict) else report.to_dict()
    return json.dumps(json_ready(d), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report, path) -> None:
    Path(path).write_text(report_json(report), encoding="utf-8")


def validate_report(d) -> dict:
    """Check the fields the diagram and summary read.

    Raises
    ------
    ValidationError
        The object is not a report of a supported version.
    """
    if not isinstance(d, dict):
        raise ValidationError("report must be a JSON object")
    if d.get("format") != REPORT_FORMAT:
        raise ValidationError(f"not a report file: format is {d.get('format')!r}")
    if d.get("version") != REPORT_FORMAT_VERSION:
        raise ValidationError(f"unsupported report version {d.get('version')!r}")
    for key in ("aggregate", "detailed_covariate", "detailed_outcome", "flags", "config"):
        if not isinstance(d.get(key), dict):
            raise ValidationError(f"report field {key!r} is missing or not an object")
    for branch, _ in BRANCHES:
        if not isinstance(d["aggregate"].get(branch), dict):
            raise ValidationError(f"report has no aggregate {branch} result")
    return d


def read_report(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read report ({exc.strerror})") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    return validate_report(d)


def flag_strength(p_value, aggregate: bool):
    """One minus ``p`` for aggregate tests, ``p`` for detailed tests."""
    if p_value is None:
        return None
    return 1.0 - p_value if aggregate else p_value


def _rule_text(res: dict) -> str:
    summary = res.get("subgroup_summary")
    return summary.get("text", "") if summary else ""


def _wrap(text: str, width: int, lines: int) -> list[str]:
    words, out, cur = text.split(), [], ""
    for w in words:
        if cur and len(cur) + 1 + len(w) > width:
            out.append(cur)
            cur = w
        else:
            cur = f"{cur} {w}" if cur else w
    if cur:
        out.append(cur)
    if len(out) > lines:
        out = out[:lines]
        out[-1] = out[-1][: width - 3] + "..."
    return out


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def _node(x, y, title, lines, color, tooltip) -> list[str]:
    fill = color if color == GRAY else "#fbe3e3"
    parts = [
        "<g>",
        f"<title>{escape(tooltip)}</title>",
        f'<rect x="{x}" y="{y}" width="{NODE_W}" height="{NODE_H}" rx="6" '
        f'fill="{fill}" stroke="{color}" stroke-width="2"/>',
        f'<text x="{x + 8}" y="{y + 18}" font-weight="bold">{escape(title)}</text>',
    ]
    for i, line in enumerate(lines):
        parts.append(f'<text x="{x + 8}" y="{y + 34 + 14 * i}">{escape(line)}</text>')
    parts.append("</g>")
    return parts


def render_svg(report) -> str:
    """Two-level hierarchy diagram as an SVG 1.1 document.

    Aggregate nodes are red when the aggregate null is rejected and gray
    otherwise. Detailed nodes sit under their aggregate and are red when the
    subset is flagged (its p-value exceeds alpha). The layout depends only on
    the report contents, so identical input gives identical bytes.
    """
    d = validate_report(report if isinstance(report, dict) else report.to_dict())
    alpha = d["config"].get("alpha", 0.05)
    columns = []
    for branch, label in BRANCHES:
        agg = d["aggregate"][branch]
        children = [(k, d[f"detailed_{branch}"][k]) for k in sorted(d[f"detailed_{branch}"])]
        columns.append((branch, label, agg, children))
    widths = [max(1, len(ch)) * (NODE_W + GAP_X) - GAP_X for *_, ch in columns]
    width = 2 * MARGIN + sum(widths) + 2 * GAP_X
    height = 2 * MARGIN + 30 + 2 * NODE_H + GAP_Y
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" '
        f'font-size="11" fill="{TEXT}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    dec = d.get("decomposition") or {}
    head = (f"Loss change {_fmt(dec.get('total'))}: covariate part {_fmt(dec.get('covariate'))}, "
            f"outcome part {_fmt(dec.get('outcome'))} (alpha = {alpha:g})")
    out.append(f'<text x="{MARGIN}" y="{MARGIN + 10}" font-size="12">{escape(head)}</text>')
    x0 = MARGIN
    y_agg = MARGIN + 30
    y_det = y_agg + NODE_H + GAP_Y
    for (branch, label, agg, children), w in zip(columns, widths):
        ax = x0 + (w - NODE_W) // 2
        p = agg.get("p_value")
        color = RED if agg.get("rejected") else GRAY
        lines = [f"p = {_fmt(p)}", f"flag strength = {_fmt(flag_strength(p, True))}"]
        rule = _rule_text(agg)
        lines += _wrap(rule, RULE_CHARS, 2) if rule else [agg.get("note") or ""]
        tooltip = f"{label} ({agg.get('hypothesis')}); rule: {rule or 'none'}"
        out += _node(ax, y_agg, f"{label}", lines[:4], color, tooltip)
        for i, (name, res) in enumerate(children):
            cx = x0 + i * (NODE_W + GAP_X)
            out.append(f'<line x1="{ax + NODE_W // 2}" y1="{y_agg + NODE_H}" '
                       f'x2="{cx + NODE_W // 2}" y2="{y_det}" stroke="{GRAY}"/>')
            cp = res.get("p_value")
            flagged = cp is not None and cp > alpha
            clines = [f"p = {_fmt(cp)}", f"flag strength = {_fmt(flag_strength(cp, False))}",
                      "flagged" if flagged else "not flagged"]
            crule = _rule_text(res)
            if crule:
                clines.append(_wrap(crule, RULE_CHARS, 1)[0])
            elif res.get("error"):
                clines.append("error: " + _wrap(res["error"], RULE_CHARS - 7, 1)[0])
            out += _node(cx, y_det, f"{branch} | {name}", clines, RED if flagged else GRAY,
                         f"{label} explained by shifting {name}; rule: {crule or 'none'}")
        x0 += w + 2 * GAP_X
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(report, path) -> None:
    Path(path).write_text(render_svg(report), encoding="utf-8")


def summary_text(report) -> str:
    """Plain-text digest: aggregate p-values, flag sets and subgroup rules."""
    d = validate_report(report if isinstance(report, dict) else report.to_dict())
    alpha = d["config"].get("alpha", 0.05)
    lines = []
    dec = d.get("decomposition") or {}
    if dec:
        lines.append(f"mean loss: source {_fmt(dec.get('source_loss'))}, "
                     f"target {_fmt(dec.get('target_loss'))}, change {_fmt(dec.get('total'))}")
    for branch, label in BRANCHES:
        agg = d["aggregate"][branch]
        verdict = "rejected" if agg.get("rejected") else "not rejected"
        if agg.get("error"):
            verdict = f"failed ({agg['error']})"
        lines.append(f"{label} [{agg.get('hypothesis')}]: p = {_fmt(agg.get('p_value'))}, "
                     f"{verdict} at alpha = {alpha:g}")
        rule = _rule_text(agg)
        if rule:
            lines.append(f"  subgroup: {rule}")
        stats = agg.get("subgroup_stats")
        if stats and stats.get("decay") is not None:
            lines.append(f"  prevalence in target {_fmt(stats['prevalence_target'])}, "
                         f"loss {_fmt(stats['loss_source'])} -> {_fmt(stats['loss_target'])}")
        detail = d[f"detailed_{branch}"]
        if detail:
            for name in sorted(detail):
                lines.append(f"  {name}: p = {_fmt(detail[name].get('p_value'))}")
            flags = d["flags"].get(branch, [])
            lines.append(f"  flagged subsets: {', '.join(flags) if flags else '(none)'}")
    if d.get("forced_detailed"):
        lines.append("detailed tests were run regardless of the aggregate results")
    for err in d.get("errors", []):
        lines.append(f"warning: {err.splitlines()[0]}")
    return "\n".join(lines) + "\n"
