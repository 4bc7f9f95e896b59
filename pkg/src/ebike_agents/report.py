"""Descriptive aggregates, chart files and the model-fit report.

Charts are written as plain SVG with fixed layout so identical inputs give
identical bytes. Layout constants (pixels):

=================  =====  ==========================================
constant           value  meaning
=================  =====  ==========================================
``CHART_HEIGHT``   360    full image height
``PLOT_TOP``       48     y of the plot area's top edge
``PLOT_BOTTOM``    270    y of the x axis
``PLOT_LEFT``      64     x of the y axis
``BAR_WIDTH``      18     width of one bar
``BAR_GAP``        4      space between bars in a group
``GROUP_GAP``      24     space between groups
``LEGEND_ROW``     16     height of one legend row
=================  =====  ==========================================
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .codebook import bin_age
from .records import CauseType, Component, StructuredIncident

AGE_GROUPS = {1: "Children", 2: "Youth", 3: "Adults", 4: "Seniors"}
UNCLEAR = "Unclear"

CHART_HEIGHT = 360
PLOT_TOP = 48
PLOT_BOTTOM = 270
PLOT_LEFT = 64
PLOT_RIGHT_PAD = 24
BAR_WIDTH = 18
BAR_GAP = 4
GROUP_GAP = 24
LEGEND_ROW = 16
MIN_WIDTH = 320
PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
           "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac")


@dataclass(frozen=True)
class GroupedCount:
    group_key: tuple
    item: str
    count: int


def _age_group(record):
    age = getattr(record, "age_years", None)
    if age is None or age < 0:
        return None
    return AGE_GROUPS[bin_age(age)]


def _blank_to_none(value):
    if value is None or (isinstance(value, str) and not value.strip()):
        return None
    return value


_DERIVED = {
    "age_group": _age_group,
    "gender": lambda r: _blank_to_none(getattr(r, "gender_raw", None)),
    "severity": lambda r: None if getattr(r, "severity_code", -1) is None else r.severity_code,
    "cause": lambda r: getattr(r, "cause_label", None),
}


_FIELDS = set(_DERIVED) | set(StructuredIncident.__dataclass_fields__)


def field_value(record, name: str):
    """Value of a grouping field; derived names take precedence."""
    if name in _DERIVED:
        return _DERIVED[name](record)
    if name in _FIELDS:
        return getattr(record, name)
    raise ValueError(f"unknown field {name!r}")


def top_k_by_group(records: Sequence, group_fields: Sequence[str], item_field: str,
                   k: int, skip_items: Iterable = ()) -> list[GroupedCount]:
    """Most frequent items per group, count descending then label ascending.

    Records whose group or item value is missing do not contribute. Groups
    are emitted in sorted order.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    group_fields = tuple(group_fields)
    unknown = [f for f in group_fields + (item_field,) if f not in _FIELDS]
    if unknown:
        raise ValueError(f"unknown field(s) {unknown}")
    skip = set(skip_items)
    counts: dict[tuple, Counter] = defaultdict(Counter)
    for r in records:
        key = tuple(field_value(r, f) for f in group_fields)
        item = field_value(r, item_field)
        if any(v is None for v in key) or item is None or item in skip:
            continue
        counts[key][str(item)] += 1
    out = []
    for key in sorted(counts, key=lambda t: tuple(str(v) for v in t)):
        ranked = sorted(counts[key].items(), key=lambda kv: (-kv[1], kv[0]))
        out.extend(GroupedCount(key, item, n) for item, n in ranked[:k])
    return out


def cause_type_distribution(records: Sequence) -> dict[str, int]:
    """Partition into human / equipment / both / unclear buckets."""
    out = {"human": 0, "equipment": 0, "both": 0, "unclear": 0}
    bucket = {CauseType.HumanRelated: "human", CauseType.EquipmentRelated: "equipment",
              CauseType.Both: "both"}
    for r in records:
        try:
            ct = CauseType(r.cause_type) if r.cause_type else CauseType.Unclear
        except ValueError:
            ct = CauseType.Unclear
        out[bucket.get(ct, "unclear")] += 1
    return out


def component_link_counts(records: Sequence) -> dict[Component, tuple[int, int]]:
    """``(related, caused)`` incident counts per component."""
    related, caused = Counter(), Counter()
    for r in records:
        rel = {Component.parse(c) for c in r.components_related}
        cau = {Component.parse(c) for c in r.components_caused}
        if not cau <= rel:
            raise ValueError(f"record {r.record_id}: caused components not in related set")
        related.update(rel)
        caused.update(cau)
    return {c: (related[c], caused[c]) for c in Component}


def percent(count: int, total: int) -> str:
    """Percentage with one decimal, derived from integer counts."""
    return f"{100.0 * count / total:.1f}" if total else "0.0"


def ebike_records(records: Sequence) -> list:
    """Records that passed classification and extraction cleanly."""
    return [r for r in records if r.is_ebike == "yes" and r.status == "ok"]


# ------------------------------------------------------------- tables

@dataclass(frozen=True)
class Table:
    name: str
    title: str
    header: tuple[str, ...]
    rows: tuple[tuple, ...]
    chart: tuple  # ((group label, ((series label, value), ...)), ...)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()


def build_tables(records: Sequence, top_k: int = 3) -> list[Table]:
    """The four descriptive tables, computed over e-bike records."""
    records = ebike_records(records)

    top = top_k_by_group(records, ("age_group", "gender"), "cause", top_k, skip_items={UNCLEAR})
    rank = Counter()
    cause_rows = []
    cause_chart = defaultdict(list)
    for g in top:
        rank[g.group_key] += 1
        cause_rows.append((*g.group_key, rank[g.group_key], g.item, g.count))
        cause_chart["/".join(map(str, g.group_key))].append((g.item, g.count))

    sev = top_k_by_group(records, ("age_group", "gender"), "severity", 10 ** 6)
    sev = sorted(sev, key=lambda g: (tuple(map(str, g.group_key)), int(g.item)))
    sev_chart = defaultdict(list)
    for g in sev:
        sev_chart["/".join(map(str, g.group_key))].append((f"severity {g.item}", g.count))

    dist = cause_type_distribution(records)
    total = sum(dist.values())
    dist_rows = tuple((name, n, percent(n, total)) for name, n in dist.items())

    links = component_link_counts(records)
    link_rows = tuple((c.display_name, rel, cau) for c, (rel, cau) in links.items())

    return [
        Table("causes_by_age_gender", f"Top {top_k} causes by age group and gender",
              ("age_group", "gender", "rank", "cause", "count"), tuple(cause_rows),
              tuple((k, tuple(v)) for k, v in cause_chart.items())),
        Table("severity_by_group", "Severity by age group and gender",
              ("age_group", "gender", "severity", "count"),
              tuple((*g.group_key, g.item, g.count) for g in sev),
              tuple((k, tuple(v)) for k, v in sev_chart.items())),
        Table("cause_type_distribution", "Cause type distribution",
              ("cause_type", "count", "percent"), dist_rows,
              (("all records", tuple((name, n) for name, n, _ in dist_rows)),)),
        Table("component_links", "Incidents related to and caused by each component",
              ("component", "related", "caused"), link_rows,
              tuple((name, (("related", rel), ("caused", cau))) for name, rel, cau in link_rows)),
    ]


# ---------------------------------------------------------------- svg

def _fmt_num(x: float) -> str:
    return f"{x:.1f}".rstrip("0").rstrip(".")


def bar_chart_svg(title: str, groups: Sequence) -> str:
    """Grouped bar chart; ``groups`` is ``[(label, [(series, value), ...]), ...]``."""
    series = sorted({s for _, bars in groups for s, _ in bars})
    colour = {s: PALETTE[i % len(PALETTE)] for i, s in enumerate(series)}
    ymax = max([v for _, bars in groups for _, v in bars] + [0])
    top = max(1, ymax)
    plot_h = PLOT_BOTTOM - PLOT_TOP

    widths = [len(bars) * (BAR_WIDTH + BAR_GAP) - BAR_GAP if bars else BAR_WIDTH for _, bars in groups]
    plot_w = sum(widths) + GROUP_GAP * (len(groups) + 1)
    width = max(MIN_WIDTH, PLOT_LEFT + plot_w + PLOT_RIGHT_PAD)
    height = CHART_HEIGHT + LEGEND_ROW * len(series)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}" stroke="#000000"/>',
        f'<line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{width - PLOT_RIGHT_PAD}" '
        f'y2="{PLOT_BOTTOM}" stroke="#000000"/>',
    ]
    for tick in range(5):
        value = top * tick / 4
        y = PLOT_BOTTOM - plot_h * tick / 4
        out.append(f'<text x="{PLOT_LEFT - 6}" y="{_fmt_num(y + 4)}" text-anchor="end">'
                   f"{_fmt_num(value)}</text>")
    if not groups:
        out.append(f'<text x="{width // 2}" y="{(PLOT_TOP + PLOT_BOTTOM) // 2}" '
                   'text-anchor="middle" fill="#666666">no data</text>')

    x = PLOT_LEFT + GROUP_GAP
    for (label, bars), w in zip(groups, widths):
        for i, (name, value) in enumerate(bars):
            h = plot_h * value / top
            bx = x + i * (BAR_WIDTH + BAR_GAP)
            out.append(f'<rect x="{bx}" y="{_fmt_num(PLOT_BOTTOM - h)}" width="{BAR_WIDTH}" '
                       f'height="{_fmt_num(h)}" fill="{colour[name]}">'
                       f"<title>{escape(f'{label} {name}: {value}')}</title></rect>")
        cx = x + w / 2
        out.append(f'<text x="{_fmt_num(cx)}" y="{PLOT_BOTTOM + 14}" text-anchor="end" '
                   f'transform="rotate(-30 {_fmt_num(cx)} {PLOT_BOTTOM + 14})">{escape(str(label))}</text>')
        x += w + GROUP_GAP

    for i, name in enumerate(series):
        y = CHART_HEIGHT + LEGEND_ROW * i - 8
        out.append(f'<rect x="{PLOT_LEFT}" y="{y - 9}" width="10" height="10" fill="{colour[name]}"/>')
        out.append(f'<text x="{PLOT_LEFT + 16}" y="{y}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------- fit report

STARS = ((0.01, "***"), (0.05, "**"))


def significance(p) -> str:
    if p is None or not math.isfinite(p):
        return ""
    for cut, mark in STARS:
        if p < cut:
            return mark
    return ""


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def fit_summary(fit) -> dict:
    rows = []
    for row in fit.coef_table():
        rows.append({
            "name": row["name"],
            "kind": row["kind"],
            "estimate": _num(row["estimate"]),
            "se": _num(row["se"]),
            "z": _num(row["z"]),
            "p_value": _num(row["p_value"]),
            "significance": significance(_num(row["p_value"])),
            "reliable": row["reliable"],
        })
    return {
        "n": fit.n,
        "levels": fit.K,
        "n_params": fit.n_params,
        "ll_null": fit.ll_null,
        "ll_model": fit.ll_model,
        "pseudo_r2": fit.pseudo_r2,
        "aic": fit.aic,
        "bic": fit.bic,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "separation": list(fit.separation),
        "warnings": list(fit.warnings),
        "coefficients": rows,
    }


def _cell(x, digits=3):
    return "NaN" if x is None else f"{x:.{digits}f}"


def render_fit_text(fits: dict, lr=None, notes: Sequence[str] = ()) -> str:
    """Plain-text model table followed by the likelihood-ratio block."""
    width = max([12] + [len(r["name"]) for s in fits.values() for r in s["coefficients"]]) + 2
    lines = ["Ordered logit model", ""]
    lines.append(f"{'Model':<12}{'Coeff':<{width}}{'Estimate':>10}{'Std.Err':>10}"
                 f"{'p-value':>9}  Signif")
    for name, s in fits.items():
        lines.append("-" * (12 + width + 37))
        for r in s["coefficients"]:
            if r["kind"] != "coefficient":
                continue
            flag = "" if r["reliable"] else "  (unreliable se)"
            lines.append(f"{name.title():<12}{r['name']:<{width}}{_cell(r['estimate']):>10}"
                         f"{_cell(r['se']):>10}{_cell(r['p_value']):>9}  {r['significance']:<3}{flag}")
        cuts = [r for r in s["coefficients"] if r["kind"] == "threshold"]
        lines.append(f"{'':<12}{'thresholds':<{width}}" + " ".join(_cell(r["estimate"]) for r in cuts))
        lines.append(f"{'':<12}{'Pseudo R2':<{width}}{s['pseudo_r2']:>10.3f}")
    lines += ["", "Likelihood ratio test", ""]
    lines.append(f"{'Model':<12}{'N':>6}{'ll(null)':>11}{'ll(model)':>11}{'AIC':>10}{'BIC':>10}")
    for name, s in fits.items():
        lines.append(f"{name.title():<12}{s['n']:>6}{s['ll_null']:>11.3f}{s['ll_model']:>11.3f}"
                     f"{s['aic']:>10.3f}{s['bic']:>10.3f}")
    if lr is not None:
        lines.append(f"LR chi2({lr.df}) = {lr.lr:.3f}")
        lines.append(f"Prob > chi2 = {lr.p_value:.4g}")
        if lr.warning:
            lines.append(f"warning: {lr.warning}")
    lines.append("")
    lines.append("Significance: *** p < 0.01, ** p < 0.05")
    for s in fits.values():
        for w in s["warnings"]:
            lines.append(f"note: {w}")
    lines.extend(f"note: {n}" for n in notes)
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- output

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def emit_report(tables: Sequence[Table], out_dir, fits: dict | None = None, lr=None,
                notes: Sequence[str] = ()) -> dict:
    """Write CSV and SVG per table, the fit report when ``fits`` is given,
    and ``manifest.json``. Returns the manifest."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise OSError(f"output directory does not exist: {out_dir}")
    files: dict[str, bytes] = {}
    for t in tables:
        files[f"{t.name}.csv"] = t.to_csv().encode("utf-8")
        files[f"{t.name}.svg"] = bar_chart_svg(t.title, t.chart).encode("utf-8")
    if fits:
        summaries = {name: fit_summary(fit) for name, fit in fits.items()}
        payload = {"models": summaries, "lr_test": lr.to_dict() if lr else None,
                   "notes": list(notes)}
        files["fit_report.json"] = (json.dumps(payload, indent=2, allow_nan=False) + "\n").encode("utf-8")
        files["fit_report.txt"] = render_fit_text(summaries, lr, notes).encode("utf-8")

    manifest = {"files": []}
    for name in sorted(files):
        (out_dir / name).write_bytes(files[name])
        manifest["files"].append({"path": name, "bytes": len(files[name]),
                                  "sha256": _sha256(files[name])})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
