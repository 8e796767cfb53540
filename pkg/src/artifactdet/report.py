"""Aligned-text rendering of metric reports and anchor statistics."""

from __future__ import annotations

from typing import Mapping, Sequence

from .evaluation import HEADLINE, MetricReport

NA = "n/a"


def fmt(value) -> str:
    return NA if value is None else f"{float(value):.3f}"


def render_rows(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cells = [list(header)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_main_table(report: MetricReport, label: str = "model") -> str:
    """One row in C-AUROC, C-AP, C-F1, S-AUROC, S-AP, S-F1, S-AUPRO order."""
    head = report.headline()
    out = render_rows(["method", *HEADLINE], [[label, *(fmt(head[k]) for k in HEADLINE)]])
    binary = report.classification.get("binary") or {}
    if any(v is not None for v in binary.values()):
        out += "\nartifact-vs-clean: " + "  ".join(
            f"{k}={fmt(binary.get(key))}" for k, key in zip(HEADLINE[:3], ("auroc", "ap", "f1_max")))
    return out


def render_per_class_table(report: MetricReport) -> str:
    """Per artifact class: all classification and segmentation metrics, ``n/a`` when absent."""
    cls_rows = report.classification.get("per_class") or {}
    seg_rows = report.segmentation.get("per_class") or {}
    names = list(dict.fromkeys([*cls_rows, *seg_rows]))
    if not names:
        return render_rows(["class", *HEADLINE], [[NA, *([NA] * len(HEADLINE))]])
    rows = []
    for name in names:
        c = cls_rows.get(name) or {}
        s = seg_rows.get(name) or {}
        rows.append([name, fmt(c.get("auroc")), fmt(c.get("ap")), fmt(c.get("f1_max")),
                     fmt(s.get("auroc")), fmt(s.get("ap")), fmt(s.get("f1_max")), fmt(s.get("aupro"))])
    return render_rows(["class", *HEADLINE], rows)


def render_generalization(paired: Mapping[str, MetricReport]) -> str:
    """Side by side C-AP, S-AP, S-F1 for the synthetic and real-captured subsets."""
    header = ["subset", "C-AP", "S-AP", "S-F1"]
    rows = []
    for name, rep in paired.items():
        h = rep.headline()
        rows.append([name, fmt(h["C-AP"]), fmt(h["S-AP"]), fmt(h["S-F1"])])
    return render_rows(header, rows)


def render_separation(stats: Mapping | None) -> str:
    if not stats:
        return "anchor separation: n/a"
    rows = []
    for when in ("before", "after"):
        s = stats.get(when) or {}
        rows.append([when, fmt(s.get("clean_vs_artifact_mean")), fmt(s.get("artifact_pairwise_mean"))])
    return render_rows(["anchors", "cos(clean, artifact)", "cos(artifact, artifact)"], rows)


def render_report(report: MetricReport, separation: Mapping | None = None, label: str = "model") -> str:
    parts = [render_main_table(report, label), "", render_per_class_table(report)]
    if separation is not None:
        parts += ["", render_separation(separation)]
    return "\n".join(parts)


def parse_main_table(text: str) -> dict[str, float | None]:
    """Inverse of ``render_main_table`` for the metric row (3-decimal precision)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValueError("not a rendered metric table")
    header, row = lines[0].split(), lines[2].split()
    if header[1:] != list(HEADLINE) or len(row) != len(header):
        raise ValueError("not a rendered metric table")
    return {k: None if v == NA else float(v) for k, v in zip(HEADLINE, row[1:])}
