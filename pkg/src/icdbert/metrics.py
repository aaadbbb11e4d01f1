"""Multi-label evaluation: thresholding, confusion counts, P/R/F1, ROC/AUC and reports."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np


class DegenerateCurveError(ValueError):
    """ROC undefined: the truth vector holds a single class."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def threshold_predictions(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return (np.asarray(probs) >= threshold).astype(np.int8)


def _as_bool_pair(preds, truth):
    p = np.asarray(preds).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    return p, t


def confusion_counts(preds, truth, scope: str = "pooled"):
    """Pooled counts over every cell, or a list of counts per label (column)."""
    p, t = _as_bool_pair(preds, truth)
    if scope == "pooled":
        return ConfusionCounts(
            int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum())
        )
    if scope == "per-label":
        if p.ndim == 1:
            p, t = p[:, None], t[:, None]
        tp = (p & t).sum(axis=0)
        fp = (p & ~t).sum(axis=0)
        tn = (~p & ~t).sum(axis=0)
        fn = (~p & t).sum(axis=0)
        return [ConfusionCounts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, tn, fn)]
    raise ValueError(f"unknown scope {scope!r}")


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    """Zero-denominator ratios are 0."""
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def multilabel_accuracy(preds, truth) -> float:
    """Fraction of (example, label) cells predicted correctly."""
    p, t = _as_bool_pair(preds, truth)
    return float((p == t).mean()) if p.size else 0.0


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    label: str | None = None


def roc_points(scores, truth, label: str | None = None) -> RocCurve:
    """Threshold sweep over distinct scores, high to low; tied scores form one step."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    if s.shape != t.shape:
        raise ValueError("scores and truth differ in length")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCurveError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    # Last index of each run of equal scores.
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(t)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocCurve(fpr, tpr, label)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class LabelMetrics:
    label: str
    kind: str
    short_title: str
    n_pos: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None


@dataclass
class MetricsReport:
    """Per-label rows plus micro (pooled) and macro (label-mean) aggregates.

    ``ranges`` renders each metric as ``"lo-hi (agg)"`` in percent; the
    aggregate is macro for precision/recall/F1/AUC and pooled for accuracy.
    Labels without positive examples have ``auc=None`` and are listed in
    ``auc_missing``.
    """

    per_label: list[LabelMetrics]
    micro: dict
    macro: dict
    subset_accuracy: float
    threshold: float
    n_examples: int
    auc_missing: list[str]
    ranges: dict

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_label"] = [asdict(m) for m in self.per_label]
        return out


def _range_text(values: Sequence[float], agg: float | None) -> str:
    if not values or agg is None:
        return "n/a"
    return f"{100 * min(values):.2f}-{100 * max(values):.2f} ({100 * agg:.2f})"


def aggregate_report(
    probs, truth, labels: Sequence, threshold: float = 0.5
) -> tuple[MetricsReport, list[RocCurve]]:
    """Metrics for every label column.

    ``labels`` holds objects with ``name``, ``kind`` and ``short_title``
    attributes (e.g. :class:`~icdbert.labels.LabelEntry`), one per column.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth).astype(np.int8)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a non-empty (examples, labels) probability matrix")
    if probs.shape != truth.shape or probs.shape[1] != len(labels):
        raise ValueError("probabilities, truth and label list disagree in shape")
    preds = threshold_predictions(probs, threshold)
    counts = confusion_counts(preds, truth, scope="per-label")

    per_label: list[LabelMetrics] = []
    curves: list[RocCurve] = []
    missing: list[str] = []
    for j, entry in enumerate(labels):
        c = counts[j]
        p, r, f1 = precision_recall_f1(c)
        try:
            curve = roc_points(probs[:, j], truth[:, j], label=entry.name)
            area = auc(curve)
            curves.append(curve)
        except DegenerateCurveError:
            area = None
            missing.append(entry.name)
        kind = getattr(entry.kind, "value", entry.kind)
        per_label.append(
            LabelMetrics(entry.name, kind, entry.short_title, c.tp + c.fn,
                         _ratio(c.tp + c.tn, c.total), p, r, f1, area)
        )

    pooled = sum(counts[1:], counts[0])
    mp, mr, mf1 = precision_recall_f1(pooled)
    try:
        micro_auc = auc(roc_points(probs.ravel(), truth.ravel()))
    except DegenerateCurveError:
        micro_auc = None
    micro = {
        "accuracy": multilabel_accuracy(preds, truth),
        "precision": mp,
        "recall": mr,
        "f1": mf1,
        "auc": micro_auc,
        **asdict(pooled),
    }
    aucs = [m.auc for m in per_label if m.auc is not None]
    macro = {
        name: float(np.mean([getattr(m, name) for m in per_label]))
        for name in ("accuracy", "precision", "recall", "f1")
    }
    macro["auc"] = float(np.mean(aucs)) if aucs else None
    ranges = {
        name: _range_text(
            [getattr(m, name) for m in per_label if getattr(m, name) is not None],
            micro["accuracy"] if name == "accuracy" else macro[name],
        )
        for name in METRIC_NAMES
    }
    report = MetricsReport(
        per_label=per_label,
        micro=micro,
        macro=macro,
        subset_accuracy=float((preds == truth).all(axis=1).mean()),
        threshold=threshold,
        n_examples=int(probs.shape[0]),
        auc_missing=missing,
        ranges=ranges,
    )
    return report, curves


_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def roc_svg(curves: Sequence[RocCurve], titles: dict[str, str], heading: str) -> str:
    """ROC curves as SVG polylines on a 1000x800 canvas with a diagonal reference."""
    left, top, width, height = 80, 60, 560, 660

    def xy(fpr, tpr):
        return f"{left + fpr * width:.2f},{top + (1 - tpr) * height:.2f}"

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1000 800" width="1000" height="800">',
        '<rect x="0" y="0" width="1000" height="800" fill="white"/>',
        f'<text x="{left}" y="35" font-family="sans-serif" font-size="20">{escape(heading)}</text>',
        f'<rect x="{left}" y="{top}" width="{width}" height="{height}" fill="none" stroke="black"/>',
        f'<polyline points="{xy(0, 0)} {xy(1, 1)}" fill="none" stroke="#999999" stroke-dasharray="6,4"/>',
        f'<text x="{left + width / 2 - 70}" y="{top + height + 40}" font-family="sans-serif" font-size="16">False positive rate</text>',
        f'<text x="25" y="{top + height / 2 + 60}" font-family="sans-serif" font-size="16" transform="rotate(-90 25 {top + height / 2 + 60})">True positive rate</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{left + tick * width - 12:.2f}" y="{top + height + 20}" font-family="sans-serif" font-size="12">{tick:.2f}</text>'
        )
        parts.append(
            f'<text x="{left - 40}" y="{top + (1 - tick) * height + 4:.2f}" font-family="sans-serif" font-size="12">{tick:.2f}</text>'
        )
    for i, curve in enumerate(curves):
        colour = _PALETTE[i % len(_PALETTE)]
        dash = "" if i < len(_PALETTE) else ' stroke-dasharray="4,3"'
        points = " ".join(xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
        parts.append(
            f'<polyline data-label="{escape(curve.label or "")}" points="{points}" '
            f'fill="none" stroke="{colour}" stroke-width="2"{dash}/>'
        )
        y = top + 10 + i * 22
        title = titles.get(curve.label or "", curve.label or "")
        parts.append(f'<line x1="670" y1="{y}" x2="700" y2="{y}" stroke="{colour}" stroke-width="3"{dash}/>')
        parts.append(
            f'<text x="708" y="{y + 5}" font-family="sans-serif" font-size="13">{escape(title)} (AUC {auc(curve):.3f})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart_svg(names: Sequence[str], values: Sequence[float], heading: str, value_format: str = "{:.0f}") -> str:
    """Horizontal bar chart, one bar per name, longest bar spanning the plot width."""
    left, top, width, row = 260, 60, 620, 22
    height = top + row * len(names) + 40
    peak = max((float(v) for v in values), default=0.0) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1000 {height}" width="1000" height="{height}">',
        f'<rect x="0" y="0" width="1000" height="{height}" fill="white"/>',
        f'<text x="20" y="35" font-family="sans-serif" font-size="20">{escape(heading)}</text>',
    ]
    for i, (name, value) in enumerate(zip(names, values)):
        y = top + i * row
        bar = width * float(value) / peak
        parts.append(
            f'<text x="{left - 8}" y="{y + 15}" font-family="sans-serif" font-size="12" text-anchor="end">{escape(name)}</text>'
        )
        parts.append(
            f'<rect data-label="{escape(name)}" x="{left}" y="{y + 3}" width="{bar:.2f}" height="{row - 6}" fill="{_PALETTE[0]}"/>'
        )
        parts.append(
            f'<text x="{left + bar + 6:.2f}" y="{y + 15}" font-family="sans-serif" font-size="12">{escape(value_format.format(value))}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_reports(
    report: MetricsReport,
    curves: Sequence[RocCurve],
    out_dir: str | os.PathLike,
    labels_per_figure: int = 10,
) -> list[Path]:
    """Write ``metrics.csv``, ``metrics.json`` and ROC SVG(s); returns the paths.

    Up to 20 labels share one figure; larger label sets get one figure per
    ``labels_per_figure`` labels.
    """
    if not report.per_label:
        raise ValueError("refusing to write an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", "kind", "short_title", "n_pos", *METRIC_NAMES])
        for m in report.per_label:
            writer.writerow([m.label, m.kind, m.short_title, m.n_pos,
                             *(_fmt(getattr(m, name)) for name in METRIC_NAMES)])
        n_pos = sum(m.n_pos for m in report.per_label)
        for agg_name, agg in (("micro", report.micro), ("macro", report.macro)):
            writer.writerow([agg_name, "aggregate", "", n_pos, *(_fmt(agg[name]) for name in METRIC_NAMES)])
    written.append(csv_path)

    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(json_path)

    titles = {m.label: m.short_title for m in report.per_label}
    chunk = len(curves) if len(report.per_label) <= 20 else labels_per_figure
    groups = [curves[i:i + chunk] for i in range(0, len(curves), max(chunk, 1))] or [[]]
    for g, group in enumerate(groups, start=1):
        name = "roc.svg" if len(groups) == 1 else f"roc_{g:02d}.svg"
        heading = "ROC curves" if len(groups) == 1 else f"ROC curves ({g}/{len(groups)})"
        path = out / name
        path.write_text(roc_svg(group, titles, heading))
        written.append(path)
    return written
