"""Accuracy, confusion matrices, correctness judgments and tabular reports.

Accuracies are exact rationals (:class:`fractions.Fraction`) and are only
rounded when rendered, half-up to one decimal percent.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import ImageRecord, PolygonAnnotation

VERDICTS = ("correct", "incorrect")
REASONS = {"marked-damage": "correct", "correct-rejection": "correct",
           "missed-damage": "incorrect", "false-alarm": "incorrect"}


class UndefinedMetricError(ValueError):
    pass


class DataError(ValueError):
    pass


def accuracy(tp: int, n: int) -> Fraction:
    """True predictions over samples, exactly."""
    if n < 1:
        raise UndefinedMetricError("accuracy is undefined for zero samples")
    if not 0 <= tp <= n:
        raise ValueError(f"need 0 <= tp <= n, got tp={tp}, n={n}")
    return Fraction(int(tp), int(n))


def percent(value: Fraction, decimals: int = 1) -> str:
    """Round-half-up percentage string, e.g. ``Fraction(2819, 4661) -> '60.5%'``."""
    scale = 10 ** decimals
    q = Fraction(value) * 100 * scale
    units = (q.numerator * 2 + q.denominator) // (2 * q.denominator)
    whole, frac = divmod(units, scale)
    return f"{whole}.{frac:0{decimals}d}%" if decimals else f"{whole}%"


# ---------------------------------------------------------------------------
# Confusion matrix


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def true_predictions(self) -> int:
        return int(np.trace(self.counts))

    def accuracy(self) -> Fraction:
        return accuracy(self.true_predictions, self.total)


def confusion(preds: Sequence[int], labels: Sequence[int], k: int) -> ConfusionMatrix:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise DataError(f"{len(preds)} predictions for {len(labels)} labels")
    counts = np.zeros((k, k), dtype=np.int64)
    for i, (p, t) in enumerate(zip(preds, labels)):
        if not (0 <= p < k and 0 <= t < k):
            raise DataError(f"sample {i}: class index out of range for k={k} (label {t}, prediction {p})")
        counts[t, p] += 1
    return ConfusionMatrix(counts)


# ---------------------------------------------------------------------------
# Judgments


@dataclass(frozen=True)
class DetectionJudgment:
    image_id: int | None
    verdict: str
    reason: str
    group: str | None = None  # e.g. the image's scene level
    gated: bool | None = None  # cascade only: whether the segmenter ran

    def __post_init__(self):
        if REASONS.get(self.reason) != self.verdict:
            raise ValueError(f"reason {self.reason!r} does not imply verdict {self.verdict!r}")

    @property
    def correct(self) -> bool:
        return self.verdict == "correct"

    @classmethod
    def of(cls, image_id, reason: str, **kw) -> "DetectionJudgment":
        return cls(image_id, REASONS[reason], reason, **kw)

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "verdict": self.verdict, "reason": self.reason}
        if self.group is not None:
            d["group"] = self.group
        if self.gated is not None:
            d["gated"] = self.gated
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectionJudgment":
        return cls(d["image_id"], d["verdict"], d["reason"], d.get("group"), d.get("gated"))


def _truth_instances(truth) -> list[tuple[str, tuple[float, float, float, float]]]:
    if isinstance(truth, ImageRecord):
        truth = truth.annotations
    out = []
    for t in truth:
        if isinstance(t, PolygonAnnotation):
            out.append((t.category, t.bbox()))
        else:
            cat, box = t
            out.append((cat, tuple(box)))
    return out


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def judge_detection(dets: Sequence, truth, iou_min: float = 0.1, image_id=None) -> DetectionJudgment:
    """Image-level correctness of a detector's output.

    Damaged image: correct when some detection overlaps a same-category
    truth box with IoU >= ``iou_min``.  Damage-free image: correct only when
    nothing was detected.  ``truth`` is an :class:`ImageRecord`, a list of
    polygons or ``(category, box)`` pairs.
    """
    if not 0.0 <= iou_min <= 1.0:
        raise ValueError("iou_min must be in [0, 1]")
    inst = _truth_instances(truth)
    if not inst:
        return DetectionJudgment.of(image_id, "false-alarm" if len(dets) else "correct-rejection")
    for d in dets:
        for cat, box in inst:
            if d.category == cat and box_iou(tuple(d.box), box) >= iou_min:
                return DetectionJudgment.of(image_id, "marked-damage")
    return DetectionJudgment.of(image_id, "missed-damage")


def judge_segmentation(mask, truth_masks: Sequence[np.ndarray], min_overlap: int = 1,
                       image_id=None) -> DetectionJudgment:
    """Correct when the prediction shares ``min_overlap`` pixels with some truth instance.

    ``mask`` is a bool raster or a category -> raster mapping (united).  With
    no truth instances the image is correct only if the prediction is empty.
    """
    if isinstance(mask, Mapping):
        shapes = {np.shape(m) for m in mask.values()}
        if len(shapes) > 1:
            raise ValueError("predicted masks differ in size")
        pred = np.logical_or.reduce([np.asarray(m, bool) for m in mask.values()]) if mask else None
    else:
        pred = np.asarray(mask, bool)
    truth_masks = [np.asarray(t, bool) for t in truth_masks]
    for t in truth_masks:
        if pred is not None and t.shape != pred.shape:
            raise ValueError(f"mask shape {pred.shape} differs from truth {t.shape}")
    if min_overlap < 1:
        raise ValueError("min_overlap must be >= 1")
    predicted_any = pred is not None and bool(pred.any())
    if not truth_masks:
        return DetectionJudgment.of(image_id, "false-alarm" if predicted_any else "correct-rejection")
    if predicted_any and any(int(np.logical_and(pred, t).sum()) >= min_overlap for t in truth_masks):
        return DetectionJudgment.of(image_id, "marked-damage")
    return DetectionJudgment.of(image_id, "missed-damage")


def judge_cascade(result, record: ImageRecord, min_overlap: int = 1) -> DetectionJudgment:
    """Judge a cascade outcome; a closed gate counts as an empty prediction."""
    truth = record.masks()
    if not result.gated:
        reason = "missed-damage" if truth else "correct-rejection"
        return DetectionJudgment.of(record.id, reason, gated=False)
    j = judge_segmentation(result.masks, truth, min_overlap, record.id)
    return DetectionJudgment.of(record.id, j.reason, gated=True)


def pipeline_accuracy(judgments: Iterable[DetectionJudgment]) -> Fraction:
    """Fraction of all judged images that are correct."""
    js = list(judgments)
    return accuracy(sum(j.correct for j in js), len(js))


JUDGMENTS_FORMAT = "structdamage-judgments/1"


def dump_judgments(judgments: Iterable[DetectionJudgment], method: str | None = None) -> bytes:
    """Audit document: one record per image with its verdict and reason."""
    doc = {"format": JUDGMENTS_FORMAT, "method": method,
           "judgments": [j.to_dict() for j in judgments]}
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()


def load_judgments(data: bytes | str) -> tuple[str | None, list[DetectionJudgment]]:
    doc = json.loads(data)
    if doc.get("format") != JUDGMENTS_FORMAT:
        raise DataError(f"unsupported judgments format {doc.get('format')!r}")
    return doc.get("method"), [DetectionJudgment.from_dict(d) for d in doc["judgments"]]


def _by_group(judgments: Iterable[DetectionJudgment]) -> dict[str, list[DetectionJudgment]]:
    groups: dict[str, list[DetectionJudgment]] = {}
    for j in judgments:
        groups.setdefault(j.group or "all", []).append(j)
    return groups


def judgment_rows(judgments: Iterable[DetectionJudgment], order: Sequence[str] = ()) -> list[ReportRow]:
    """One N / TP row per group, groups listed in ``order`` first."""
    groups = _by_group(judgments)
    names = [g for g in order if g in groups] + sorted(g for g in groups if g not in order)
    return [ReportRow(g, len(groups[g]), sum(j.correct for j in groups[g])) for g in names]


def comparison_from_judgments(segmenter: Sequence[DetectionJudgment], cascade: Sequence[DetectionJudgment],
                              detector: Sequence[DetectionJudgment],
                              order: Sequence[str] = ()) -> list["MethodComparisonRow"]:
    """Per-group counts for the three-method comparison from per-image judgments."""
    seg, cas, det = _by_group(segmenter), _by_group(cascade), _by_group(detector)
    names = [g for g in order if g in seg] + sorted(g for g in seg if g not in order)
    rows = []
    for g in names:
        passed = [j for j in cas.get(g, []) if j.gated]
        rows.append(MethodComparisonRow(
            g, len(seg[g]), sum(j.correct for j in seg[g]), len(passed),
            sum(j.correct for j in passed), sum(j.correct for j in det.get(g, []))))
    return rows


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ReportRow:
    name: str
    n: int
    tp: int
    printed: str | None = None  # reference percentage to audit against, e.g. "60.5%"

    def __post_init__(self):
        if not 0 <= self.tp <= self.n:
            raise ValueError(f"row {self.name!r}: need 0 <= TP <= N")

    @property
    def accuracy(self) -> Fraction:
        return accuracy(self.tp, self.n)

    @property
    def rendered(self) -> str:
        return percent(self.accuracy)


@dataclass
class EvaluationReport:
    title: str
    columns: list[str]
    cells: list[list[str]]
    rows: list[ReportRow] = field(default_factory=list)
    audit: list[str] = field(default_factory=list)

    def render_text(self) -> str:
        table = [self.columns] + self.cells
        widths = [max(len(r[i]) for r in table) for i in range(len(self.columns))]
        lines = [self.title] if self.title else []
        for k, r in enumerate(table):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        if self.audit:
            lines.append("")
            lines.extend(f"audit: {a}" for a in self.audit)
        return "\n".join(lines) + "\n"

    def render_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.cells)
        return buf.getvalue()


def _audit(label: str, tp: int, n: int, printed: str | None) -> str | None:
    if printed is None or n == 0:
        return None
    computed = percent(accuracy(tp, n))
    if computed == printed:
        return None
    return f"{label}: reference prints {printed} but {tp}/{n} = {computed}"


def _as_rows(rows) -> list[ReportRow]:
    rows = list(rows)
    if rows and isinstance(rows[0], DetectionJudgment):
        return [ReportRow("all", len(rows), sum(j.correct for j in rows))]
    out = []
    for r in rows:
        if isinstance(r, ReportRow):
            out.append(r)
        elif isinstance(r, Mapping):
            out.append(ReportRow(r["name"], int(r["n"]), int(r["tp"]), r.get("printed")))
        else:
            out.append(ReportRow(*r))
    return out


def build_report(rows, layout: str = "simple", title: str = "",
                 average_printed: str | None = None) -> EvaluationReport:
    """Aligned N / TP / accuracy table.

    ``rows`` are :class:`ReportRow`, ``(name, n, tp[, printed])`` tuples,
    mappings, or a list of judgments (one pooled row).  ``layout`` is
    ``"simple"`` or ``"average"``; the latter appends a pooled average
    (sum TP / sum N) on the last row.
    """
    rows = _as_rows(rows)
    if not rows:
        raise ValueError("a report needs at least one row")
    if layout not in ("simple", "average"):
        raise ValueError(f"unknown layout {layout!r}")
    columns = ["Name", "N", "TP", "Accuracy"]
    cells = [[r.name, f"{r.n:,}", f"{r.tp:,}", r.rendered] for r in rows]
    audit = [a for r in rows if (a := _audit(r.name, r.tp, r.n, r.printed))]
    if layout == "average":
        columns.append("Average accuracy")
        tp, n = sum(r.tp for r in rows), sum(r.n for r in rows)
        for c in cells:
            c.append("")
        cells[-1][-1] = percent(accuracy(tp, n))
        if (a := _audit("pooled average", tp, n, average_printed)):
            audit.append(a)
    return EvaluationReport(title, columns, cells, rows, audit)


@dataclass(frozen=True)
class MethodComparisonRow:
    """One scene level of the segmenter / cascade / detector comparison."""
    name: str
    n: int
    segmenter_tp: int
    gate_tp: int
    cascade_tp: int
    detector_tp: int
    printed: Mapping[str, str] = field(default_factory=dict)


# Printed reference counts for crack detection by scene level, with the
# percentages printed beside them.
REFERENCE_CRACK_COMPARISON = (
    MethodComparisonRow("Pixel level", 4661, 2819, 2988, 2810, 3948,
                        {"segmenter": "60.5%", "cascade": "94.0%", "detector": "84.7%"}),
    MethodComparisonRow("Object level", 5713, 1490, 1479, 1129, 4407,
                        {"segmenter": "26.2%", "cascade": "59.6%", "detector": "77.1%"}),
    MethodComparisonRow("Structural level", 5832, 500, 717, 356, 4774,
                        {"segmenter": "8.6%", "cascade": "49.7%", "detector": "81.9%"}),
)

# Printed reference counts for field images by source, with the pooled average.
REFERENCE_FIELD_COUNTS = (ReportRow("Cell phone", 220, 172, "78.8%"), ReportRow("Drones", 303, 172, "56.8%"))
REFERENCE_FIELD_AVERAGE = "65.8%"


def _cell(tp: int, n: int) -> str:
    return percent(accuracy(tp, n)) if n else "n/a"


def comparison_report(rows: Sequence[MethodComparisonRow] = REFERENCE_CRACK_COMPARISON,
                      title: str = "Crack detection by scene level") -> EvaluationReport:
    """Segmenter-alone, cascade and detector columns side by side.

    Cascade accuracy is segmented true predictions over images passed by the
    gate, the convention under which the printed cascade cells follow from
    their counts.  Cells whose printed value disagrees are listed in
    ``audit``.
    """
    columns = ["Scene", "N", "Seg TP", "Seg acc", "Gate TP", "Cascade TP", "Cascade acc",
               "Det TP", "Det acc"]
    cells, audit = [], []
    for r in rows:
        cells.append([r.name, f"{r.n:,}", f"{r.segmenter_tp:,}", _cell(r.segmenter_tp, r.n), f"{r.gate_tp:,}",
                      f"{r.cascade_tp:,}", _cell(r.cascade_tp, r.gate_tp), f"{r.detector_tp:,}",
                      _cell(r.detector_tp, r.n)])
        for key, tp, n in (("segmenter", r.segmenter_tp, r.n), ("cascade", r.cascade_tp, r.gate_tp),
                           ("detector", r.detector_tp, r.n)):
            if (a := _audit(f"{r.name} / {key}", tp, n, r.printed.get(key))):
                if key == "cascade":
                    a += f"; not derivable from the printed counts (over all images {_cell(tp, r.n)})"
                audit.append(a)
    return EvaluationReport(title, columns, cells, [], audit)


def field_report(rows: Sequence[ReportRow] = REFERENCE_FIELD_COUNTS,
                 average_printed: str | None = REFERENCE_FIELD_AVERAGE) -> EvaluationReport:
    return build_report(rows, "average", "Field damage detection by image source", average_printed)
