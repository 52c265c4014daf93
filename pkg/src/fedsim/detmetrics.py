"""Detection evaluation over YOLO label files: IoU, NMS, matching, AP/mAP, F1.

AP uses all-point interpolation: precision is replaced by its running maximum
from the right and integrated over every recall step (VOC2010+ style).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

AP_METHOD = "all-point interpolated (precision envelope)"


class LabelParseError(ValueError):
    def __init__(self, message: str, line: int, source: str | None = None):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.source = source


@dataclass(frozen=True)
class Box:
    """YOLO ground-truth box: class id plus normalized centre/size."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def degenerate(self) -> bool:
        return self.w <= 0 or self.h <= 0

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection(Box):
    confidence: float = 1.0


GroundTruthBox = Box


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corner differences, so iou(a, a) is exactly 1
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _by_confidence(dets: Sequence[Detection]) -> list[int]:
    # sorted() is stable, so equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Kept boxes are returned in selection order (descending confidence).
    """
    if not 0 <= iou_threshold <= 1:
        raise ValueError("iou_threshold must be in [0, 1]")
    kept: list[Detection] = []
    for i in _by_confidence(dets):
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k, d) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


@dataclass
class MatchResult:
    preds: list[Detection]        # confidence-descending
    is_tp: list[bool]             # aligned with preds
    matched_gt: list[int | None]  # index into the ground-truth list
    fn_by_class: dict[int, int]
    gt_by_class: dict[int, int]


def match_detections(preds: Sequence[Detection], gts: Sequence[Box],
                     iou_threshold: float = 0.5) -> MatchResult:
    """One-to-one greedy matching within class, highest confidence first.

    A prediction takes the still-unmatched ground truth of its class with the
    largest IoU, provided that IoU is positive and at least ``iou_threshold``.
    Equal IoUs resolve to the lower ground-truth index.
    """
    order = _by_confidence(preds)
    used = [False] * len(gts)
    sorted_preds, flags, matched = [], [], []
    for i in order:
        p = preds[i]
        best_j, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if used[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v > best_iou:
                best_j, best_iou = j, v
        hit = best_j is not None and best_iou > 0 and best_iou >= iou_threshold
        if hit:
            used[best_j] = True
        sorted_preds.append(p)
        flags.append(hit)
        matched.append(best_j if hit else None)
    fn: dict[int, int] = {}
    n_gt: dict[int, int] = {}
    for j, g in enumerate(gts):
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
        if not used[j]:
            fn[g.class_id] = fn.get(g.class_id, 0) + 1
    return MatchResult(sorted_preds, flags, matched, fn, n_gt)


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP from confidence-ordered TP/FP flags."""
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return 0.0
    tp = fp = 0
    recall, precision = [], []
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        recall.append(tp / num_gt)
        precision.append(tp / (tp + fp))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev = 0.0
    for r, p in zip(recall, precision):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def mean_average_precision(per_class_ap: Mapping[int, float]) -> float:
    if not per_class_ap:
        raise ValueError("no classes to average")
    # math.fsum keeps the mean independent of class order
    return math.fsum(per_class_ap.values()) / len(per_class_ap)


def f1_score(precision: float, recall: float) -> float:
    if not (0 <= precision <= 1 and 0 <= recall <= 1):
        raise ValueError("precision and recall must lie in [0, 1]")
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# --- YOLO label files -------------------------------------------------------

def _check_unit(value: float, name: str, line: int, source: str | None) -> None:
    if not (0.0 <= value <= 1.0):
        raise LabelParseError(f"{name}={value} outside [0, 1]", line, source)


def parse_yolo_labels(text: str, kind: str = "ground_truth",
                      source: str | None = None) -> list[Box]:
    """Parse ``class cx cy w h [confidence]`` lines.

    ``kind`` is ``"ground_truth"`` (5 fields) or ``"prediction"`` (6 fields).
    Blank lines are skipped.
    """
    if kind not in ("ground_truth", "prediction"):
        raise ValueError(f"unknown label kind {kind!r}")
    nfields = 5 if kind == "ground_truth" else 6
    out: list[Box] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != nfields:
            raise LabelParseError(f"expected {nfields} fields, got {len(parts)}", lineno, source)
        try:
            cls_f = float(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise LabelParseError(f"non-numeric field in {raw.strip()!r}", lineno, source) from None
        if not all(math.isfinite(v) for v in [cls_f, *vals]):
            raise LabelParseError("non-finite value", lineno, source)
        if cls_f < 0 or cls_f != int(cls_f):
            raise LabelParseError(f"class id {parts[0]!r} is not a non-negative integer", lineno, source)
        for name, v in zip(("cx", "cy", "w", "h", "confidence"), vals):
            _check_unit(v, name, lineno, source)
        if vals[2] == 0 or vals[3] == 0:
            log.warning("%s: degenerate box (zero width or height) can never match",
                        f"{source}:{lineno}" if source else f"line {lineno}")
        if kind == "ground_truth":
            out.append(Box(int(cls_f), *vals))
        else:
            out.append(Detection(int(cls_f), *vals[:4], confidence=vals[4]))
    return out


def format_yolo_labels(boxes: Iterable[Box]) -> str:
    """Inverse of :func:`parse_yolo_labels`; floats are written with ``repr``."""
    lines = []
    for b in boxes:
        fields = [str(b.class_id), repr(b.cx), repr(b.cy), repr(b.w), repr(b.h)]
        if isinstance(b, Detection):
            fields.append(repr(b.confidence))
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


# --- pooled evaluation ------------------------------------------------------

@dataclass
class ClassCounts:
    n_gt: int = 0
    tp: int = 0
    fp: int = 0

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    precision: float
    recall: float
    f1: float
    macro_f1: float
    counts: dict[int, ClassCounts] = field(default_factory=dict)
    iou_threshold: float = 0.5

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "n_gt", "TP", "FP", "FN", "AP"])
        for c in sorted(self.counts):
            k = self.counts[c]
            w.writerow([c, k.n_gt, k.tp, k.fp, k.fn, repr(self.per_class_ap[c])])
        for name, value in (("mAP", self.map), ("micro-P", self.precision),
                            ("micro-R", self.recall), ("micro-F1", self.f1),
                            ("macro-F1", self.macro_f1)):
            w.writerow([name, "", "", "", "", repr(value)])
        return buf.getvalue()

    def to_table(self, class_names: Sequence[str] | None = None) -> str:
        lines = [f"AP method: {AP_METHOD}; IoU threshold {self.iou_threshold:g}",
                 f"{'class':<24}{'n_gt':>6}{'TP':>6}{'FP':>6}{'FN':>6}{'AP':>9}"]
        for c in sorted(self.counts):
            k = self.counts[c]
            label = f"{c} {class_names[c]}" if class_names and c < len(class_names) else str(c)
            lines.append(f"{label:<24}{k.n_gt:>6}{k.tp:>6}{k.fp:>6}{k.fn:>6}"
                         f"{percent(self.per_class_ap[c]):>9}")
        lines.append(f"F1-Score {percent(self.f1)}  mAP {percent(self.map)}  "
                     f"(P {percent(self.precision)}, R {percent(self.recall)}, "
                     f"macro-F1 {percent(self.macro_f1)})")
        return "\n".join(lines) + "\n"


def percent(x: float) -> str:
    return f"{100 * x:.1f}%"


def evaluate_scenes(scenes: Sequence[tuple[Sequence[Detection], Sequence[Box]]],
                    iou_threshold: float = 0.5, apply_nms: bool = False,
                    nms_threshold: float = 0.5) -> EvalReport:
    """Evaluate a list of per-image (predictions, ground truths) pairs.

    Matching is per image; the resulting TP/FP flags are pooled per class in
    global confidence order (ties by image order, then input order).
    """
    records: dict[int, list[tuple[float, int, int, bool]]] = {}
    counts: dict[int, ClassCounts] = {}
    for img, (preds, gts) in enumerate(scenes):
        if apply_nms:
            preds = nms(preds, nms_threshold)
        m = match_detections(preds, gts, iou_threshold)
        for c, n in m.gt_by_class.items():
            counts.setdefault(c, ClassCounts()).n_gt += n
        for rank, (p, hit) in enumerate(zip(m.preds, m.is_tp)):
            k = counts.setdefault(p.class_id, ClassCounts())
            if hit:
                k.tp += 1
            else:
                k.fp += 1
            records.setdefault(p.class_id, []).append((-p.confidence, img, rank, hit))
    if not counts:
        raise ValueError("nothing to evaluate: no ground truths and no predictions")
    per_class_ap = {}
    f1s = []
    for c in sorted(counts):
        flags = [r[3] for r in sorted(records.get(c, []))]
        per_class_ap[c] = average_precision(flags, counts[c].n_gt)
        f1s.append(f1_score(counts[c].precision, counts[c].recall))
    tp = sum(k.tp for k in counts.values())
    fp = sum(k.fp for k in counts.values())
    n_gt = sum(k.n_gt for k in counts.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return EvalReport(per_class_ap, mean_average_precision(per_class_ap), precision, recall,
                      f1_score(precision, recall), math.fsum(f1s) / len(f1s), counts,
                      iou_threshold)


def _read_dir(path: Path, kind: str) -> dict[str, list[Box]]:
    out = {}
    for f in sorted(path.glob("*.txt")):
        try:
            text = f.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read {f}: {exc}") from exc
        out[f.stem] = parse_yolo_labels(text, kind, source=str(f))
    return out


def evaluate(pred_dir, gt_dir, iou_threshold: float = 0.5, apply_nms: bool = False,
             nms_threshold: float = 0.5) -> EvalReport:
    """Evaluate a directory of prediction files against ground-truth files.

    Files pair up by stem; a stem missing on one side counts as an image with
    no objects on that side.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    preds = _read_dir(pred_dir, "prediction")
    gts = _read_dir(gt_dir, "ground_truth")
    stems = sorted(set(preds) | set(gts))
    scenes = [(preds.get(s, []), gts.get(s, [])) for s in stems]
    return evaluate_scenes(scenes, iou_threshold, apply_nms, nms_threshold)
