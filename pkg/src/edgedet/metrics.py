"""Detection quality evaluation: greedy prediction/ground-truth matching,
precision-recall curves, 101-point interpolated AP, AP averaged over the
0.50:0.05:0.95 IoU ladder, and the tabular report.

The reported single precision/recall operating point is the confidence
threshold that maximizes F1 on the aggregated (all-class) curve at IoU 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postprocess import Box, Detection, iou

IOU_LADDER = [0.5 + 0.05 * i for i in range(10)]
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class GroundTruth:
    image: str
    box: Box
    class_id: int


@dataclass
class PRCurve:
    """Cumulative TP/FP counts in confidence-descending order."""

    confidences: np.ndarray
    cum_tp: np.ndarray
    cum_fp: np.ndarray
    n_gt: int

    def points(self):
        recall = self.cum_tp / self.n_gt if self.n_gt else np.zeros_like(self.cum_tp)
        denom = self.cum_tp + self.cum_fp
        precision = np.divide(self.cum_tp, denom, out=np.zeros_like(denom, dtype=float),
                              where=denom > 0)
        return recall, precision


def match_detections(preds: dict[str, list[Detection]],
                     gts: dict[str, list[GroundTruth]],
                     iou_thresh: float):
    """Label every prediction TP/FP at one IoU threshold.

    Per image and class, predictions (confidence-descending) greedily claim
    the highest-IoU still-unmatched ground truth with IoU >= threshold.
    Returns a flat list of (confidence, is_tp) sorted confidence-descending
    per class: {class_id: [(conf, tp), ...]}.
    """
    labels: dict[int, list[tuple[float, bool]]] = {}
    images = set(preds) | set(gts)
    for image in sorted(images):
        by_class_gt: dict[int, list[GroundTruth]] = {}
        for gt in gts.get(image, []):
            by_class_gt.setdefault(gt.class_id, []).append(gt)
        dets = sorted(preds.get(image, []),
                      key=lambda d: (-d.confidence, d.class_id, d.box.x1, d.box.y1))
        matched: dict[int, set[int]] = {}
        for d in dets:
            cands = by_class_gt.get(d.class_id, [])
            used = matched.setdefault(d.class_id, set())
            best_i, best_iou = -1, 0.0
            for gi, gt in enumerate(cands):
                if gi in used:
                    continue
                v = iou(d.box, gt.box)
                if v >= iou_thresh and v > best_iou:
                    best_i, best_iou = gi, v
            tp = best_i >= 0
            if tp:
                used.add(best_i)
            labels.setdefault(d.class_id, []).append((d.confidence, tp))
    for lst in labels.values():
        lst.sort(key=lambda t: -t[0])
    return labels


def precision_recall(labels: list[tuple[float, bool]], n_gt: int):
    """Overall precision/recall treating every prediction as accepted."""
    tp = sum(1 for _, t in labels if t)
    fp = len(labels) - tp
    precision = tp / (tp + fp) if labels else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def build_curve(labels: list[tuple[float, bool]], n_gt: int) -> PRCurve:
    ordered = sorted(labels, key=lambda t: -t[0])
    tps = np.array([1 if t else 0 for _, t in ordered], dtype=float)
    return PRCurve(confidences=np.array([c for c, _ in ordered]),
                   cum_tp=np.cumsum(tps),
                   cum_fp=np.cumsum(1.0 - tps),
                   n_gt=n_gt)


def average_precision(curve: PRCurve) -> float:
    """101-point interpolation: mean over r in {0, .01, .., 1} of the max
    precision among curve points with recall >= r.  AP of an empty class is 0."""
    if curve.n_gt <= 0:
        return 0.0
    recall, precision = curve.points()
    total = 0.0
    for r in RECALL_GRID:
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / len(RECALL_GRID)


@dataclass
class EvalRow:
    label: str
    n_images: int
    precision: float
    recall: float
    ap50: float
    ap50_95: float

    def to_dict(self):
        return {"class": self.label, "n_images": self.n_images,
                "precision": round(self.precision, 6),
                "recall": round(self.recall, 6),
                "ap50": round(self.ap50, 6),
                "ap50_95": round(self.ap50_95, 6)}


@dataclass
class EvalReport:
    rows: list[EvalRow]  # per class, then the "All" aggregate row last
    conf_thresh: float   # max-F1 operating point used for precision/recall
    curves50: dict[int, PRCurve] = field(default_factory=dict)

    def to_dict(self):
        return {"operating_conf": round(self.conf_thresh, 6),
                "rows": [r.to_dict() for r in self.rows]}

    def to_text(self):
        hdr = (f"{'TYPE':<10} {'Images':>7} {'Precision':>10} {'Recall':>8} "
               f"{'mAP@0.5':>9} {'mAP@0.5:0.95':>13}")
        lines = [hdr, "-" * len(hdr)]
        for r in self.rows:
            lines.append(f"{r.label:<10} {r.n_images:>7} {r.precision:>10.3f} "
                         f"{r.recall:>8.3f} {r.ap50:>9.3f} {r.ap50_95:>13.3f}")
        return "\n".join(lines)


def evaluate(preds: dict[str, list[Detection]],
             gts: dict[str, list[GroundTruth]],
             class_names: list[str]) -> EvalReport:
    n_classes = len(class_names)
    for dets in preds.values():
        for d in dets:
            if not (0 <= d.class_id < n_classes):
                raise ValueError(f"prediction has unknown class id {d.class_id}")
    n_images = len(set(preds) | set(gts))
    gt_count = {c: 0 for c in range(n_classes)}
    for lst in gts.values():
        for gt in lst:
            gt_count[gt.class_id] += 1

    ap = {c: {} for c in range(n_classes)}
    curves50 = {}
    labels50 = None
    for thr in IOU_LADDER:
        labels = match_detections(preds, gts, thr)
        if thr == 0.5:
            labels50 = labels
        for c in range(n_classes):
            curve = build_curve(labels.get(c, []), gt_count[c])
            ap[c][thr] = average_precision(curve)
            if thr == 0.5:
                curves50[c] = curve

    # Max-F1 confidence threshold on the aggregated IoU-0.5 curve.
    all_labels = sorted((pair for lst in labels50.values() for pair in lst),
                        key=lambda t: -t[0])
    total_gt = sum(gt_count.values())
    best_conf, best_f1 = 0.0, -1.0
    agg = build_curve(all_labels, total_gt)
    recall, precision = agg.points()
    for conf, p, r in zip(agg.confidences, precision, recall):
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        if f1 > best_f1:
            best_f1, best_conf = f1, float(conf)

    def row_at(labels: list[tuple[float, bool]], n_gt: int, label: str,
               ap50: float, ap50_95: float) -> EvalRow:
        at = [(c, t) for c, t in labels if c >= best_conf]
        p, r = precision_recall(at, n_gt)
        return EvalRow(label=label, n_images=n_images, precision=p, recall=r,
                       ap50=ap50, ap50_95=ap50_95)

    rows = []
    for c, name in enumerate(class_names):
        ap50 = ap[c][0.5]
        ap5095 = float(np.mean([ap[c][t] for t in IOU_LADDER]))
        rows.append(row_at(labels50.get(c, []), gt_count[c], name, ap50, ap5095))
    all_ap50 = float(np.mean([ap[c][0.5] for c in range(n_classes)])) if n_classes else 0.0
    all_ap5095 = float(np.mean([np.mean([ap[c][t] for t in IOU_LADDER])
                                for c in range(n_classes)])) if n_classes else 0.0
    rows.append(row_at(all_labels, total_gt, "All", all_ap50, all_ap5095))
    rows = [rows[-1]] + rows[:-1]  # "All" first, as in the report tables
    return EvalReport(rows=rows, conf_thresh=best_conf, curves50=curves50)


def pr_curve_csv(report: EvalReport, class_names: list[str]) -> str:
    lines = ["class,recall,precision"]
    for c, curve in sorted(report.curves50.items()):
        recall, precision = curve.points()
        for r, p in zip(recall, precision):
            lines.append(f"{class_names[c]},{r:.6f},{p:.6f}")
    return "\n".join(lines) + "\n"


def pr_curve_svg(report: EvalReport, class_names: list[str],
                 width: int = 480, height: int = 480) -> str:
    """Self-contained SVG of the per-class IoU-0.5 PR curves."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def sx(r):
        return pad + r * (width - 2 * pad)

    def sy(p):
        return height - pad - p * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
             f'stroke="black"/>',
             f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" '
             f'font-size="12">recall</text>',
             f'<text x="12" y="{height // 2}" text-anchor="middle" '
             f'font-size="12" transform="rotate(-90 12 {height // 2})">'
             f'precision</text>']
    for c, curve in sorted(report.curves50.items()):
        recall, precision = curve.points()
        pts = [(0.0, 1.0)] + list(zip(recall, precision))
        path = " ".join(f"{sx(r):.1f},{sy(p):.1f}" for r, p in pts)
        color = colors[c % len(colors)]
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (c + 1)}" '
                     f'text-anchor="end" font-size="11" fill="{color}">'
                     f'{class_names[c]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
