"""Detection evaluation: greedy matching at IoU 0.5, precision/recall,
and average precision as the raw sum of P(k) * delta-R(k) over the
distinct-score threshold sweep (no interpolation by default)."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import polygon_iou_matrix


def _det_key(d):
    o = d.obb
    return (-d.score, o.xc, o.yc, o.w, o.h, o.theta)


@dataclass
class MatchResult:
    """Score-ordered TP/FP labeling of one detection set against one
    ground-truth set."""

    scores: list                    # descending
    tp_flags: list                  # bool per detection
    matched_gt: list                # gt index or None per detection
    fn_count: int
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(self.tp_flags)

    @property
    def fp(self) -> int:
        return len(self.tp_flags) - self.tp


def match_detections(dets, gts, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order.

    A detection is a true positive iff its best-IoU still-unmatched ground
    truth of the same class reaches the threshold; IoU ties take the lower
    ground-truth index. Each ground truth matches at most once.
    """
    order = sorted(range(len(dets)), key=lambda i: _det_key(dets[i]))
    sorted_dets = [dets[i] for i in order]
    iou = polygon_iou_matrix([d.obb for d in sorted_dets], gts)
    taken = np.zeros(len(gts), dtype=bool)
    tp_flags, matched = [], []
    for i, det in enumerate(sorted_dets):
        best_j, best_iou = None, 0.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.obb.class_id:
                continue
            if iou[i, j] > best_iou:
                best_j, best_iou = j, iou[i, j]
        if best_j is not None and best_iou >= iou_threshold:
            taken[best_j] = True
            tp_flags.append(True)
            matched.append(best_j)
        else:
            tp_flags.append(False)
            matched.append(None)
    return MatchResult(scores=[d.score for d in sorted_dets], tp_flags=tp_flags,
                       matched_gt=matched, fn_count=int(len(gts) - taken.sum()),
                       n_gt=len(gts))


def precision_recall(match: MatchResult):
    """P = TP/(TP+FP), R = TP/(TP+FN); zero when the denominator is zero."""
    tp, fp, fn = match.tp, match.fp, match.fn_count
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return p, r


@dataclass
class PrCurve:
    """(threshold, precision, recall) points sorted by descending threshold."""

    points: list = field(default_factory=list)

    def __post_init__(self):
        thr = [p[0] for p in self.points]
        if any(a < b for a, b in zip(thr, thr[1:])):
            raise ValueError("points must be sorted by descending threshold")
        rec = [p[2] for p in self.points]
        if any(a > b + 1e-12 for a, b in zip(rec, rec[1:])):
            raise ValueError("recall must be non-decreasing as the threshold drops")


def _ap_from_labels(scores, tp_flags, n_gt, interpolated=False):
    """AP over pooled, score-sorted (score, tp) labels."""
    scores = np.asarray(scores, dtype=float)
    tps = np.cumsum(np.asarray(tp_flags, dtype=float))
    counts = np.arange(1, len(scores) + 1, dtype=float)
    # threshold boundaries: the last detection of each distinct score
    boundaries = np.nonzero(np.diff(scores, append=-np.inf))[0]
    points = []
    for b in boundaries:
        p = tps[b] / counts[b]
        r = tps[b] / n_gt if n_gt else 0.0
        points.append((float(scores[b]), float(p), float(r)))
    if interpolated:
        best = 0.0
        for i in range(len(points) - 1, -1, -1):
            best = max(best, points[i][1])
            points[i] = (points[i][0], best, points[i][2])
    ap = 0.0
    prev_r = 0.0
    for _, p, r in points:
        ap += p * (r - prev_r)
        prev_r = r
    return ap, PrCurve(points=points)


def average_precision(dets, gts, iou_threshold: float = 0.5, interpolated: bool = False):
    """AP for one pooled detection/ground-truth collection.

    Sweeps the distinct detection scores as thresholds in descending order
    and sums P(k) * (R(k) - R(k-1)) with R(0) = 0. Returns (ap, PrCurve).
    """
    if len(gts) == 0:
        warnings.warn("average_precision: no ground truth; AP defined as 0")
        return 0.0, PrCurve(points=[])
    if len(dets) == 0:
        return 0.0, PrCurve(points=[])
    match = match_detections(dets, gts, iou_threshold)
    return _ap_from_labels(match.scores, match.tp_flags, match.n_gt, interpolated)


def evaluate_dataset(dets_by_image: dict, gts_by_image: dict,
                     iou_threshold: float = 0.5, interpolated: bool = False):
    """Dataset-level AP: per-image matching, pooled score sweep, averaged
    over the classes present in the ground truth.

    Returns (mean_ap, {class_id: (ap, PrCurve)}).
    """
    classes = sorted({g.class_id for gts in gts_by_image.values() for g in gts})
    if not classes:
        warnings.warn("evaluate_dataset: no ground truth; AP defined as 0")
        return 0.0, {}
    per_class = {}
    for cls in classes:
        labeled = []
        n_gt = 0
        for img, gts in gts_by_image.items():
            gts_c = [g for g in gts if g.class_id == cls]
            dets_c = [d for d in dets_by_image.get(img, []) if d.obb.class_id == cls]
            n_gt += len(gts_c)
            if dets_c:
                m = match_detections(dets_c, gts_c, iou_threshold)
                labeled.extend(zip(m.scores, m.tp_flags))
        if not labeled or n_gt == 0:
            per_class[cls] = (0.0, PrCurve(points=[]))
            continue
        labeled.sort(key=lambda t: -t[0])
        scores = [s for s, _ in labeled]
        flags = [f for _, f in labeled]
        per_class[cls] = _ap_from_labels(scores, flags, n_gt, interpolated)
    mean_ap = float(np.mean([ap for ap, _ in per_class.values()]))
    return mean_ap, per_class


def emit_pr_csv(curve: PrCurve, path):
    """Write "threshold,precision,recall" rows at six decimal places."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall\n")
        for thr, p, r in curve.points:
            fh.write(f"{thr:.6f},{p:.6f},{r:.6f}\n")


def read_pr_csv(path) -> PrCurve:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "threshold,precision,recall":
            raise ValueError(f"{path}: unexpected header {header!r}")
        points = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            thr, p, r = (float(v) for v in line.split(","))
            points.append((thr, p, r))
    return PrCurve(points=points)
