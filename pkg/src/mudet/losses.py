"""Detection losses: focal classification, distance/offset/ratio box
regression, and the easy/hard split driven by the fusion masks.

All loss kernels are written against tape tensors and work elementwise,
so the same code scores a single encoding pair (shape (4,) / ()) or a
whole prediction grid (shape (4, M, N) / (M, N)).
"""

from dataclasses import dataclass

import numpy as np

from .fusion import ConfidencePair, MaskTriple
from .geometry import BoxEncoding, EncodingError, encode_obb, obb_to_hbb
from .tensor import (Tensor, clamp, index_axis0, log, minimum, pow_const,
                     sum_axis0, tsum)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    theta: float = 0.2

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")


def focal_loss(p_hat, p, gamma: float = 2.0) -> Tensor:
    """-(1 - p_t)^gamma * ln(p_t) with p_t = p_hat if p == 1 else 1 - p_hat.

    ``p_hat`` may be a Tensor of any shape; ``p`` is a constant 0/1 label
    (scalar or array of the same shape). Predictions are clamped away from
    {0, 1} so the log stays finite.
    """
    if not isinstance(p_hat, Tensor):
        p_hat = Tensor(p_hat)
    labels = np.broadcast_to(np.asarray(p, dtype=np.float64), p_hat.shape).copy()
    ph = clamp(p_hat, PROB_EPS, 1.0 - PROB_EPS)
    p_t = ph * Tensor(labels) + (1.0 - ph) * Tensor(1.0 - labels)
    return -(pow_const(1.0 - p_t, gamma) * log(p_t))


def iou_from_distance_tensors(l, l_hat) -> Tensor:
    """Differentiable axis-aligned IoU from boundary distances.

    ``l`` and ``l_hat`` are (4, ...) tensors stacked as left/top/right/bottom.
    Matches geometry.hbb_iou_from_distances up to the 1e-12 denominator guard.
    """
    l1, l2, l3, l4 = (index_axis0(l, i) for i in range(4))
    m1, m2, m3, m4 = (index_axis0(l_hat, i) for i in range(4))
    area = (l1 + l3) * (l2 + l4)
    area_hat = (m1 + m3) * (m2 + m4)
    overlap = (minimum(l1, m1) + minimum(l3, m3)) * (minimum(l2, m2) + minimum(l4, m4))
    union = area + area_hat - overlap
    return overlap / (union + 1e-12)


def _enc_parts(enc):
    if isinstance(enc, BoxEncoding):
        return (Tensor(np.asarray(enc.l, float)), Tensor(np.asarray(enc.s, float)),
                Tensor(float(enc.r)))
    l, s, r = enc
    if not isinstance(l, Tensor):
        l = Tensor(np.asarray(l, float))
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s, float))
    if not isinstance(r, Tensor):
        r = Tensor(np.asarray(r, float))
    return l, s, r


def obb_regression_loss(gt, pred) -> Tensor:
    """1 - IoU(l, l_hat) + sum_i (s_i - s_hat_i)^2 + (r - r_hat)^2.

    Accepts BoxEncoding instances or (l, s, r) tensor triples; elementwise
    over any trailing grid shape.
    """
    lg, sg, rg = _enc_parts(gt)
    lp, sp, rp = _enc_parts(pred)
    iou = iou_from_distance_tensors(lg, lp)
    ds = sg - sp
    dr = rg - rp
    return 1.0 - iou + sum_axis0(ds * ds) + dr * dr


@dataclass
class TargetAssignment:
    """Dense per-cell training targets at one detection scale.

    Box maps are only meaningful where objectness is 1; elsewhere they are
    zero-filled. ``obj_rgb`` / ``obj_h`` are the per-modality copies of the
    objectness map that supervise the two confidence heads.
    """

    objectness: np.ndarray          # (M, N) in {0, 1}
    class_onehot: np.ndarray        # (n_cls, M, N)
    box_l: np.ndarray               # (4, M, N) pixels
    box_s: np.ndarray               # (4, M, N) in [0, 1]
    box_r: np.ndarray               # (M, N) in (0, 1] at positives
    obj_rgb: np.ndarray
    obj_h: np.ndarray

    @property
    def num_positives(self) -> int:
        return int(self.objectness.sum())


def assign_targets(annotations, grid_shape, stride: float, n_classes: int) -> TargetAssignment:
    """One-cell-per-object assignment: each box lands in the grid cell that
    contains its center; first annotation wins a contested cell. The sampling
    point is the cell center, nudged inside the box envelope when a small box
    leaves it outside."""
    m, n = grid_shape
    obj = np.zeros((m, n))
    cls = np.zeros((n_classes, m, n))
    box_l = np.zeros((4, m, n))
    box_s = np.zeros((4, m, n))
    box_r = np.zeros((m, n))
    for ann in annotations:
        gj = min(max(int(ann.xc / stride), 0), n - 1)
        gi = min(max(int(ann.yc / stride), 0), m - 1)
        if obj[gi, gj]:
            continue
        px = (gj + 0.5) * stride
        py = (gi + 0.5) * stride
        try:
            enc = encode_obb(ann, (px, py))
        except EncodingError:
            xmin, ymin, xmax, ymax = obb_to_hbb(ann)
            px = float(np.clip(px, xmin + 1e-6, xmax - 1e-6))
            py = float(np.clip(py, ymin + 1e-6, ymax - 1e-6))
            enc = encode_obb(ann, (px, py))
        obj[gi, gj] = 1.0
        cls[min(ann.class_id, n_classes - 1), gi, gj] = 1.0
        box_l[:, gi, gj] = enc.l
        box_s[:, gi, gj] = enc.s
        box_r[gi, gj] = enc.r
    return TargetAssignment(objectness=obj, class_onehot=cls, box_l=box_l,
                            box_s=box_s, box_r=box_r, obj_rgb=obj.copy(),
                            obj_h=obj.copy())


@dataclass
class HeadPredictions:
    """Per-scale head outputs as probabilities / decoded encodings."""

    cls: Tensor                     # (n_cls, M, N) probabilities
    box_l: Tensor                   # (4, M, N) pixels, positive
    box_s: Tensor                   # (4, M, N) in (0, 1)
    box_r: Tensor                   # (M, N) in (0, 1)
    conf: ConfidencePair = None


def _per_location_losses(preds: HeadPredictions, targets: TargetAssignment,
                         cfg: LossConfig):
    """(M, N) regression-loss and classification-loss maps."""
    reg = obb_regression_loss(
        (Tensor(targets.box_l), Tensor(targets.box_s), Tensor(targets.box_r)),
        (preds.box_l, preds.box_s, preds.box_r))
    cls_map = focal_loss(preds.cls, targets.class_onehot, cfg.focal_gamma)
    cls = sum_axis0(cls_map) if preds.cls.ndim == 3 else cls_map
    return reg, cls


def _masked_region_loss(reg, cls, objectness, region_mask) -> Tensor:
    """Mean over region positives of (reg + cls), plus the mean focal
    background term over the region's negative cells.

    Normalizing the background sum by the region's own size (not the
    positive count) keeps the loss bounded when a mask flips on over a
    large background area."""
    pos = objectness * region_mask
    n = pos.sum()
    if n == 0:
        return Tensor(0.0)
    neg = (1.0 - objectness) * region_mask
    total = tsum((reg + cls) * Tensor(pos)) * (1.0 / float(n))
    n_neg = neg.sum()
    if n_neg > 0:
        total = total + tsum(cls * Tensor(neg)) * (1.0 / float(n_neg))
    return total


def easy_loss(preds: HeadPredictions, targets: TargetAssignment,
              masks: MaskTriple, cfg: LossConfig = LossConfig()) -> Tensor:
    reg, cls = _per_location_losses(preds, targets, cfg)
    return _masked_region_loss(reg, cls, targets.objectness, masks.easy)


def hard_loss(preds: HeadPredictions, targets: TargetAssignment,
              masks: MaskTriple, cfg: LossConfig = LossConfig()) -> Tensor:
    reg, cls = _per_location_losses(preds, targets, cfg)
    hard_mask = masks.rgb_only + masks.h_only
    return _masked_region_loss(reg, cls, targets.objectness, hard_mask)


def confidence_loss(conf: ConfidencePair, targets: TargetAssignment,
                    cfg: LossConfig = LossConfig()) -> Tensor:
    """Focal supervision of the two confidence heads against the
    per-modality objectness copies: mean over positives plus mean over
    background, per modality (bounded regardless of grid size)."""

    def head_loss(pred, obj):
        fl = focal_loss(pred, obj, cfg.focal_gamma)
        n_pos = obj.sum()
        n_neg = obj.size - n_pos
        parts = []
        if n_pos > 0:
            parts.append(tsum(fl * Tensor(obj)) * (1.0 / float(n_pos)))
        if n_neg > 0:
            parts.append(tsum(fl * Tensor(1.0 - obj)) * (1.0 / float(n_neg)))
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    return head_loss(conf.conf_rgb, targets.obj_rgb) + head_loss(conf.conf_h, targets.obj_h)


def total_loss(preds: HeadPredictions, targets: TargetAssignment,
               masks: MaskTriple, cfg: LossConfig = LossConfig()):
    """L = L_easy + L_hard (+ confidence-head supervision when heads exist).

    Returns (scalar tensor, parts dict with float entries).
    """
    le = easy_loss(preds, targets, masks, cfg)
    lh = hard_loss(preds, targets, masks, cfg)
    total = le + lh
    parts = {"easy": le.item(), "hard": lh.item()}
    if preds.conf is not None:
        lc = confidence_loss(preds.conf, targets, cfg)
        total = total + lc
        parts["conf"] = lc.item()
    parts["total"] = total.item()
    return total, parts
