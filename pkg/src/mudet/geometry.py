"""Oriented-box geometry: annotations, distance/offset/ratio encoding,
axis-aligned IoU from boundary distances, exact rotated-rectangle IoU,
and greedy rotated NMS."""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

GEOM_EPS = 1e-9


class EncodingError(ValueError):
    pass


class DecodeError(ValueError):
    pass


@dataclass
class ObbAnnotation:
    """One labeled oriented box: center, side lengths, rotation in degrees.

    Canonical form is enforced on construction: w >= h, theta in [-90, 90)
    (squares additionally wrap theta into [-45, 45)).
    """

    class_id: int
    xc: float
    yc: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        if self.h > self.w:
            self.w, self.h = self.h, self.w
            self.theta += 90.0
        self.theta = _wrap_angle(self.theta)
        if self.w == self.h and not (-45.0 <= self.theta < 45.0):
            self.theta = _wrap_angle(self.theta + 90.0) if self.theta < -45.0 else self.theta - 90.0
            self.theta = _wrap_angle(self.theta)

    @property
    def area(self) -> float:
        return self.w * self.h

    def vertices(self) -> np.ndarray:
        """Corner ring (4, 2) in image coordinates."""
        return kernels.rect_corners(self.as_row()[None])[0]

    def as_row(self) -> np.ndarray:
        return np.array([self.xc, self.yc, self.w, self.h, self.theta])


def _wrap_angle(deg: float) -> float:
    while deg >= 90.0:
        deg -= 180.0
    while deg < -90.0:
        deg += 180.0
    return deg


@dataclass
class BoxEncoding:
    """Distance/offset/ratio box representation around a sampling point.

    l: distances to the four axis-aligned envelope edges (left, top, right,
    bottom); s: normalized offsets of the rotated vertices along the
    envelope edges, corners enumerated clockwise from top-left; r: area
    ratio of the rotated box to its envelope.
    """

    l: tuple
    s: tuple
    r: float

    def __post_init__(self):
        if len(self.l) != 4 or len(self.s) != 4:
            raise ValueError("l and s must have four components each")
        if any(v < 0 for v in self.l):
            raise ValueError(f"distances must be non-negative, got {self.l}")
        if any(not (0.0 <= v <= 1.0) for v in self.s):
            raise ValueError(f"vertex offsets must lie in [0, 1], got {self.s}")
        if not (0.0 < self.r <= 1.0):
            raise ValueError(f"area ratio must lie in (0, 1], got {self.r}")


@dataclass
class DetectionRecord:
    obb: ObbAnnotation
    score: float

    def __post_init__(self):
        if not (0.0 < self.score < 1.0):
            raise ValueError(f"score must lie in (0, 1), got {self.score}")


@dataclass(frozen=True)
class HbbIouResult:
    iou: float
    overlap: float
    union: float
    circumscribed: float
    area: float
    area_hat: float


def hbb_iou_from_distances(l, l_hat) -> HbbIouResult:
    """IoU of two axis-aligned boxes sharing a sampling point, from the four
    boundary distances of each. Degenerate pairs give iou 0."""
    l = tuple(float(v) for v in l)
    l_hat = tuple(float(v) for v in l_hat)
    if len(l) != 4 or len(l_hat) != 4:
        raise ValueError("need four distances per box")
    if any(v < 0 for v in l + l_hat):
        raise ValueError(f"distances must be non-negative, got {l} and {l_hat}")
    area = (l[0] + l[2]) * (l[1] + l[3])
    area_hat = (l_hat[0] + l_hat[2]) * (l_hat[1] + l_hat[3])
    overlap = ((min(l[0], l_hat[0]) + min(l[2], l_hat[2]))
               * (min(l[1], l_hat[1]) + min(l[3], l_hat[3])))
    circumscribed = ((max(l[0], l_hat[0]) + max(l[2], l_hat[2]))
                     * (max(l[1], l_hat[1]) + max(l[3], l_hat[3])))
    union = area + area_hat - overlap
    iou = overlap / union if union > 0 else 0.0
    return HbbIouResult(iou, overlap, union, circumscribed, area, area_hat)


def obb_to_hbb(obb: ObbAnnotation):
    """Smallest axis-aligned box containing the rotated rectangle."""
    v = obb.vertices()
    return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())


def _extreme_vertices(v: np.ndarray):
    """The vertex lying on each envelope edge, with deterministic tie-breaks."""
    order = np.lexsort((v[:, 0], v[:, 1]))          # min y, then min x
    top = v[order[0]]
    order = np.lexsort((v[:, 1], -v[:, 0]))         # max x, then min y
    right = v[order[0]]
    order = np.lexsort((-v[:, 0], -v[:, 1]))        # max y, then max x
    bottom = v[order[0]]
    order = np.lexsort((-v[:, 1], v[:, 0]))         # min x, then max y
    left = v[order[0]]
    return top, right, bottom, left


def encode_obb(obb: ObbAnnotation, point) -> BoxEncoding:
    """Encode a box as (l, s, r) around a sampling point inside its envelope."""
    px, py = float(point[0]), float(point[1])
    xmin, ymin, xmax, ymax = obb_to_hbb(obb)
    if not (xmin <= px <= xmax and ymin <= py <= ymax):
        raise EncodingError(
            f"sampling point ({px}, {py}) outside envelope "
            f"[{xmin}, {ymin}, {xmax}, {ymax}]")
    width, height = xmax - xmin, ymax - ymin
    l = (px - xmin, py - ymin, xmax - px, ymax - py)
    top, right, bottom, left = _extreme_vertices(obb.vertices())
    s = (float(np.clip((top[0] - xmin) / width, 0.0, 1.0)),
         float(np.clip((right[1] - ymin) / height, 0.0, 1.0)),
         float(np.clip((xmax - bottom[0]) / width, 0.0, 1.0)),
         float(np.clip((ymax - left[1]) / height, 0.0, 1.0)))
    r = obb.area / (width * height)
    return BoxEncoding(l=l, s=s, r=float(np.clip(r, GEOM_EPS, 1.0)))


def _min_area_rect(points: np.ndarray, class_id: int) -> ObbAnnotation:
    """Minimum-area enclosing rotated rectangle of <= 4 points (calipers)."""
    pts = np.unique(np.round(points, 12), axis=0)
    hull = _convex_hull(pts)
    if hull.shape[0] < 3:
        raise DecodeError("decoded vertices are degenerate (collinear or coincident)")
    best = None
    n = hull.shape[0]
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        norm = math.hypot(e[0], e[1])
        if norm < GEOM_EPS:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu = points @ u
        pv = points @ v
        du, dv = pu.max() - pu.min(), pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[0] - GEOM_EPS:
            cu, cv = (pu.max() + pu.min()) / 2.0, (pv.max() + pv.min()) / 2.0
            center = cu * u + cv * v
            best = (area, center, max(du, GEOM_EPS), max(dv, GEOM_EPS),
                    math.degrees(math.atan2(u[1], u[0])))
    _, center, w, h, theta = best
    return ObbAnnotation(class_id=class_id, xc=float(center[0]), yc=float(center[1]),
                         w=float(w), h=float(h), theta=theta)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, no collinear interior points."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if pts.shape[0] <= 2:
        return pts

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= GEOM_EPS:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def decode_obb(enc: BoxEncoding, point, class_id: int = 0, strict: bool = True) -> ObbAnnotation:
    """Invert encode_obb: rebuild the rotated box from (l, s, r) and the point.

    In strict mode the four reconstructed vertices must form a parallelogram
    within 1e-6 px; the tolerant mode (used on raw head predictions) fits the
    minimum-area rectangle around whatever quad comes out.
    """
    px, py = float(point[0]), float(point[1])
    l1, l2, l3, l4 = enc.l
    width, height = l1 + l3, l2 + l4
    if width <= GEOM_EPS or height <= GEOM_EPS:
        raise DecodeError(f"degenerate envelope from distances {enc.l}")
    xmin, ymin, xmax, ymax = px - l1, py - l2, px + l3, py + l4
    s1, s2, s3, s4 = enc.s
    quad = np.array([
        [xmin + s1 * width, ymin],    # on top edge
        [xmax, ymin + s2 * height],   # on right edge
        [xmax - s3 * width, ymax],    # on bottom edge
        [xmin, ymax - s4 * height],   # on left edge
    ])
    if strict:
        gap = np.abs((quad[0] + quad[2]) - (quad[1] + quad[3]))
        if np.any(gap > 1e-6):
            raise DecodeError(
                f"vertices do not form a parallelogram (midpoint gap {gap.max():.3e})")
    return _min_area_rect(quad, class_id)


def polygon_iou(a: ObbAnnotation, b: ObbAnnotation) -> float:
    """Exact IoU of two rotated rectangles via half-plane clipping."""
    inter = float(kernels.rotrect_intersection(a.as_row()[None], b.as_row()[None])[0])
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def polygon_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """(len(a), len(b)) IoU table for matching."""
    na, nb = len(boxes_a), len(boxes_b)
    if na == 0 or nb == 0:
        return np.zeros((na, nb))
    ra = np.stack([b.as_row() for b in boxes_a])
    rb = np.stack([b.as_row() for b in boxes_b])
    pair_a = np.repeat(ra, nb, axis=0)
    pair_b = np.tile(rb, (na, 1))
    inter = kernels.rotrect_intersection(pair_a, pair_b).reshape(na, nb)
    areas_a = ra[:, 2] * ra[:, 3]
    areas_b = rb[:, 2] * rb[:, 3]
    union = areas_a[:, None] + areas_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return np.minimum(iou, 1.0)


def _det_sort_key(d: DetectionRecord):
    o = d.obb
    return (-d.score, o.xc, o.yc, o.w, o.h, o.theta)


def nms(dets, iou_threshold: float):
    """Greedy score-descending suppression with exact rotated IoU.

    Applied per class; score ties break by ascending geometry so the result
    is independent of input order. Output is sorted by descending score.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    kept = []
    by_class = {}
    for d in dets:
        by_class.setdefault(d.obb.class_id, []).append(d)
    for cls_dets in by_class.values():
        cls_dets.sort(key=_det_sort_key)
        rows = np.stack([d.obb.as_row() for d in cls_dets])
        keep = kernels.nms_keep(rows, float(iou_threshold))
        kept.extend(d for d, k in zip(cls_dets, keep) if k)
    kept.sort(key=_det_sort_key)
    return kept
