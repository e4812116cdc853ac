"""Numba-accelerated backend. Mirrors ``_numpy`` function-for-function."""

import numpy as np
from numba import njit

from ._numpy import CLIP_EPS, paint_rect, rect_corners  # noqa: F401  (re-exported)


@njit(cache=True)
def im2col(x, k, stride, pad):
    c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((c * k * k, ho * wo))
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oi in range(ho):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    base = oi * wo
                    for oj in range(wo):
                        jj = oj * stride + kj - pad
                        if 0 <= jj < w:
                            cols[row, base + oj] = x[ci, ii, jj]
    return cols


@njit(cache=True)
def col2im(cols, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x = np.zeros((c, h, w))
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oi in range(ho):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    base = oi * wo
                    for oj in range(wo):
                        jj = oj * stride + kj - pad
                        if 0 <= jj < w:
                            x[ci, ii, jj] += cols[row, base + oj]
    return x


@njit(cache=True)
def _clip_poly_area(pa, pb):
    cx = (pb[0, 0] + pb[1, 0] + pb[2, 0] + pb[3, 0]) / 4.0
    cy = (pb[0, 1] + pb[1, 1] + pb[2, 1] + pb[3, 1]) / 4.0
    poly = np.empty((16, 2))
    buf = np.empty((16, 2))
    n = 4
    for i in range(4):
        poly[i, 0] = pa[i, 0]
        poly[i, 1] = pa[i, 1]
    for e in range(4):
        q1x, q1y = pb[e, 0], pb[e, 1]
        q2x, q2y = pb[(e + 1) % 4, 0], pb[(e + 1) % 4, 1]
        ex, ey = q2x - q1x, q2y - q1y
        sgn = ex * (cy - q1y) - ey * (cx - q1x)
        sgn = 1.0 if sgn >= 0.0 else -1.0
        m = 0
        for i in range(n):
            prev = (i - 1) % n
            sx, sy = poly[prev, 0], poly[prev, 1]
            px, py = poly[i, 0], poly[i, 1]
            ds = sgn * (ex * (sy - q1y) - ey * (sx - q1x))
            dp = sgn * (ex * (py - q1y) - ey * (px - q1x))
            if dp >= -CLIP_EPS:
                if ds < -CLIP_EPS:
                    t = ds / (ds - dp)
                    buf[m, 0] = sx + t * (px - sx)
                    buf[m, 1] = sy + t * (py - sy)
                    m += 1
                buf[m, 0] = px
                buf[m, 1] = py
                m += 1
            elif ds >= -CLIP_EPS:
                t = ds / (ds - dp)
                buf[m, 0] = sx + t * (px - sx)
                buf[m, 1] = sy + t * (py - sy)
                m += 1
        n = m
        for i in range(n):
            poly[i, 0] = buf[i, 0]
            poly[i, 1] = buf[i, 1]
        if n < 3:
            return 0.0
    area = 0.0
    for i in range(n):
        x1, y1 = poly[i, 0], poly[i, 1]
        x2, y2 = poly[(i + 1) % n, 0], poly[(i + 1) % n, 1]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


@njit(cache=True)
def _corners_one(xc, yc, w, h, theta_deg, out):
    t = np.deg2rad(theta_deg)
    ct, st = np.cos(t), np.sin(t)
    dx, dy = w / 2.0, h / 2.0
    lxs = (dx, -dx, -dx, dx)
    lys = (dy, dy, -dy, -dy)
    for i in range(4):
        out[i, 0] = xc + ct * lxs[i] - st * lys[i]
        out[i, 1] = yc + st * lxs[i] + ct * lys[i]


@njit(cache=True)
def rotrect_intersection(boxes_a, boxes_b):
    n = boxes_a.shape[0]
    out = np.empty(n)
    ca = np.empty((4, 2))
    cb = np.empty((4, 2))
    for i in range(n):
        _corners_one(boxes_a[i, 0], boxes_a[i, 1], boxes_a[i, 2], boxes_a[i, 3], boxes_a[i, 4], ca)
        _corners_one(boxes_b[i, 0], boxes_b[i, 1], boxes_b[i, 2], boxes_b[i, 3], boxes_b[i, 4], cb)
        out[i] = _clip_poly_area(ca, cb)
    return out


@njit(cache=True)
def nms_keep(boxes_deg, iou_threshold):
    n = boxes_deg.shape[0]
    corners = np.empty((n, 4, 2))
    areas = np.empty(n)
    for i in range(n):
        _corners_one(boxes_deg[i, 0], boxes_deg[i, 1], boxes_deg[i, 2],
                     boxes_deg[i, 3], boxes_deg[i, 4], corners[i])
        areas[i] = boxes_deg[i, 2] * boxes_deg[i, 3]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            inter = _clip_poly_area(corners[j], corners[i])
            union = areas[i] + areas[j] - inter
            if union <= 0.0:
                continue
            if inter / union > iou_threshold:
                keep[j] = False
    return keep
