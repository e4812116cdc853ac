"""Pure-numpy reference backend for the hot kernels.

Every function here has a signature-identical twin in ``_numba``; the
package selects one of the two at import time (see ``kernels.__init__``).
"""

import numpy as np

CLIP_EPS = 1e-9


def im2col(x, k, stride, pad):
    """Unfold (C, H, W) into (C*k*k, Ho*Wo) patch columns."""
    c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, k, stride, pad):
    """Scatter-add (C*k*k, Ho*Wo) columns back onto a (C, H, W) image."""
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    patches = cols.reshape(c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += patches[:, ki, kj]
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, pad:h + pad, pad:w + pad])


def rect_corners(boxes_deg):
    """(n, 5) boxes as (xc, yc, w, h, theta_deg) -> (n, 4, 2) corner rings."""
    boxes_deg = np.asarray(boxes_deg, dtype=np.float64)
    t = np.deg2rad(boxes_deg[:, 4])
    ct, st = np.cos(t), np.sin(t)
    dx, dy = boxes_deg[:, 2] / 2.0, boxes_deg[:, 3] / 2.0
    # local corner ring, consistent winding
    lx = np.stack([dx, -dx, -dx, dx], axis=1)
    ly = np.stack([dy, dy, -dy, -dy], axis=1)
    cx = boxes_deg[:, 0:1] + ct[:, None] * lx - st[:, None] * ly
    cy = boxes_deg[:, 1:2] + st[:, None] * lx + ct[:, None] * ly
    return np.stack([cx, cy], axis=2)


def _clip_poly_area(pa, pb):
    """Area of the intersection of two convex quads given as (4, 2) rings."""
    cx, cy = pb[:, 0].mean(), pb[:, 1].mean()
    poly = [(pa[i, 0], pa[i, 1]) for i in range(4)]
    for e in range(4):
        q1x, q1y = pb[e]
        q2x, q2y = pb[(e + 1) % 4]
        ex, ey = q2x - q1x, q2y - q1y
        sgn = ex * (cy - q1y) - ey * (cx - q1x)
        sgn = 1.0 if sgn >= 0.0 else -1.0
        out = []
        n = len(poly)
        for i in range(n):
            sx, sy = poly[i - 1]
            px, py = poly[i]
            ds = sgn * (ex * (sy - q1y) - ey * (sx - q1x))
            dp = sgn * (ex * (py - q1y) - ey * (px - q1x))
            if dp >= -CLIP_EPS:
                if ds < -CLIP_EPS:
                    t = ds / (ds - dp)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif ds >= -CLIP_EPS:
                t = ds / (ds - dp)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
        poly = out
        if len(poly) < 3:
            return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def rotrect_intersection(boxes_a, boxes_b):
    """Row-paired intersection areas of two (n, 5) degree-box arrays."""
    ca = rect_corners(boxes_a)
    cb = rect_corners(boxes_b)
    out = np.empty(ca.shape[0])
    for i in range(ca.shape[0]):
        out[i] = _clip_poly_area(ca[i], cb[i])
    return out


def nms_keep(boxes_deg, iou_threshold):
    """Greedy suppression over score-sorted (n, 5) boxes; returns a keep mask."""
    n = boxes_deg.shape[0]
    corners = rect_corners(boxes_deg)
    areas = boxes_deg[:, 2] * boxes_deg[:, 3]
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


def paint_rect(img, xc, yc, w, h, theta_deg, values):
    """Overwrite the pixels of ``img`` (maps, H, W) covered by a rotated rect.

    ``values`` is one scalar per map. A pixel belongs to the rect when its
    center falls inside. Returns the painted pixel count.
    """
    nmaps, hh, ww = img.shape
    t = np.deg2rad(theta_deg)
    ct, st = np.cos(t), np.sin(t)
    # bounding window in pixel space
    r = 0.5 * np.hypot(w, h)
    j0 = max(int(np.floor(xc - r)), 0)
    j1 = min(int(np.ceil(xc + r)) + 1, ww)
    i0 = max(int(np.floor(yc - r)), 0)
    i1 = min(int(np.ceil(yc + r)) + 1, hh)
    if j0 >= j1 or i0 >= i1:
        return 0
    jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
    px = jj + 0.5 - xc
    py = ii + 0.5 - yc
    # rotate into the box frame
    ux = ct * px + st * py
    uy = -st * px + ct * py
    mask = (np.abs(ux) <= w / 2.0) & (np.abs(uy) <= h / 2.0)
    for m in range(nmaps):
        plane = img[m, i0:i1, j0:j1]
        plane[mask] = values[m]
    return int(mask.sum())
