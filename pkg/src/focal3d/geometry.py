"""Oriented 3D boxes: corners, residual encodings, rotated IoU and NMS.

Boxes live in the LiDAR frame (x forward, y left, z up). ``center`` is the
geometric center, ``size`` is (length along the heading, width, height)
and ``yaw`` rotates the heading counterclockwise about +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from focal3d.errors import DomainError

AREA_EPS = 1e-10


def normalize_yaw(yaw):
    """Wrap an angle into [-pi, pi)."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y < 0:
        y += 2.0 * math.pi
    y -= math.pi
    return -math.pi if y >= math.pi else y


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise DomainError("Box3D needs 3 center and 3 size components")
        if not all(math.isfinite(v) for v in center + size + (float(self.yaw),)):
            raise DomainError("Box3D has non-finite fields")
        if min(size) <= 0:
            raise DomainError(f"box dimensions must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @classmethod
    def from_array(cls, a):
        a = [float(v) for v in a]
        return cls(a[0:3], a[3:6], a[6])

    def to_array(self):
        return np.array(self.center + self.size + (self.yaw,))

    @property
    def volume(self):
        l, w, h = self.size
        return l * w * h

    @property
    def z_range(self):
        return self.center[2] - self.size[2] / 2, self.center[2] + self.size[2] / 2

    def footprint(self):
        """BEV corners (4, 2), counterclockwise starting at (+l/2, +w/2)."""
        return corners24(self).reshape(8, 3)[:4, :2]

    def contains(self, points, margin=0.0):
        """Boolean mask of the (N, >=3) points lying inside the box (closed)."""
        pts = np.asarray(points, dtype=np.float64)[:, :3] - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * pts[:, 0] + s * pts[:, 1]
        ly = -s * pts[:, 0] + c * pts[:, 1]
        l, w, h = self.size
        return ((np.abs(lx) <= l / 2 + margin) & (np.abs(ly) <= w / 2 + margin)
                & (np.abs(pts[:, 2]) <= h / 2 + margin))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DomainError(f"detection score {self.score} outside [0, 1]")


# unit-box corner signs: bottom face CCW from (+, +), then top face
_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=np.float64) * 0.5


def corners24(box):
    """The 8 box corners flattened to 24 values (x0, y0, z0, x1, ...)."""
    local = _CORNER_SIGNS * np.asarray(box.size)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return (local @ rot.T + np.asarray(box.center)).reshape(24)


def box_from_corners(corners):
    """Fit a Box3D to 8 corners in :func:`corners24` order.

    Exact for corners of a true box; for noisy corners it averages opposite
    edges, which is what decoding a regressed 24-vector needs.
    """
    c = np.asarray(corners, dtype=np.float64).reshape(8, 3)
    center = c.mean(axis=0)
    # edges along the heading: corner 0->... 1 is -l, so (0 - 1) points forward
    fwd = (c[0] - c[1] + c[3] - c[2] + c[4] - c[5] + c[7] - c[6]) / 4.0
    side = (c[0] - c[3] + c[1] - c[2] + c[4] - c[7] + c[5] - c[6]) / 4.0
    up = (c[4:] - c[:4]).mean(axis=0)
    length = math.hypot(fwd[0], fwd[1])
    width = math.hypot(side[0], side[1])
    height = abs(up[2])
    yaw = math.atan2(fwd[1], fwd[0])
    return Box3D(tuple(center), (max(length, 1e-6), max(width, 1e-6), max(height, 1e-6)), yaw)


def anchor_diagonal(anchor):
    l, w, _ = anchor.size
    d = math.hypot(l, w)
    if d <= 0:
        raise DomainError("degenerate anchor with zero diagonal")
    return d


def encode7(box, anchor):
    """Residual (dx, dy, dz, dl, dw, dh, dyaw) of ``box`` against ``anchor``."""
    d = anchor_diagonal(anchor)
    (xg, yg, zg), (lg, wg, hg) = box.center, box.size
    (xa, ya, za), (la, wa, ha) = anchor.center, anchor.size
    return np.array([
        (xg - xa) / d, (yg - ya) / d, (zg - za) / ha,
        math.log(lg / la), math.log(wg / wa), math.log(hg / ha),
        box.yaw - anchor.yaw,
    ])


def decode7(residual, anchor):
    d = anchor_diagonal(anchor)
    r = np.asarray(residual, dtype=np.float64)
    (xa, ya, za), (la, wa, ha) = anchor.center, anchor.size
    return Box3D(
        (xa + r[0] * d, ya + r[1] * d, za + r[2] * ha),
        (la * math.exp(r[3]), wa * math.exp(r[4]), ha * math.exp(r[5])),
        anchor.yaw + r[6],
    )


def encode7_batch(boxes, anchors):
    """Vectorized :func:`encode7` over (N, 7) box and anchor arrays."""
    b = np.asarray(boxes, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    d = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(b)
    out[:, 0] = (b[:, 0] - a[:, 0]) / d
    out[:, 1] = (b[:, 1] - a[:, 1]) / d
    out[:, 2] = (b[:, 2] - a[:, 2]) / a[:, 5]
    out[:, 3:6] = np.log(b[:, 3:6] / a[:, 3:6])
    out[:, 6] = b[:, 6] - a[:, 6]
    return out


def decode7_batch(residuals, anchors):
    r = np.asarray(residuals, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    d = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(r)
    out[:, 0] = a[:, 0] + r[:, 0] * d
    out[:, 1] = a[:, 1] + r[:, 1] * d
    out[:, 2] = a[:, 2] + r[:, 2] * a[:, 5]
    # bound the log-size residual so a wild early prediction cannot overflow
    out[:, 3:6] = a[:, 3:6] * np.exp(np.clip(r[:, 3:6], -10.0, 10.0))
    out[:, 6] = a[:, 6] + r[:, 6]
    return out


def encode24(box, reference_center, scale):
    """Corner offsets of ``box`` from ``reference_center`` divided by ``scale``."""
    if scale <= 0:
        raise DomainError("corner residual scale must be positive")
    return (corners24(box).reshape(8, 3) - np.asarray(reference_center, dtype=np.float64)).reshape(24) / scale


def decode24(residual, reference_center, scale):
    corners = np.asarray(residual, dtype=np.float64).reshape(8, 3) * scale + np.asarray(reference_center)
    return box_from_corners(corners)


# rotated IoU ----------------------------------------------------------------

def _polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    a = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        a += x1 * y2 - x2 * y1
    return 0.5 * a


def _clip_polygon(subject, clipper):
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clipper``."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, output = output, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                output.append((px, py))
                if sq < 0:
                    t = sp / (sp - sq)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
            elif sq >= 0:
                t = sp / (sp - sq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def _footprint_list(box):
    (x, y, _), (l, w, _), yaw = box.center, box.size, box.yaw
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2, w / 2
    pts = []
    for sl, sw in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        dx, dy = sl * hl, sw * hw
        pts.append((x + c * dx - s * dy, y + s * dx + c * dy))
    return pts


def bev_intersection(a, b):
    """Area of the rotated-rectangle overlap of two boxes' footprints."""
    (ax, ay, _), (al, aw, _) = a.center, a.size
    (bx, by, _), (bl, bw, _) = b.center, b.size
    reach = 0.5 * (math.hypot(al, aw) + math.hypot(bl, bw))
    if (ax - bx) ** 2 + (ay - by) ** 2 >= reach * reach:
        return 0.0
    area = _polygon_area(_clip_polygon(_footprint_list(a), _footprint_list(b)))
    return area if area > AREA_EPS else 0.0


def bev_iou(a, b):
    inter = bev_intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return min(1.0, inter / union)


def iou3d(a, b):
    lo = max(a.z_range[0], b.z_range[0])
    hi = min(a.z_range[1], b.z_range[1])
    if hi <= lo:
        return 0.0
    inter = bev_intersection(a, b) * (hi - lo)
    if inter <= AREA_EPS:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


IOU_FUNCS = {"bev": bev_iou, "3d": iou3d}


def iou_matrix(boxes_a, boxes_b, metric="bev"):
    fn = IOU_FUNCS[metric]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def nms(dets, iou_threshold, metric="bev", score_threshold=None):
    """Greedy non-maximum suppression.

    Returns indices into ``dets`` of the kept detections in descending score
    order (ties by lower index). A detection is dropped when its IoU with an
    already kept one exceeds ``iou_threshold``. With ``score_threshold`` set,
    detections scoring at or below it are discarded first.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise DomainError(f"NMS threshold {iou_threshold} outside [0, 1]")
    fn = IOU_FUNCS[metric]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    if score_threshold is not None:
        order = [i for i in order if dets[i].score > score_threshold]
    kept = []
    for i in order:
        box = dets[i].box
        if all(fn(dets[k].box, box) <= iou_threshold for k in kept):
            kept.append(i)
    return kept
