"""3D box algebra: IoU, anchor offset encoding, anchor grids, and NMS.

Boxes are axis-aligned, parameterized by center (cz, cy, cx) and size
(d, h, w) in continuous voxel coordinates. The extent along each axis is
[center - size/2, center + size/2]. Axis order is (z, y, x) everywhere,
with the size pairing (z, d), (y, h), (x, w).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox3D:
    """Axis-aligned 3D box; ``object_class``/``score`` are optional roles."""

    cz: float
    cy: float
    cx: float
    d: float
    h: float
    w: float
    object_class: int | None = None
    score: float | None = None

    def __post_init__(self):
        if not (self.d > 0 and self.h > 0 and self.w > 0):
            raise ValueError(f"box sizes must be positive, got ({self.d}, {self.h}, {self.w})")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cz, self.cy, self.cx], dtype=np.float64)

    @property
    def size(self) -> np.ndarray:
        return np.array([self.d, self.h, self.w], dtype=np.float64)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.size / 2.0
        return self.center - half, self.center + half

    def volume(self) -> float:
        return float(self.d * self.h * self.w)

    def as_array(self) -> np.ndarray:
        return np.array([self.cz, self.cy, self.cx, self.d, self.h, self.w], dtype=np.float64)

    @classmethod
    def from_array(cls, a, object_class=None, score=None) -> "BBox3D":
        return cls(
            float(a[0]), float(a[1]), float(a[2]),
            float(a[3]), float(a[4]), float(a[5]),
            object_class=object_class, score=score,
        )


@dataclass(frozen=True)
class RegressionTarget:
    """Anchor-relative box offsets: center deltas over anchor size, log size ratios."""

    tz: float
    ty: float
    tx: float
    td: float
    th: float
    tw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tz, self.ty, self.tx, self.td, self.th, self.tw], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RegressionTarget":
        return cls(*(float(v) for v in a[:6]))


def boxes_to_array(boxes: Sequence[BBox3D] | np.ndarray) -> np.ndarray:
    """(N, 6) float64 array of [cz, cy, cx, d, h, w]."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 6:
            raise ValueError(f"box array must be (N, 6), got {arr.shape}")
        return arr
    if len(boxes) == 0:
        return np.zeros((0, 6), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise continuous-geometry IoU between (N, 6) and (M, 6) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    alo = a[:, None, :3] - a[:, None, 3:] / 2
    ahi = a[:, None, :3] + a[:, None, 3:] / 2
    blo = b[None, :, :3] - b[None, :, 3:] / 2
    bhi = b[None, :, :3] + b[None, :, 3:] / 2
    overlap = np.maximum(0.0, np.minimum(ahi, bhi) - np.maximum(alo, blo))
    inter = overlap.prod(axis=2)
    va = a[:, 3:].prod(axis=1)
    vb = b[:, 3:].prod(axis=1)
    union = va[:, None] + vb[None, :] - inter
    with np.errstate(invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def iou3d(a: BBox3D, b: BBox3D) -> float:
    """Continuous-geometry IoU of two boxes; 0 when disjoint."""
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise offsets of gt boxes relative to anchors, both (N, 6)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    t = np.empty_like(gt)
    t[:, :3] = (gt[:, :3] - anchors[:, :3]) / anchors[:, 3:]
    t[:, 3:] = np.log(gt[:, 3:] / anchors[:, 3:])
    return t


def decode_boxes(t: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    t = np.asarray(t, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    out = np.empty_like(t)
    out[:, :3] = anchors[:, :3] + t[:, :3] * anchors[:, 3:]
    out[:, 3:] = anchors[:, 3:] * np.exp(t[:, 3:])
    return out


def encode_box(gt: BBox3D, anchor: BBox3D) -> RegressionTarget:
    return RegressionTarget.from_array(encode_boxes(gt.as_array()[None], anchor.as_array()[None])[0])


def decode_box(t: RegressionTarget, anchor: BBox3D) -> BBox3D:
    return BBox3D.from_array(decode_boxes(t.as_array()[None], anchor.as_array()[None])[0])


@dataclass(frozen=True)
class AnchorSet:
    """All anchors for one feature grid, flattened z-major then template."""

    grid: tuple[int, int, int]          # (m, n, k) feature grid
    stride: tuple[float, float, float]  # voxels per feature cell, per axis
    templates: np.ndarray               # (r, 3) anchor sizes (d, h, w)
    boxes: np.ndarray                   # (m*n*k*r, 6)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def r(self) -> int:
        return self.templates.shape[0]

    def box(self, i: int) -> BBox3D:
        return BBox3D.from_array(self.boxes[i])


def generate_anchors(
    grid: tuple[int, int, int],
    stride: tuple[float, float, float],
    templates: Sequence[Sequence[float]],
) -> AnchorSet:
    """Tile ``templates`` at every feature-grid cell center.

    Cell (i, j, l) is centered at ((i+0.5)*sz, (j+0.5)*sy, (l+0.5)*sx).
    Flattened order is ((i*n + j)*k + l)*r + template_index, which matches
    the reshape order of the detector head outputs.
    """
    m, n, k = grid
    tmpl = np.asarray(templates, dtype=np.float64).reshape(-1, 3)
    if tmpl.shape[0] == 0:
        raise ValueError("at least one anchor template is required")
    zs = (np.arange(m) + 0.5) * stride[0]
    ys = (np.arange(n) + 0.5) * stride[1]
    xs = (np.arange(k) + 0.5) * stride[2]
    cz, cy, cx = np.meshgrid(zs, ys, xs, indexing="ij")
    centers = np.stack([cz, cy, cx], axis=-1).reshape(-1, 3)  # (m*n*k, 3)
    r = tmpl.shape[0]
    boxes = np.empty((centers.shape[0] * r, 6), dtype=np.float64)
    boxes[:, :3] = np.repeat(centers, r, axis=0)
    boxes[:, 3:] = np.tile(tmpl, (centers.shape[0], 1))
    return AnchorSet(grid=tuple(grid), stride=tuple(float(s) for s in stride),
                     templates=tmpl, boxes=boxes)


def nms3d(
    boxes: Sequence[BBox3D] | np.ndarray,
    iou_thresh: float,
    scores: np.ndarray | None = None,
) -> list[int]:
    """Greedy descending-score suppression; returns kept original indices.

    A box is removed iff its IoU with an already-kept box exceeds
    ``iou_thresh`` (strict). Score ties break toward the lower original
    index; output is sorted by descending score.
    """
    arr = boxes_to_array(boxes)
    if scores is None:
        if isinstance(boxes, np.ndarray):
            raise ValueError("scores are required with an array input")
        scores = np.array([1.0 if b.score is None else b.score for b in boxes], dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
    if arr.shape[0] == 0:
        return []
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms3d requires finite scores")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    kept_arr: list[np.ndarray] = []
    for idx in order:
        cand = arr[idx : idx + 1]
        if kept_arr and np.any(iou_matrix(cand, np.stack(kept_arr)) > iou_thresh):
            continue
        kept.append(int(idx))
        kept_arr.append(arr[idx])
    return kept
