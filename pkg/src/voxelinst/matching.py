"""Anchor-to-ground-truth assignment for detector training.

Two rules make an anchor positive: clearing the IoU threshold against any
ground-truth box, and being the best anchor for some ground truth (even
below threshold, so no object goes unsupervised). Everything else is
negative; there is no ignore band.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import AnchorSet, BBox3D, boxes_to_array, encode_boxes, iou_matrix

NEGATIVE = -1


@dataclass
class MatchResult:
    """Per-anchor assignment; ``gt_index`` is NEGATIVE (-1) or a GT index."""

    gt_index: np.ndarray      # (N,) int64
    object_class: np.ndarray  # (N,) int64; 0 (background) at negatives
    targets: np.ndarray       # (N, 6) float64; zeros at negatives

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def n_anchors(self) -> int:
        return self.gt_index.shape[0]


def match_anchors(
    anchors: AnchorSet | np.ndarray,
    gts: Sequence[BBox3D] | np.ndarray,
    pos_thresh: float = 0.4,
    gt_classes: Sequence[int] | None = None,
) -> MatchResult:
    """Label every anchor positive/negative and compute regression targets.

    Positive rules, in precedence order:
      1. For each GT with nonzero best IoU, its argmax anchor is positive
         and pinned to that GT; if one anchor is argmax for several GTs it
         goes to the GT with the higher IoU (ties to the lower GT index).
      2. Any anchor whose best IoU >= pos_thresh is positive, assigned to
         its argmax GT (ties to the lower GT index).

    argmax tie-breaks follow numpy's first-occurrence rule, i.e. the lowest
    index. Targets are encoded against the assigned GT.
    """
    if not 0.0 < pos_thresh < 1.0:
        raise ValueError(f"pos_thresh must be in (0, 1), got {pos_thresh}")
    anchor_arr = anchors.boxes if isinstance(anchors, AnchorSet) else boxes_to_array(anchors)
    gt_arr = boxes_to_array(gts)
    n = anchor_arr.shape[0]
    m = gt_arr.shape[0]

    if gt_classes is None:
        if isinstance(gts, np.ndarray):
            classes = np.ones(m, dtype=np.int64)
        else:
            classes = np.array(
                [1 if b.object_class is None else b.object_class for b in gts], dtype=np.int64
            )
    else:
        classes = np.asarray(gt_classes, dtype=np.int64)

    gt_index = np.full(n, NEGATIVE, dtype=np.int64)
    if m == 0:
        return MatchResult(
            gt_index=gt_index,
            object_class=np.zeros(n, dtype=np.int64),
            targets=np.zeros((n, 6), dtype=np.float64),
        )

    iou = iou_matrix(anchor_arr, gt_arr)  # (n, m)

    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    gt_index[best_iou >= pos_thresh] = best_gt[best_iou >= pos_thresh]

    # Per-GT forcing overrides the threshold assignment.
    forced_anchor = iou.argmax(axis=0)
    forced_iou = iou[forced_anchor, np.arange(m)]
    override: dict[int, tuple[float, int]] = {}
    for j in range(m):
        if forced_iou[j] <= 0.0:
            continue  # GT with no overlapping anchor forces nothing
        i = int(forced_anchor[j])
        if i not in override or forced_iou[j] > override[i][0]:
            override[i] = (float(forced_iou[j]), j)
    for i, (_, j) in override.items():
        gt_index[i] = j

    pos = gt_index >= 0
    object_class = np.zeros(n, dtype=np.int64)
    object_class[pos] = classes[gt_index[pos]]
    targets = np.zeros((n, 6), dtype=np.float64)
    if pos.any():
        targets[pos] = encode_boxes(gt_arr[gt_index[pos]], anchor_arr[pos])
    return MatchResult(gt_index=gt_index, object_class=object_class, targets=targets)
