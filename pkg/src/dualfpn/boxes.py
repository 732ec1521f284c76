"""Axis-aligned box arithmetic shared by the proposal and head stages.

Boxes are ``[x1, y1, x2, y2]`` in continuous half-open pixel coordinates, so
``area = (x2-x1)*(y2-y1)`` with no "+1" convention.  Batch arguments are
``(N, 4)`` float arrays; everything here is pure numpy, nothing is taped.
"""

from __future__ import annotations

import numpy as np

# exp() of the decoded log-scale is capped so a wild regression output cannot
# produce an astronomically large box
SCALE_CLAMP = float(np.log(1000.0 / 16.0))


def as_boxes(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b.reshape(1, 4)
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"expected (N,4) boxes, got shape {b.shape}")
    return b


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.maximum(b[:, 2] - b[:, 0], 0.0) * np.maximum(b[:, 3] - b[:, 1], 0.0)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    return float(iou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = as_boxes(a)
    b = as_boxes(b)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    union = area(a)[:, None] + area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores keep the
    lower original index first.  A box is suppressed when its IoU with an
    already-kept box exceeds ``iou_threshold`` (strictly).
    """
    boxes = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"nms: {boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        live = ~suppressed[pos + 1:]
        if rest.size:
            ious = iou_matrix(boxes[i], boxes[rest[live]])[0]
            hit = np.flatnonzero(live)[ious > iou_threshold]
            suppressed[pos + 1 + hit] = True
    return np.asarray(keep, dtype=np.int64)


def encode(anchors, gts) -> np.ndarray:
    """Regression targets taking each anchor onto its ground-truth box.

    Center offsets are normalized by anchor size, scales are log ratios:
    ``(dx, dy, dw, dh)`` per row.
    """
    a = as_boxes(anchors)
    g = as_boxes(gts)
    if a.shape != g.shape:
        raise ValueError(f"encode: shape mismatch {a.shape} vs {g.shape}")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode: anchor with non-positive width/height")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    gcx = g[:, 0] + 0.5 * gw
    gcy = g[:, 1] + 0.5 * gh
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(anchors, deltas, image_size=None) -> np.ndarray:
    """Apply ``(dx, dy, dw, dh)`` rows to anchors; inverse of :func:`encode`.

    Log scales are capped at ``SCALE_CLAMP`` before exponentiation.  When
    ``image_size=(width, height)`` is given the result is clipped to it.
    """
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(a.shape)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("decode: anchor with non-positive width/height")
    cx = a[:, 0] + 0.5 * aw + d[:, 0] * aw
    cy = a[:, 1] + 0.5 * ah + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], SCALE_CLAMP))
    h = ah * np.exp(np.minimum(d[:, 3], SCALE_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size) -> np.ndarray:
    """Clip boxes into ``[0, width] x [0, height]``."""
    w, h = image_size
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0.0, float(w))
    b[:, 1::2] = np.clip(b[:, 1::2], 0.0, float(h))
    return b
