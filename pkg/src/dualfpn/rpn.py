"""Stage-0 proposal machinery: anchors, objectness head, selection, labeling.

One anchor aspect/scale combination per location by default at toy size.  The
head (3x3 conv + two sibling 1x1 convs) is shared across pyramid levels;
per-location predictions are flattened in (y, x, anchor) order to line up with
the anchor array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as B
from . import ops
from .pyramid import PyramidConfig
from .tensor import Tensor


@dataclass(frozen=True)
class RpnConfig:
    anchor_scale: float = 4.0       # base anchor side = anchor_scale * level stride
    aspect_ratios: tuple = (1.0,)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    pre_nms_k: int = 256
    post_nms_n: int = 64
    nms_thresh: float = 0.7

    def __post_init__(self):
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")


@dataclass
class Proposal:
    box: np.ndarray          # [x1,y1,x2,y2]
    objectness: float        # sigmoid score in [0,1]
    source_stage: int = 0


def generate_anchors(pyr_cfg: PyramidConfig, rpn_cfg: RpnConfig, image_size) -> list:
    """Per-level (H*W*A, 4) anchor arrays, centers at (i+0.5)*stride.

    Anchors are not clipped; selection clips decoded proposals instead.
    """
    iw, ih = image_size
    out = []
    for stride in pyr_cfg.level_strides:
        if iw % stride or ih % stride:
            raise ValueError(f"image {iw}x{ih} not divisible by stride {stride}")
        w_cells, h_cells = iw // stride, ih // stride
        base = rpn_cfg.anchor_scale * stride
        cy, cx = np.meshgrid((np.arange(h_cells) + 0.5) * stride,
                             (np.arange(w_cells) + 0.5) * stride, indexing="ij")
        per = []
        for r in rpn_cfg.aspect_ratios:
            w = base / np.sqrt(r)
            h = base * np.sqrt(r)
            per.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1))
        # (H, W, A, 4) -> rows ordered y-major, then x, then ratio
        out.append(np.stack(per, axis=2).reshape(-1, 4))
    return out


def rpn_forward(top_down, weights) -> tuple:
    """Objectness logits (N,) and deltas (N, 4) across all levels.

    ``weights = (w3, b3, w_obj, b_obj, w_dl, b_dl)`` shared by every level;
    w_obj has A output channels and w_dl has 4A, grouped per anchor.
    """
    w3, b3, w_obj, b_obj, w_dl, b_dl = weights
    a = w_obj.shape[0]
    logit_parts, delta_parts = [], []
    for td in top_down:
        h = ops.relu(ops.conv2d(td, w3, b3, stride=1, pad=1))
        lg = ops.conv2d(h, w_obj, b_obj, stride=1, pad=0)
        dl = ops.conv2d(h, w_dl, b_dl, stride=1, pad=0)
        _, _, hh, wwd = lg.shape
        logit_parts.append(ops.reshape(_to_last(lg), (hh * wwd * a,)))
        delta_parts.append(ops.reshape(_to_last(dl), (hh * wwd * a, 4)))
    return ops.concat_rows(logit_parts), ops.concat_rows(delta_parts)


def _to_last(x: Tensor) -> Tensor:
    """NCHW -> (N, H, W, C) via gather, keeping the op on the tape."""
    n, c, h, w = x.shape
    idx = np.arange(n * c * h * w).reshape(n, c, h, w).transpose(0, 2, 3, 1)
    return ops.take_flat(x, idx)


def select_proposals(anchors: np.ndarray, logits: np.ndarray, deltas: np.ndarray,
                     cfg: RpnConfig, image_size) -> list:
    """Decode, clip, top-k by logit, NMS, top-n. Deterministic; returns
    objectness-descending :class:`Proposal` rows.

    Boxes that collapse to zero width/height after clipping are dropped
    before ranking (they cannot be pooled or matched).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not (len(anchors) == len(logits) == len(deltas)):
        raise ValueError("select_proposals: misaligned inputs")
    decoded = B.decode(anchors, deltas, image_size=image_size)
    valid = np.flatnonzero((decoded[:, 2] > decoded[:, 0]) & (decoded[:, 3] > decoded[:, 1]))
    decoded, logits = decoded[valid], logits[valid]
    order = np.argsort(-logits, kind="stable")[: cfg.pre_nms_k]
    keep = B.nms(decoded[order], logits[order], cfg.nms_thresh)[: cfg.post_nms_n]
    chosen = order[keep]
    scores = 1.0 / (1.0 + np.exp(-logits[chosen]))
    return [Proposal(box=decoded[i].copy(), objectness=float(s), source_stage=0)
            for i, s in zip(chosen, scores)]


def proposal_boxes(proposals) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 4))
    return np.stack([p.box for p in proposals])


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                  pos_iou: float, neg_iou: float) -> tuple:
    """Per-anchor training labels: 1 pos, 0 neg, -1 ignore, plus matched gt.

    Positive when IoU >= pos_iou, or when the anchor attains the best IoU for
    some gt (so every gt with any overlap owns at least one positive).
    Negative when the best IoU over gts is < neg_iou; everything else ignored.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, g = len(anchors), len(gt_boxes)
    labels = np.full(n, -1, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if g == 0:
        labels[:] = 0
        return labels, matched
    m = B.iou_matrix(anchors, gt_boxes)
    best = m.max(axis=1)
    matched = m.argmax(axis=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    for gi in range(g):
        top = m[:, gi].max()
        if top > 0:
            force = np.flatnonzero(m[:, gi] == top)
            labels[force] = 1
            matched[force] = gi
    matched[labels != 1] = -1
    return labels, matched
