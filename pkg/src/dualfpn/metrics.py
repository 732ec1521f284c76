"""COCO-style average precision over boxes and masks.

Protocol: greedy per-image per-class matching in score order, each gt usable
once per IoU threshold; 101-point interpolated precision; AP averages IoU
0.50:0.95 in steps of 0.05.  Per-class APs are averaged only over classes
that have at least one ground-truth instance.  Size buckets are scaled for
small images: S < 16^2, M < 32^2, L otherwise, by box area; bucket scores
restrict both gts and detections to the bucket.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .boxes import iou_matrix

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.50, 1.00, 0.05), 2))
SIZE_BUCKETS = ((0.0, 256.0), (256.0, 1024.0), (1024.0, float("inf")))
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    mask_ap: float = None
    mask_ap50: float = None
    mask_ap75: float = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def _mask_iou_matrix(det_masks: list, gt_masks: np.ndarray) -> np.ndarray:
    out = np.zeros((len(det_masks), len(gt_masks)))
    for i, dm in enumerate(det_masks):
        if dm is None:
            continue
        dm = np.asarray(dm)
        if dm.shape != gt_masks.shape[1:]:
            dm = _resample_nearest(dm, gt_masks.shape[1:])
        dmb = dm != 0
        for j, gm in enumerate(gt_masks):
            gmb = gm != 0
            inter = np.logical_and(dmb, gmb).sum()
            union = np.logical_or(dmb, gmb).sum()
            out[i, j] = inter / union if union else 0.0
    return out


def _resample_nearest(mask: np.ndarray, hw) -> np.ndarray:
    h, w = hw
    ys = np.minimum((np.arange(h) * mask.shape[0] / h).astype(np.int64), mask.shape[0] - 1)
    xs = np.minimum((np.arange(w) * mask.shape[1] / w).astype(np.int64), mask.shape[1] - 1)
    return mask[np.ix_(ys, xs)]


def _ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    if recall.size == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _class_ap(per_image: list, n_gt: int, thresholds) -> np.ndarray:
    """per_image: (scores sorted desc, iou matrix rows in that order)."""
    aps = np.zeros(len(thresholds))
    if n_gt == 0:
        return aps
    all_scores = np.concatenate([s for s, _ in per_image]) if per_image else np.zeros(0)
    if all_scores.size == 0:
        return aps
    order = np.argsort(-all_scores, kind="stable")
    for ti, t in enumerate(thresholds):
        flags = []
        for scores, iou in per_image:
            tp = np.zeros(len(scores), dtype=bool)
            if iou.shape[1]:
                used = np.zeros(iou.shape[1], dtype=bool)
                for i in range(len(scores)):
                    row = np.where(used, -1.0, iou[i])
                    j = int(np.argmax(row))
                    if row[j] >= t:
                        tp[i] = True
                        used[j] = True
            flags.append(tp)
        tp = np.concatenate(flags)[order]
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(tp) + 1)
        aps[ti] = _ap_101(recall, precision)
    return aps


def _gather(detections, gts, use_masks: bool, bucket=None):
    """-> classes present, and per class the per-image (scores, iou) pairs
    plus gt count, honoring an optional (lo, hi) box-area bucket."""
    classes = {}
    for img_ix, gt in enumerate(gts):
        g_boxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)
        g_labels = np.asarray(gt.labels)
        keep_g = np.ones(len(g_boxes), dtype=bool)
        if bucket is not None:
            a = _box_area(g_boxes)
            keep_g = (a >= bucket[0]) & (a < bucket[1])
        dets = detections[img_ix] if img_ix < len(detections) else []
        d_boxes = (np.stack([d.box for d in dets]).astype(np.float64)
                   if dets else np.zeros((0, 4)))
        d_scores = np.array([d.score for d in dets])
        d_labels = np.array([d.label for d in dets], dtype=np.int64)
        keep_d = np.ones(len(dets), dtype=bool)
        if bucket is not None and len(dets):
            a = _box_area(d_boxes)
            keep_d = (a >= bucket[0]) & (a < bucket[1])
        labels_here = set(g_labels[keep_g].tolist()) | set(d_labels[keep_d].tolist())
        for c in labels_here:
            gi = np.flatnonzero((g_labels == c) & keep_g)
            di = np.flatnonzero((d_labels == c) & keep_d)
            di = di[np.argsort(-d_scores[di], kind="stable")]
            if use_masks:
                iou = _mask_iou_matrix([dets[i].mask for i in di], gt.masks[gi]) \
                    if len(di) else np.zeros((0, len(gi)))
            else:
                iou = (iou_matrix(d_boxes[di], g_boxes[gi])
                       if len(di) and len(gi) else np.zeros((len(di), len(gi))))
            entry = classes.setdefault(int(c), {"n_gt": 0, "per_image": []})
            entry["n_gt"] += len(gi)
            if len(di):
                entry["per_image"].append((d_scores[di], iou))
    return classes


def _mean_ap(detections, gts, thresholds, use_masks, bucket=None) -> np.ndarray:
    """Per-threshold AP averaged over classes with >= 1 gt; zeros if none."""
    classes = _gather(detections, gts, use_masks, bucket)
    rows = [_class_ap(e["per_image"], e["n_gt"], thresholds)
            for e in classes.values() if e["n_gt"] > 0]
    if not rows:
        return np.zeros(len(thresholds))
    return np.mean(rows, axis=0)


def _report(detections, gts, thresholds, use_masks, size_buckets) -> EvalReport:
    thresholds = list(thresholds)
    by_t = _mean_ap(detections, gts, thresholds, use_masks)
    buckets = [float(_mean_ap(detections, gts, thresholds, use_masks, b).mean())
               for b in size_buckets]

    def at(t):
        return float(by_t[thresholds.index(t)]) if t in thresholds else 0.0

    return EvalReport(ap=float(by_t.mean()), ap50=at(0.5), ap75=at(0.75),
                      ap_s=buckets[0], ap_m=buckets[1], ap_l=buckets[2])


def evaluate_ap(detections, gts, iou_thresholds=None, size_buckets=None) -> EvalReport:
    """Box AP. ``detections``: per-image lists of objects with .box/.score/
    .label; ``gts``: per-image objects with .boxes/.labels (1-based)."""
    return _report(detections, gts, iou_thresholds or DEFAULT_THRESHOLDS,
                   False, size_buckets or SIZE_BUCKETS)


def evaluate_mask_ap(detections, gts, iou_thresholds=None, size_buckets=None) -> EvalReport:
    """Mask AP: identical protocol with IoU = |intersection| / |union| over
    binarized masks.  Detections lacking a mask count as empty masks."""
    return _report(detections, gts, iou_thresholds or DEFAULT_THRESHOLDS,
                   True, size_buckets or SIZE_BUCKETS)


def evaluate_full(detections, gts, iou_thresholds=None) -> EvalReport:
    """Box metrics plus mask_ap/mask_ap50/mask_ap75 when masks are present."""
    rep = evaluate_ap(detections, gts, iou_thresholds)
    have_masks = (any(getattr(d, "mask", None) is not None
                      for dets in detections for d in dets)
                  and any(getattr(g, "masks", None) is not None for g in gts))
    if have_masks:
        m = evaluate_mask_ap(detections, gts, iou_thresholds)
        rep.mask_ap, rep.mask_ap50, rep.mask_ap75 = m.ap, m.ap50, m.ap75
    return rep
