"""Proposal matching, roi sampling, target building, and the SGD loop.

The target-building helpers are pure array functions used by the model's
training forward pass; ``train`` drives the whole loop over a dataset and
writes the CSV log plus checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as B
from .tensor import Tensor


class SkipStep(Exception):
    """Raised when an iteration produced nothing trainable (no rois)."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    lr_decay_at: int = 1500
    lr_decay_factor: float = 0.1
    batch_size: int = 2
    roi_batch: int = 32
    fg_fraction: float = 0.25
    rpn_batch: int = 64
    rpn_fg_fraction: float = 0.5
    seed: int = 0
    eval_interval: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.fg_fraction <= 1:
            raise ValueError("fg_fraction must be in [0,1]")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("bad schedule")


@dataclass
class LossReport:
    total: float
    terms: dict            # term name -> unweighted value
    weights: dict          # term name -> weight applied in total
    total_tensor: Tensor = None
    grad_norms: dict = None

    def check(self, tol=1e-9):
        s = sum(self.weights[k] * v for k, v in self.terms.items())
        if abs(s - self.total) > tol:
            raise AssertionError(f"loss total {self.total} != weighted term sum {s}")
        return self


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float):
    """Max-IoU assignment: (matched gt index or -1, best IoU) per proposal."""
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(proposals)
    if len(gt_boxes) == 0:
        return np.full(n, -1, dtype=np.int64), np.zeros(n)
    m = B.iou_matrix(proposals, gt_boxes)
    best = m.max(axis=1)
    matched = m.argmax(axis=1).astype(np.int64)
    matched[best < iou_threshold] = -1
    return matched, best


def sample_rois(labels: np.ndarray, batch: int, fg_fraction: float, rng) -> np.ndarray:
    """Pick up to ``batch`` indices: foregrounds capped at fg_fraction*batch.

    ``labels``: >0 foreground, ==0 background, <0 ignored.  Output indices are
    sorted ascending; deterministic given the generator state.
    """
    labels = np.asarray(labels)
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(round(batch * fg_fraction)))
    if n_fg:
        fg = rng.choice(fg, n_fg, replace=False)
    else:
        fg = fg[:0]
    n_bg = min(len(bg), batch - n_fg)
    if n_bg:
        bg = rng.choice(bg, n_bg, replace=False)
    else:
        bg = bg[:0]
    return np.sort(np.concatenate([fg, bg]).astype(np.int64))


def crop_resize_mask(mask: np.ndarray, box, out_hw) -> np.ndarray:
    """Bilinear-resample a full-image binary mask inside ``box`` to ``out_hw``,
    binarized at 0.5.  Sample points sit at output-cell centers; coordinates
    clamp to the mask's pixel-center lattice like the pooling op."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    oh, ow = out_hw
    x1, y1, x2, y2 = [float(v) for v in box]
    py = y1 + (np.arange(oh) + 0.5) * (y2 - y1) / oh
    px = x1 + (np.arange(ow) + 0.5) * (x2 - x1) / ow

    def axis(p, size):
        q = np.clip(p - 0.5, 0.0, size - 1.0)
        i0 = np.minimum(np.floor(q).astype(np.int64), max(size - 2, 0))
        return i0, np.minimum(i0 + 1, size - 1), q - i0

    y0, y1i, wy = axis(py, h)
    x0, x1i, wx = axis(px, w)
    v = ((1 - wy)[:, None] * (1 - wx)[None, :] * mask[np.ix_(y0, x0)]
         + (1 - wy)[:, None] * wx[None, :] * mask[np.ix_(y0, x1i)]
         + wy[:, None] * (1 - wx)[None, :] * mask[np.ix_(y1i, x0)]
         + wy[:, None] * wx[None, :] * mask[np.ix_(y1i, x1i)])
    return (v >= 0.5).astype(np.float64)


def build_targets(sampled_boxes: np.ndarray, matched: np.ndarray, gt,
                  with_masks: bool, mask_size=None):
    """Targets for sampled rois: (cls, fg row indices, reg on fg, masks on fg).

    ``gt`` needs .boxes, .labels (1..K; 0 is background), and .masks when
    ``with_masks``.  Regression targets encode each fg box onto its gt.
    """
    sampled_boxes = np.asarray(sampled_boxes, dtype=np.float64).reshape(-1, 4)
    matched = np.asarray(matched, dtype=np.int64)
    cls_t = np.where(matched >= 0, np.asarray(gt.labels)[np.clip(matched, 0, None)], 0)
    cls_t = cls_t.astype(np.int64)
    fg = np.flatnonzero(matched >= 0)
    reg_t = (B.encode(sampled_boxes[fg], np.asarray(gt.boxes)[matched[fg]])
             if fg.size else np.zeros((0, 4)))
    mask_t = None
    if with_masks:
        if getattr(gt, "masks", None) is None:
            raise ValueError("with_masks requires gt masks")
        mask_t = np.stack([crop_resize_mask(gt.masks[matched[j]], sampled_boxes[j], mask_size)
                           for j in fg]) if fg.size else np.zeros((0,) + tuple(mask_size))
    return cls_t, fg, reg_t, mask_t


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    lr = cfg.lr
    if iteration >= cfg.lr_decay_at:
        lr *= cfg.lr_decay_factor
    return lr


def sgd_step(params: dict, cfg: TrainConfig, state: dict, lr: float = None) -> None:
    """Momentum SGD with decoupled-by-name weight decay (none on biases).

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Parameters with no gradient this step are skipped.
    """
    if lr is None:
        lr = cfg.lr
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
        wd = 0.0 if name.endswith(".b") else cfg.weight_decay
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state[name] = v
        v *= cfg.momentum
        v += g
        if wd:
            v += wd * p.data
        p.data -= (lr * v).astype(p.data.dtype, copy=False)


def train(model, cfg: TrainConfig, dataset, out_dir=None, val_set=None,
          train_eval_set=None, log_every: int = 1):
    """SGD loop over ``dataset`` (a list of samples with .image and .gt).

    Logs every iteration's LossReport, evaluates AP on ``val_set`` (and
    optionally ``train_eval_set``) every ``eval_interval`` iterations plus at
    the end, writes ``train_log.csv`` and final/best checkpoints under
    ``out_dir``.  Returns the history list of row dicts.
    """
    from .model import save_checkpoint
    from .tensor import Tape, tensor
    from . import ops

    if not dataset:
        raise ValueError("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    history: list = []
    best_ap = -1.0
    stable = {k: v.data.copy() for k, v in model.params.items()}

    def evaluate(samples):
        from .metrics import evaluate_ap
        dets = [model.forward_infer(s.image) for s in samples]
        rep = evaluate_ap(dets, [s.gt for s in samples])
        return rep

    def flush_csv():
        if out is None or not history:
            return
        keys = []
        for row in history:
            for k in row:
                if k not in keys:
                    keys.append(k)
        with open(out / "train_log.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            wr.writerows(history)

    def run_eval(it):
        nonlocal best_ap
        row = {}
        if val_set:
            rep = evaluate(val_set)
            row.update(val_ap=round(rep.ap, 6), val_ap50=round(rep.ap50, 6))
            if rep.ap50 > best_ap:
                best_ap = rep.ap50
                if out is not None:
                    save_checkpoint(out / "checkpoint_best.ckpt", model)
        if train_eval_set:
            rep = evaluate(train_eval_set)
            row.update(train_ap=round(rep.ap, 6), train_ap50=round(rep.ap50, 6))
        return row

    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            for k, v in model.params.items():
                np.copyto(stable[k], v.data)
                v.zero_grad()
            lr = lr_at(cfg, it - 1)
            picks = rng.choice(len(dataset), size=cfg.batch_size, replace=True)
            reports = []
            with Tape():
                totals = []
                for pi in picks:
                    s = dataset[pi]
                    try:
                        outs = model.forward_train(
                            s.image, s.gt, rng,
                            roi_batch=cfg.roi_batch, fg_fraction=cfg.fg_fraction,
                            rpn_batch=cfg.rpn_batch, rpn_fg_fraction=cfg.rpn_fg_fraction)
                    except SkipStep:
                        continue
                    rep = model.compute_loss(outs)
                    reports.append(rep)
                    totals.append(rep.total_tensor)
                if not totals:
                    continue
                batch_total = totals[0]
                for t in totals[1:]:
                    batch_total = ops.add(batch_total, t)
                batch_total = ops.scale(batch_total, 1.0 / len(totals))
                if not np.isfinite(float(batch_total.data)):
                    raise TrainingDiverged(f"non-finite loss at iteration {it}")
                batch_total.backward()
            sgd_step(model.params, cfg, state, lr=lr)

            if it % log_every == 0 or it == cfg.iterations:
                row = {"iteration": it, "lr": lr}
                for key in reports[0].terms:
                    row[key] = round(float(np.mean([r.terms[key] for r in reports])), 6)
                row["L_final"] = round(float(np.mean([r.total for r in reports])), 6)
                if cfg.eval_interval and (it % cfg.eval_interval == 0 or it == cfg.iterations):
                    row.update(run_eval(it))
                history.append(row)
    except TrainingDiverged:
        for k, v in model.params.items():
            np.copyto(v.data, stable[k])
        if out is not None:
            save_checkpoint(out / "checkpoint_final.ckpt", model)
            flush_csv()
        raise
    if cfg.iterations == 0 and (val_set or train_eval_set):
        history.append({"iteration": 0, "lr": cfg.lr, **run_eval(0)})
    if out is not None:
        save_checkpoint(out / "checkpoint_final.ckpt", model)
        flush_csv()
    return history
