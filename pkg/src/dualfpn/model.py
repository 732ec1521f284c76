"""The assembled detector: two-stage or three-stage cascade, with optional
auxiliary supervision on the bottom-up pyramid and decoupled heads.

Training forward passes record every discrete decision (proposals, sampling,
matching, targets) into a plan dict; replaying a plan freezes those decisions
so the loss becomes a smooth function of the weights (used by gradient
checks).  Auxiliary heads read the bottom-up maps through their own 1x1
laterals and are dropped wholesale at inference, leaving a graph identical to
the plain pyramid detector.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import boxes as B
from . import heads, ops, pyramid, rpn, training
from .roi_align import RoiConfig, roi_align_many
from .pyramid import PyramidConfig
from .rpn import RpnConfig
from .tensor import Tape, Tensor, tensor, tensor_to_bytes, tensor_from_bytes
from .training import LossReport, SkipStep


@dataclass(frozen=True)
class ModelConfig:
    ds_enabled: bool = True
    dc_enabled: bool = True
    with_masks: bool = True
    num_stages: int = 1               # 1 = single head after RPN; 3 = cascade
    aux_box_source: int = 0           # 0: RPN boxes, 1/2: boxes refined by stage 1/2
    alpha1: float = 1.0               # aux detection term
    alpha2: float = 1.0               # main detection (two-stage) / aux mask (cascade)
    alpha3: float = 1.0               # aux mask (two-stage) / stage-3 mask (cascade)
    alpha4: float = 1.0               # main mask (two-stage only)
    alpha_stages: tuple = (1.0, 1.0, 1.0)
    cascade_iou_thresholds: tuple = (0.5, 0.6, 0.7)
    rpn_loss_weight: float = 1.0
    match_iou: float = 0.5
    aux_match_iou: float = 0.5
    image_size: tuple = (64, 64)
    num_classes: int = 3
    hidden_width: int = 128
    score_thresh: float = 0.05
    infer_nms: float = 0.5
    max_dets: int = 100
    train_append_gt: bool = True
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)

    def __post_init__(self):
        if self.num_stages not in (1, 3):
            raise ValueError("num_stages must be 1 or 3")
        if self.num_stages == 1 and self.aux_box_source != 0:
            raise ValueError("aux_box_source 1/2 requires the cascade (num_stages=3)")
        if not 0 <= self.aux_box_source < 3:
            raise ValueError("aux_box_source must be 0, 1 or 2")
        for a in (self.alpha1, self.alpha2, self.alpha3, self.alpha4,
                  *self.alpha_stages, self.rpn_loss_weight):
            if a < 0:
                raise ValueError("loss weights must be non-negative")
        if len(self.cascade_iou_thresholds) < self.num_stages:
            raise ValueError("need an IoU threshold per cascade stage")

    @property
    def head_mode(self) -> str:
        return "decoupled" if self.dc_enabled else "coupled"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key, sub in (("pyramid", PyramidConfig), ("rpn", RpnConfig), ("roi", RoiConfig)):
            if key in d and isinstance(d[key], dict):
                kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = sub(**kw)
        for key in ("alpha_stages", "cascade_iou_thresholds", "image_size"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class StageOutput:
    boxes: np.ndarray            # (n,4) head input boxes, level-grouped order
    cls_logits: Tensor           # (n, K+1)
    reg_deltas: Tensor           # (n, 4)
    cls_targets: np.ndarray      # (n,) 0 = background
    matched: np.ndarray          # (n,) gt index or -1
    fg_rows: np.ndarray          # indices into the n rows
    reg_targets: np.ndarray      # (n_fg, 4)


@dataclass
class MaskOutput:
    logits: Tensor               # (n_fg, K, 2h, 2w)
    targets: np.ndarray          # (n_fg, 2h, 2w) binary
    class_channels: np.ndarray   # (n_fg,) 0-based channel per row
    boxes: np.ndarray


@dataclass
class RpnOutput:
    logits: Tensor               # (num_anchors,)
    deltas: Tensor               # (num_anchors, 4)
    sample_idx: np.ndarray
    sample_labels: np.ndarray    # 0/1 at sample_idx
    pos_idx: np.ndarray          # anchor indices of sampled positives
    reg_targets: np.ndarray      # (n_pos, 4)


@dataclass
class TrainOutputs:
    stages: list
    rpn: RpnOutput
    aux: StageOutput = None
    mask: MaskOutput = None
    aux_mask: MaskOutput = None
    plan: dict = None


@dataclass
class Detection:
    box: np.ndarray
    label: int                   # 1..K
    score: float
    mask: np.ndarray = None      # (H, W) bool when masks enabled


# --- parameters --------------------------------------------------------------

def _head_specs(sp: dict, prefix: str, cfg: ModelConfig) -> None:
    f = cfg.pyramid.out_channels * cfg.roi.output_size[0] * cfg.roi.output_size[1]
    h = cfg.hidden_width
    k1 = cfg.num_classes + 1
    if cfg.dc_enabled:
        for tower, out_dim, out_name in (("cls", k1, "cls"), ("reg", 4, "reg")):
            sp[f"{prefix}.{tower}_fc1.w"] = (h, f)
            sp[f"{prefix}.{tower}_fc1.b"] = (h,)
            sp[f"{prefix}.{tower}_fc2.w"] = (h, h)
            sp[f"{prefix}.{tower}_fc2.b"] = (h,)
            sp[f"{prefix}.{out_name}.w"] = (out_dim, h)
            sp[f"{prefix}.{out_name}.b"] = (out_dim,)
    else:
        sp[f"{prefix}.fc1.w"] = (h, f)
        sp[f"{prefix}.fc1.b"] = (h,)
        sp[f"{prefix}.fc2.w"] = (h, h)
        sp[f"{prefix}.fc2.b"] = (h,)
        sp[f"{prefix}.cls.w"] = (k1, h)
        sp[f"{prefix}.cls.b"] = (k1,)
        sp[f"{prefix}.reg.w"] = (4, h)
        sp[f"{prefix}.reg.b"] = (4,)


def _mask_specs(sp: dict, prefix: str, cfg: ModelConfig) -> None:
    d = cfg.pyramid.out_channels
    sp[f"{prefix}.conv1.w"] = (d, d, 3, 3)
    sp[f"{prefix}.conv1.b"] = (d,)
    sp[f"{prefix}.conv2.w"] = (d, d, 3, 3)
    sp[f"{prefix}.conv2.b"] = (d,)
    sp[f"{prefix}.out.w"] = (cfg.num_classes, d, 1, 1)
    sp[f"{prefix}.out.b"] = (cfg.num_classes,)


def param_specs(cfg: ModelConfig) -> dict:
    """Ordered name -> shape inventory for a config."""
    sp: dict = {}
    pc = cfg.pyramid
    prev = 3
    for k, ch in enumerate(pc.backbone_channels):
        sp[f"backbone.s{k}.down.w"] = (ch, prev, 3, 3)
        sp[f"backbone.s{k}.down.b"] = (ch,)
        sp[f"backbone.s{k}.same.w"] = (ch, ch, 3, 3)
        sp[f"backbone.s{k}.same.b"] = (ch,)
        prev = ch
    d = pc.out_channels
    for k, ch in enumerate(pc.backbone_channels):
        sp[f"td.lateral{k}.w"] = (d, ch, 1, 1)
        sp[f"td.lateral{k}.b"] = (d,)
    for k in range(pc.num_levels - 1):
        sp[f"td.smooth{k}.w"] = (d, d, 3, 3)
        sp[f"td.smooth{k}.b"] = (d,)
    a = len(cfg.rpn.aspect_ratios)
    sp["rpn.conv.w"] = (d, d, 3, 3)
    sp["rpn.conv.b"] = (d,)
    sp["rpn.obj.w"] = (a, d, 1, 1)
    sp["rpn.obj.b"] = (a,)
    sp["rpn.delta.w"] = (4 * a, d, 1, 1)
    sp["rpn.delta.b"] = (4 * a,)
    for i in range(1, cfg.num_stages + 1):
        _head_specs(sp, f"det{i}", cfg)
    if cfg.with_masks:
        _mask_specs(sp, "mask", cfg)
    if cfg.ds_enabled:
        for k, ch in enumerate(pc.backbone_channels):
            sp[f"aux.lateral{k}.w"] = (d, ch, 1, 1)
            sp[f"aux.lateral{k}.b"] = (d,)
        _head_specs(sp, "aux.det", cfg)
        if cfg.with_masks:
            _mask_specs(sp, "aux.mask", cfg)
    return sp


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """He-normal convs, N(0, 0.01) linears, zero biases.

    Each parameter is drawn from a stream keyed by (seed, crc32(name)), so
    adding or removing unrelated parameters (e.g. the aux heads) never
    perturbs the others' initial values.
    """
    params = {}
    for name, shape in param_specs(cfg).items():
        r = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif len(shape) == 4:
            std = np.sqrt(2.0 / np.prod(shape[1:]))
            data = r.normal(0.0, std, shape)
        else:
            data = r.normal(0.0, 0.01, shape)
        params[name] = tensor(data.astype(dtype), dtype=dtype, requires_grad=True)
    return params


def strip_aux_heads(params: dict, cfg: ModelConfig) -> dict:
    """Drop aux-head and aux-lateral parameters; validates every name.

    The result's inventory equals the same config with ds_enabled off.
    """
    known = set(param_specs(replace(cfg, ds_enabled=True)))
    known |= set(param_specs(replace(cfg, ds_enabled=False)))
    unknown = [k for k in params if k not in known]
    if unknown:
        raise KeyError(f"unknown parameters: {unknown}")
    return {k: v for k, v in params.items() if not k.startswith("aux.")}


# --- the model ---------------------------------------------------------------

class DetectionModel:
    def __init__(self, cfg: ModelConfig, params: dict = None, dtype=np.float64, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.params = params if params is not None else init_params(cfg, seed=seed, dtype=dtype)

    # -- weight bundles

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _stage_weights(self):
        return [(self._p(f"backbone.s{k}.down.w"), self._p(f"backbone.s{k}.down.b"),
                 self._p(f"backbone.s{k}.same.w"), self._p(f"backbone.s{k}.same.b"))
                for k in range(self.cfg.pyramid.num_levels)]

    def _td_weights(self):
        m = self.cfg.pyramid.num_levels
        lat = [(self._p(f"td.lateral{k}.w"), self._p(f"td.lateral{k}.b")) for k in range(m)]
        smooth = [(self._p(f"td.smooth{k}.w"), self._p(f"td.smooth{k}.b")) for k in range(m - 1)]
        return lat, smooth

    def _rpn_weights(self):
        return tuple(self._p(f"rpn.{n}.{s}") for n in ("conv", "obj", "delta") for s in ("w", "b"))

    def _det_weights(self, prefix: str):
        if self.cfg.dc_enabled:
            names = ("cls_fc1", "cls_fc2", "cls", "reg_fc1", "reg_fc2", "reg")
        else:
            names = ("fc1", "fc2", "cls", "reg")
        return tuple(self._p(f"{prefix}.{n}.{s}") for n in names for s in ("w", "b"))

    def _mask_weights(self, prefix: str):
        return tuple(self._p(f"{prefix}.{n}.{s}") for n in ("conv1", "conv2", "out") for s in ("w", "b"))

    def _aux_maps(self, bottom_up):
        return [ops.conv2d(bu, self._p(f"aux.lateral{k}.w"), self._p(f"aux.lateral{k}.b"),
                           stride=1, pad=0)
                for k, bu in enumerate(bottom_up)]

    # -- shared pieces

    def _image_tensor(self, image) -> Tensor:
        if isinstance(image, Tensor):
            t = image
        else:
            t = tensor(np.asarray(image), dtype=self.dtype)
        if t.data.ndim == 3:
            t = ops.reshape(t, (1,) + t.shape) if t.requires_grad else tensor(
                t.data.reshape((1,) + t.shape), dtype=self.dtype)
        return t

    def _pyramids(self, image):
        bu = pyramid.build_bottom_up(self._image_tensor(image), self._stage_weights())
        td = pyramid.build_top_down(bu, *self._td_weights())
        return bu, td

    def _pool(self, maps, boxes_arr: np.ndarray):
        """RoIAlign boxes from their assigned levels.

        Returns (pooled (n,C,h,w) in level-grouped order, the grouping order).
        """
        pc = self.cfg.pyramid
        lv = pyramid.assign_levels(boxes_arr, pc)
        order = np.argsort(lv, kind="stable")
        parts = []
        for k in range(pc.num_levels):
            sel = order[lv[order] == k]
            if sel.size:
                parts.append(roi_align_many(maps[k], boxes_arr[sel], pc.level_strides[k], self.cfg.roi))
        if not parts:
            raise SkipStep("no boxes to pool")
        return (parts[0] if len(parts) == 1 else ops.concat_rows(parts)), order

    def _head_det(self, pooled, prefix):
        return heads.detection_forward(pooled, self._det_weights(prefix), self.cfg.head_mode)

    def _mask_out(self, maps, boxes_arr, fg_rows, cls_targets, targets, prefix) -> MaskOutput:
        fg_boxes = boxes_arr[fg_rows]
        if fg_rows.size:
            pooled, order = self._pool(maps, fg_boxes)
        else:
            c = self.cfg.pyramid.out_channels
            pooled = tensor(np.zeros((0, c) + tuple(self.cfg.roi.output_size)), dtype=self.dtype)
            order = np.zeros(0, dtype=np.int64)
        logits = heads.mask_forward(pooled, self._mask_weights(prefix))
        chan = (cls_targets[fg_rows][order] - 1).astype(np.int64)
        return MaskOutput(logits=logits, targets=targets[order],
                          class_channels=chan, boxes=fg_boxes[order])

    # -- training forward

    def forward_train(self, image, gt, rng, *, plan: dict = None,
                      roi_batch: int = 32, fg_fraction: float = 0.25,
                      rpn_batch: int = 64, rpn_fg_fraction: float = 0.5) -> TrainOutputs:
        cfg = self.cfg
        record = plan is None
        if record:
            plan = {}
        gt_boxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)
        gt_labels = np.asarray(gt.labels, dtype=np.int64)
        if len(gt_boxes) == 0:
            raise ValueError("forward_train requires non-empty ground truth")
        mask_hw = (2 * cfg.roi.output_size[0], 2 * cfg.roi.output_size[1])

        bu, td = self._pyramids(image)
        rpn_logits, rpn_deltas = rpn.rpn_forward(td, self._rpn_weights())
        anchors = np.concatenate(rpn.generate_anchors(cfg.pyramid, cfg.rpn, cfg.image_size))

        if record:
            a_labels, a_matched = rpn.label_anchors(anchors, gt_boxes,
                                                    cfg.rpn.pos_iou, cfg.rpn.neg_iou)
            sample = training.sample_rois(a_labels, rpn_batch, rpn_fg_fraction, rng)
            pos = sample[a_labels[sample] == 1]
            rpn_reg_t = (B.encode(anchors[pos], gt_boxes[a_matched[pos]])
                         if pos.size else np.zeros((0, 4)))
            plan["rpn"] = (sample, a_labels[sample].astype(np.float64), pos, rpn_reg_t)
            props = rpn.select_proposals(anchors, rpn_logits.data, rpn_deltas.data,
                                         cfg.rpn, cfg.image_size)
            b0 = rpn.proposal_boxes(props)
            if cfg.train_append_gt:
                b0 = np.vstack([b0, gt_boxes]) if len(b0) else gt_boxes.copy()
            plan["b0"] = b0
        sample, sample_labels, pos, rpn_reg_t = plan["rpn"]
        rpn_out = RpnOutput(rpn_logits, rpn_deltas, sample, sample_labels, pos, rpn_reg_t)

        thresholds = ([cfg.match_iou] if cfg.num_stages == 1
                      else list(cfg.cascade_iou_thresholds[:cfg.num_stages]))
        stages = []
        boxes_in = plan.get("b0")
        for i in range(1, cfg.num_stages + 1):
            key = f"stage{i}"
            if record:
                matched, _ = training.match_proposals(boxes_in, gt_boxes, thresholds[i - 1])
                if i == 1:
                    sel = training.sample_rois(np.where(matched >= 0, 1, 0),
                                               roi_batch, fg_fraction, rng)
                    if sel.size == 0:
                        raise SkipStep("no rois sampled")
                    sboxes, smatched = boxes_in[sel], matched[sel]
                else:
                    sboxes, smatched = boxes_in, matched
                lv = pyramid.assign_levels(sboxes, cfg.pyramid)
                order = np.argsort(lv, kind="stable")
                sboxes, smatched = sboxes[order], smatched[order]
                cls_t, fg, reg_t, _ = training.build_targets(sboxes, smatched, gt, False)
                plan[key] = (sboxes, smatched, cls_t, fg, reg_t)
            sboxes, smatched, cls_t, fg, reg_t = plan[key]
            pooled, _ = self._pool(td, sboxes)
            cls_logits, reg_deltas = self._head_det(pooled, f"det{i}")
            stages.append(StageOutput(sboxes, cls_logits, reg_deltas, cls_t, smatched, fg, reg_t))
            if i < cfg.num_stages and record:
                boxes_in = self._refine(sboxes, reg_deltas.data)

        mask_out = aux_out = aux_mask_out = None
        if cfg.with_masks:
            ms = stages[-1]      # stage 1 (two-stage) or stage 3 (cascade)
            if record:
                plan["mask"] = self._mask_targets(ms, gt, mask_hw)
            mask_out = self._mask_out(td, ms.boxes, ms.fg_rows, ms.cls_targets,
                                      plan["mask"], "mask")

        if cfg.ds_enabled:
            src = cfg.aux_box_source
            if record:
                if src == 0:
                    plan["aux"] = plan["stage1"]
                else:
                    aboxes = stages[src].boxes
                    amatched, _ = training.match_proposals(aboxes, gt_boxes, cfg.aux_match_iou)
                    acls, afg, areg, _ = training.build_targets(aboxes, amatched, gt, False)
                    plan["aux"] = (aboxes, amatched, acls, afg, areg)
            aboxes, amatched, acls, afg, areg = plan["aux"]
            aux_maps = self._aux_maps(bu)
            apooled, _ = self._pool(aux_maps, aboxes)
            a_cls_logits, a_reg = self._head_det(apooled, "aux.det")
            aux_out = StageOutput(aboxes, a_cls_logits, a_reg, acls, amatched, afg, areg)
            if cfg.with_masks:
                if record:
                    plan["aux_mask"] = self._mask_targets(aux_out, gt, mask_hw)
                aux_mask_out = self._mask_out(aux_maps, aboxes, afg, acls,
                                              plan["aux_mask"], "aux.mask")

        return TrainOutputs(stages=stages, rpn=rpn_out, aux=aux_out,
                            mask=mask_out, aux_mask=aux_mask_out, plan=plan)

    def _mask_targets(self, stage: StageOutput, gt, mask_hw) -> np.ndarray:
        if getattr(gt, "masks", None) is None:
            raise ValueError("with_masks requires gt masks")
        fg = stage.fg_rows
        if not fg.size:
            return np.zeros((0,) + tuple(mask_hw))
        return np.stack([training.crop_resize_mask(gt.masks[stage.matched[j]],
                                                   stage.boxes[j], mask_hw) for j in fg])

    def _refine(self, boxes_arr: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        out = B.decode(boxes_arr, np.asarray(deltas, dtype=np.float64),
                       image_size=self.cfg.image_size)
        bad = (out[:, 2] <= out[:, 0]) | (out[:, 3] <= out[:, 1])
        if bad.any():
            out[bad] = boxes_arr[bad]
        return out

    # -- losses

    def compute_loss(self, outputs: TrainOutputs) -> LossReport:
        if self.cfg.num_stages == 1:
            return compute_loss_two_stage(outputs, self.cfg, self.dtype)
        return compute_loss_multi_stage(outputs, self.cfg, self.dtype)

    # -- inference

    def forward_infer(self, image) -> list:
        cfg = self.cfg
        bu, td = self._pyramids(image)
        rpn_logits, rpn_deltas = rpn.rpn_forward(td, self._rpn_weights())
        anchors = np.concatenate(rpn.generate_anchors(cfg.pyramid, cfg.rpn, cfg.image_size))
        props = rpn.select_proposals(anchors, rpn_logits.data, rpn_deltas.data,
                                     cfg.rpn, cfg.image_size)
        if not props:
            return []
        boxes_cur = rpn.proposal_boxes(props)
        cls_logits = None
        for i in range(1, cfg.num_stages + 1):
            pooled, order = self._pool(td, boxes_cur)
            boxes_cur = boxes_cur[order]
            cls_logits, reg_deltas = self._head_det(pooled, f"det{i}")
            final_boxes = self._refine(boxes_cur, reg_deltas.data)
            if i < cfg.num_stages:
                boxes_cur = final_boxes
        scores = _softmax(cls_logits.data)
        dets: list = []
        for c in range(1, cfg.num_classes + 1):
            sc = scores[:, c]
            sel = np.flatnonzero(sc > cfg.score_thresh)
            if not sel.size:
                continue
            keep = B.nms(final_boxes[sel], sc[sel], cfg.infer_nms)
            dets.extend(Detection(box=final_boxes[sel[k]].copy(), label=c, score=float(sc[sel[k]]))
                        for k in keep)
        dets.sort(key=lambda d: -d.score)
        dets = dets[: cfg.max_dets]
        if cfg.with_masks and dets:
            dbox = np.stack([d.box for d in dets])
            pooled, order = self._pool(td, dbox)
            mask_logits = heads.mask_forward(pooled, self._mask_weights("mask")).data
            for j, row in enumerate(order):
                prob = _sigmoid(mask_logits[j, dets[row].label - 1])
                dets[row].mask = _paste_mask(prob, dets[row].box, cfg.image_size)
        return dets


def select_aux_box_source(stage_outputs: list, cfg: ModelConfig) -> np.ndarray:
    """Boxes feeding the aux heads: RPN sample (0) or stage-refined (1/2).

    Coordinates are plain arrays, already detached from the tape.
    """
    src = cfg.aux_box_source
    if src >= len(stage_outputs):
        raise ValueError(f"aux_box_source {src} needs {src + 1} computed stages, "
                         f"have {len(stage_outputs)}")
    return stage_outputs[src].boxes


# --- loss assembly -----------------------------------------------------------

def _rows(t: Tensor, rows: np.ndarray, width: int) -> Tensor:
    idx = rows[:, None] * width + np.arange(width)[None, :]
    return ops.take_flat(t, idx)


def _det_terms(stage: StageOutput, dtype) -> tuple:
    cls = ops.softmax_cross_entropy(stage.cls_logits, stage.cls_targets)
    pred = _rows(stage.reg_deltas, stage.fg_rows, 4)
    reg = ops.smooth_l1(pred, tensor(stage.reg_targets, dtype=dtype))
    return cls, reg


def _mask_term(m: MaskOutput, dtype) -> Tensor:
    n, k, h, w = m.logits.shape
    area = h * w
    row = np.arange(n) * (k * area)
    idx = (row + m.class_channels * area)[:, None] + np.arange(area)[None, :]
    picked = ops.take_flat(m.logits, idx)
    return ops.binary_cross_entropy_with_logits(
        picked, tensor(m.targets.reshape(n, area), dtype=dtype))


def _rpn_terms(r: RpnOutput, dtype) -> tuple:
    cls = ops.binary_cross_entropy_with_logits(
        ops.take_flat(r.logits, r.sample_idx), tensor(r.sample_labels, dtype=dtype))
    reg = ops.smooth_l1(_rows(r.deltas, r.pos_idx, 4), tensor(r.reg_targets, dtype=dtype))
    return cls, reg


def _assemble(pieces: list) -> LossReport:
    """pieces: (name, weight, scalar Tensor). Zero-weight terms are reported
    but excluded from the total's graph."""
    terms = {name: float(t.data) for name, _, t in pieces}
    weights = {name: float(w) for name, w, _ in pieces}
    total_t = None
    for name, w, t in pieces:
        if w == 0:
            continue
        wt = ops.scale(t, w)
        total_t = wt if total_t is None else ops.add(total_t, wt)
    if total_t is None:
        total_t = tensor(np.asarray(0.0))
    return LossReport(total=float(total_t.data), terms=terms, weights=weights,
                      total_tensor=total_t)


def compute_loss_two_stage(outputs: TrainOutputs, cfg: ModelConfig, dtype=np.float64) -> LossReport:
    if cfg.num_stages != 1:
        raise ValueError("two-stage loss requires num_stages == 1")
    pieces = []
    rc, rr = _rpn_terms(outputs.rpn, dtype)
    pieces += [("rpn_cls", cfg.rpn_loss_weight, rc), ("rpn_reg", cfg.rpn_loss_weight, rr)]
    if outputs.aux is not None:
        c0, r0 = _det_terms(outputs.aux, dtype)
        pieces += [("det0_cls", cfg.alpha1, c0), ("det0_reg", cfg.alpha1, r0)]
    c1, r1 = _det_terms(outputs.stages[0], dtype)
    pieces += [("det1_cls", cfg.alpha2, c1), ("det1_reg", cfg.alpha2, r1)]
    if outputs.aux_mask is not None:
        pieces.append(("mask0", cfg.alpha3, _mask_term(outputs.aux_mask, dtype)))
    if outputs.mask is not None:
        pieces.append(("mask1", cfg.alpha4, _mask_term(outputs.mask, dtype)))
    return _assemble(pieces)


def compute_loss_multi_stage(outputs: TrainOutputs, cfg: ModelConfig, dtype=np.float64) -> LossReport:
    if cfg.num_stages != 3:
        raise ValueError("multi-stage loss requires num_stages == 3")
    pieces = []
    rc, rr = _rpn_terms(outputs.rpn, dtype)
    pieces += [("rpn_cls", cfg.rpn_loss_weight, rc), ("rpn_reg", cfg.rpn_loss_weight, rr)]
    if outputs.aux is not None:
        c0, r0 = _det_terms(outputs.aux, dtype)
        pieces += [("det0_cls", cfg.alpha1, c0), ("det0_reg", cfg.alpha1, r0)]
    if outputs.aux_mask is not None:
        pieces.append(("mask0", cfg.alpha2, _mask_term(outputs.aux_mask, dtype)))
    if outputs.mask is not None:
        pieces.append(("mask3", cfg.alpha3, _mask_term(outputs.mask, dtype)))
    for i, st in enumerate(outputs.stages, start=1):
        ci, ri = _det_terms(st, dtype)
        w = cfg.alpha_stages[i - 1]
        pieces += [(f"det{i}_cls", w, ci), (f"det{i}_reg", w, ri)]
    return _assemble(pieces)


# --- inference helpers -------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _paste_mask(prob: np.ndarray, box, image_size) -> np.ndarray:
    """Resample a box-local probability map onto the image grid, >= 0.5."""
    iw, ih = image_size
    mh, mw = prob.shape
    x1, y1, x2, y2 = box
    out = np.zeros((ih, iw), dtype=bool)
    px0, px1 = int(np.floor(x1)), int(min(np.ceil(x2), iw))
    py0, py1 = int(np.floor(y1)), int(min(np.ceil(y2), ih))
    px0, py0 = max(px0, 0), max(py0, 0)
    if px1 <= px0 or py1 <= py0:
        return out
    xs = (np.arange(px0, px1) + 0.5 - x1) / (x2 - x1) * mw
    ys = (np.arange(py0, py1) + 0.5 - y1) / (y2 - y1) * mh

    def axis(p, size):
        q = np.clip(p - 0.5, 0.0, size - 1.0)
        i0 = np.minimum(np.floor(q).astype(np.int64), max(size - 2, 0))
        return i0, np.minimum(i0 + 1, size - 1), q - i0

    y0, y1i, wy = axis(ys, mh)
    x0, x1i, wx = axis(xs, mw)
    v = ((1 - wy)[:, None] * (1 - wx)[None, :] * prob[np.ix_(y0, x0)]
         + (1 - wy)[:, None] * wx[None, :] * prob[np.ix_(y0, x1i)]
         + wy[:, None] * (1 - wx)[None, :] * prob[np.ix_(y1i, x0)]
         + wy[:, None] * wx[None, :] * prob[np.ix_(y1i, x1i)])
    out[py0:py1, px0:px1] = v >= 0.5
    return out


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"DFPNCKPT"


def save_checkpoint(path, model: DetectionModel) -> None:
    """Single file: magic, u32 manifest length, JSON manifest, tensor blobs.

    The manifest maps each parameter name to shape/dtype/byte offset within
    the blob region and embeds the model config.
    """
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(model.params):
        t = model.params[name]
        blob = tensor_to_bytes(t)
        entries[name] = {"shape": list(t.shape), "dtype": t.data.dtype.name, "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"params": entries, "config": model.cfg.to_dict()},
                          sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> DetectionModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    manifest = json.loads(raw[12:12 + mlen].decode())
    base = 12 + mlen
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    dtype = np.float64
    for name, ent in manifest["params"].items():
        dt = np.dtype(ent["dtype"])
        t = tensor_from_bytes(raw[base + ent["offset"]:], dtype=dt)
        if list(t.shape) != ent["shape"]:
            raise ValueError(f"{name}: shape {t.shape} != manifest {ent['shape']}")
        t.requires_grad = True
        params[name] = t
        dtype = dt.type
    return DetectionModel(cfg, params=params, dtype=dtype)
