"""Backbone feature pyramid and the top-down pathway over it.

The backbone is deliberately small: each stage is a stride-2 3x3 conv and a
stride-1 3x3 conv, both relu'd, doubling the stride per level.  The top-down
pathway mirrors the standard pyramid construction: a 1x1 lateral projection
per level, nearest-neighbour upsampling of the coarser map, and a 3x3 smoothing
conv after each merge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class PyramidConfig:
    num_levels: int = 4
    backbone_channels: tuple = (16, 32, 64, 128)
    out_channels: int = 32
    level_strides: tuple = (2, 4, 8, 16)
    assign_k0: int = 2
    assign_scale: float = 16.0

    def __post_init__(self):
        m = self.num_levels
        if len(self.level_strides) != m or len(self.backbone_channels) != m:
            raise ValueError("per-level field length must equal num_levels")
        for a, b in zip(self.level_strides, self.level_strides[1:]):
            if b != 2 * a:
                raise ValueError(f"strides must double: {self.level_strides}")


def build_bottom_up(image: Tensor, stage_weights) -> list:
    """Run the backbone; returns one map per level, fine to coarse.

    ``stage_weights`` is a list of ``(w_down, b_down, w_same, b_same)`` per
    stage.  Input H and W must be divisible by the largest stride.
    """
    n, c, h, w = image.shape
    max_stride = 2 ** len(stage_weights)
    if h % max_stride or w % max_stride:
        raise ValueError(f"input {h}x{w} not divisible by stride {max_stride}")
    maps = []
    x = image
    for wd, bd, ws, bs in stage_weights:
        x = ops.relu(ops.conv2d(x, wd, bd, stride=2, pad=1))
        x = ops.relu(ops.conv2d(x, ws, bs, stride=1, pad=1))
        maps.append(x)
    return maps


def build_top_down(bottom_up, lateral_weights, smooth_weights) -> list:
    """Merge the bottom-up maps into same-width top-down maps.

    Coarsest level is just its lateral projection; every finer level adds the
    2x-upsampled coarser output to its own lateral projection and smooths the
    sum with a 3x3 conv.  ``smooth_weights`` has one entry per non-coarsest
    level, indexed by level.
    """
    m = len(bottom_up)
    if len(lateral_weights) != m or len(smooth_weights) != m - 1:
        raise ValueError("need one lateral per level and one smoother per merge")
    td = [None] * m
    lw, lb = lateral_weights[m - 1]
    td[m - 1] = ops.conv2d(bottom_up[m - 1], lw, lb, stride=1, pad=0)
    for k in range(m - 2, -1, -1):
        lw, lb = lateral_weights[k]
        lat = ops.conv2d(bottom_up[k], lw, lb, stride=1, pad=0)
        merged = ops.add(lat, ops.nearest_upsample2x(td[k + 1]))
        sw, sb = smooth_weights[k]
        td[k] = ops.conv2d(merged, sw, sb, stride=1, pad=1)
    return td


def assign_level(box, cfg: PyramidConfig) -> int:
    """Pyramid level for one box, by sqrt-area relative to the reference scale."""
    return int(assign_levels(np.asarray(box, dtype=np.float64).reshape(1, 4), cfg)[0])


def assign_levels(boxes: np.ndarray, cfg: PyramidConfig) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    wh = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    if np.any(wh <= 0):
        raise ValueError("assign_level: zero-area box")
    k = cfg.assign_k0 + np.floor(np.log2(np.sqrt(wh) / cfg.assign_scale))
    return np.clip(k, 0, cfg.num_levels - 1).astype(np.int64)
