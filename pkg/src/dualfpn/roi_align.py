"""Fixed-size pooled features per box via averaged bilinear sampling.

Feature values live at pixel centers ``(ix + 0.5, iy + 0.5)``; sample points
outside the center lattice clamp to the border (no zero padding).  Gradients
flow to the feature map only; box coordinates are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, record


@dataclass(frozen=True)
class RoiConfig:
    output_size: tuple = (4, 4)
    sampling_ratio: int = 2

    def __post_init__(self):
        if min(self.output_size) < 1 or self.sampling_ratio < 1:
            raise ValueError("output_size and sampling_ratio must be positive")


def _axis_samples(lo, hi, n_bins, ratio, size):
    """Per-box 1-d sample positions and bilinear index/weight pairs.

    Returns (i0, i1, w1) each shaped (N, n_bins*ratio): value at a sample is
    (1-w1)*f[i0] + w1*f[i1].
    """
    step = (hi - lo) / n_bins
    bin_ix = np.repeat(np.arange(n_bins), ratio)
    off = np.tile((np.arange(ratio) + 0.5) / ratio, n_bins)
    p = lo[:, None] + (bin_ix + off)[None, :] * step[:, None]
    q = np.clip(p - 0.5, 0.0, size - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.int64), max(size - 2, 0))
    w1 = q - i0
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, w1


def roi_align_many(feature: Tensor, boxes: np.ndarray, stride: int, cfg: RoiConfig) -> Tensor:
    """Pool every box from one feature map; output (N, C, h, w).

    ``feature`` is 1xCxHxW; ``boxes`` are image-coordinate rows scaled into
    feature coordinates by 1/stride.
    """
    if feature.data.ndim != 4 or feature.shape[0] != 1:
        raise ValueError(f"roi_align: feature must be 1xCxHxW, got {feature.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])):
        raise ValueError("roi_align: degenerate box")
    _, c, hh, ww = feature.shape
    oh, ow = cfg.output_size
    r = cfg.sampling_ratio
    n = boxes.shape[0]
    scale = 1.0 / stride

    fy0, fy1, wy = _axis_samples(boxes[:, 1] * scale, boxes[:, 3] * scale, oh, r, hh)
    fx0, fx1, wx = _axis_samples(boxes[:, 0] * scale, boxes[:, 2] * scale, ow, r, ww)

    flat = feature.data.reshape(c, hh * ww)
    ns = n * oh * r * ow * r
    # corner indices/weights into the flattened HxW plane, shape (4, N, oh*r, ow*r)
    iy = np.stack([fy0, fy0, fy1, fy1])[:, :, :, None]
    ix = np.stack([fx0, fx1, fx0, fx1])[:, :, None, :]
    cw = (np.stack([1 - wy, 1 - wy, wy, wy])[:, :, :, None]
          * np.stack([1 - wx, wx, 1 - wx, wx])[:, :, None, :])
    idx = (iy * ww + ix).reshape(4, ns)
    cwf = cw.reshape(4, ns)

    gathered = flat[:, idx.reshape(-1)].reshape(c, 4, ns)
    vals = (gathered * cwf[None]).sum(axis=1)  # (C, ns)
    out = (vals.reshape(c, n, oh, r, ow, r).mean(axis=(3, 5))
           .transpose(1, 0, 2, 3))

    def bw(g):  # g: (N, C, oh, ow)
        per = (g.transpose(1, 0, 2, 3)[:, :, :, None, :, None] / (r * r))
        per = np.broadcast_to(per, (c, n, oh, r, ow, r)).reshape(c, ns)
        gf = np.zeros((c, hh * ww), dtype=feature.dtype)
        for corner in range(4):
            w = per * cwf[corner]
            for ch in range(c):
                gf[ch] += np.bincount(idx[corner], weights=w[ch], minlength=hh * ww)
        return (gf.reshape(feature.shape),)

    return record("roi_align", (feature,), np.ascontiguousarray(out, dtype=feature.dtype), bw)


def roi_align(feature: Tensor, box, stride: int, cfg: RoiConfig) -> Tensor:
    """Pool a single box; output (C, h, w)."""
    pooled = roi_align_many(feature, np.asarray(box).reshape(1, 4), stride, cfg)
    c = feature.shape[1]
    return ops.reshape(pooled, (c,) + tuple(cfg.output_size))
