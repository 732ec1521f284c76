"""Per-box prediction heads, shared across pyramid levels.

Detection heads come in two structures over the pooled feature f:
coupled (one hidden trunk feeding sibling cls/reg outputs) and decoupled
(independent two-layer towers per task, so cls gradients can never touch the
regression trunk and vice versa).  The mask head is a small conv stack with a
2x upsample, emitting one logit map per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class HeadConfig:
    mode: str = "decoupled"          # "coupled" | "decoupled"
    hidden_width: int = 128
    num_classes: int = 3             # foreground classes; cls output is K+1

    def __post_init__(self):
        if self.mode not in ("coupled", "decoupled"):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.hidden_width < 1 or self.num_classes < 1:
            raise ValueError("hidden_width and num_classes must be positive")


def _flatten(pooled: Tensor) -> Tensor:
    n = pooled.shape[0]
    return ops.reshape(pooled, (n, int(np.prod(pooled.shape[1:]))))


def _tower(x: Tensor, w1, b1, w2, b2) -> Tensor:
    h = ops.relu(ops.linear(x, w1, b1))
    return ops.relu(ops.linear(h, w2, b2))


def coupled_forward(pooled: Tensor, weights) -> tuple:
    """Shared trunk then sibling outputs; returns (cls_logits, reg_deltas).

    ``weights = (w1, b1, w2, b2, wc, bc, wr, br)``.
    """
    w1, b1, w2, b2, wc, bc, wr, br = weights
    h = _tower(_flatten(pooled), w1, b1, w2, b2)
    return ops.linear(h, wc, bc), ops.linear(h, wr, br)


def decoupled_forward(pooled: Tensor, weights) -> tuple:
    """Independent cls/reg towers; returns (cls_logits, reg_deltas).

    ``weights = (wc1, bc1, wc2, bc2, wc, bc, wr1, br1, wr2, br2, wr, br)``.
    The two towers share no parameters below the pooled feature.
    """
    wc1, bc1, wc2, bc2, wc, bc, wr1, br1, wr2, br2, wr, br = weights
    f = _flatten(pooled)
    cls = ops.linear(_tower(f, wc1, bc1, wc2, bc2), wc, bc)
    reg = ops.linear(_tower(f, wr1, br1, wr2, br2), wr, br)
    return cls, reg


def detection_forward(pooled: Tensor, weights, mode: str) -> tuple:
    if mode == "coupled":
        return coupled_forward(pooled, weights)
    if mode == "decoupled":
        return decoupled_forward(pooled, weights)
    raise ValueError(f"unknown head mode {mode!r}")


def mask_forward(pooled: Tensor, weights) -> Tensor:
    """Per-class mask logits at twice the pooled resolution: (n, K, 2h, 2w).

    ``weights = (w1, b1, w2, b2, wo, bo)``: two 3x3 convs, 2x nearest
    upsample, 1x1 projection to K channels.
    """
    w1, b1, w2, b2, wo, bo = weights
    h = ops.relu(ops.conv2d(pooled, w1, b1, stride=1, pad=1))
    h = ops.relu(ops.conv2d(h, w2, b2, stride=1, pad=1))
    h = ops.nearest_upsample2x(h)
    return ops.conv2d(h, wo, bo, stride=1, pad=0)
