"""Differentiable operations on :class:`~dualfpn.tensor.Tensor`.

All ops are strict about shapes (no implicit broadcasting; use ``reshape`` /
``take_flat`` / ``concat_rows`` to rearrange data explicitly) and preserve the
input dtype.  Loss reductions are means; an empty reduction yields 0 so that
batches with no positive rows stay finite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", (x,), x.data * s, lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0
    return record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record("sum_all", (x,), out, lambda g: (np.full_like(x.data, g.reshape(())),))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def take_flat(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor at integer indices.

    Output has ``idx.shape``; backward scatter-adds (duplicate indices
    accumulate).  Gradients never flow through the index array.
    """
    idx = np.asarray(idx)
    flat = x.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError(f"take_flat: index out of range for size {flat.size}")

    def bw(g):
        buf = np.zeros(flat.size, dtype=x.dtype)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        return (buf.reshape(x.shape),)

    return record("take_flat", (x,), flat[idx].copy(), bw)


def concat_rows(tensors) -> Tensor:
    """Concatenate along axis 0; trailing dims must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_rows: empty input")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ValueError(f"concat_rows: trailing shape mismatch {t.shape} vs {tensors[0].shape}")
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))

    return record("concat_rows", tuple(tensors), out, bw)


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"nearest_upsample2x expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("nearest_upsample2x", (x,), out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: ``x @ w.T + b`` for x (N,F), w (G,F), b (G,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: incompatible shapes x{x.shape} w{w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return record("linear", (x, w, b), out, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIkk square kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input/weight, got {x.shape}/{w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2 or kh != kw:
        raise ValueError(f"conv2d: weight {w.shape} does not match input channels {c}")
    if b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride/pad {stride}/{pad}")
    k = kh
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {k} too large for padded input {h + 2 * pad}x{wd + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T + b.data).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, oh, ow, c, k, k)
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride] += \
                        gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb)

    return record("conv2d", (x, w, b), np.ascontiguousarray(out), bw)


# --- losses ------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax likelihood of integer class targets."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be (N,K), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: targets shape {targets.shape} != ({n},)")
    if n == 0:
        return record("softmax_cross_entropy", (logits,),
                      np.asarray(0.0, dtype=logits.dtype), lambda g: (np.zeros_like(logits.data),))
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"softmax_cross_entropy: target outside [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sez[:, 0])
    loss = np.asarray((lse - z[np.arange(n), targets]).mean(), dtype=logits.dtype)

    def bw(g):
        p = ez / sez
        p[np.arange(n), targets] -= 1.0
        return (p * (g.reshape(()) / n),)

    return record("softmax_cross_entropy", (logits,), loss, bw)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Huber penalty on pred-target: quadratic inside |d|<1, linear outside."""
    _check_same_shape(pred, target, "smooth_l1")
    d = pred.data - target.data
    if d.size == 0:
        z = np.asarray(0.0, dtype=pred.dtype)
        return record("smooth_l1", (pred, target), z,
                      lambda g: (np.zeros_like(pred.data), np.zeros_like(target.data)))
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    loss = np.asarray(per.mean(), dtype=pred.dtype)

    def bw(g):
        gp = np.clip(d, -1.0, 1.0) * (g.reshape(()) / d.size)
        return (gp, -gp)

    return record("smooth_l1", (pred, target), loss, bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean per-element sigmoid cross-entropy; targets must be exactly 0 or 1."""
    _check_same_shape(logits, targets, "binary_cross_entropy_with_logits")
    t = targets.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("binary_cross_entropy_with_logits: targets must be 0 or 1")
    z = logits.data
    if z.size == 0:
        zero = np.asarray(0.0, dtype=logits.dtype)
        return record("bce_with_logits", (logits, targets), zero,
                      lambda g: (np.zeros_like(z), None))
    # max(z,0) - z*t + log(1+exp(-|z|)) is exact and overflow-free
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(), dtype=logits.dtype)

    def bw(g):
        s = np.empty_like(z)
        posm = z >= 0
        s[posm] = 1.0 / (1.0 + np.exp(-z[posm]))
        ez = np.exp(z[~posm])
        s[~posm] = ez / (1.0 + ez)
        return ((s - t) * (g.reshape(()) / z.size), None)

    return record("bce_with_logits", (logits, targets), loss, bw)
