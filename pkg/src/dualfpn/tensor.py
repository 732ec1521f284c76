"""Dense tensors with reverse-mode automatic differentiation on a linear tape.

Core ops live in :mod:`dualfpn.ops`.  A ``Tape`` records every op executed
while it is active; ``backward`` walks the tape once in reverse.  Ops executed
with no active tape run in plain numpy (inference mode) and build no graph.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    ``data`` is row-major and immutable by convention once produced by an op.
    ``grad`` accumulates additively across backward passes until zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensor dtype must be float32/float64, got {data.dtype}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None  # tape of the producing op; None for leaves

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from array-like data."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def param(data, dtype=np.float64) -> Tensor:
    """Build a trainable leaf tensor."""
    return tensor(data, dtype=dtype, requires_grad=True)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of executed ops, in execution (= topological) order."""

    _stack: list = []

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @staticmethod
    def current() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None

    def trace(self) -> list:
        """(op name, output shape) per recorded node, in execution order."""
        return [(n.op, n.output.shape) for n in self.nodes]


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Optional[Callable]) -> Tensor:
    """Wrap an op result, appending a node to the active tape if there is one."""
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = Tape.current()
    if tape is not None:
        out._tape = tape
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively both across multiple uses of a tensor
    within the graph and across repeated calls (zero grads between if that
    is not wanted).  Visits each tape node at most once, in reverse order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced on an active tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None or node.backward_fn is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            if t._tape is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += ig
            else:
                acc = pending.get(id(t))
                if acc is None:
                    pending[id(t)] = ig.copy()  # own the buffer; fns may return views
                else:
                    acc += ig


# --- serialization -----------------------------------------------------------
# Blob layout: little-endian u32 rank, u32 dims..., raw f32/f64 payload.

def tensor_to_bytes(t: Tensor) -> bytes:
    header = struct.pack("<I", len(t.shape)) + struct.pack(f"<{len(t.shape)}I", *t.shape)
    payload = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, dtype=np.float64) -> Tensor:
    (rank,) = struct.unpack_from("<I", buf, 0)
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    dt = np.dtype(dtype).newbyteorder("<")
    data = np.frombuffer(buf, dtype=dt, offset=4 + 4 * rank, count=int(np.prod(dims)) if rank else 1)
    return Tensor(data.reshape(dims).astype(np.dtype(dtype), copy=True))
