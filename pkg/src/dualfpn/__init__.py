"""Toy-scale pyramid detector with auxiliary bottom-up supervision.

Everything runs on a small numpy-backed reverse-mode autodiff core; see
:mod:`dualfpn.tensor` for the tape machinery and :mod:`dualfpn.model` for the
detector itself.
"""

from .tensor import Tensor, Tape, tensor, param

__all__ = ["Tensor", "Tape", "tensor", "param"]
__version__ = "0.1.0"
