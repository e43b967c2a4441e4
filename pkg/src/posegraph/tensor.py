"""Dense (channels, height, width) tensors in double precision.

Everything in the package passes plain ``numpy.ndarray`` objects around; the
:class:`Tensor` wrapper exists for callers that want the shape and
immutability guarantees enforced at a boundary (file I/O, CLI output).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

Scalar = Union[int, float]


class TensorError(ValueError):
    pass


@dataclass(frozen=True)
class Tensor:
    """Immutable rank-3 array of float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise TensorError(f"expected rank 2 or 3 data, got rank {arr.ndim}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the data."""
        return self.data.copy()


def _raw(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None):
    """Apply ``op`` per element.

    ``add``, ``sub`` and ``mul`` take a tensor or scalar ``b``; tensor operands
    must have identical shapes. ``scale`` multiplies by the scalar ``b``.
    ``exp`` and ``log`` are unary and ignore ``b``.

    The result has the same type as ``a`` (``Tensor`` in, ``Tensor`` out).
    """
    x = _raw(a)
    if op in _BINARY:
        if b is None:
            raise TensorError(f"{op} needs a second operand")
        y = _raw(b)
        if y.ndim != 0 and y.shape != x.shape:
            raise TensorError(f"shape mismatch: {x.shape} vs {y.shape}")
        out = _BINARY[op](x, y)
    elif op == "scale":
        if b is None or np.ndim(b) != 0:
            raise TensorError("scale needs a scalar factor")
        out = x * float(b)
    elif op == "exp":
        out = np.exp(x)
    elif op == "log":
        if np.any(x <= 0):
            raise TensorError("log of non-positive element")
        out = np.log(x)
    else:
        raise TensorError(f"unknown op {op!r}")
    if isinstance(a, Tensor):
        return Tensor(out)
    return out


def argmax2d(t, channel: int = 0) -> tuple[int, int, float]:
    """Row/column of the largest value in ``channel``.

    Ties resolve to the first element in row-major order.
    """
    x = _raw(t)
    if x.ndim == 2:
        x = x[None]
    if x.size == 0:
        raise TensorError("argmax of empty tensor")
    if not 0 <= channel < x.shape[0]:
        raise TensorError(f"channel {channel} out of range for {x.shape[0]} channels")
    plane = x[channel]
    flat = int(np.argmax(plane))
    r, c = divmod(flat, plane.shape[1])
    return r, c, float(plane[r, c])
