"""Minimal dense tensor values: float32 and width-tagged signed integers.

Everything is flat row-major numpy underneath. Tensors are immutable
values; operations return new tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Shape = tuple[int, ...]


def check_shape(shape: Shape) -> Shape:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}: all extents must be >= 1")
    return shape


def element_count(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def int_range(width: int) -> tuple[int, int]:
    """Inclusive [min, max] of a signed `width`-bit two's-complement value."""
    if width not in (8, 32):
        raise ValueError(f"unsupported logical width {width} (expected 8 or 32)")
    return -(1 << (width - 1)), (1 << (width - 1)) - 1


@dataclass(frozen=True)
class FloatTensor:
    """Row-major float32 tensor; all values finite by construction."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        check_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("FloatTensor requires finite values (found NaN/Inf)")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def reshape(self, shape: Shape) -> "FloatTensor":
        shape = check_shape(shape)
        if element_count(shape) != self.size:
            raise ValueError(f"cannot reshape {self.shape} ({self.size} elements) to {shape}")
        return FloatTensor(self.data.reshape(shape))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class IntTensor:
    """Signed integers stored wide (int64) and tagged with a logical width.

    Range enforcement is a checked invariant: every value must fit the
    logical width's two's-complement range.
    """

    data: np.ndarray = field(repr=False)
    logical_width: int = 8

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.int64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        check_shape(arr.shape)
        lo, hi = int_range(self.logical_width)
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValueError(
                f"IntTensor values out of {self.logical_width}-bit range [{lo}, {hi}]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


def elementwise_add(a: FloatTensor, b: FloatTensor) -> FloatTensor:
    """a + b, where b is either shape-equal or a per-channel bias vector.

    The bias form accepts b of shape (C,) against a of shape (N, C, ...)
    and broadcasts along the channel axis only.
    """
    if a.shape == b.shape:
        return FloatTensor(a.data + b.data)
    if len(b.shape) == 1 and len(a.shape) >= 2 and b.shape[0] == a.shape[1]:
        view = b.data.reshape((1, b.shape[0]) + (1,) * (len(a.shape) - 2))
        return FloatTensor(a.data + view)
    raise ValueError(f"shape mismatch in elementwise_add: {a.shape} vs {b.shape}")


def argmax_last_axis(x: FloatTensor) -> list[int]:
    """Index of the maximum along the last axis, per row; ties -> lowest index."""
    if x.size == 0:
        raise ValueError("argmax_last_axis on empty tensor")
    flat_rows = x.data.reshape(-1, x.shape[-1])
    return [int(i) for i in np.argmax(flat_rows, axis=1)]
