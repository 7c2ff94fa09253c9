"""Symmetric fake quantization with range observers.

Quantize maps float32 to signed integers through a positive scale s:

    q = clamp(round_half_to_even(x / s), -2^(b-1), 2^(b-1) - 1)

and dequantize maps back as s * q. Rounding ties go to even to avoid bias
in accumulated statistics. Arithmetic runs in float64 internally so that
grid points round-trip exactly; results are cast back to float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import FloatTensor, IntTensor, int_range


@dataclass(frozen=True)
class QuantParams:
    scale: float  # stored at float32 precision, per the 32-bit scale contract
    bit_width: int

    def __post_init__(self):
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.bit_width not in (8, 32):
            raise ValueError(f"bit_width must be 8 or 32, got {self.bit_width}")
        object.__setattr__(self, "scale", float(np.float32(self.scale)))


@dataclass(frozen=True)
class QuantizedTensor:
    ints: IntTensor
    params: QuantParams

    def __post_init__(self):
        if self.ints.logical_width != self.params.bit_width:
            raise ValueError(
                f"width mismatch: ints are {self.ints.logical_width}-bit, "
                f"params say {self.params.bit_width}-bit"
            )


class RangeObserver:
    """EMA of the absolute maximum, used to calibrate scale factors.

    The first observation sets the value directly; later ones blend with
    momentum. Once frozen (for evaluation) the state is immutable.
    """

    def __init__(self, momentum: float = 0.01):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.ema_absmax = 0.0
        self.frozen = False

    def observe(self, x: FloatTensor | np.ndarray) -> None:
        data = x.data if isinstance(x, FloatTensor) else x
        self.observe_absmax(float(np.max(np.abs(data))))

    def observe_absmax(self, absmax: float) -> None:
        if self.frozen:
            raise RuntimeError("cannot observe through a frozen RangeObserver")
        if self.ema_absmax == 0.0:
            self.ema_absmax = absmax
        else:
            self.ema_absmax = (1.0 - self.momentum) * self.ema_absmax + self.momentum * absmax

    def recalibrate(self, absmax: float) -> None:
        """Directly set the tracked absmax (weight observers: current |W| max)."""
        if self.frozen:
            raise RuntimeError("cannot recalibrate a frozen RangeObserver")
        self.ema_absmax = float(absmax)

    def freeze(self) -> None:
        self.frozen = True


def scale_from_observer(o: RangeObserver, bit_width: int) -> QuantParams:
    if o.ema_absmax <= 0.0:
        raise ValueError("observer has zero range; nothing observed yet")
    qmax = (1 << (bit_width - 1)) - 1
    return QuantParams(scale=o.ema_absmax / qmax, bit_width=bit_width)


def derived_accumulator_params(pi: QuantParams, pw: QuantParams) -> QuantParams:
    """Scale for the 32-bit bias/accumulator grid: s_i * s_w.

    Integer bias addition is then exact on the accumulator grid.
    """
    return QuantParams(scale=pi.scale * pw.scale, bit_width=32)


def _grid_values(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Rounded-and-clamped integer grid values as float64 (exact below 2^53)."""
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = int_range(p.bit_width)
    g = np.true_divide(x, p.scale, dtype=np.float64)
    np.rint(g, out=g)
    np.clip(g, lo, hi, out=g)
    return g


def quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Array-level quantize; returns int64 values within the b-bit range."""
    return _grid_values(x, p).astype(np.int64)


def dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return np.multiply(q, p.scale, dtype=np.float64).astype(np.float32)


def fake_quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Fused quantize-then-dequantize; bit-exact to the two-step path."""
    g = _grid_values(x, p)
    np.multiply(g, p.scale, out=g)
    return g.astype(np.float32)


def quantize(x: FloatTensor, p: QuantParams) -> QuantizedTensor:
    return QuantizedTensor(
        ints=IntTensor(quantize_array(x.data, p), logical_width=p.bit_width),
        params=p,
    )


def dequantize(q: QuantizedTensor) -> FloatTensor:
    return FloatTensor(dequantize_array(q.ints.data, q.params))


def fake_quantize(x: FloatTensor, p: QuantParams) -> FloatTensor:
    return dequantize(quantize(x, p))
