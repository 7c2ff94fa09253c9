"""Quantized DNN inference/training engine with bit-flip fault injection."""

from .faults import (
    BitBudget,
    FaultPlan,
    FaultSite,
    FaultTarget,
    apply_faults,
    count_vulnerable_bits,
    draw_fault_plan,
    fault_rate,
    flip_bit,
    stream,
)
from .layers import ModelGraph, QConv2d, QLinear, build_ccdf, model_backward, model_forward
from .quantize import (
    QuantParams,
    QuantizedTensor,
    RangeObserver,
    dequantize,
    derived_accumulator_params,
    fake_quantize,
    quantize,
    scale_from_observer,
)
from .tensor import FloatTensor, IntTensor, Shape, argmax_last_axis, elementwise_add
from .train import Checkpoint, TrainConfig, cross_entropy, evaluate, train

__all__ = [
    "BitBudget",
    "Checkpoint",
    "FaultPlan",
    "FaultSite",
    "FaultTarget",
    "FloatTensor",
    "IntTensor",
    "ModelGraph",
    "QConv2d",
    "QLinear",
    "QuantParams",
    "QuantizedTensor",
    "RangeObserver",
    "Shape",
    "TrainConfig",
    "apply_faults",
    "argmax_last_axis",
    "build_ccdf",
    "count_vulnerable_bits",
    "cross_entropy",
    "dequantize",
    "derived_accumulator_params",
    "draw_fault_plan",
    "elementwise_add",
    "evaluate",
    "fake_quantize",
    "fault_rate",
    "flip_bit",
    "model_backward",
    "model_forward",
    "quantize",
    "scale_from_observer",
    "stream",
    "train",
]
