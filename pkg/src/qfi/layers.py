"""Quantized conv/linear layers with five fault-injection sites each, plus
the float helper layers and the small MNIST CNN preset.

A quantized layer runs the pipeline

    x -> Q(i8) -> FI -> DQ ┐
    w -> Q(w8) -> FI -> DQ ┼-> operation (float) -> Q(o32) -> FI -> DQ
    b -> Q(b32)-> FI -> DQ ┘                        -> Q(o8) -> FI -> DQ -> out

where the bias and accumulator share the derived 32-bit scale s_i * s_w.
FI nodes flip bits of the integer representation between Q and DQ; sites
with no addressed targets pass through untouched. Backward uses the
straight-through estimator at every Q/DQ pair: the gradient passes where
the pre-quantization value was inside the clamp range and is zero outside;
bit flips act as additive constants and pass gradients through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .faults import EMPTY_PLAN, SITE_ORDER, FaultPlan, FaultSite, FaultTarget, flip_bits_array
from .quantize import (
    QuantParams,
    RangeObserver,
    dequantize_array,
    derived_accumulator_params,
    fake_quantize_array,
    quantize_array,
    scale_from_observer,
)
from .tensor import Shape


def _absmax(x: np.ndarray) -> float:
    return float(max(x.max(), -x.min()))


def _ste_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    lo = -(1 << (p.bit_width - 1)) * p.scale
    hi = ((1 << (p.bit_width - 1)) - 1) * p.scale
    return (x >= lo) & (x <= hi)


def _flip_site(q: np.ndarray, elems: np.ndarray, bits: np.ndarray, width: int) -> np.ndarray:
    """Flip (element, bit) pairs on a site tensor.

    Element indices address the flat tensor as used in this forward:
    per-sample layout for single-inference plans, batch-flat layout for
    training plans drawn over a batched population. Parameter tensors have
    no batch dimension either way.
    """
    flat = q.reshape(-1)
    if elems.size and int(elems.max()) >= flat.size:
        raise IndexError(
            f"fault element {int(elems.max())} out of range for site of {flat.size} elements"
        )
    return flip_bits_array(flat, elems, bits, width).reshape(q.shape)


@dataclass
class SiteFaults:
    """Per-layer fault routing: (element, bit) index arrays per site."""

    by_site: dict[FaultSite, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "SiteFaults":
        return cls()

    @classmethod
    def single(cls, target: FaultTarget) -> "SiteFaults":
        return cls(
            by_site={
                target.site: (
                    np.array([target.element_index], dtype=np.int64),
                    np.array([target.bit_index], dtype=np.int64),
                )
            }
        )

    def get(self, site: FaultSite) -> tuple[np.ndarray, np.ndarray] | None:
        return self.by_site.get(site)


class _QuantizedLayerBase:
    """Shared five-site pipeline; subclasses supply the float operation."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, observer_momentum: float = 0.01):
        self.weights = np.ascontiguousarray(weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(bias, dtype=np.float32)
        self.in_obs = RangeObserver(momentum=observer_momentum)
        self.w_obs = RangeObserver(momentum=observer_momentum)
        self.out_obs = RangeObserver(momentum=observer_momentum)
        self._wq_cache: np.ndarray | None = None
        self._bq_cache: np.ndarray | None = None

    quantized = True

    # -- subclass interface -------------------------------------------------
    def _op(self, x: np.ndarray, w: np.ndarray, trace: dict | None = None) -> np.ndarray:
        raise NotImplementedError

    def _op_backward(
        self, g: np.ndarray, w: np.ndarray, trace: dict
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def site_counts(self, in_shape: Shape) -> dict[FaultSite, int]:
        out = self.out_shape(in_shape)
        n_in = int(np.prod(in_shape))
        n_out = int(np.prod(out))
        return {
            FaultSite.I8: n_in,
            FaultSite.W8: self.weights.size,
            FaultSite.B32: self.bias.size,
            FaultSite.O32: n_out,
            FaultSite.O8: n_out,
        }

    # -- pipeline -----------------------------------------------------------
    def invalidate_caches(self) -> None:
        self._wq_cache = None
        self._bq_cache = None

    def observers(self) -> list[tuple[str, RangeObserver]]:
        return [("in", self.in_obs), ("w", self.w_obs), ("out", self.out_obs)]

    def freeze(self) -> None:
        if not self.w_obs.frozen:
            self.w_obs.recalibrate(_absmax(self.weights))
        for _, obs in self.observers():
            if not obs.frozen:
                obs.freeze()
        self.invalidate_caches()

    def _weight_params(self, train: bool) -> QuantParams:
        if train:
            self.w_obs.recalibrate(_absmax(self.weights))
        return scale_from_observer(self.w_obs, 8)

    def forward(
        self,
        x: np.ndarray,
        faults: SiteFaults,
        train: bool,
        trace: dict | None,
    ) -> np.ndarray:
        if train and not self.in_obs.frozen:
            self.in_obs.observe_absmax(_absmax(x))
        pi = scale_from_observer(self.in_obs, 8)
        pw = self._weight_params(train)
        pacc = derived_accumulator_params(pi, pw)

        # input site (the fused fake path is bit-exact to Q -> DQ, so it is
        # taken whenever no flip has to touch the integer form)
        t_i8 = faults.get(FaultSite.I8)
        if t_i8 is not None:
            qx = _flip_site(quantize_array(x, pi), *t_i8, 8)
            xq = dequantize_array(qx, pi)
        else:
            xq = fake_quantize_array(x, pi)

        # weight and bias sites (parameters: no batch dimension)
        t_w8 = faults.get(FaultSite.W8)
        t_b32 = faults.get(FaultSite.B32)
        if t_w8 is not None:
            qw = _flip_site(quantize_array(self.weights, pw), *t_w8, 8)
            wq = dequantize_array(qw, pw)
        elif train or self._wq_cache is None:
            wq = fake_quantize_array(self.weights, pw)
            if not train:
                self._wq_cache = wq
        else:
            wq = self._wq_cache
        if t_b32 is not None:
            qb = _flip_site(quantize_array(self.bias, pacc), *t_b32, 32)
            bq = dequantize_array(qb, pacc)
        elif train or self._bq_cache is None:
            bq = fake_quantize_array(self.bias, pacc)
            if not train:
                self._bq_cache = bq
        else:
            bq = self._bq_cache

        # float operation on fake-quantized operands, then the 32-bit
        # accumulator site (clamped by Q before FI)
        a = self._op(xq, wq, trace) + bq.reshape((1, -1) + (1,) * (x.ndim - 2))
        t_o32 = faults.get(FaultSite.O32)
        if t_o32 is not None:
            qa = _flip_site(quantize_array(a, pacc), *t_o32, 32)
            aq = dequantize_array(qa, pacc)
        else:
            aq = fake_quantize_array(a, pacc)

        # 8-bit output site
        if train and not self.out_obs.frozen:
            self.out_obs.observe_absmax(_absmax(aq))
        po = scale_from_observer(self.out_obs, 8)
        t_o8 = faults.get(FaultSite.O8)
        if t_o8 is not None:
            qo = _flip_site(quantize_array(aq, po), *t_o8, 8)
            out = dequantize_array(qo, po)
        else:
            out = fake_quantize_array(aq, po)

        if trace is not None:
            trace["wq"] = wq
            trace["mask_i8"] = _ste_mask(x, pi)
            trace["mask_w8"] = _ste_mask(self.weights, pw)
            trace["mask_b32"] = _ste_mask(self.bias, pacc)
            trace["mask_o32"] = _ste_mask(a, pacc)
            trace["mask_o8"] = _ste_mask(aq, po)
        return out

    def backward(self, g: np.ndarray, trace: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (g_input, g_weights, g_bias)."""
        g = g * trace["mask_o8"]
        g = g * trace["mask_o32"]
        g_x, g_w, g_b = self._op_backward(g, trace["wq"], trace)
        g_x *= trace["mask_i8"]
        g_w *= trace["mask_w8"]
        g_b *= trace["mask_b32"]
        return g_x, g_w, g_b


class QConv2d(_QuantizedLayerBase):
    """3x3-style quantized convolution, stride 1, symmetric zero padding."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        padding: int = 0,
        weights: np.ndarray | None = None,
        bias: np.ndarray | None = None,
    ):
        if weights is None:
            weights = np.zeros((out_ch, in_ch, kernel, kernel), dtype=np.float32)
        if bias is None:
            bias = np.zeros(out_ch, dtype=np.float32)
        if weights.shape != (out_ch, in_ch, kernel, kernel):
            raise ValueError(f"weight shape {weights.shape} does not match layer geometry")
        if bias.shape != (out_ch,):
            raise ValueError(f"bias length {bias.shape} != out_ch {out_ch}")
        super().__init__(weights, bias)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = 1
        self.padding = int(padding)
        if self.padding < 0:
            raise ValueError("padding must be nonnegative")

    def out_shape(self, in_shape: Shape) -> Shape:
        c, h, w = in_shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got shape {in_shape}")
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {self.kernel} too large for input {in_shape}")
        return (self.out_ch, ho, wo)

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        return sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))

    def _op(self, x: np.ndarray, w: np.ndarray, trace: dict | None = None) -> np.ndarray:
        win = self._windows(x)  # (N, C, Ho, Wo, kh, kw)
        n, c, ho, wo, kh, kw = win.shape
        mat = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = mat @ w.reshape(self.out_ch, -1).T
        if trace is not None:
            trace["mat"] = mat
            trace["geom"] = (n, c, ho, wo, kh, kw)
        return np.ascontiguousarray(
            out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        )

    def _op_backward(self, g, w, trace):
        n, c, ho, wo, kh, kw = trace["geom"]
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        g_w = (g_mat.T @ trace["mat"]).reshape(w.shape)
        g_b = g.sum(axis=(0, 2, 3))
        # input gradient: col2im of g_mat @ W as kh*kw shifted slice-adds
        cols = (g_mat @ w.reshape(self.out_ch, -1)).reshape(n, ho, wo, c, kh, kw)
        g_xp = np.zeros((n, c, ho + kh - 1, wo + kw - 1), dtype=np.float32)
        for a in range(kh):
            for b in range(kw):
                g_xp[:, :, a : a + ho, b : b + wo] += cols[:, :, :, :, a, b].transpose(
                    0, 3, 1, 2
                )
        p = self.padding
        if p:
            g_x = g_xp[:, :, p:-p, p:-p]
        else:
            g_x = g_xp
        return np.ascontiguousarray(g_x), g_w, g_b


class QLinear(_QuantizedLayerBase):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        weights: np.ndarray | None = None,
        bias: np.ndarray | None = None,
    ):
        if weights is None:
            weights = np.zeros((out_features, in_features), dtype=np.float32)
        if bias is None:
            bias = np.zeros(out_features, dtype=np.float32)
        if weights.shape != (out_features, in_features):
            raise ValueError(f"weight shape {weights.shape} does not match layer geometry")
        super().__init__(weights, bias)
        self.in_features = in_features
        self.out_features = out_features

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ValueError(f"expected flat input of {self.in_features}, got {in_shape}")
        return (self.out_features,)

    def _op(self, x: np.ndarray, w: np.ndarray, trace: dict | None = None) -> np.ndarray:
        if trace is not None:
            trace["xq"] = x
        return x @ w.T

    def _op_backward(self, g, w, trace):
        return g @ w, g.T @ trace["xq"], g.sum(axis=0)


class ReLU:
    quantized = False

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def forward(self, x: np.ndarray, train: bool, trace: dict | None) -> np.ndarray:
        if trace is not None:
            trace["mask"] = x > 0
        return np.maximum(x, 0.0)

    def backward(self, g: np.ndarray, trace: dict) -> np.ndarray:
        return g * trace["mask"]


class MaxPool2x2:
    quantized = False

    def out_shape(self, in_shape: Shape) -> Shape:
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"2x2 pooling needs even extents, got {in_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x: np.ndarray, train: bool, trace: dict | None) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"2x2 pooling needs even extents, got {x.shape}")
        if trace is None:
            return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
        blocks = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        # first-max index keeps gradient routing deterministic under ties
        trace["argmax"] = blocks.argmax(axis=-1)
        trace["in_shape"] = x.shape
        return blocks.max(axis=-1)

    def backward(self, g: np.ndarray, trace: dict) -> np.ndarray:
        n, c, h, w = trace["in_shape"]
        onehot = np.eye(4, dtype=np.float32)[trace["argmax"]]
        spread = onehot * g[..., None]
        return (
            spread.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )


class Dropout:
    quantized = False

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def forward(
        self, x: np.ndarray, train: bool, trace: dict | None, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        if not train:
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an RNG stream")
        keep = (rng.random(x.shape) >= self.p).astype(np.float32) / np.float32(1.0 - self.p)
        if trace is not None:
            trace["keep"] = keep
        return x * keep

    def backward(self, g: np.ndarray, trace: dict) -> np.ndarray:
        if "keep" not in trace:  # eval-mode trace: dropout was identity
            return g
        return g * trace["keep"]


class Flatten:
    quantized = False

    def out_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def forward(self, x: np.ndarray, train: bool, trace: dict | None) -> np.ndarray:
        if trace is not None:
            trace["in_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g: np.ndarray, trace: dict) -> np.ndarray:
        return g.reshape(trace["in_shape"])


Layer = _QuantizedLayerBase | ReLU | MaxPool2x2 | Dropout | Flatten


@dataclass
class ForwardTrace:
    """Cached per-layer state from a train-mode forward, for backward."""

    layer_traces: list[dict]


class ModelGraph:
    """Ordered layer pipeline with resolved shapes for a reference input."""

    def __init__(self, name: str, layers: list[Layer], input_shape: Shape):
        self.name = name
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.layer_shapes = self._resolve(self.input_shape)
        n_logits = self.layer_shapes[-1]
        if n_logits != (10,):
            raise ValueError(f"model must end in 10 logits, got shape {n_logits}")

    def _resolve(self, input_shape: Shape) -> list[Shape]:
        shapes = []
        cur = tuple(input_shape)
        for layer in self.layers:
            cur = layer.out_shape(cur)
            shapes.append(cur)
        return shapes

    def site_element_counts(self, input_shape: Shape) -> list[tuple[int, dict[FaultSite, int]]]:
        cur = tuple(input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            if layer.quantized:
                out.append((i, layer.site_counts(cur)))
            cur = layer.out_shape(cur)
        return out

    def quantized_layers(self) -> Iterator[tuple[int, _QuantizedLayerBase]]:
        for i, layer in enumerate(self.layers):
            if layer.quantized:
                yield i, layer

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in self.quantized_layers():
            out.append((f"layer{i}.weight", layer.weights))
            out.append((f"layer{i}.bias", layer.bias))
        return out

    def observers(self) -> list[tuple[str, RangeObserver]]:
        out = []
        for i, layer in self.quantized_layers():
            for tag, obs in layer.observers():
                out.append((f"layer{i}.{tag}", obs))
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        for pname, arr in self.parameters():
            if pname == name:
                if arr.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != expected {arr.shape}")
                arr[...] = value
                self.invalidate_caches()
                return
        raise KeyError(f"unknown parameter {name}")

    def freeze(self) -> None:
        for _, layer in self.quantized_layers():
            layer.freeze()

    def invalidate_caches(self) -> None:
        for _, layer in self.quantized_layers():
            layer.invalidate_caches()

    def _route(self, plan: FaultPlan) -> dict[int, SiteFaults]:
        """Split plan targets by layer and site."""
        if len(plan) == 0:
            return {}
        if int(plan.layer_idx.min()) < 0 or int(plan.layer_idx.max()) >= len(self.layers):
            raise IndexError(
                f"plan target layer {int(plan.layer_idx.max())} out of range"
            )
        for li in plan.layer_indices():
            if not self.layers[li].quantized:
                raise ValueError(f"plan target addresses non-quantized layer {li}")
        routed: dict[int, SiteFaults] = {}
        for li in np.unique(plan.layer_idx):
            sf = SiteFaults()
            layer_mask = plan.layer_idx == li
            for si in np.unique(plan.site_idx[layer_mask]):
                m = layer_mask & (plan.site_idx == si)
                sf.by_site[SITE_ORDER[int(si)]] = (plan.element[m], plan.bit[m])
            routed[int(li)] = sf
        return routed

    def _forward(
        self,
        x: np.ndarray,
        plan: FaultPlan,
        train: bool,
        dropout_rng: np.random.Generator | None = None,
        with_trace: bool = False,
    ):
        routed = self._route(plan)
        traces: list[dict] = []
        cur = np.ascontiguousarray(x, dtype=np.float32)
        for i, layer in enumerate(self.layers):
            trace: dict | None = {} if with_trace else None
            if layer.quantized:
                cur = layer.forward(cur, routed.get(i, SiteFaults.empty()), train, trace)
            elif isinstance(layer, Dropout):
                cur = layer.forward(cur, train, trace, rng=dropout_rng)
            else:
                cur = layer.forward(cur, train, trace)
            if with_trace:
                traces.append(trace)
        if with_trace:
            return cur, ForwardTrace(layer_traces=traces)
        return cur

    def forward_eval(self, x: np.ndarray, plan: FaultPlan = EMPTY_PLAN) -> np.ndarray:
        """Single-sample (or plan-free batch) evaluation forward."""
        if x.ndim == len(self.input_shape):
            x = x[None, ...]
        if len(plan) and x.shape[0] != 1:
            raise ValueError("faulted evaluation expects one sample per plan")
        return self._forward(x, plan, train=False)

    def forward_train(
        self,
        x: np.ndarray,
        plan: FaultPlan,
        dropout_rng: np.random.Generator,
    ) -> tuple[np.ndarray, ForwardTrace]:
        """Batched training forward; the plan's activation-site element
        indices address the batch-flat tensors (drawn over the batched
        population)."""
        return self._forward(x, plan, train=True, dropout_rng=dropout_rng, with_trace=True)

    def forward_eval_traced(
        self, x: np.ndarray, plan: FaultPlan = EMPTY_PLAN
    ) -> tuple[np.ndarray, ForwardTrace]:
        """Eval-mode forward (frozen scales, no observer updates) that still
        collects the backward trace; used for gradient checks."""
        if x.ndim == len(self.input_shape):
            x = x[None, ...]
        return self._forward(x, plan, train=False, with_trace=True)

    def backward(self, trace: ForwardTrace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Standard backward through the trace; returns gradients by name."""
        if trace is None or not trace.layer_traces:
            raise ValueError("backward needs the trace of a train-mode forward")
        grads: dict[str, np.ndarray] = {}
        g = np.ascontiguousarray(grad_logits, dtype=np.float32)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            ltrace = trace.layer_traces[i]
            if layer.quantized:
                g, g_w, g_b = layer.backward(g, ltrace)
                grads[f"layer{i}.weight"] = g_w
                grads[f"layer{i}.bias"] = g_b
            else:
                g = layer.backward(g, ltrace)
        return grads


def model_forward(
    model: ModelGraph,
    x_batch: np.ndarray,
    plans: list[FaultPlan] | FaultPlan,
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
):
    """Composes the layers, routing each plan's targets to its layer sites.

    Evaluation takes one plan per sample; training takes a single plan for
    the whole batch and also returns the trace.
    """
    if mode == "train":
        if not isinstance(plans, FaultPlan):
            raise TypeError("train mode takes a single FaultPlan")
        return model.forward_train(x_batch, plans, dropout_rng)
    if isinstance(plans, FaultPlan):
        plans = [plans] * x_batch.shape[0]
    if len(plans) != x_batch.shape[0]:
        raise ValueError(f"{len(plans)} plans for batch of {x_batch.shape[0]} samples")
    logits = [model.forward_eval(x_batch[j], plans[j]) for j in range(x_batch.shape[0])]
    return np.concatenate(logits, axis=0)


def model_backward(model: ModelGraph, trace: ForwardTrace, grad_logits: np.ndarray):
    return model.backward(trace, grad_logits)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), 0.0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    return MaxPool2x2().forward(np.asarray(x, dtype=np.float32), train=False, trace=None)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool) -> np.ndarray:
    return Dropout(p).forward(np.asarray(x, dtype=np.float32), train, None, rng=rng)


def flatten(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).reshape(x.shape[0], -1)


def build_ccdf() -> ModelGraph:
    """The small MNIST CNN: conv16 -> pool -> conv32 -> pool -> dropout -> fc10."""
    layers: list[Layer] = [
        QConv2d(1, 16, 3, padding=1),
        ReLU(),
        MaxPool2x2(),
        QConv2d(16, 32, 3, padding=1),
        ReLU(),
        MaxPool2x2(),
        Dropout(0.25),
        Flatten(),
        QLinear(32 * 7 * 7, 10),
    ]
    return ModelGraph(name="ccdf", layers=layers, input_shape=(1, 28, 28))
