"""Forward passes, reverse-mode token gradients, and artifact serialization.

Two forward modes exist for the same stack: exact float composition and a
quantization-exposed pass where every linear layer consumes per-token
quantized activations (divided by its smoothing scale) and per-channel
quantized weights (multiplied by the same scale). Biases and non-linear
layers always stay in full precision.

Gradients are computed for a scalar proxy objective on the final output;
the token-importance machinery only needs a well-defined scalar, and the
default 0.5*||y||^2/N needs no labels and is deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .layers import Activation, LayerSpec, LayerStack, Linear, RMSNorm
from .quantizer import QuantConfig, dequantize, quantize
from .smoothing import SmoothScale
from .tensor import matmul

CHECKPOINT_MAGIC = b"TLQCKPT1"
CALIBSET_MAGIC = b"TLQCAL01"

LOSS_KINDS = ("sum_sq_output", "ce_pseudo")


@dataclass(frozen=True)
class ForwardTrace:
    inputs: tuple[np.ndarray, ...]  # input of every layer, in order
    output: np.ndarray

    def values(self) -> tuple[np.ndarray, ...]:
        """All trace entries: one per layer input plus the final output."""
        return (*self.inputs, self.output)


@dataclass(frozen=True)
class GradTrace:
    grads: tuple[np.ndarray, ...]  # d(loss)/d(layer input), plus d(loss)/d(output) last


@dataclass(frozen=True)
class ProxyLossSpec:
    kind: str = "sum_sq_output"
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.kind == "ce_pseudo" and self.labels is None:
            raise ConfigError("ce_pseudo loss requires labels")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(y: np.ndarray) -> np.ndarray:
    z = y - y.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(y: np.ndarray, spec: ProxyLossSpec) -> float:
    n = y.shape[0]
    if spec.kind == "sum_sq_output":
        return float(0.5 * np.sum(y * y) / n)
    p = _softmax(y)
    picked = p[np.arange(n), spec.labels]
    return float(-np.mean(np.log(picked)))


def loss_grad(y: np.ndarray, spec: ProxyLossSpec) -> np.ndarray:
    n = y.shape[0]
    if spec.kind == "sum_sq_output":
        return y / n
    g = _softmax(y)
    g[np.arange(n), spec.labels] -= 1.0
    return g / n


def apply_layer_fp(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Full-precision application of one layer to a (tokens, channels) tensor."""
    if isinstance(layer, RMSNorm):
        if x.shape[1] != layer.gain.shape[0]:
            raise ShapeError(f"layer {layer.name!r}: input width {x.shape[1]} vs gain {layer.gain.shape[0]}")
        rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + layer.eps)
        return x / rms * layer.gain
    if isinstance(layer, Linear):
        if x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"layer {layer.name!r}: input width {x.shape[1]} vs weight {layer.weight.shape}"
            )
        return matmul(x, layer.weight.T) + layer.bias
    if layer.fn == "relu":
        return np.maximum(x, 0.0)
    return x * _sigmoid(x)


def apply_linear_quant(
    layer: Linear,
    x: np.ndarray,
    scale: SmoothScale,
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
) -> np.ndarray:
    """Quantization-exposed linear layer: Qa(x/s) against Qw(W*s), plus bias.

    Quantization is simulated (dequantize then float matmul); the claims
    under test are about error, not integer-kernel speed.
    """
    if x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(f"layer {layer.name!r}: input width {x.shape[1]} vs weight {layer.weight.shape}")
    if scale.values.shape[0] != layer.weight.shape[1]:
        raise ShapeError(
            f"layer {layer.name!r}: smoothing scale length {scale.values.shape[0]} "
            f"vs {layer.weight.shape[1]} input channels"
        )
    x_s = dequantize(quantize(x / scale.values, cfg_a))
    w_s = dequantize(quantize(layer.weight * scale.values, cfg_w))
    return matmul(x_s, w_s.T) + layer.bias


def _check_input(stack: LayerStack, x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ShapeError(f"stack input must be rank 2 (tokens x channels), got {x.shape}")
    if x.shape[1] != stack.input_channels:
        raise ShapeError(f"stack expects {stack.input_channels} input channels, got {x.shape[1]}")


def forward_fp(stack: LayerStack, x: np.ndarray) -> ForwardTrace:
    """Exact float composition, recording every intermediate layer input."""
    _check_input(stack, x)
    inputs = []
    cur = x
    for layer in stack.layers:
        inputs.append(cur)
        cur = apply_layer_fp(layer, cur)
    return ForwardTrace(tuple(inputs), cur)


def forward_fp_from(stack: LayerStack, start: int, x: np.ndarray) -> np.ndarray:
    """Full-precision forward through layers[start:], for perturbation probes."""
    if not 0 <= start <= len(stack.layers):
        raise ShapeError(f"layer index {start} out of range for {len(stack.layers)} layers")
    cur = x
    for layer in stack.layers[start:]:
        cur = apply_layer_fp(layer, cur)
    return cur


def _validate_quant_cfgs(cfg_w: QuantConfig, cfg_a: QuantConfig) -> None:
    if cfg_a.granularity != "per_token":
        raise ConfigError("activation quantization must be per_token")
    if cfg_w.granularity != "per_channel":
        raise ConfigError("weight quantization must be per_channel")


def forward_quant(
    stack: LayerStack,
    x: np.ndarray,
    scales: Mapping[str, SmoothScale],
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
) -> ForwardTrace:
    """Quantization-exposed forward; every linear needs a smoothing scale."""
    _check_input(stack, x)
    _validate_quant_cfgs(cfg_w, cfg_a)
    inputs = []
    cur = x
    for layer in stack.layers:
        inputs.append(cur)
        if isinstance(layer, Linear):
            if layer.name not in scales:
                raise ConfigError(f"missing smoothing scale for linear layer {layer.name!r}")
            cur = apply_linear_quant(layer, cur, scales[layer.name], cfg_w, cfg_a)
        else:
            cur = apply_layer_fp(layer, cur)
    return ForwardTrace(tuple(inputs), cur)


def _layer_input_grad(layer: LayerSpec, x: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    if isinstance(layer, Linear):
        return matmul(g_out, layer.weight)
    if isinstance(layer, Activation):
        if layer.fn == "relu":
            return g_out * (x > 0.0)
        sig = _sigmoid(x)
        return g_out * sig * (1.0 + x * (1.0 - sig))
    # rmsnorm: y = g * x / r with r = sqrt(mean(x^2) + eps), per token
    c = x.shape[1]
    r = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + layer.eps)
    u = g_out * layer.gain
    return u / r - x * np.sum(u * x, axis=1, keepdims=True) / (c * r**3)


def backward_token_grads(
    stack: LayerStack, x: np.ndarray, loss: ProxyLossSpec = ProxyLossSpec()
) -> GradTrace:
    """Reverse-mode gradients of the proxy loss at every layer input.

    relu uses subgradient 0 at 0; silu uses its exact derivative. The last
    trace entry is the gradient at the final output.
    """
    trace = forward_fp(stack, x)
    g = loss_grad(trace.output, loss)
    grads = [g]
    for layer, x_l in zip(reversed(stack.layers), reversed(trace.inputs)):
        g = _layer_input_grad(layer, x_l, g)
        grads.append(g)
    return GradTrace(tuple(reversed(grads)))


# --- checkpoint format (TLQCKPT1) -------------------------------------------
#
# magic(8) | u32 input_channels | u32 layer_count | layers...
# layer: u8 kind | u16 name_len | name utf-8 | kind-specific body
#   kind 0 rmsnorm: u32 C   | f64[C] gain | f64 eps
#   kind 1 linear:  u32 C_out | u32 C_in | f64[C_out*C_in] weight | f64[C_out] bias
#   kind 2 act:     u32 fn_code (0 relu, 1 silu)
# All integers little-endian; payloads are row-major float64.

_KIND_RMSNORM, _KIND_LINEAR, _KIND_ACT = 0, 1, 2
_FN_CODES = {"relu": 0, "silu": 1}
_FN_NAMES = {v: k for k, v in _FN_CODES.items()}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated", f"payload ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError("trailing", f"{len(self.data) - self.pos} unread trailing bytes")


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError("bad_name", f"layer name too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(stack: LayerStack) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", stack.input_channels, len(stack.layers))]
    for layer in stack.layers:
        if isinstance(layer, RMSNorm):
            out.append(struct.pack("<B", _KIND_RMSNORM))
            out.append(_pack_name(layer.name))
            out.append(struct.pack("<I", layer.gain.shape[0]))
            out.append(np.asarray(layer.gain, dtype="<f8").tobytes())
            out.append(struct.pack("<d", layer.eps))
        elif isinstance(layer, Linear):
            out.append(struct.pack("<B", _KIND_LINEAR))
            out.append(_pack_name(layer.name))
            out.append(struct.pack("<II", *layer.weight.shape))
            out.append(np.asarray(layer.weight, dtype="<f8").tobytes())
            out.append(np.asarray(layer.bias, dtype="<f8").tobytes())
        else:
            out.append(struct.pack("<B", _KIND_ACT))
            out.append(_pack_name(layer.name))
            out.append(struct.pack("<I", _FN_CODES[layer.fn]))
    return b"".join(out)


def load_checkpoint(data: bytes) -> LayerStack:
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad_magic", "bad magic: not a checkpoint payload")
    input_channels = r.u32()
    n_layers = r.u32()
    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        kind = r.u8()
        name = r.take(r.u16()).decode("utf-8")
        if kind == _KIND_RMSNORM:
            c = r.u32()
            gain = r.f64s(c)
            eps = struct.unpack("<d", r.take(8))[0]
            layers.append(RMSNorm(name, gain, eps))
        elif kind == _KIND_LINEAR:
            c_out, c_in = r.u32(), r.u32()
            weight = r.f64s(c_out * c_in).reshape(c_out, c_in)
            bias = r.f64s(c_out)
            layers.append(Linear(name, weight, bias))
        elif kind == _KIND_ACT:
            code = r.u32()
            if code not in _FN_NAMES:
                raise CheckpointError("bad_kind", f"unknown activation code {code}")
            layers.append(Activation(name, _FN_NAMES[code]))
        else:
            raise CheckpointError("bad_kind", f"unknown layer kind {kind}")
    r.done()
    try:
        return LayerStack(tuple(layers), input_channels)
    except (ShapeError, ConfigError, NumericError) as exc:
        raise CheckpointError("bad_dims", f"inconsistent stack: {exc}") from exc


# --- calibration set format (TLQCAL01) ---------------------------------------
#
# magic(8) | u32 B | u32 N | u32 C | u8[B*N] modality (0 text, 1 visual)
#          | f64[B*N*C] activations, row-major


@dataclass(frozen=True)
class CalibrationSet:
    activations: np.ndarray  # (B, N, C) float64
    modality: np.ndarray  # (B, N) uint8, 0 text / 1 visual

    def __post_init__(self):
        if self.activations.ndim != 3:
            raise ShapeError(f"activations must be (B, N, C), got {self.activations.shape}")
        if self.modality.shape != self.activations.shape[:2]:
            raise ShapeError(
                f"modality shape {self.modality.shape} does not match activations "
                f"{self.activations.shape}"
            )
        if not np.all((self.modality == 0) | (self.modality == 1)):
            raise NumericError("modality tags must be 0 (text) or 1 (visual)")

    @property
    def batch(self) -> int:
        return self.activations.shape[0]

    @property
    def tokens(self) -> int:
        return self.activations.shape[1]

    @property
    def channels(self) -> int:
        return self.activations.shape[2]


def save_calibset(calib: CalibrationSet) -> bytes:
    b, n, c = calib.activations.shape
    return b"".join(
        [
            CALIBSET_MAGIC,
            struct.pack("<III", b, n, c),
            np.asarray(calib.modality, dtype=np.uint8).tobytes(),
            np.asarray(calib.activations, dtype="<f8").tobytes(),
        ]
    )


def load_calibset(data: bytes) -> CalibrationSet:
    r = _Reader(data)
    if r.take(len(CALIBSET_MAGIC)) != CALIBSET_MAGIC:
        raise CheckpointError("bad_magic", "bad magic: not a calibration-set payload")
    b, n, c = r.u32(), r.u32(), r.u32()
    modality = np.frombuffer(r.take(b * n), dtype=np.uint8).copy().reshape(b, n)
    acts = r.f64s(b * n * c).reshape(b, n, c)
    r.done()
    return CalibrationSet(acts, modality)
