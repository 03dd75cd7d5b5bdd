"""Layer-wise smoothing-ratio search over a calibration batch.

For every linear layer the calibrator computes a per-channel activation
statistic, sweeps the exponent r over a grid, and keeps the r whose scale
x_stat^r minimizes the mean squared difference between the layer's
full-precision and quantization-exposed outputs. Three propagation
strategies control which activations later layers calibrate on:

* none: every layer sees exact full-precision inputs.
* passact1: two streams per layer; the reference output comes from the
  full-precision stream while the quantized function consumes the stream
  produced by previously fixed quantized layers.
* passact2: a single stream where each calibrated layer's quantized output
  replaces the input of the next layer, matching the real inference path.

All batch work loops sample by sample through the same layer kernels the
single-sample forwards use, so the distributed calibrator (which ships the
identical tensors between workers) reproduces these results bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .importance import (
    SelectedTokens,
    channel_mean_abs,
    select_top_tokens,
    TokenImportance,
    x_stat_baselines,
    x_stat_from_tokens,
)
from .layers import Activation, LayerStack, Linear, RMSNorm
from .model import (
    ProxyLossSpec,
    _FN_CODES,
    _FN_NAMES,
    _Reader,
    _validate_quant_cfgs,
    apply_layer_fp,
    apply_linear_quant,
    backward_token_grads,
)
from .quantizer import QuantConfig, QuantizedTensor, dequantize, quantize
from .smoothing import SmoothScale, fuse_into_predecessor, power_scale, sqrt_scale
from .tensor import matmul

STRATEGIES = ("none", "passact1", "passact2")
STAT_MODES = ("mean", "max", "topk", "sqrt")

QUANTIZED_MAGIC = b"TLQQNT01"

# relative tolerance under which two grid losses count as tied
TIE_REL_TOL = 1e-12


@dataclass(frozen=True)
class RatioGrid:
    start: float = 0.0
    stop: float = 1.0
    step: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.start <= self.stop <= 1.0:
            raise ConfigError(f"ratio grid must satisfy 0 <= start <= stop <= 1, got [{self.start}, {self.stop}]")
        if not self.step > 0:
            raise ConfigError(f"ratio grid step must be > 0, got {self.step}")

    def points(self) -> tuple[float, ...]:
        """Grid values including both endpoints."""
        if self.start == self.stop:
            return (self.start,)
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9))
        pts = [self.start + i * self.step for i in range(n + 1)]
        if pts[-1] < self.stop - 1e-12:
            pts.append(self.stop)
        else:
            pts[-1] = self.stop
        return tuple(pts)


@dataclass(frozen=True)
class LayerCalibration:
    name: str
    scale: SmoothScale
    ratio: float
    loss_curve: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class CalibrationResult:
    layers: tuple[LayerCalibration, ...]
    strategy: str
    stat_mode: str
    bits_w: int
    bits_a: int
    fraction: float
    grid: RatioGrid


def layer_loss(y_fp: np.ndarray, y_q: np.ndarray) -> float:
    """Mean over the batch of the squared L2 difference (token sum inside)."""
    if y_fp.shape != y_q.shape:
        raise ShapeError(f"layer loss shapes differ: {y_fp.shape} vs {y_q.shape}")
    d = y_fp - y_q
    if d.ndim == 3:
        return float(np.mean(np.sum(d * d, axis=(1, 2))))
    return float(np.sum(d * d))


def _batch_fp(layer, xs: np.ndarray) -> np.ndarray:
    return np.stack([apply_layer_fp(layer, xs[b]) for b in range(xs.shape[0])])


def _batch_quant(
    layer: Linear, xs: np.ndarray, scale: SmoothScale, cfg_w: QuantConfig, cfg_a: QuantConfig
) -> np.ndarray:
    # the weight side is sample independent; quantizing it once gives the
    # same floats as apply_linear_quant on every sample
    w_hat = dequantize(quantize(layer.weight * scale.values, cfg_w))
    outs = []
    for b in range(xs.shape[0]):
        x_hat = dequantize(quantize(xs[b] / scale.values, cfg_a))
        outs.append(matmul(x_hat, w_hat.T) + layer.bias)
    return np.stack(outs)


def select_ratio(curve: Sequence[tuple[float, float]]) -> float:
    """Grid minimizer; losses within TIE_REL_TOL of the best tie to smaller r."""
    if len(curve) == 0:
        raise ConfigError("empty ratio grid")
    best = min(loss for _, loss in curve)
    cutoff = best + abs(best) * TIE_REL_TOL
    for r, loss in curve:
        if loss <= cutoff:
            return r
    raise AssertionError("unreachable: minimum not found in its own curve")


def search_ratio(
    layer: Linear,
    q_inputs: np.ndarray,
    fp_inputs: np.ndarray,
    x_stat: np.ndarray,
    grid: RatioGrid,
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
) -> tuple[float, tuple[tuple[float, float], ...]]:
    """Evaluate the reconstruction loss at every grid point and pick r*."""
    if x_stat.shape != (layer.weight.shape[1],):
        raise ShapeError(
            f"layer {layer.name!r}: x_stat length {x_stat.shape} vs {layer.weight.shape[1]} input channels"
        )
    y_fp = _batch_fp(layer, fp_inputs)
    curve = []
    for r in grid.points():
        scale = power_scale(x_stat, r)
        y_q = _batch_quant(layer, q_inputs, scale, cfg_w, cfg_a)
        curve.append((r, layer_loss(y_fp, y_q)))
    return select_ratio(curve), tuple(curve)


def gradient_pass_bytes(stack: LayerStack, n_tokens: int) -> int:
    """Footprint of one sample's forward trace plus its gradient trace."""
    return 2 * sum(8 * n_tokens * w for w in stack.widths())


def compute_token_selections(
    stack: LayerStack,
    activations: np.ndarray,
    fraction: float,
    loss: ProxyLossSpec,
    sample_hook: Callable[[int, bool], None] | None = None,
) -> list[SelectedTokens]:
    """Per-layer top-token sets from full-precision gradients over the batch.

    Gradients are taken once on the unquantized model, sample by sample, so
    selection never depends on partially fixed scales and only one sample's
    traces are alive at a time. `sample_hook(nbytes, alive)` brackets each
    sample's trace lifetime for memory accounting.
    """
    b_total, n_tokens = activations.shape[0], activations.shape[1]
    trace_bytes = gradient_pass_bytes(stack, n_tokens)
    totals = [np.zeros(n_tokens) for _ in stack.layers]
    for b in range(b_total):
        if sample_hook is not None:
            sample_hook(trace_bytes, True)
        gt = backward_token_grads(stack, activations[b], loss)
        for l in range(len(stack.layers)):
            totals[l] = totals[l] + channel_mean_abs(gt.grads[l])
        if sample_hook is not None:
            sample_hook(trace_bytes, False)
    return [
        select_top_tokens(TokenImportance(totals[l], b_total, l), fraction)
        for l in range(len(stack.layers))
    ]


def layer_stat(
    xs: np.ndarray,
    stat_mode: str,
    layer: Linear,
    selection: SelectedTokens | None = None,
) -> np.ndarray:
    """Per-channel scale statistic for one layer's calibration inputs."""
    if stat_mode in ("mean", "max"):
        return x_stat_baselines(xs, stat_mode)
    if stat_mode == "topk":
        if selection is None:
            raise ConfigError("topk stat mode needs a token selection")
        return x_stat_from_tokens(xs, selection)
    if stat_mode == "sqrt":
        x_absmax = x_stat_baselines(xs, "max")
        w_absmax = np.max(np.abs(layer.weight), axis=0)
        return sqrt_scale(x_absmax, w_absmax).values
    raise ConfigError(f"stat mode must be one of {STAT_MODES}, got {stat_mode!r}")


def scale_for(stat_mode: str, stat: np.ndarray, ratio: float) -> SmoothScale:
    """Build the layer scale, labeling sqrt-derived scales with their origin."""
    scale = power_scale(stat, ratio)
    if stat_mode == "sqrt":
        return SmoothScale(scale.values, origin="sqrt_baseline", ratio=None)
    return scale


@dataclass(frozen=True)
class LinearTask:
    """One linear layer ready for calibration, with its strategy streams."""

    index: int
    layer: Linear
    stat_inputs: np.ndarray  # (B, N, C) inputs that feed the scale statistic
    fp_inputs: np.ndarray  # inputs of the full-precision reference output
    q_inputs: np.ndarray  # inputs consumed by the quantized function


class WalkObserver:
    """Hooks the distributed calibrator uses to ledger stream lifetimes.

    The single-context calibrator runs with the default no-op hooks.
    """

    def layer_begin(self, index: int, param_bytes: int) -> None:  # pragma: no cover
        pass

    def layer_end(self, index: int, param_bytes: int) -> None:  # pragma: no cover
        pass

    def stream_new(self, nbytes: int, tag: str) -> None:  # pragma: no cover
        pass

    def stream_drop(self, nbytes: int, tag: str) -> None:  # pragma: no cover
        pass


def _param_bytes(layer) -> int:
    # the dominant parameter tensor: weight matrix / gain vector; activations
    # have no parameters
    if isinstance(layer, Linear):
        return layer.weight.nbytes
    if isinstance(layer, RMSNorm):
        return layer.gain.nbytes
    return 0


class CalibrationWalk:
    """Strategy-aware propagation of calibration activations through a stack.

    `next_linear` advances every live stream through full-precision layers
    until the next linear layer and returns its calibration task (or None at
    the end of the stack); `fix_scale` commits that layer's smoothing scale
    and propagates past it according to the strategy.
    """

    def __init__(
        self,
        stack: LayerStack,
        activations: np.ndarray,
        strategy: str,
        cfg_w: QuantConfig,
        cfg_a: QuantConfig,
        observer: WalkObserver | None = None,
    ):
        if strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        if activations.ndim != 3:
            raise ShapeError(f"calibration activations must be (B, N, C), got {activations.shape}")
        _validate_quant_cfgs(cfg_w, cfg_a)
        self.stack = stack
        self.strategy = strategy
        self.cfg_w = cfg_w
        self.cfg_a = cfg_a
        self.obs = observer or WalkObserver()
        if strategy == "passact1":
            self._streams = {"fp": activations, "q": activations}
        else:
            self._streams = {"main": activations}
        for name, arr in self._streams.items():
            self.obs.stream_new(arr.nbytes, f"stream:{name}")
        self._idx = 0
        self._pending: Linear | None = None

    def _advance_fp(self, layer) -> None:
        pbytes = _param_bytes(layer)
        self.obs.layer_begin(self._idx, pbytes)
        for name in self._streams:
            old = self._streams[name]
            new = _batch_fp(layer, old)
            self.obs.stream_new(new.nbytes, f"stream:{name}")
            self.obs.stream_drop(old.nbytes, f"stream:{name}")
            self._streams[name] = new
        self.obs.layer_end(self._idx, pbytes)
        self._idx += 1

    def next_linear(self) -> LinearTask | None:
        if self._pending is not None:
            raise ConfigError("previous linear layer was not fixed (call fix_scale first)")
        while self._idx < len(self.stack.layers):
            layer = self.stack.layers[self._idx]
            if isinstance(layer, Linear):
                self._pending = layer
                self.obs.layer_begin(self._idx, _param_bytes(layer))
                if self.strategy == "passact1":
                    fp_in, q_in = self._streams["fp"], self._streams["q"]
                else:
                    fp_in = q_in = self._streams["main"]
                # the scale statistic comes from the same inputs the quantized
                # function consumes
                return LinearTask(self._idx, layer, q_in, fp_in, q_in)
            self._advance_fp(layer)
        for name, arr in self._streams.items():
            self.obs.stream_drop(arr.nbytes, f"stream:{name}")
        self._streams = {}
        return None

    def fix_scale(self, scale: SmoothScale) -> None:
        if self._pending is None:
            raise ConfigError("no pending linear layer to fix")
        layer = self._pending
        updates: dict[str, np.ndarray] = {}
        if self.strategy == "none":
            updates["main"] = _batch_fp(layer, self._streams["main"])
        elif self.strategy == "passact2":
            updates["main"] = _batch_quant(layer, self._streams["main"], scale, self.cfg_w, self.cfg_a)
        else:
            updates["fp"] = _batch_fp(layer, self._streams["fp"])
            updates["q"] = _batch_quant(layer, self._streams["q"], scale, self.cfg_w, self.cfg_a)
        for name, new in updates.items():
            old = self._streams[name]
            self.obs.stream_new(new.nbytes, f"stream:{name}")
            self.obs.stream_drop(old.nbytes, f"stream:{name}")
            self._streams[name] = new
        self.obs.layer_end(self._idx, _param_bytes(layer))
        self._pending = None
        self._idx += 1


def calibrate(
    stack: LayerStack,
    activations: np.ndarray,
    *,
    strategy: str = "passact2",
    stat_mode: str = "topk",
    grid: RatioGrid = RatioGrid(),
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
    fraction: float = 0.5,
    loss: ProxyLossSpec = ProxyLossSpec(),
) -> CalibrationResult:
    """Run the full layer-wise ratio search over a calibration batch.

    `activations` is the (B, N, C) calibration tensor (CalibrationSet
    modality tags play no role here; selection is purely gradient-driven).
    """
    if stat_mode not in STAT_MODES:
        raise ConfigError(f"stat mode must be one of {STAT_MODES}, got {stat_mode!r}")
    selections = None
    if stat_mode == "topk":
        selections = compute_token_selections(stack, activations, fraction, loss)
    walk = CalibrationWalk(stack, activations, strategy, cfg_w, cfg_a)
    rows: list[LayerCalibration] = []
    while (task := walk.next_linear()) is not None:
        sel = selections[task.index] if selections is not None else None
        stat = layer_stat(task.stat_inputs, stat_mode, task.layer, sel)
        r_star, curve = search_ratio(
            task.layer, task.q_inputs, task.fp_inputs, stat, grid, cfg_w, cfg_a
        )
        scale = scale_for(stat_mode, stat, r_star)
        rows.append(LayerCalibration(task.layer.name, scale, r_star, curve))
        walk.fix_scale(scale)
    return CalibrationResult(
        tuple(rows), strategy, stat_mode, cfg_w.bits, cfg_a.bits, fraction, grid
    )


def scales_from_result(result: CalibrationResult) -> dict[str, SmoothScale]:
    return {row.name: row.scale for row in result.layers}


# --- quantized stack artifact -------------------------------------------------


@dataclass(frozen=True)
class QuantizedLinear:
    name: str
    qweight: QuantizedTensor
    bias: np.ndarray
    # explicit activation divisor for a linear with no fusable predecessor
    input_scale: np.ndarray | None


@dataclass(frozen=True)
class QuantizedStack:
    layers: tuple
    input_channels: int
    bits_w: int
    bits_a: int


def quantize_with_result(
    stack: LayerStack,
    result: CalibrationResult,
    cfg_w: QuantConfig,
    cfg_a: QuantConfig,
) -> QuantizedStack:
    """Emit the deployable artifact: fused smoothing plus quantized weights.

    Each linear's smoothing division is folded into its rmsnorm or linear
    predecessor; the first linear (no predecessor) keeps an explicit input
    scale. Weights are stored as per-channel quantized tensors.
    """
    _validate_quant_cfgs(cfg_w, cfg_a)
    by_name = scales_from_result(result)
    missing = [l.name for _, l in stack.linears() if l.name not in by_name]
    if missing:
        raise ConfigError(f"calibration result does not cover linear layers: {missing}")

    # fold every linear's input scale into its predecessor first, then quantize
    fused: list = list(stack.layers)
    explicit: dict[str, np.ndarray] = {}
    for i, layer in enumerate(stack.layers):
        if not isinstance(layer, Linear):
            continue
        scale = by_name[layer.name]
        if i == 0:
            explicit[layer.name] = scale.values
        else:
            fused[i - 1] = fuse_into_predecessor(fused[i - 1], scale)

    out: list = []
    for layer in fused:
        if isinstance(layer, Linear):
            scale = by_name[layer.name]
            qw = quantize(layer.weight * scale.values, cfg_w)
            out.append(
                QuantizedLinear(layer.name, qw, layer.bias, explicit.get(layer.name))
            )
        else:
            out.append(layer)
    return QuantizedStack(tuple(out), stack.input_channels, cfg_w.bits, cfg_a.bits)


def forward_quantized(qstack: QuantizedStack, x: np.ndarray) -> np.ndarray:
    """Forward pass of the quantized artifact on one (tokens, channels) input."""
    cfg_a = QuantConfig(qstack.bits_a, "per_token")
    cur = x
    for layer in qstack.layers:
        if isinstance(layer, QuantizedLinear):
            if layer.input_scale is not None:
                cur = cur / layer.input_scale
            x_s = dequantize(quantize(cur, cfg_a))
            cur = matmul(x_s, dequantize(layer.qweight).T) + layer.bias
        else:
            cur = apply_layer_fp(layer, cur)
    return cur


# --- result file format (human-readable, bit-exact floats) --------------------
#
# Every float is written with repr(), which round-trips float64 exactly.

_RESULT_HEADER = "tlq-result v1"


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def result_to_text(result: CalibrationResult) -> str:
    lines = [
        _RESULT_HEADER,
        f"strategy {result.strategy}",
        f"stat_mode {result.stat_mode}",
        f"bits_w {result.bits_w}",
        f"bits_a {result.bits_a}",
        f"fraction {repr(result.fraction)}",
        f"grid {repr(result.grid.start)} {repr(result.grid.stop)} {repr(result.grid.step)}",
        f"layers {len(result.layers)}",
    ]
    for row in result.layers:
        lines.append(f"layer {row.name}")
        lines.append(f"ratio {repr(float(row.ratio))}")
        origin = row.scale.origin
        lines.append(f"origin {origin}")
        lines.append(f"scale {row.scale.values.shape[0]} {_fmt_floats(row.scale.values)}")
        lines.append(f"curve {len(row.loss_curve)}")
        for r, loss in row.loss_curve:
            lines.append(f"{repr(float(r))} {repr(float(loss))}")
    lines.append("end")
    return "\n".join(lines) + "\n"


class _TextReader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, expect: str | None = None) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointError("truncated", "result text ended early")
        line = self.lines[self.pos]
        self.pos += 1
        if expect is not None and not line.startswith(expect):
            raise CheckpointError("bad_field", f"expected {expect!r}, got {line!r}")
        return line


def result_from_text(text: str) -> CalibrationResult:
    r = _TextReader(text)
    if r.next() != _RESULT_HEADER:
        raise CheckpointError("bad_magic", "not a calibration result document")
    strategy = r.next("strategy ").split(" ", 1)[1]
    stat_mode = r.next("stat_mode ").split(" ", 1)[1]
    bits_w = int(r.next("bits_w ").split(" ", 1)[1])
    bits_a = int(r.next("bits_a ").split(" ", 1)[1])
    fraction = float(r.next("fraction ").split(" ", 1)[1])
    g = r.next("grid ").split()
    grid = RatioGrid(float(g[1]), float(g[2]), float(g[3]))
    n_layers = int(r.next("layers ").split(" ", 1)[1])
    rows = []
    for _ in range(n_layers):
        name = r.next("layer ").split(" ", 1)[1]
        ratio = float(r.next("ratio ").split(" ", 1)[1])
        origin = r.next("origin ").split(" ", 1)[1]
        parts = r.next("scale ").split()
        count = int(parts[1])
        values = np.array([float(v) for v in parts[2:]])
        if values.shape[0] != count:
            raise CheckpointError("bad_dims", f"scale for {name!r}: expected {count} values, got {values.shape[0]}")
        n_curve = int(r.next("curve ").split(" ", 1)[1])
        curve = []
        for _ in range(n_curve):
            a, b = r.next().split()
            curve.append((float(a), float(b)))
        scale = SmoothScale(values, origin=origin, ratio=None if origin == "sqrt_baseline" else ratio)
        rows.append(LayerCalibration(name, scale, ratio, tuple(curve)))
    r.next("end")
    return CalibrationResult(tuple(rows), strategy, stat_mode, bits_w, bits_a, fraction, grid)


# --- quantized artifact file format (TLQQNT01) --------------------------------
#
# magic(8) | u8 bits_w | u8 bits_a | u32 input_channels | u32 layer_count
# layer: u8 kind | u16 name_len | name
#   kind 0 rmsnorm: u32 C | f64[C] gain | f64 eps
#   kind 1 qlinear: u32 C_out | u32 C_in | u8 has_input_scale
#                   [f64[C_in] input scale] | f64[C_out] quant scales
#                   | i32[C_out*C_in] codes | f64[C_out] bias
#   kind 2 act:     u32 fn_code (0 relu, 1 silu)


def save_quantized(qstack: QuantizedStack) -> bytes:
    out = [
        QUANTIZED_MAGIC,
        struct.pack("<BBII", qstack.bits_w, qstack.bits_a, qstack.input_channels, len(qstack.layers)),
    ]
    for layer in qstack.layers:
        raw = layer.name.encode("utf-8")
        if isinstance(layer, RMSNorm):
            out.append(struct.pack("<BH", 0, len(raw)) + raw)
            out.append(struct.pack("<I", layer.gain.shape[0]))
            out.append(np.asarray(layer.gain, dtype="<f8").tobytes())
            out.append(struct.pack("<d", layer.eps))
        elif isinstance(layer, QuantizedLinear):
            c_out, c_in = layer.qweight.q.shape
            out.append(struct.pack("<BH", 1, len(raw)) + raw)
            out.append(struct.pack("<IIB", c_out, c_in, 1 if layer.input_scale is not None else 0))
            if layer.input_scale is not None:
                out.append(np.asarray(layer.input_scale, dtype="<f8").tobytes())
            out.append(np.asarray(layer.qweight.scales, dtype="<f8").tobytes())
            out.append(np.asarray(layer.qweight.q, dtype="<i4").tobytes())
            out.append(np.asarray(layer.bias, dtype="<f8").tobytes())
        elif isinstance(layer, Activation):
            out.append(struct.pack("<BH", 2, len(raw)) + raw)
            out.append(struct.pack("<I", _FN_CODES[layer.fn]))
        else:
            raise ConfigError(f"cannot serialize layer of type {type(layer).__name__}")
    return b"".join(out)


def load_quantized(data: bytes) -> QuantizedStack:
    r = _Reader(data)
    if r.take(len(QUANTIZED_MAGIC)) != QUANTIZED_MAGIC:
        raise CheckpointError("bad_magic", "bad magic: not a quantized stack payload")
    bits_w, bits_a = r.u8(), r.u8()
    input_channels = r.u32()
    n_layers = r.u32()
    cfg_w = QuantConfig(bits_w, "per_channel")
    layers: list = []
    for _ in range(n_layers):
        kind = r.u8()
        name = r.take(r.u16()).decode("utf-8")
        if kind == 0:
            c = r.u32()
            gain = r.f64s(c)
            eps = struct.unpack("<d", r.take(8))[0]
            layers.append(RMSNorm(name, gain, eps))
        elif kind == 1:
            c_out, c_in = r.u32(), r.u32()
            input_scale = r.f64s(c_in) if r.u8() else None
            scales = r.f64s(c_out)
            q = np.frombuffer(r.take(4 * c_out * c_in), dtype="<i4").copy().reshape(c_out, c_in)
            bias = r.f64s(c_out)
            layers.append(
                QuantizedLinear(name, QuantizedTensor(q, scales, cfg_w), bias, input_scale)
            )
        elif kind == 2:
            code = r.u32()
            if code not in _FN_NAMES:
                raise CheckpointError("bad_kind", f"unknown activation code {code}")
            layers.append(Activation(name, _FN_NAMES[code]))
        else:
            raise CheckpointError("bad_kind", f"unknown layer kind {kind}")
    r.done()
    return QuantizedStack(tuple(layers), input_channels, bits_w, bits_a)
