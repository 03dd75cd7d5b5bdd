"""Evaluation reports and gradient heatmap exports.

The eval report replays a calibration result against a stack: per-layer
reconstruction losses at the fixed ratios (under the result's propagation
strategy), the end-to-end proxy-loss gap between the full-precision and
quantization-exposed forward passes, and the first-order estimate of each
layer's activation-error contribution against the measured loss change.
Reports are versioned structured text with repr()-exact floats so byte
comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import (
    CalibrationResult,
    CalibrationWalk,
    _batch_fp,
    _batch_quant,
    layer_loss,
    scales_from_result,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .importance import (
    SelectedTokens,
    TokenImportance,
    activation_error_probe,
    channel_mean_abs,
    heatmap_rows,
    select_top_tokens,
)
from .layers import LayerStack
from .model import (
    CalibrationSet,
    ProxyLossSpec,
    backward_token_grads,
    forward_fp,
    forward_quant,
    loss_value,
)
from .quantizer import QuantConfig
from .tensor import Rng


@dataclass(frozen=True)
class LayerEval:
    name: str
    ratio: float
    loss: float  # reconstruction loss at the fixed ratio
    estimate: float  # first-order activation-error estimate, summed over samples
    measured: float  # measured proxy-loss change, summed over samples


@dataclass(frozen=True)
class EvalReport:
    strategy: str
    stat_mode: str
    bits_w: int
    bits_a: int
    samples: int
    layers: tuple[LayerEval, ...]
    fp_loss: float
    quant_loss: float
    end_to_end_gap: float
    output_mse: float
    ce_gap: float

    def to_text(self) -> str:
        lines = [
            "tlq-eval-report v1",
            f"strategy {self.strategy}",
            f"stat_mode {self.stat_mode}",
            f"bits_w {self.bits_w}",
            f"bits_a {self.bits_a}",
            f"samples {self.samples}",
            f"layers {len(self.layers)}",
        ]
        for l in self.layers:
            lines.append(
                f"layer {l.name} ratio {repr(l.ratio)} loss {repr(l.loss)} "
                f"estimate {repr(l.estimate)} measured {repr(l.measured)}"
            )
        lines.append(f"fp_loss {repr(self.fp_loss)}")
        lines.append(f"quant_loss {repr(self.quant_loss)}")
        lines.append(f"end_to_end_gap {repr(self.end_to_end_gap)}")
        lines.append(f"output_mse {repr(self.output_mse)}")
        lines.append(f"ce_gap {repr(self.ce_gap)}")
        lines.append("end")
        return "\n".join(lines) + "\n"


def evaluate(
    stack: LayerStack,
    result: CalibrationResult,
    calib: CalibrationSet,
    loss: ProxyLossSpec = ProxyLossSpec(),
) -> EvalReport:
    """Replay a calibration result on evaluation data."""
    cfg_w = QuantConfig(result.bits_w, "per_channel")
    cfg_a = QuantConfig(result.bits_a, "per_token")
    scales = scales_from_result(result)
    by_name = {row.name: row for row in result.layers}
    acts = calib.activations
    b_total = acts.shape[0]

    # per-layer reconstruction losses under the result's propagation strategy
    walk = CalibrationWalk(stack, acts, result.strategy, cfg_w, cfg_a)
    layer_losses: dict[str, float] = {}
    while (task := walk.next_linear()) is not None:
        if task.layer.name not in by_name:
            raise ConfigError(f"result does not cover linear layer {task.layer.name!r}")
        row = by_name[task.layer.name]
        y_fp = _batch_fp(task.layer, task.fp_inputs)
        y_q = _batch_quant(task.layer, task.q_inputs, row.scale, cfg_w, cfg_a)
        layer_losses[task.layer.name] = layer_loss(y_fp, y_q)
        walk.fix_scale(row.scale)

    # first-order estimate vs measured loss change, per layer, summed over batch
    probes: dict[str, tuple[float, float]] = {name: (0.0, 0.0) for name in by_name}
    for idx, lin in stack.linears():
        row = by_name[lin.name]
        est_total = meas_total = 0.0
        for b in range(b_total):
            est, meas = activation_error_probe(
                stack, acts[b], idx, cfg_a, scale=row.scale, loss=loss
            )
            est_total += est
            meas_total += meas
        probes[lin.name] = (est_total, meas_total)

    fp_total = q_total = mse_total = 0.0
    for b in range(b_total):
        t_fp = forward_fp(stack, acts[b])
        t_q = forward_quant(stack, acts[b], scales, cfg_w, cfg_a)
        fp_total += loss_value(t_fp.output, loss)
        q_total += loss_value(t_q.output, loss)
        d = t_q.output - t_fp.output
        mse_total += float(np.sum(d * d)) / acts.shape[1]

    fp_loss = fp_total / b_total
    quant_loss = q_total / b_total
    rows = tuple(
        LayerEval(
            row.name,
            row.ratio,
            layer_losses[row.name],
            probes[row.name][0],
            probes[row.name][1],
        )
        for row in result.layers
    )
    return EvalReport(
        result.strategy,
        result.stat_mode,
        result.bits_w,
        result.bits_a,
        b_total,
        rows,
        fp_loss,
        quant_loss,
        abs(quant_loss - fp_loss),
        mse_total / b_total,
        accuracy_proxy_gap(stack, result, calib),
    )


def end_to_end_gap(
    stack: LayerStack,
    result: CalibrationResult,
    calib: CalibrationSet,
    loss: ProxyLossSpec = ProxyLossSpec(),
) -> float:
    """Absolute change of the mean proxy loss caused by quantized inference."""
    cfg_w = QuantConfig(result.bits_w, "per_channel")
    cfg_a = QuantConfig(result.bits_a, "per_token")
    scales = scales_from_result(result)
    fp_total = q_total = 0.0
    for b in range(calib.batch):
        x = calib.activations[b]
        fp_total += loss_value(forward_fp(stack, x).output, loss)
        q_total += loss_value(forward_quant(stack, x, scales, cfg_w, cfg_a).output, loss)
    return abs(q_total - fp_total) / calib.batch


def accuracy_proxy_gap(
    stack: LayerStack, result: CalibrationResult, calib: CalibrationSet
) -> float:
    """Cross-entropy increase against the full-precision model's own argmax.

    Labeling every token with the unquantized output's argmax makes the gap
    behave like a task-accuracy degradation measure: confidently classified
    tokens dominate, and dead tokens (flat logits) contribute little.
    """
    cfg_w = QuantConfig(result.bits_w, "per_channel")
    cfg_a = QuantConfig(result.bits_a, "per_token")
    scales = scales_from_result(result)
    total = 0.0
    for b in range(calib.batch):
        x = calib.activations[b]
        y_fp = forward_fp(stack, x).output
        spec = ProxyLossSpec("ce_pseudo", np.argmax(y_fp, axis=1))
        y_q = forward_quant(stack, x, scales, cfg_w, cfg_a).output
        total += loss_value(y_q, spec) - loss_value(y_fp, spec)
    return abs(total) / calib.batch


# --- heatmap export -------------------------------------------------------------


@dataclass(frozen=True)
class HeatmapPair:
    channel_indices: tuple[int, ...]
    pre: list  # rows over the (subsampled) full token set
    post: list  # rows over the surviving selected tokens
    selection: SelectedTokens


def _stratified_tokens(
    candidates: np.ndarray, modality: np.ndarray, max_tokens: int | None, rng: Rng
) -> np.ndarray:
    """Deterministic modality-preserving token subsample of `candidates`."""
    if max_tokens is None or candidates.shape[0] <= max_tokens:
        return candidates
    visual = candidates[modality[candidates] == 1]
    text = candidates[modality[candidates] == 0]
    k_vis = round(max_tokens * visual.shape[0] / candidates.shape[0])
    k_vis = min(max(k_vis, max_tokens - text.shape[0]), visual.shape[0], max_tokens)
    k_text = max_tokens - k_vis
    gen = rng.generator()
    keep_vis = gen.choice(visual, size=k_vis, replace=False) if k_vis else np.array([], dtype=int)
    keep_text = gen.choice(text, size=k_text, replace=False) if k_text else np.array([], dtype=int)
    return np.sort(np.concatenate([keep_vis, keep_text]).astype(int))


def build_heatmaps(
    stack: LayerStack,
    calib: CalibrationSet,
    layer_index: int,
    *,
    fraction: float = 0.5,
    loss: ProxyLossSpec = ProxyLossSpec(),
    seed: int = 0,
    sample: int = 0,
    max_tokens: int | None = None,
    max_channels: int | None = None,
) -> HeatmapPair:
    """Token-gradient magnitudes for one layer, before and after selection.

    Selection aggregates gradients over the whole batch; the exported |g|
    values come from one sample. Token subsampling preserves the visual to
    text ratio and is deterministic under the seed.
    """
    if not 0 <= layer_index < len(stack.layers):
        raise ConfigError(f"layer index {layer_index} out of range (stack has {len(stack.layers)} layers)")
    if not 0 <= sample < calib.batch:
        raise ConfigError(f"sample {sample} out of range for batch {calib.batch}")
    n = calib.tokens
    sums = np.zeros(n)
    grads_sample = None
    for b in range(calib.batch):
        gt = backward_token_grads(stack, calib.activations[b], loss)
        sums += channel_mean_abs(gt.grads[layer_index])
        if b == sample:
            grads_sample = gt.grads[layer_index]
    selection = select_top_tokens(TokenImportance(sums, calib.batch, layer_index), fraction)

    modality = calib.modality[sample]
    rng = Rng(seed).split("heatmap")
    channels = np.arange(grads_sample.shape[1])
    if max_channels is not None and channels.shape[0] > max_channels:
        channels = np.sort(rng.split("channels").generator().choice(channels, size=max_channels, replace=False))
    pre_tokens = _stratified_tokens(np.arange(n), modality, max_tokens, rng.split("pre"))
    post_tokens = _stratified_tokens(
        np.asarray(selection.indices, dtype=int), modality, max_tokens, rng.split("post")
    )
    chan = tuple(int(c) for c in channels)
    pre = heatmap_rows(grads_sample, modality, pre_tokens, chan)
    post = heatmap_rows(grads_sample, modality, post_tokens, chan)
    return HeatmapPair(chan, pre, post, selection)


def heatmap_csv(rows: list, channel_indices: tuple[int, ...]) -> str:
    header = "token,modality,grad_sum," + ",".join(f"c{c}" for c in channel_indices)
    lines = [header]
    for token, modality, grad_sum, vals in rows:
        lines.append(f"{token},{modality},{repr(grad_sum)}," + ",".join(repr(v) for v in vals))
    return "\n".join(lines) + "\n"


def near_zero_fraction(rows: list, rel_threshold: float = 1e-6) -> float:
    """Share of exported tokens whose aggregated gradient is effectively zero."""
    if not rows:
        raise ShapeError("no heatmap rows")
    sums = np.array([r[2] for r in rows])
    return float(np.mean(sums < rel_threshold * sums.max()))


def parse_heatmap_csv(text: str) -> list:
    lines = [l for l in text.splitlines() if l]
    if not lines or not lines[0].startswith("token,modality,grad_sum"):
        raise CheckpointError("bad_magic", "not a heatmap CSV")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]), [float(v) for v in parts[3:]]))
    return rows
