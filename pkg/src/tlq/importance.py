"""First-order output-error analysis and gradient-guided token selection.

Token importance is the gradient magnitude of the proxy loss aggregated
over the calibration batch: sums[n] = sum_b mean_c |g[b, n, c]|. The top
fraction of tokens by this statistic forms the set whose per-channel
absolute maxima (x_stat) drive the smoothing-scale search; redundant
high-magnitude, near-zero-gradient tokens then stop biasing the scales.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import ceil
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .layers import LayerStack
from .model import (
    ForwardTrace,
    ProxyLossSpec,
    backward_token_grads,
    forward_fp,
    forward_fp_from,
    loss_value,
)
from .quantizer import QuantConfig, dequantize, quantize
from .smoothing import SmoothScale


@dataclass(frozen=True)
class TokenImportance:
    sums: np.ndarray  # (N,) nonnegative aggregated gradient magnitude
    batch: int
    layer: int


@dataclass(frozen=True)
class SelectedTokens:
    indices: tuple[int, ...]  # sorted ascending
    fraction: float


def first_order_output_error(g: np.ndarray, deltas: np.ndarray) -> float:
    """Linearized loss change sum_i g_i . delta_i for one layer's perturbation."""
    if g.shape != deltas.shape:
        raise ShapeError(f"gradient shape {g.shape} != perturbation shape {deltas.shape}")
    return float(np.sum(g * deltas))


def channel_mean_abs(g: np.ndarray) -> np.ndarray:
    """Per-token mean of |g| over the channel dimension."""
    if g.ndim != 2:
        raise ShapeError(f"expected (tokens, channels) gradients, got {g.shape}")
    return np.mean(np.abs(g), axis=1)


def token_importance_sums(
    grads: Iterable[np.ndarray], layer: int = 0
) -> TokenImportance:
    """Aggregate per-sample gradient magnitudes into one statistic per token."""
    total = None
    batch = 0
    for g in grads:
        contrib = channel_mean_abs(g)
        if total is None:
            total = contrib
        else:
            if contrib.shape != total.shape:
                raise ShapeError(f"inconsistent token count: {contrib.shape} vs {total.shape}")
            total = total + contrib
        batch += 1
    if total is None:
        raise ShapeError("token importance needs at least one gradient sample")
    return TokenImportance(total, batch, layer)


def select_top_tokens(imp: TokenImportance, fraction: float = 0.5) -> SelectedTokens:
    """Indices of the ceil(fraction*N) largest sums; ties go to the lower index."""
    if not 0.0 < fraction <= 1.0:
        raise ShapeError(f"fraction must be in (0, 1], got {fraction}")
    n = imp.sums.shape[0]
    k = ceil(fraction * n)
    if k < 2:
        warnings.warn(f"token selection kept only {k} of {n} tokens", stacklevel=2)
    # stable sort on the negated sums keeps lower indices first among ties
    order = np.argsort(-imp.sums, kind="stable")
    chosen = np.sort(order[:k])
    return SelectedTokens(tuple(int(i) for i in chosen), fraction)


def _pooled_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x
    if x.ndim == 3:
        return x.reshape(-1, x.shape[-1])
    raise ShapeError(f"expected rank-2 or rank-3 activations, got {x.shape}")


def x_stat_from_tokens(x: np.ndarray, sel: SelectedTokens) -> np.ndarray:
    """Per-channel absmax restricted to the selected token rows.

    Accepts (N, C) or (B, N, C); samples are pooled with an elementwise max
    so the resulting scale statistic covers the whole batch.
    """
    if len(sel.indices) == 0:
        raise ShapeError("empty token selection")
    idx = np.asarray(sel.indices)
    n = x.shape[-2]
    if idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"selection indices out of range for {n} tokens")
    rows = x[..., idx, :]
    return np.max(np.abs(_pooled_rows(rows)), axis=0)


def x_stat_baselines(x: np.ndarray, mode: str) -> np.ndarray:
    """Selection-free scale statistics: per-channel absmax or mean |x|."""
    rows = np.abs(_pooled_rows(x))
    if mode == "max":
        return np.max(rows, axis=0)
    if mode == "mean":
        return np.mean(rows, axis=0)
    raise ShapeError(f"stat mode must be 'mean' or 'max', got {mode!r}")


def activation_error_probe(
    stack: LayerStack,
    x: np.ndarray,
    layer_index: int,
    cfg_a: QuantConfig,
    scale: SmoothScale | None = None,
    loss: ProxyLossSpec = ProxyLossSpec(),
) -> tuple[float, float]:
    """Quantize one layer's input activation and compare loss-change estimates.

    Returns (first-order estimate, measured loss change) where the estimate
    is the gradient inner product with the effective input perturbation
    delta = (dequantize(quantize(x/s)) * s) - x and the measured value reruns
    the full-precision tail on the perturbed input.
    """
    trace: ForwardTrace = forward_fp(stack, x)
    if not 0 <= layer_index < len(stack.layers):
        raise ShapeError(f"layer index {layer_index} out of range")
    x_l = trace.inputs[layer_index]
    s = scale.values if scale is not None else np.ones(x_l.shape[1])
    delta = dequantize(quantize(x_l / s, cfg_a)) * s - x_l
    grads = backward_token_grads(stack, x, loss)
    estimate = first_order_output_error(grads.grads[layer_index], delta)
    y_pert = forward_fp_from(stack, layer_index, x_l + delta)
    measured = loss_value(y_pert, loss) - loss_value(trace.output, loss)
    return estimate, measured


def heatmap_rows(
    g: np.ndarray,
    modality: np.ndarray,
    token_indices: Sequence[int],
    channel_indices: Sequence[int],
) -> list[tuple[int, int, float, list[float]]]:
    """Rows (token, modality, row gradient magnitude, |g| at sampled channels)."""
    if g.ndim != 2 or modality.shape != (g.shape[0],):
        raise ShapeError(f"gradients {g.shape} and modality {modality.shape} do not align")
    sums = channel_mean_abs(g)
    out = []
    for t in token_indices:
        vals = [float(abs(g[t, c])) for c in channel_indices]
        out.append((int(t), int(modality[t]), float(sums[t]), vals))
    return out
