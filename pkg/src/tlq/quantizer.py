"""Symmetric round-to-nearest quantization and rounding-error statistics.

A rank-2 tensor is quantized row by row: each row gets one positive scale
s = max(absmax(row) / (2^(n-1) - 1), scale_floor) and integer codes
q = round(row / s) with round-half-away-from-zero. Rows are tokens for
per-token activation quantization and output channels for per-channel
weight quantization; the granularity field only records which orientation
the caller intends.

The spacing between representable values of a row is exactly its scale s.
The closed-form step 2*max|x| / (2^n - 1) returned by `step_size` differs
from s by the factor (2^n - 2) / (2^n - 1); error-law checks therefore use
the actual per-row spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import reduce_absmax

DEFAULT_SCALE_FLOOR = 1e-12

GRANULARITIES = ("per_token", "per_channel")


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    granularity: str = "per_token"
    scale_floor: float = DEFAULT_SCALE_FLOOR

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be an integer in [2, 16], got {self.bits!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if not self.scale_floor > 0:
            raise ConfigError(f"scale_floor must be > 0, got {self.scale_floor!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))


@dataclass(frozen=True)
class QuantizedTensor:
    q: np.ndarray  # int32 codes, same shape as the source
    scales: np.ndarray  # one positive scale per row
    config: QuantConfig


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # numpy's round() is half-to-even; ties here must move away from zero.
    return np.copysign(np.floor(np.fabs(x) + 0.5), x)


def quantize(x: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
    """Row-wise symmetric quantization of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"quantize expects a rank-2 tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize input contains NaN or Inf")
    absmax = reduce_absmax(x, axis=1)
    scales = np.maximum(absmax / cfg.qmax, cfg.scale_floor)
    q = _round_half_away(x / scales[:, None])
    q = np.clip(q, cfg.qmin, cfg.qmax)
    return QuantizedTensor(q.astype(np.int32), scales, cfg)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct q * s; the result is within s/2 of the source elementwise."""
    if qt.q.ndim != 2 or qt.scales.shape != (qt.q.shape[0],):
        raise ShapeError(f"inconsistent quantized tensor: q {qt.q.shape}, scales {qt.scales.shape}")
    return qt.q * qt.scales[:, None]


def step_size(max_abs: float, bits: int, scale_floor: float = DEFAULT_SCALE_FLOOR) -> float:
    """Closed-form quantization step 2*max_abs / (2^bits - 1).

    A zero max_abs falls back to the floored scale, i.e. the value the step
    would take for a row whose scale was clamped to scale_floor.
    """
    if max_abs < 0:
        raise ConfigError(f"max_abs must be >= 0, got {max_abs}")
    if not 2 <= bits <= 16:
        raise ConfigError(f"bits must be in [2, 16], got {bits}")
    qmax = 2 ** (bits - 1) - 1
    effective = max(max_abs, scale_floor * qmax)
    return 2.0 * effective / (2**bits - 1)


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    variance: float
    predicted_variance: float


def rounding_error_stats(x: np.ndarray, cfg: QuantConfig) -> ErrorStats:
    """Measured quantize/dequantize error moments against the uniform-noise law.

    The predicted variance is pitch^2 / 12 averaged over rows, where pitch is
    each row's actual code spacing (its scale).
    """
    qt = quantize(x, cfg)
    e = dequantize(qt) - x
    predicted = float(np.mean(qt.scales**2) / 12.0)
    return ErrorStats(float(e.mean()), float(e.var()), predicted)
