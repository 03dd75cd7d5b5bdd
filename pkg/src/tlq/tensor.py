"""Dense numeric core shared by every other module.

Values are plain numpy ndarrays of rank 1 to 3, row major, float64 by
default (a global float32 mode exists for float-sensitivity experiments).
Functions here are pure: inputs are never mutated and results are freshly
allocated.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError

_MASK64 = (1 << 64) - 1

_default_dtype: np.dtype = np.dtype(np.float64)


def set_default_dtype(name: str) -> None:
    """Select the global creation precision: "float64" (default) or "float32"."""
    global _default_dtype
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported default dtype {name!r}")
    _default_dtype = np.dtype(name)


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    """Temporarily switch the global precision (used by float32-mode tests)."""
    old = _default_dtype.name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(old)


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Rng:
    """Deterministic counter-based (Philox) random source.

    The same (seed, stream) pair yields bit-identical draws across runs and
    platforms, and `split` derives statistically independent substreams from
    one seed, so fixture generators and workers can share a single user seed.
    """

    seed: int
    stream: int = 0

    def split(self, tag: int | str) -> "Rng":
        mixed = hashlib.blake2b(
            f"{self.stream}/{tag}".encode("utf-8"), digest_size=8
        ).digest()
        return Rng(self.seed, int.from_bytes(mixed, "little"))

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= 3:
        raise ShapeError(f"rank must be 1..3, got shape {shape}")
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in shape {shape}")
    return shape


def rand_uniform(
    rng: Rng, shape: Sequence[int], low: float = 0.0, high: float = 1.0
) -> np.ndarray:
    """Uniform(low, high) tensor, deterministic for a fixed (rng, shape)."""
    shape = _check_shape(shape)
    out = rng.generator().uniform(low, high, size=shape)
    return out.astype(_default_dtype, copy=False)


def rand_normal(
    rng: Rng, shape: Sequence[int], mean: float = 0.0, std: float = 1.0
) -> np.ndarray:
    """Normal(mean, std) tensor, deterministic for a fixed (rng, shape)."""
    shape = _check_shape(shape)
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    out = rng.generator().normal(mean, std, size=shape)
    return out.astype(_default_dtype, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 arrays with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 inputs, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def reduce_absmax(x: np.ndarray, axis: int) -> np.ndarray:
    """Per-slice maximum of |x| along `axis`; the reduced axis is dropped."""
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{x.ndim} tensor")
    if x.shape[axis] == 0:
        raise ShapeError(f"cannot reduce over empty axis {axis} of shape {x.shape}")
    return np.max(np.abs(x), axis=axis)
