"""Dense float64 arrays and a reproducible counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order; images use ``[channels, height, width]``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError

RNG_NAME = "numpy-philox4x64"
_MAX_ELEMENTS = np.iinfo(np.intp).max


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator; equal seeds give equal streams on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every dimension must be >= 1, got {list(dims)}")
    if math.prod(dims) > _MAX_ELEMENTS:
        raise ShapeError(f"shape {list(dims)} overflows the index range")
    return dims


def tensor_filled(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(check_shape(shape), float(value), dtype=np.float64)


def tensor_gaussian(shape: Sequence[int], std: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. draws from N(0, std^2)."""
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=check_shape(shape))


def squared_l2(t: np.ndarray) -> float:
    flat = np.ravel(t)
    return float(np.dot(flat, flat))


def add_scaled(acc: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    """Return ``acc + alpha * x`` as a new array."""
    if acc.shape != x.shape:
        raise ShapeError(f"shape mismatch: {list(acc.shape)} vs {list(x.shape)}")
    return acc + alpha * x


def add_scaled_(acc: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    """In-place accumulation variant of :func:`add_scaled`."""
    if acc.shape != x.shape:
        raise ShapeError(f"shape mismatch: {list(acc.shape)} vs {list(x.shape)}")
    acc += alpha * x
    return acc
