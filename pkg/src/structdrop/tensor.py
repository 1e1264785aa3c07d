"""Dense float64 array helpers and seeded sampling.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. The
helpers here add the shape and domain checks the rest of the package
relies on; everything else is ordinary numpy.

Random streams use ``numpy.random.Generator`` over ``PCG64``. Gaussian
draws go through numpy's ziggurat sampler (``Generator.standard_normal``),
which is the one fixed transform used everywhere in the package.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise :class:`NonFiniteError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    """Derive an independent stream; consumes exactly one draw from ``rng``."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def sample_standard_normal(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(size=tuple(shape), dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def broadcast_shape(*shapes) -> tuple:
    """Numpy broadcasting: shapes are aligned on their trailing dimensions."""
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _binary(op, a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    broadcast_shape(a.shape, b.shape)
    return op(a, b)


def add(a, b):
    return _binary(np.add, a, b)


def sub(a, b):
    return _binary(np.subtract, a, b)


def mul(a, b):
    return _binary(np.multiply, a, b)


def div(a, b):
    b = np.asarray(b, dtype=DTYPE)
    if np.any(b == 0):
        raise DomainError("division by zero")
    return _binary(np.divide, a, b)


def exp(x):
    return np.exp(np.asarray(x, dtype=DTYPE))


def log(x):
    x = np.asarray(x, dtype=DTYPE)
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(x)


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)
