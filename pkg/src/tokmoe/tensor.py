"""Dense float64 kernels with explicit forward/backward pairs.

The tensor carrier is a plain ``numpy.ndarray`` with ``dtype=float64`` in
C (row-major) order: its ``shape`` plus the flat ``ravel()`` view are the
canonical (shape, values) representation that the checkpoint format
serializes. Arrays returned by an operation are treated as immutable;
gradients accumulate additively into ``ParamSlot.grad`` and are zeroed
explicitly by the training loop (single writer).

Each forward function has a paired ``*_backward`` that maps the upstream
gradient to input gradients. There is no graph or tape; callers compose
the backward calls in reverse order themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

Array = np.ndarray

# Probabilities are floored at this value before any log() so that
# cross-entropy on a near-zero probability stays finite.
PROB_FLOOR = 1e-12


def tensor(values) -> Array:
    """Build a float64 row-major array from nested lists or another array."""
    return np.array(values, dtype=np.float64, order="C")


def zeros(*shape: int) -> Array:
    return np.zeros(shape, dtype=np.float64)


def check_finite(arr: Array, what: str = "tensor") -> Array:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains NaN or Inf")
    return arr


@dataclass
class ParamSlot:
    """A named learnable tensor paired with its same-shape gradient buffer."""

    name: str
    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(
                f"slot {self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def matmul(a: Array, b: Array) -> Array:
    """Matrix product; 1-D operands act as a single row (left) or column (right)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects rank 1 or 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return a @ b


def matmul_backward(grad: Array, a: Array, b: Array) -> tuple[Array, Array]:
    """Given upstream gradient G of a@b, return (G b^T, a^T G)."""
    if a.ndim == 2 and b.ndim == 2:
        return grad @ b.T, a.T @ grad
    if a.ndim == 1 and b.ndim == 2:  # (s,) @ (s,t) -> (t,)
        return grad @ b.T, np.outer(a, grad)
    if a.ndim == 2 and b.ndim == 1:  # (r,s) @ (s,) -> (r,)
        return np.outer(grad, b), a.T @ grad
    raise ShapeError(f"unsupported matmul operand ranks: {a.shape} and {b.shape}")


def softmax(x: Array) -> Array:
    """Numerically stable softmax of a vector (max is always subtracted first)."""
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"softmax expects a nonempty vector, got shape {x.shape}")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_backward(grad: Array, out: Array) -> Array:
    """Backward through softmax given its output ``out``: y * (g - g.y)."""
    return out * (grad - np.dot(grad, out))


def concat(parts: list[Array]) -> Array:
    """Concatenate vectors in order (at least one part)."""
    if not parts:
        raise DomainError("concat of zero parts")
    return np.concatenate(parts)


def concat_backward(grad: Array, lengths: list[int]) -> list[Array]:
    """Split the upstream gradient back into per-part pieces by offsets."""
    out: list[Array] = []
    offset = 0
    for n in lengths:
        out.append(grad[offset:offset + n])
        offset += n
    return out


def tanh(x: Array) -> Array:
    return np.tanh(x)


def tanh_backward(grad: Array, out: Array) -> Array:
    return grad * (1.0 - out * out)


def sigmoid(x: Array) -> Array:
    # Inputs are clamped to +-500 so exp() cannot overflow; the result is
    # already saturated to 0/1 far inside that range in float64.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def sigmoid_backward(grad: Array, out: Array) -> Array:
    return grad * out * (1.0 - out)


def _check_same_shape(a: Array, b: Array, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Array, b: Array) -> Array:
    _check_same_shape(a, b, "add")
    return a + b


def add_backward(grad: Array) -> tuple[Array, Array]:
    return grad, grad


def mul(a: Array, b: Array) -> Array:
    _check_same_shape(a, b, "mul")
    return a * b


def mul_backward(grad: Array, a: Array, b: Array) -> tuple[Array, Array]:
    return grad * b, grad * a


def safe_log(p: Array | float) -> Array | float:
    """log with the probability floor applied; never returns -inf."""
    return np.log(np.maximum(p, PROB_FLOOR))
