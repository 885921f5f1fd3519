"""
Central finite-difference check of analytic gradients.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from promptvit.tensor import Tape, Tensor

# Gradients smaller than this are compared in absolute rather than relative terms
MAGNITUDE_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """(f(x + h) - f(x - h)) / 2h per coordinate, restoring every coordinate afterwards."""
    grad = np.zeros(tensor.shape)
    for index in np.ndindex(*tensor.shape):
        original = tensor.data[index]
        tensor.data[index] = original + h
        plus = fn().item()
        tensor.data[index] = original - h
        minus = fn().item()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for tensor in tensors:
        tensor.grad = None
    Tape().backward(fn())
    # A tensor the loss does not reach has a zero gradient
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def gradcheck_report(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-5,
    floor: float = MAGNITUDE_FLOOR,
) -> dict[str, float]:
    """Max relative error per named tensor. `fn` must rebuild the graph on every call."""
    names = list(tensors)
    analytic = analytic_gradients(fn, [tensors[name] for name in names])
    report = {}
    for name, grad in zip(names, analytic):
        numeric = numeric_gradient(fn, tensors[name], h)
        errors = relative_error(grad, numeric, floor)
        report[name] = float(errors.max(initial=0.0))
    return report


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    floor: float = MAGNITUDE_FLOOR,
) -> float:
    """Max relative error between backward() and central differences over every coordinate."""
    if not isinstance(tensors, Mapping):
        tensors = {str(i): t for i, t in enumerate(tensors)}
    return max(gradcheck_report(fn, tensors, h, floor).values(), default=0.0)
