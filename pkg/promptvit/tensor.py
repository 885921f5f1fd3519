"""
Dense float64 tensors with reverse-mode differentiation.

A `Tensor` wraps a numpy array. Operations are `Function` subclasses: `apply` runs the
forward kernel on the raw arrays and, when any input participates in differentiation, keeps a
reference to the function so `Tape.backward` can walk the graph in reverse topological order.
Frozen leaves (``requires_grad=False``) never enter the graph, so they never receive gradients.
"""
from __future__ import annotations

from typing import Any, Optional, Sequence

import numpy as np

from promptvit.errors import ContractError, DimensionError, NumericOverflowError

DTYPE = np.float64


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the numpy arrays of the input tensors; `backward` receives dLoss/dOut and
    returns one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        out = np.asarray(out, dtype=DTYPE)
        if not np.isfinite(out).all():
            raise NumericOverflowError(
                f"{cls.__name__} produced a non-finite value",
                op=cls.__name__,
                shapes=[t.shape for t in tensors],
            )
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None, copy=False)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
        """Sum a broadcast gradient back down to `to_shape` (leading axes and size-1 axes)."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """Row-major float64 array with an optional gradient buffer of the same shape."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        self.data = np.array(data, dtype=DTYPE) if copy else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = creator
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # ----- shape / data helpers -----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    @staticmethod
    def zeros(shape: Sequence[int], **kwargs) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=DTYPE), copy=False, **kwargs)

    @staticmethod
    def ones(shape: Sequence[int], **kwargs) -> "Tensor":
        return Tensor(np.ones(tuple(shape), dtype=DTYPE), copy=False, **kwargs)

    @staticmethod
    def _lift(other: Any) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    # ----- arithmetic -----

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, self._lift(other))

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __truediv__(self, other: float) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("division is only defined by a scalar constant")
        return Scale.apply(self, factor=1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return Matmul.apply(self, self._lift(other))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def sum(self, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    # ----- shape ops -----

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def expand(self, *shape: int) -> "Tensor":
        return Expand.apply(self, shape=shape)

    def permute(self, *axes: int) -> "Tensor":
        return Permute.apply(self, axes=axes)

    @property
    def T(self) -> "Tensor":
        """Swap the last two axes."""
        return Transpose.apply(self)

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        return Slice.apply(self, axis=axis, start=start, stop=stop)

    @staticmethod
    def cat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        return Cat.apply(*tensors, axis=axis)


# ========== Elementwise ==========

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        return a + b

    def backward(self, grad):
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        return a - b

    def backward(self, grad):
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        return a * b

    def backward(self, grad):
        a, b = self.tensors
        return (
            self.unbroadcast(grad * b.data, a.shape),
            self.unbroadcast(grad * a.data, b.shape),
        )


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Exp(Function):
    def forward(self, a):
        with np.errstate(over="ignore"):
            self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


# ========== Linear algebra ==========

class Matmul(Function):
    """[..., m, k] @ [k, n] or [..., m, k] @ [..., k, n]."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.tensors
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return self.unbroadcast(grad_a, a.shape), self.unbroadcast(grad_b, b.shape)


class Transpose(Function):
    def forward(self, a):
        if a.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {a.shape}")
        return np.swapaxes(a, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


# ========== Reductions ==========

class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (a,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        (a,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, a.shape).copy(),)


# ========== Shape ops ==========

class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def backward(self, grad):
        (a,) = self.tensors
        return (grad.reshape(a.shape),)


class Expand(Function):
    """Broadcast over new leading axes (or size-1 axes)."""

    def forward(self, a, shape):
        try:
            return np.broadcast_to(a, tuple(shape)).copy()
        except ValueError as exc:
            raise DimensionError(f"expand: cannot broadcast {a.shape} to {tuple(shape)}") from exc

    def backward(self, grad):
        (a,) = self.tensors
        return (self.unbroadcast(grad, a.shape),)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Cat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(
                f"cat: shapes {[arr.shape for arr in arrays]} disagree off axis {axis}"
            ) from exc

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Slice(Function):
    def forward(self, a, axis, start, stop):
        if not 0 <= start <= stop <= a.shape[axis]:
            raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
        self.index = [slice(None)] * a.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return a[self.index]

    def backward(self, grad):
        (a,) = self.tensors
        full = np.zeros(a.shape, dtype=DTYPE)
        full[self.index] = grad
        return (full,)


# ========== Tape ==========

class Tape:
    """
    Parameter registry plus reverse-mode traversal.

    Leaves are registered by name with a trainable flag; `backward` records the node order it
    visited in `nodes` (reverse topological order, each node once).
    """

    def __init__(self):
        self.parameters: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []

    def register(self, name: str, tensor: Tensor, trainable: bool) -> Tensor:
        if name in self.parameters:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor.name = name
        tensor.requires_grad = trainable
        if not trainable:
            tensor.grad = None
        self.parameters[name] = tensor
        return tensor

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.parameters.items() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.parameters.items() if not t.requires_grad}

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def zero_grad(self) -> None:
        for tensor in self.trainable().values():
            tensor.grad = None

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any trainable tensor")

        # Post-order traversal; reversed, it is a reverse topological order
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self.nodes = list(reversed(order))
        pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}

        for node in self.nodes:
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.tensors, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill `.grad` of every trainable leaf reachable from `loss`."""
    tape.backward(loss)
