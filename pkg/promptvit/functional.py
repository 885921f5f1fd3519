"""
Fused differentiable kernels used by the transformer: softmax, layer normalization, GELU,
cross-entropy and the row scatter-add behind attentive reinforcement.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from promptvit.errors import ContractError, DimensionError
from promptvit.tensor import Function, Tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-6):
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise DimensionError(
                f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match token dim {x.shape[-1]}"
            )
        mu = np.mean(x, axis=-1, keepdims=True)
        centred = x - mu
        var = np.mean(centred * centred, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = centred * self.inv_std
        return self.xhat * gain + bias

    def backward(self, grad):
        _, gain, _ = self.tensors
        d = self.xhat.shape[-1]
        dxhat = grad * gain.data
        dx = self.inv_std / d * (
            d * dxhat
            - np.sum(dxhat, axis=-1, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        dgain = np.sum(grad * self.xhat, axis=lead)
        dbias = np.sum(grad, axis=lead)
        return dx, dgain, dbias


class Gelu(Function):
    """Exact GELU, 0.5·x·(1 + erf(x/√2))."""

    def forward(self, x):
        self.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, grad):
        (x,) = self.tensors
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (grad * (self.cdf + x.data * pdf),)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""

    def forward(self, logits, labels):
        if logits.ndim != 2:
            raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (logits.shape[0],):
            raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ContractError(f"label outside [0, {logits.shape[1]})")
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        self.labels = labels
        rows = np.arange(labels.shape[0])
        return -np.mean(log_probs[rows, labels])

    def backward(self, grad):
        batch = self.labels.shape[0]
        d = self.probs.copy()
        d[np.arange(batch), self.labels] -= 1.0
        return (d * (grad / batch),)


class IndexAdd(Function):
    """
    out = z with out[b, index[b, j]] += p[j] for every sample b.

    Each row of `index` must hold distinct token positions. The indices are data, not inputs of
    the graph, so no gradient flows through their selection.
    """

    def forward(self, z, p, index):
        index = np.asarray(index, dtype=np.int64)
        if z.ndim != 3 or p.ndim != 2 or p.shape[-1] != z.shape[-1]:
            raise DimensionError(f"index_add: z {z.shape} and prompts {p.shape} are incompatible")
        if index.shape != (z.shape[0], p.shape[0]):
            raise DimensionError(f"index_add: index {index.shape} does not pair {p.shape[0]} prompts per sample")
        if index.size and (index.min() < 0 or index.max() >= z.shape[1]):
            raise ContractError(f"index_add: token index outside [0, {z.shape[1]})")
        self.index = index
        self.rows = np.arange(z.shape[0])[:, None]
        out = z.copy()
        out[self.rows, index] += p[None, :, :]
        return out

    def backward(self, grad):
        return grad, grad[self.rows, self.index].sum(axis=0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return CrossEntropy.apply(logits, labels=labels)


def index_add(z: Tensor, p: Tensor, index) -> Tensor:
    return IndexAdd.apply(z, p, index=index)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias
