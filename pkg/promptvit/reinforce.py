"""
Attentive reinforcement: after layer l, the k image tokens the class token attends to most
receive learnable prompts, added in descending-salience order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptvit.errors import ContractError, DimensionError
from promptvit.functional import index_add
from promptvit.schemas import ARMode
from promptvit.tensor import Tensor


@dataclass
class SalienceSelection:
    layer: int
    omega: np.ndarray  # [B, k] image-token indices, most salient first
    weights_used: np.ndarray  # [B, M] head-mean class-row attention over image slots

    @property
    def k(self) -> int:
        return self.omega.shape[-1]


def topk_select(w: np.ndarray, k: int, layer: int = 0) -> SalienceSelection:
    """Indices of the k largest saliencies per sample, descending, ties to the lower index."""
    w = np.asarray(w, dtype=np.float64)
    batched = w if w.ndim == 2 else w[None, :]
    m = batched.shape[1]
    if not 0 <= k <= m:
        raise ContractError(f"top-k needs 0 <= k <= M, got k={k} for M={m}")
    order = np.argsort(-batched, axis=1, kind="mergesort")  # stable desc
    return SalienceSelection(layer=layer, omega=order[:, :k].copy(), weights_used=batched)


def reinforce(z_out: Tensor, sel: SalienceSelection, p_re: Tensor) -> Tensor:
    """Z̃ = Z with Z̃[b, Ω[b, j]] += P_re[j]; rows outside Ω are untouched."""
    if sel.k != p_re.shape[0]:
        raise DimensionError(f"{sel.k} selected tokens but {p_re.shape[0]} reinforcement prompts")
    if sel.k == 0:
        return z_out
    return index_add(z_out, p_re, sel.omega)


def apply_ar_mode(
    mode: ARMode, z_out: Tensor, saliency: np.ndarray, p_re: Tensor | None, layer: int
) -> tuple[Tensor, SalienceSelection | None]:
    """none: untouched; all: every image token, identity order; topk: salient tokens only."""
    if mode == ARMode.NONE or p_re is None or p_re.shape[0] == 0:
        return z_out, None
    if mode == ARMode.ALL:
        batch, m = saliency.shape
        if p_re.shape[0] != m:
            raise DimensionError(f"mode 'all' needs {m} prompts, got {p_re.shape[0]}")
        identity = np.broadcast_to(np.arange(m), (batch, m)).copy()
        sel = SalienceSelection(layer=layer, omega=identity, weights_used=saliency)
    else:
        sel = topk_select(saliency, p_re.shape[0], layer)
    return reinforce(z_out, sel, p_re), sel
