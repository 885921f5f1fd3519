"""
Attention re-weighting checks.

With CDC the key of prompt i at layer l is built from p^l_i + p^{l-1}_i, so its unnormalized
attention weight splits into exp(q.W_K p^l_i / s) times a re-weighting factor
alpha_i = exp(q.W_K p^{l-1}_i / s). With dynamic aggregation the factor becomes
prod_j exp(gamma_ij q.W_K p^{l-1}_j / s). Both splits are checked on raw exponentials, with
keys taken straight through W_K (no LayerNorm, no key bias) unless the LN path is requested.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from promptvit.errors import ConfigError, NumericOverflowError
from promptvit.logger import logger
from promptvit.model import PromptedViT
from promptvit.prompts import AGGREGATING
from promptvit.schemas import DecompositionReport, Structure
from promptvit.vit import LN_EPS, LayerParams

TOLERANCE = 1e-10
LOGIT_GUARD = 300.0
BYPASS_LN = "bypass-ln"
LN_PATH = "ln"


def _guard(logits: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(logits)) or np.max(np.abs(logits), initial=0.0) > LOGIT_GUARD:
        raise NumericOverflowError(f"{what} logits exceed |{LOGIT_GUARD}|", max_abs=float(np.max(np.abs(logits))))
    return logits


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * gain + bias


class KeyPath:
    """Maps raw prompt vectors [N, D] to per-head keys [N, d_h]."""

    def __init__(self, w_k: np.ndarray, ln: Optional[tuple[np.ndarray, np.ndarray]] = None, b_k: Optional[np.ndarray] = None):
        self.w_k = np.asarray(w_k, dtype=np.float64)
        self.ln = ln
        self.b_k = b_k

    @property
    def name(self) -> str:
        return BYPASS_LN if self.ln is None else LN_PATH

    def __call__(self, p: np.ndarray) -> np.ndarray:
        x = np.asarray(p, dtype=np.float64)
        if self.ln is not None:
            x = _layer_norm(x, *self.ln)
        keys = x @ self.w_k
        return keys if self.b_k is None else keys + self.b_k


def _as_path(w_k) -> KeyPath:
    return w_k if isinstance(w_k, KeyPath) else KeyPath(w_k)


def _relative_residuals(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.abs(lhs - rhs) / np.abs(lhs)


def _proportionality_spread(
    composite: np.ndarray, plain: np.ndarray, reweighting: np.ndarray, context: Optional[np.ndarray]
) -> float:
    """Max relative deviation across prompts of w~_i / (w_i * alpha_i), both rows softmax-normalized."""
    context = np.zeros(0) if context is None else np.exp(_guard(np.asarray(context, dtype=np.float64), "context"))
    w_tilde = composite / (composite.sum() + context.sum())
    w = plain / (plain.sum() + context.sum())
    ratio = w_tilde / (w * reweighting)
    centre = ratio.mean()
    return float(np.max(np.abs(ratio - centre)) / centre) if ratio.size else 0.0


def verify_cdc_decomposition(
    q: np.ndarray,
    w_k,
    p_l: np.ndarray,
    p_prev: np.ndarray,
    scale: float,
    layer: int = 0,
    head: int = 0,
    tolerance: float = TOLERANCE,
    context: Optional[np.ndarray] = None,
) -> DecompositionReport:
    """
    exp(q.K(p_l + p_prev) / s) == exp(q.K p_l / s) * exp(q.K p_prev / s) for every prompt.

    `scale` is the divisor s = sqrt(d_h); `w_k` is the head's [D, d_h] key projection or a
    KeyPath; `context` holds the raw logits of the non-prompt slots sharing the denominator.
    """
    path = _as_path(w_k)
    q = np.asarray(q, dtype=np.float64)
    joint = _guard(path(np.asarray(p_l) + np.asarray(p_prev)) @ q / scale, "composite")
    own = _guard(path(p_l) @ q / scale, "current-layer")
    carried = _guard(path(p_prev) @ q / scale, "previous-layer")

    lhs = np.exp(joint)
    alpha = np.exp(carried)
    rhs = np.exp(own) * alpha
    return DecompositionReport(
        kind="cdc",
        layer=layer,
        head=head,
        residuals=_relative_residuals(lhs, rhs).tolist(),
        reweighting=alpha.tolist(),
        proportionality_spread=_proportionality_spread(lhs, np.exp(own), alpha, context),
        tolerance=tolerance,
        key_path=path.name,
    )


def verify_da_decomposition(
    q: np.ndarray,
    w_k,
    p_l: np.ndarray,
    p_prev: np.ndarray,
    gamma: np.ndarray,
    scale: float,
    layer: int = 0,
    head: int = 0,
    tolerance: float = TOLERANCE,
    context: Optional[np.ndarray] = None,
) -> DecompositionReport:
    """exp(q.K(p_l[i] + sum_j gamma_ij p_prev[j]) / s) == exp(q.K p_l[i] / s) * prod_j exp(gamma_ij q.K p_prev[j] / s)."""
    path = _as_path(w_k)
    q = np.asarray(q, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    aggregated = np.asarray(p_l) + gamma @ np.asarray(p_prev)
    joint = _guard(path(aggregated) @ q / scale, "composite")
    own = _guard(path(p_l) @ q / scale, "current-layer")
    carried = _guard(path(p_prev) @ q / scale, "previous-layer")

    factors = np.exp(gamma * carried[None, :])  # [N, N]
    reweighting = np.prod(factors, axis=1)
    lhs = np.exp(joint)
    rhs = np.exp(own) * reweighting
    return DecompositionReport(
        kind="da",
        layer=layer,
        head=head,
        residuals=_relative_residuals(lhs, rhs).tolist(),
        reweighting=reweighting.tolist(),
        factors=factors.tolist(),
        proportionality_spread=_proportionality_spread(lhs, np.exp(own), reweighting, context),
        tolerance=tolerance,
        key_path=path.name,
    )


def _carried_term(model: PromptedViT, layer: int, states) -> np.ndarray:
    """The previous-layer prompt block that the composition of `layer` adds to P^l (sample 0)."""
    structure = model.bank.structure
    if structure == Structure.CDC:
        return model.bank.P[layer - 1].data
    if structure == Structure.VANILLA_CDC:
        return states[layer - 1].prev_input.data
    return states[layer - 1].prev_output.data[0]  # PROVP


def verify_model(
    model: PromptedViT,
    image: np.ndarray,
    tolerance: float = TOLERANCE,
    key_path: str = BYPASS_LN,
) -> list[DecompositionReport]:
    """Decomposition check on every layer >= 1 and every head, with queries from a forward pass on one image."""
    cfg, bank = model.model_cfg, model.bank
    if bank.structure not in AGGREGATING:
        raise ConfigError(f"structure {bank.structure.value} has no cross-layer prompt term to decompose")
    if bank.n_prompts == 0 or cfg.layers < 2:
        raise ConfigError("decomposition needs prompts and at least two layers")

    image = np.asarray(image, dtype=np.float64)
    result = model.forward(image[None] if image.ndim == 3 else image[:1])
    dh = cfg.head_dim
    scale = np.sqrt(dh)
    n = bank.n_prompts
    reports = []
    for l in range(1, cfg.layers):
        record = result.records[l]
        layer: LayerParams = model.backbone.layers[l]
        p_l = bank.P[l].data
        p_prev = _carried_term(model, l, result.states)
        non_prompt = np.r_[0, np.arange(1 + n, record.logits.shape[-1])]
        for h in range(cfg.heads):
            cols = slice(h * dh, (h + 1) * dh)
            if key_path == LN_PATH:
                path = KeyPath(layer.w_k.data[:, cols], (layer.ln1_gain.data, layer.ln1_bias.data), layer.b_k.data[cols])
            else:
                path = KeyPath(layer.w_k.data[:, cols])
            q = record.cls_query[0, h]
            context = record.logits[0, h, 0, non_prompt]
            if bank.da_enabled:
                report = verify_da_decomposition(
                    q, path, p_l, p_prev, bank.gamma[l - 1].data, scale, l, h, tolerance, context
                )
            else:
                report = verify_cdc_decomposition(q, path, p_l, p_prev, scale, l, h, tolerance, context)
            reports.append(report)

    failed = [r for r in reports if not r.passed]
    logger.info(
        "decomposition_checked",
        structure=bank.structure.value,
        key_path=key_path,
        checks=len(reports),
        failed=len(failed),
        max_residual=max((r.max_residual for r in reports), default=0.0),
    )
    return reports


# ========== Attention export ==========

def export_attention(model: PromptedViT, image: np.ndarray) -> pd.DataFrame:
    """One row per layer: the head-mean class-row weights over image slots, in patch-grid row-major order."""
    image = np.asarray(image, dtype=np.float64)
    result = model.forward(image[None] if image.ndim == 3 else image[:1])
    m = model.model_cfg.num_patches
    rows = [[record.layer, *record.image_saliency[0]] for record in result.records]
    frame = pd.DataFrame(rows, columns=["layer"] + [f"slot_{i}" for i in range(m)])
    frame["layer"] = frame["layer"].astype(int)
    return frame


def write_attention_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
