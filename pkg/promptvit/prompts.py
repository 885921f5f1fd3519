"""
Prompt structures: how the prompt block entering layer l is built.

    VPT_DEEP     P̂^l = P^l
    VPT_SHALLOW  P̂^0 = P^0, later layers reuse the retained prompt outputs of layer l-1
    CDC          P̂^l = P^l + ψ(P^{l-1}),  ψ = identity, or γ^{l-1} @ · with dynamic aggregation
    VANILLA_CDC  P̂^l = P^l + ψ(P̂^{l-1})   (running sum of every earlier P^i)
    PROVP        P̂^l = P^l + ψ(T^{l-1}(P̂^{l-1})), the retained prompt outputs of layer l-1
    EXPRESS      retained prompt outputs, plus additive offsets inside each layer

For every structure P̂^0 = P^0. Dynamic aggregation only has an effect on the structures
with a cross-layer term (CDC, VANILLA_CDC, PROVP); elsewhere it is dropped and no γ exists.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from promptvit.errors import ContractError, DimensionError
from promptvit.schemas import ARMode, GammaInit, ModelConfig, ParamBreakdown, PromptConfig, Structure
from promptvit.tensor import Matmul, Tensor
from promptvit.vit import ExpressOffsets

AGGREGATING = (Structure.CDC, Structure.VANILLA_CDC, Structure.PROVP)
SINGLE_PROMPT = (Structure.VPT_SHALLOW, Structure.EXPRESS)


@dataclass
class PromptState:
    """What the previous layer leaves behind for the next composition."""
    layer: int = -1
    prev_input: Optional[Tensor] = None  # P̂^{l-1}, [N, D] or [B, N, D]
    prev_output: Optional[Tensor] = None  # T^{l-1}(P̂^{l-1}), [B, N, D]; None when discarded


def effective_da(prompts: PromptConfig) -> bool:
    return prompts.da and prompts.structure in AGGREGATING and prompts.n_prompts > 0


def effective_ar_k(model: ModelConfig, prompts: PromptConfig) -> int:
    if prompts.ar_mode == ARMode.NONE:
        return 0
    if prompts.ar_mode == ARMode.ALL:
        return model.num_patches
    return prompts.ar_k


def ar_layers(model: ModelConfig, prompts: PromptConfig) -> list[int]:
    if effective_ar_k(model, prompts) == 0:
        return []
    chosen = range(model.layers) if prompts.ar_layers is None else prompts.ar_layers
    return sorted(set(chosen))


def count_learnable_params(model: ModelConfig, prompts: PromptConfig) -> ParamBreakdown:
    """Closed-form count of the trainable scalars a PromptBank plus task head hold."""
    n, d, layers = prompts.n_prompts, model.dim, model.layers
    cdc = n * d if prompts.structure in SINGLE_PROMPT else layers * n * d
    da = (layers - 1) * n * n if effective_da(prompts) else 0
    ar = len(ar_layers(model, prompts)) * effective_ar_k(model, prompts) * d
    express = 3 * layers * n * d if prompts.structure == Structure.EXPRESS else 0
    head = (d + 1) * model.num_classes
    return ParamBreakdown(cdc=cdc, da=da, ar=ar, express=express, head=head, total=cdc + da + ar + express + head)


def da_aggregate(p_prev: Tensor, gamma: Tensor) -> Tensor:
    """ψ(P) = γ @ P: row i is Σ_j γ[i, j]·P[j]. P may carry a leading batch axis."""
    n = p_prev.shape[-2]
    if gamma.shape != (n, n):
        raise DimensionError(f"da_aggregate: gamma {gamma.shape} does not match {n} prompts of {p_prev.shape}")
    return Matmul.apply(gamma, p_prev)


class PromptBank:
    """All learnable adaptation state: P^l, γ^{l-1}, P^l_re and the EXPRESS offsets."""

    def __init__(self, model: ModelConfig, prompts: PromptConfig, rng: np.random.Generator):
        self.model = model
        self.config = prompts
        self.structure = prompts.structure
        self.n_prompts = prompts.n_prompts
        self.layers = model.layers
        self.da_enabled = effective_da(prompts)
        self.ar_mode = prompts.ar_mode
        self.k = effective_ar_k(model, prompts)
        self.ar_layers = ar_layers(model, prompts)

        n, d = self.n_prompts, model.dim
        bound = np.sqrt(6.0 / (d + d))
        per_layer = 1 if self.structure in SINGLE_PROMPT else self.layers
        self.P = [Tensor(rng.uniform(-bound, bound, size=(n, d))) for _ in range(per_layer)] if n else []

        self.gamma: list[Tensor] = []
        if self.da_enabled:
            self.gamma = [Tensor(self._init_gamma(prompts.gamma_init, n, rng)) for _ in range(self.layers - 1)]

        # Reinforcement prompts start at zero: AR begins as the identity on image tokens
        self.P_re: dict[int, Tensor] = {l: Tensor.zeros((self.k, d)) for l in self.ar_layers}

        self.express: list[ExpressOffsets] = []
        if self.structure == Structure.EXPRESS and n:
            self.express = [
                ExpressOffsets(pre_ln=Tensor.zeros((n, d)), pre_qkv=Tensor.zeros((n, d)), post_msa=Tensor.zeros((n, d)))
                for _ in range(self.layers)
            ]

    @staticmethod
    def _init_gamma(kind: GammaInit, n: int, rng: np.random.Generator) -> np.ndarray:
        if kind == GammaInit.IDENTITY:
            return np.eye(n)
        if kind == GammaInit.ZERO:
            return np.zeros((n, n))
        return np.eye(n) + rng.uniform(-1.0 / n, 1.0 / n, size=(n, n))

    def tensors(self) -> dict[str, Tensor]:
        named = {f"prompts.P.{l}": p for l, p in enumerate(self.P)}
        named.update({f"prompts.gamma.{l}": g for l, g in enumerate(self.gamma)})
        named.update({f"prompts.P_re.{l}": p for l, p in self.P_re.items()})
        for l, off in enumerate(self.express):
            named.update({f"prompts.express.{l}.{k}": v for k, v in vars(off).items()})
        return named

    def breakdown(self) -> ParamBreakdown:
        return count_learnable_params(self.model, self.config)

    def offsets(self, layer: int) -> Optional[ExpressOffsets]:
        return self.express[layer] if self.express else None

    def _psi(self, layer: int, carried: Tensor) -> Tensor:
        """Aggregation of the carried term entering `layer`."""
        return da_aggregate(carried, self.gamma[layer - 1]) if self.da_enabled else carried


def compose_input_prompts(bank: PromptBank, layer: int, prev_state: PromptState) -> Tensor:
    """P̂^l for `layer`, given the previous layer's state."""
    if not 0 <= layer < bank.layers:
        raise ContractError(f"layer {layer} outside [0, {bank.layers})")
    if bank.n_prompts == 0:
        raise ContractError("the bank holds no prompts")
    if layer == 0:
        return bank.P[0]

    if prev_state.layer != layer - 1:
        raise ContractError(f"composing layer {layer} from the state of layer {prev_state.layer}")

    structure = bank.structure
    if structure == Structure.VPT_DEEP:
        return bank.P[layer]
    if structure == Structure.CDC:
        return bank.P[layer] + bank._psi(layer, bank.P[layer - 1])
    if structure == Structure.VANILLA_CDC:
        if prev_state.prev_input is None:
            raise ContractError("vanilla-cdc needs the previous input prompts")
        return bank.P[layer] + bank._psi(layer, prev_state.prev_input)

    if prev_state.prev_output is None:
        raise ContractError(f"{structure.value} needs the retained prompt outputs of layer {layer - 1}")
    if structure == Structure.PROVP:
        return bank.P[layer] + bank._psi(layer, prev_state.prev_output)
    return prev_state.prev_output  # VPT_SHALLOW and EXPRESS
