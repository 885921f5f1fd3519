"""
Minimal pre-LN vision transformer with its attention internals exposed per layer.

Token layout inside a layer is [cls | prompts | images]: the class token at index 0, prompts
at 1..N, image tokens at N+1..N+M. Prompt slots carry no positional embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from promptvit.errors import DimensionError
from promptvit.functional import gelu, layer_norm, linear, softmax
from promptvit.schemas import ModelConfig
from promptvit.tensor import Tensor

LN_EPS = 1e-6


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ========== Parameters ==========

@dataclass
class LayerParams:
    """Weights of one transformer layer. Projections act on row vectors: y = x @ W + b."""
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, mlp_ratio: int) -> "LayerParams":
        hidden = dim * mlp_ratio
        return cls(
            w_q=Tensor(xavier_uniform(rng, dim, dim)),
            b_q=Tensor.zeros((dim,)),
            w_k=Tensor(xavier_uniform(rng, dim, dim)),
            b_k=Tensor.zeros((dim,)),
            w_v=Tensor(xavier_uniform(rng, dim, dim)),
            b_v=Tensor.zeros((dim,)),
            w_o=Tensor(xavier_uniform(rng, dim, dim)),
            b_o=Tensor.zeros((dim,)),
            w_fc1=Tensor(xavier_uniform(rng, dim, hidden)),
            b_fc1=Tensor.zeros((hidden,)),
            w_fc2=Tensor(xavier_uniform(rng, hidden, dim)),
            b_fc2=Tensor.zeros((dim,)),
            ln1_gain=Tensor.ones((dim,)),
            ln1_bias=Tensor.zeros((dim,)),
            ln2_gain=Tensor.ones((dim,)),
            ln2_bias=Tensor.zeros((dim,)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class EmbeddingParams:
    patch_weight: Tensor  # [patch_dim, D]
    patch_bias: Tensor  # [D]
    pos: Tensor  # [M, D], image tokens only
    cls: Tensor  # [1, D]
    norm_gain: Tensor  # final LayerNorm on the class token
    norm_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig) -> "EmbeddingParams":
        return cls(
            patch_weight=Tensor(xavier_uniform(rng, cfg.patch_dim, cfg.dim)),
            patch_bias=Tensor.zeros((cfg.dim,)),
            pos=Tensor(rng.normal(0.0, 0.02, size=(cfg.num_patches, cfg.dim))),
            cls=Tensor(rng.normal(0.0, 0.02, size=(1, cfg.dim))),
            norm_gain=Tensor.ones((cfg.dim,)),
            norm_bias=Tensor.zeros((cfg.dim,)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class HeadParams:
    """Linear task head; always trainable."""
    weight: Tensor  # [D, num_classes]
    bias: Tensor  # [num_classes]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, num_classes: int) -> "HeadParams":
        return cls(weight=Tensor(xavier_uniform(rng, dim, num_classes)), bias=Tensor.zeros((num_classes,)))

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


# ========== Token bookkeeping ==========

@dataclass
class TokenSequence:
    """[cls | prompts | images] for a batch; `prompts is None` marks an empty or stale block."""
    cls: Tensor  # [B, 1, D]
    images: Tensor  # [B, M, D]
    prompts: Optional[Tensor] = None  # [B, N, D]

    @property
    def batch(self) -> int:
        return self.cls.shape[0]

    @property
    def n_prompts(self) -> int:
        return 0 if self.prompts is None else self.prompts.shape[1]

    @property
    def n_images(self) -> int:
        return self.images.shape[1]

    @property
    def layout(self) -> list[str]:
        return ["cls"] + ["prompt"] * self.n_prompts + ["image"] * self.n_images

    def joined(self) -> Tensor:
        parts = [self.cls] if self.prompts is None else [self.cls, self.prompts]
        return Tensor.cat(parts + [self.images], axis=1)

    def with_prompts(self, prompts: Optional[Tensor]) -> "TokenSequence":
        return TokenSequence(cls=self.cls, images=self.images, prompts=prompts)

    def with_images(self, images: Tensor) -> "TokenSequence":
        return TokenSequence(cls=self.cls, images=images, prompts=self.prompts)

    @classmethod
    def split(cls, x: Tensor, n_prompts: int) -> "TokenSequence":
        total = x.shape[1]
        prompts = x.slice(1, 1, 1 + n_prompts) if n_prompts else None
        return cls(cls=x.slice(1, 0, 1), prompts=prompts, images=x.slice(1, 1 + n_prompts, total))


@dataclass
class AttentionRecord:
    """Per-layer attention internals for a batch, captured before the output projection."""
    layer: int
    n_prompts: int
    logits: np.ndarray  # [B, N_h, T, T], scaled q.k
    weights: np.ndarray  # [B, N_h, T, T], row-normalized
    cls_query: np.ndarray  # [B, N_h, d_h], class-token query per head
    image_saliency: np.ndarray = field(init=False)  # [B, M]

    def __post_init__(self):
        start = 1 + self.n_prompts
        self.image_saliency = self.weights[:, :, 0, start:].mean(axis=1)


@dataclass
class ExpressOffsets:
    """Additive prompt-slot offsets at the three insertion points of one layer."""
    pre_ln: Tensor  # [N, D]
    pre_qkv: Tensor
    post_msa: Tensor


# ========== Kernels ==========

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, M, patch*patch*C], patches in row-major grid order."""
    b, h, w, c = images.shape
    rows, cols = h // patch, w // patch
    x = images.reshape(b, rows, patch, cols, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, patch * patch * c)


def _add_to_prompts(x: Tensor, offset: Tensor, n_prompts: int) -> Tensor:
    seq = TokenSequence.split(x, n_prompts)
    return seq.with_prompts(seq.prompts + offset).joined()


def multi_head_attention(
    x: Tensor, layer: LayerParams, heads: int, n_prompts: int, layer_index: int
) -> tuple[Tensor, AttentionRecord]:
    """Self-attention over every slot; returns the concatenated head outputs and the record."""
    b, t, d = x.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split_heads(z: Tensor) -> Tensor:
        return z.reshape(b, t, heads, dh).permute(0, 2, 1, 3)

    q = split_heads(linear(x, layer.w_q, layer.b_q))
    k = split_heads(linear(x, layer.w_k, layer.b_k))
    v = split_heads(linear(x, layer.w_v, layer.b_v))

    logits = (q @ k.T) * scale
    weights = softmax(logits, axis=-1)
    out = (weights @ v).permute(0, 2, 1, 3).reshape(b, t, d)

    record = AttentionRecord(
        layer=layer_index,
        n_prompts=n_prompts,
        logits=logits.data.copy(),
        weights=weights.data.copy(),
        cls_query=q.data[:, :, 0, :].copy(),
    )
    return out, record


def transformer_block(
    x: Tensor,
    layer: LayerParams,
    heads: int,
    n_prompts: int,
    layer_index: int,
    offsets: Optional[ExpressOffsets] = None,
) -> tuple[Tensor, AttentionRecord]:
    """x + MSA(LN(x)), then + MLP(LN(.)), on the joined token block."""
    if offsets is not None:
        x = _add_to_prompts(x, offsets.pre_ln, n_prompts)
    h = layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)
    if offsets is not None:
        h = _add_to_prompts(h, offsets.pre_qkv, n_prompts)
    attended, record = multi_head_attention(h, layer, heads, n_prompts, layer_index)
    attended = linear(attended, layer.w_o, layer.b_o)
    if offsets is not None:
        attended = _add_to_prompts(attended, offsets.post_msa, n_prompts)
    x = x + attended

    h = layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)
    h = linear(gelu(linear(h, layer.w_fc1, layer.b_fc1)), layer.w_fc2, layer.b_fc2)
    return x + h, record


# ========== Backbone ==========

class Backbone:
    """Frozen stand-in for a pre-trained ViT, initialized deterministically from `cfg.seed`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embedding = EmbeddingParams.init(rng, cfg)
        self.layers = [LayerParams.init(rng, cfg.dim, cfg.mlp_ratio) for _ in range(cfg.layers)]

    def tensors(self) -> dict[str, Tensor]:
        named = {f"embed.{k}": v for k, v in self.embedding.tensors().items()}
        for i, layer in enumerate(self.layers):
            named.update({f"layers.{i}.{k}": v for k, v in layer.tensors().items()})
        return named

    def _as_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        expected = (*self.cfg.image_size, self.cfg.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"image shape {images.shape[1:]} does not match config {expected}")
        return images

    def embed(self, images: np.ndarray) -> TokenSequence:
        """Patch tokens plus positional embedding, class token prepended, no prompts."""
        images = self._as_batch(images)
        emb = self.embedding
        patches = Tensor(patchify(images, self.cfg.patch_size), copy=False)
        tokens = linear(patches, emb.patch_weight, emb.patch_bias) + emb.pos
        cls = emb.cls.expand(images.shape[0], 1, self.cfg.dim)
        return TokenSequence(cls=cls, images=tokens)

    def attention(self, seq: TokenSequence, layer_index: int) -> tuple[TokenSequence, AttentionRecord]:
        """Multi-head self-attention alone (no LN, no residual), projected by W_O."""
        layer = self.layers[layer_index]
        out, record = multi_head_attention(
            seq.joined(), layer, self.cfg.heads, seq.n_prompts, layer_index
        )
        out = linear(out, layer.w_o, layer.b_o)
        return TokenSequence.split(out, seq.n_prompts), record

    def forward_layer(
        self,
        seq: TokenSequence,
        layer_index: int,
        keep_prompt_outputs: bool,
        offsets: Optional[ExpressOffsets] = None,
    ) -> tuple[TokenSequence, AttentionRecord]:
        n_prompts = seq.n_prompts
        out, record = transformer_block(
            seq.joined(), self.layers[layer_index], self.cfg.heads, n_prompts, layer_index, offsets
        )
        result = TokenSequence.split(out, n_prompts)
        if not keep_prompt_outputs:
            result = result.with_prompts(None)
        return result, record

    def final_cls(self, seq: TokenSequence) -> Tensor:
        """Final LayerNorm of the class token, [B, D]."""
        cls = seq.cls.reshape(seq.batch, self.cfg.dim)
        return layer_norm(cls, self.embedding.norm_gain, self.embedding.norm_bias, LN_EPS)

    def forward_plain(self, images: np.ndarray) -> tuple[Tensor, list[AttentionRecord]]:
        """Prompt-free ViT: class-token features [B, D] and one record per layer."""
        seq = self.embed(images)
        x = Tensor.cat([seq.cls, seq.images], axis=1)
        records = []
        for i, layer in enumerate(self.layers):
            x, record = transformer_block(x, layer, self.cfg.heads, 0, i)
            records.append(record)
        return self.final_cls(TokenSequence.split(x, 0)), records

    def features(self, images: np.ndarray) -> np.ndarray:
        return self.forward_plain(images)[0].data


def head(cls_out: Tensor, params: HeadParams) -> Tensor:
    """Task logits [B, num_classes] from class-token features [B, D]; a single [D] vector gives [num_classes]."""
    if cls_out.shape[-1] != params.weight.shape[0]:
        raise DimensionError(f"head expects {params.weight.shape[0]} features, got {cls_out.shape}")
    if cls_out.ndim == 1:
        single = linear(cls_out.reshape(1, cls_out.shape[0]), params.weight, params.bias)
        return single.reshape(params.bias.shape[0])
    return linear(cls_out, params.weight, params.bias)
