from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator


class Strict(BaseModel):
    """Base for every config: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


# ===== Enums =====

class Structure(str, Enum):
    VPT_SHALLOW = "vpt-shallow"
    VPT_DEEP = "vpt-deep"
    PROVP = "provp"
    EXPRESS = "express"
    VANILLA_CDC = "vanilla-cdc"
    CDC = "cdc"

    @property
    def keeps_prompt_outputs(self) -> bool:
        """Output-preserving structures feed prompt-slot outputs into the next layer."""
        return self in (Structure.VPT_SHALLOW, Structure.PROVP, Structure.EXPRESS)


class ARMode(str, Enum):
    NONE = "none"
    ALL = "all"
    TOPK = "topk"


class GammaInit(str, Enum):
    IDENTITY = "identity"
    ZERO = "zero"
    UNIFORM = "uniform"


class Task(str, Enum):
    PATTERN = "pattern"
    COUNT = "count"


class NoiseModel(str, Enum):
    BLEND = "blend"
    ADDITIVE = "additive"


# ===== Model Schemas =====

class ModelConfig(Strict):
    """Backbone architecture. Defaults are the desk-scale configuration."""
    image_size: Tuple[int, int] = (16, 16)
    channels: int = Field(1, ge=1)
    patch_size: int = Field(4, ge=1)
    dim: int = Field(32, ge=1, description="token dim D")
    heads: int = Field(4, ge=1, description="head count N_h")
    layers: int = Field(4, ge=1, description="layer count L")
    mlp_ratio: int = Field(2, ge=1)
    num_classes: int = Field(4, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def check_divisibility(self):
        height, width = self.image_size
        if height % self.patch_size or width % self.patch_size:
            raise ValueError(f"image {height}x{width} is not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        return self

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        """M, the image-token count."""
        rows, cols = self.grid
        return rows * cols

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class PromptConfig(Strict):
    structure: Structure = Structure.CDC
    da: bool = False
    n_prompts: int = Field(4, ge=0, description="N")
    ar_mode: ARMode = ARMode.NONE
    ar_k: int = Field(2, ge=0, description="k, used when ar_mode is topk")
    ar_layers: Optional[List[int]] = None  # None = every layer
    gamma_init: GammaInit = GammaInit.IDENTITY


# ===== Training Schemas =====

class TrainConfig(Strict):
    epochs_total: int = Field(100, ge=0)
    warmup_epochs: int = Field(10, ge=0)
    base_lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_warmup(self):
        if self.epochs_total and self.warmup_epochs >= self.epochs_total:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be below epochs_total ({self.epochs_total})"
            )
        return self


class EpochMetrics(BaseModel):
    """One JSON line of the per-epoch stream."""
    epoch: int
    lr: float
    loss: float
    train_acc: float = Field(..., ge=0, le=1)
    eval_acc: float = Field(..., ge=0, le=1)


class RunMetrics(BaseModel):
    epochs: List[EpochMetrics] = []
    initial_eval_acc: float = Field(..., ge=0, le=1)
    final_top1: float = Field(..., ge=0, le=1)
    learnable_params: int
    wall_clock_seconds: float
    backbone_hash_before: str
    backbone_hash_after: str


# ===== Data Schemas =====

class NoiseSpec(Strict):
    rho: float = Field(0.0, ge=0, le=1, description="blend rate")
    sigma: float = Field(1.0, ge=0)
    seed: int = 0
    model: NoiseModel = NoiseModel.BLEND


class DatasetSpec(Strict):
    task: Task = Task.PATTERN
    n_train: int = Field(512, ge=0)
    n_eval: int = Field(256, ge=0)
    num_classes: int = Field(4, ge=2, le=8, description="pattern task classes")
    max_objects: int = Field(3, ge=1, le=6, description="count task: labels 0..max_objects")
    seed: int = 0
    manifest: Optional[str] = None  # raw dataset instead of a generator

    @property
    def label_count(self) -> int:
        return self.num_classes if self.task == Task.PATTERN else self.max_objects + 1


# ===== Experiment Schemas =====

class ExperimentConfig(Strict):
    model: ModelConfig = ModelConfig()
    prompts: PromptConfig = PromptConfig()
    train: TrainConfig = TrainConfig()
    data: DatasetSpec = DatasetSpec()
    noise: NoiseSpec = NoiseSpec()
    noise_train: bool = False
    noise_rhos: List[float] = [0.0, 0.2, 0.4, 0.6]
    noise_structures: List[Structure] = [Structure.CDC, Structure.EXPRESS]
    sweep_n_prompts: List[int] = [1, 2, 4, 8]
    sweep_ar_k: List[int] = [0, 1, 2, 4]
    verify_epochs: int = Field(20, ge=0)
    output_dir: str = "runs"
    seeds: List[int] = [0, 1, 2]

    @model_validator(mode="after")
    def check_consistency(self):
        if self.data.manifest is None and self.model.num_classes != self.data.label_count:
            raise ValueError(
                f"model.num_classes={self.model.num_classes} but the {self.data.task.value} task "
                f"has {self.data.label_count} labels"
            )
        if any(not 0.0 <= rho <= 1.0 for rho in self.noise_rhos):
            raise ValueError("noise_rhos must lie in [0, 1]")
        layers = self.prompts.ar_layers
        if layers is not None and any(not 0 <= l < self.model.layers for l in layers):
            raise ValueError(f"ar_layers {layers} outside [0, {self.model.layers})")
        if self.prompts.ar_mode == ARMode.TOPK and self.prompts.ar_k > self.model.num_patches:
            raise ValueError(f"ar_k={self.prompts.ar_k} exceeds M={self.model.num_patches}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self


# ===== Result Schemas =====

class ParamBreakdown(BaseModel):
    cdc: int
    da: int
    ar: int
    express: int = 0
    head: int
    total: int


class ResultRecord(BaseModel):
    config_hash: str
    label: str
    structure: Structure
    da: bool
    ar_mode: ARMode
    ar_k: int
    n_prompts: int
    seed: int
    final_top1: float
    params: ParamBreakdown
    metrics_path: str


class DecompositionReport(BaseModel):
    """Residuals of the exponential split for one (layer, head)."""
    kind: str  # "cdc" or "da"
    layer: int
    head: int
    residuals: List[float]
    reweighting: List[float]  # alpha_i (cdc) or prod_j alpha_ij (da)
    factors: Optional[List[List[float]]] = None  # da: the N x N per-pair factors
    proportionality_spread: float
    tolerance: float
    key_path: str = "bypass-ln"

    @computed_field
    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)

    @computed_field
    @property
    def passed(self) -> bool:
        return self.max_residual < self.tolerance and self.proportionality_spread < self.tolerance

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "layer": self.layer,
            "head": self.head,
            "max_residual": self.max_residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }
