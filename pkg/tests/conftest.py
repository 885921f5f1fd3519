"""
Conftest.py - shared fixtures for the promptvit tests.

Fixtures = reusable test inputs (tiny model configs, built models, small datasets, temp dirs).
Everything here is seeded, so every test sees the same numbers on every run.
"""
import numpy as np
import pytest

from promptvit.config import settings
from promptvit.data import gen_pattern_task, stack
from promptvit.model import PromptedViT
from promptvit.schemas import ARMode, ExperimentConfig, ModelConfig, PromptConfig, Structure, TrainConfig


# ========== FIXTURE 1: Keep logs off disk ==========
@pytest.fixture(autouse=True)
def no_log_files(monkeypatch, tmp_path):
    """
    The CLI configures logging on start-up; point it at a temporary directory
    and keep it from writing files at all.

    autouse=True = Runs automatically for every test.
    """
    monkeypatch.setattr(settings, "log_to_file", False)
    monkeypatch.setattr(settings, "log_dir", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "runs"))


# ========== FIXTURE 2: Tiny model configuration ==========
@pytest.fixture
def tiny_model_cfg():
    """
    D=16, L=2, 2 heads on 8x8 images with 4x4 patches (M=4).
    Small enough that finite differences over every trainable scalar stay fast.
    """
    return ModelConfig(image_size=(8, 8), patch_size=4, dim=16, heads=2, layers=2, mlp_ratio=2, num_classes=2, seed=3)


@pytest.fixture
def small_model_cfg():
    """Desk-scale geometry (16x16, M=16) with fewer channels per token."""
    return ModelConfig(image_size=(16, 16), patch_size=4, dim=16, heads=2, layers=3, mlp_ratio=2, num_classes=4, seed=1)


# ========== FIXTURE 3: Prompt configurations ==========
@pytest.fixture
def cdc_prompts():
    return PromptConfig(structure=Structure.CDC, n_prompts=2)


@pytest.fixture
def full_prompts():
    """CDC + dynamic aggregation + top-1 reinforcement: every trainable group present."""
    return PromptConfig(structure=Structure.CDC, da=True, n_prompts=2, ar_mode=ARMode.TOPK, ar_k=1, gamma_init="uniform")


# ========== FIXTURE 4: Built models ==========
@pytest.fixture
def tiny_model(tiny_model_cfg, full_prompts):
    return PromptedViT(tiny_model_cfg, full_prompts, seed=0)


def build(model_cfg, **prompt_fields):
    """Helper: a model with the given prompt settings, seed 0."""
    return PromptedViT(model_cfg, PromptConfig(**prompt_fields), seed=0)


@pytest.fixture
def make_model():
    return build


# ========== FIXTURE 5: Images and labels ==========
@pytest.fixture
def tiny_batch(tiny_model_cfg):
    """Four random 8x8x1 images with labels."""
    rng = np.random.default_rng(11)
    images = rng.uniform(0.0, 1.0, size=(4, 8, 8, 1))
    labels = np.array([0, 1, 1, 0])
    return images, labels


@pytest.fixture
def pattern_data():
    """64 train / 32 eval samples of the 4-class pattern task at 16x16."""
    train = gen_pattern_task(64, 4, seed=5)
    evaluation = gen_pattern_task(32, 4, seed=6)
    return train, evaluation


@pytest.fixture
def pattern_arrays(pattern_data):
    return stack(pattern_data[0])


# ========== FIXTURE 6: Experiment configuration ==========
@pytest.fixture
def quick_experiment(tmp_path):
    """
    An ExperimentConfig that trains in well under a second per run:
    tiny model, 2-class pattern task, 2 epochs, 2 seeds.
    """
    return ExperimentConfig(
        model=ModelConfig(image_size=(8, 8), patch_size=4, dim=8, heads=2, layers=2, num_classes=2, seed=0),
        prompts=PromptConfig(structure=Structure.CDC, n_prompts=2, ar_k=1),
        train=TrainConfig(epochs_total=2, warmup_epochs=1, base_lr=0.05, batch_size=8),
        data={"task": "pattern", "n_train": 16, "n_eval": 8, "num_classes": 2, "seed": 0},
        noise_rhos=[0.0, 0.5],
        sweep_n_prompts=[1, 2],
        sweep_ar_k=[0, 1],
        verify_epochs=1,
        seeds=[0, 1],
        output_dir=str(tmp_path / "runs"),
    )
