"""
Tests for the assembled prompted model: gradients of every trainable group, the parameter
registry and snapshot errors.
"""
import json

import numpy as np
import pytest

from promptvit.errors import DataError
from promptvit.experiments import gradient_groups
from promptvit.gradcheck import gradcheck, relative_error
from promptvit.model import PromptedViT
from promptvit.schemas import ARMode, PromptConfig, Structure


def test_relative_error_is_floored():
    """Tiny gradients compare absolutely, large ones relatively."""
    np.testing.assert_allclose(relative_error(np.array([1e-9]), np.array([0.0])), [1e-5])
    np.testing.assert_allclose(relative_error(np.array([2.0]), np.array([1.0])), [0.5])


def test_every_trainable_group_matches_finite_differences(tiny_model, tiny_batch):
    images, labels = tiny_batch
    groups = gradient_groups(tiny_model, images, labels)
    assert set(groups) == {"prompts.P", "prompts.gamma", "prompts.P_re", "head.weight", "head.bias"}
    assert all(error < 1e-4 for error in groups.values()), groups


@pytest.mark.parametrize(
    "fields",
    [
        {"structure": Structure.VANILLA_CDC, "da": True, "gamma_init": "uniform"},
        {"structure": Structure.PROVP, "da": True, "gamma_init": "uniform"},
        {"structure": Structure.EXPRESS},
        {"structure": Structure.VPT_SHALLOW, "ar_mode": ARMode.ALL},
    ],
)
def test_structure_gradients_match_finite_differences(tiny_model_cfg, tiny_batch, fields):
    images, labels = tiny_batch
    model = PromptedViT(tiny_model_cfg, PromptConfig(n_prompts=2, **fields))
    if model.bank.express:
        rng = np.random.default_rng(0)
        for offsets in model.bank.express:
            for t in vars(offsets).values():
                t.data[:] = rng.normal(scale=0.1, size=t.shape)
    tensors = model.tape.trainable()
    assert gradcheck(lambda: model.loss(images, labels)[0], tensors) < 1e-4


def test_reinforcement_at_the_last_layer_has_no_gradient(tiny_model, tiny_batch):
    """Only the class token reaches the head, so image-token prompts after the final layer are inert."""
    tiny_model.tape.zero_grad()
    loss, _ = tiny_model.loss(*tiny_batch)
    tiny_model.tape.backward(loss)
    last = tiny_model.bank.P_re[1]
    assert last.grad is None or not np.any(last.grad)
    assert np.any(tiny_model.bank.P_re[0].grad)


def test_frozen_backbone_never_collects_gradients(tiny_model, tiny_batch):
    loss, _ = tiny_model.loss(*tiny_batch)
    tiny_model.tape.backward(loss)
    assert all(t.grad is None for t in tiny_model.tape.frozen().values())
    assert tiny_model.tape.trainable_count() == tiny_model.breakdown().total


def test_predict_returns_class_indices(tiny_model, tiny_batch):
    predicted = tiny_model.predict(tiny_batch[0])
    assert predicted.shape == (4,)
    assert set(predicted.tolist()) <= {0, 1}


def test_snapshot_needs_both_files(tmp_path, tiny_model):
    directory = tiny_model.save_snapshot(tmp_path / "snap")
    (directory / "weights.f64").unlink()
    with pytest.raises(DataError):
        PromptedViT.load_snapshot(directory)


def test_snapshot_rejects_a_foreign_manifest(tmp_path, tiny_model):
    directory = tiny_model.save_snapshot(tmp_path / "snap")
    manifest = json.loads((directory / "manifest.json").read_text())
    manifest["tensors"][0]["shape"] = [999]
    (directory / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        PromptedViT.load_snapshot(directory)


def test_truncated_weights_are_a_data_error(tmp_path, tiny_model):
    directory = tiny_model.save_snapshot(tmp_path / "snap")
    weights = directory / "weights.f64"
    weights.write_bytes(weights.read_bytes()[:-8])
    with pytest.raises(DataError) as exc:
        PromptedViT.load_snapshot(directory)
    assert "weights.f64" in str(exc.value)


def test_manifest_without_tensor_offsets_is_a_data_error(tmp_path, tiny_model):
    directory = tiny_model.save_snapshot(tmp_path / "snap")
    manifest = json.loads((directory / "manifest.json").read_text())
    del manifest["tensors"][0]["offset"]
    (directory / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        PromptedViT.load_snapshot(directory)
