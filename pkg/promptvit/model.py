"""
The prompted model: frozen backbone + PromptBank + task head, one parameter registry.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from promptvit.errors import DataError
from promptvit.functional import cross_entropy
from promptvit.logger import logger
from promptvit.prompts import PromptBank, PromptState, compose_input_prompts
from promptvit.reinforce import SalienceSelection, apply_ar_mode
from promptvit.schemas import ModelConfig, ParamBreakdown, PromptConfig
from promptvit.tensor import Tape, Tensor
from promptvit.vit import AttentionRecord, Backbone, HeadParams, head

SNAPSHOT_MANIFEST = "manifest.json"
SNAPSHOT_WEIGHTS = "weights.f64"


@dataclass
class ForwardResult:
    logits: Tensor  # [B, num_classes]
    records: list[AttentionRecord] = field(default_factory=list)
    selections: list[SalienceSelection] = field(default_factory=list)
    states: list[PromptState] = field(default_factory=list)  # state left by each layer


class PromptedViT:
    def __init__(self, model_cfg: ModelConfig, prompt_cfg: PromptConfig, seed: int = 0):
        self.model_cfg = model_cfg
        self.prompt_cfg = prompt_cfg
        self.seed = seed
        self.tape = Tape()

        self.backbone = Backbone(model_cfg)
        rng = np.random.default_rng([model_cfg.seed, seed])
        self.bank = PromptBank(model_cfg, prompt_cfg, rng)
        self.head = HeadParams.init(rng, model_cfg.dim, model_cfg.num_classes)

        for name, tensor in self.backbone.tensors().items():
            self.tape.register(name, tensor, trainable=False)
        for name, tensor in self.bank.tensors().items():
            self.tape.register(name, tensor, trainable=True)
        for name, tensor in self.head.tensors().items():
            self.tape.register(f"head.{name}", tensor, trainable=True)

    # ----- forward -----

    def forward(self, images: np.ndarray) -> ForwardResult:
        bank, backbone = self.bank, self.backbone
        seq = backbone.embed(images)
        batch = seq.batch
        keep = bank.structure.keeps_prompt_outputs
        state = PromptState()
        result = ForwardResult(logits=None)

        for l in range(self.model_cfg.layers):
            composed = None
            if bank.n_prompts:
                composed = compose_input_prompts(bank, l, state)
                if composed.ndim == 2:
                    composed_batch = composed.expand(batch, *composed.shape)
                else:
                    composed_batch = composed
                seq = seq.with_prompts(composed_batch)
            seq, record = backbone.forward_layer(seq, l, keep_prompt_outputs=keep, offsets=bank.offsets(l))
            result.records.append(record)
            state = PromptState(layer=l, prev_input=composed, prev_output=seq.prompts)
            result.states.append(state)

            if l in bank.P_re:
                images_out, sel = apply_ar_mode(bank.ar_mode, seq.images, record.image_saliency, bank.P_re[l], l)
                seq = seq.with_images(images_out)
                if sel is not None:
                    result.selections.append(sel)

        result.logits = head(backbone.final_cls(seq), self.head)
        return result

    def loss(self, images: np.ndarray, labels: np.ndarray) -> tuple[Tensor, ForwardResult]:
        result = self.forward(images)
        return cross_entropy(result.logits, labels), result

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(images).logits.data, axis=1)

    # ----- bookkeeping -----

    def breakdown(self) -> ParamBreakdown:
        return self.bank.breakdown()

    def backbone_hash(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.tape.frozen().items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    # ----- snapshot -----

    def save_snapshot(self, directory: str | Path) -> Path:
        """Flat little-endian f64 buffer of every registered tensor plus a JSON manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(directory / SNAPSHOT_WEIGHTS, "wb") as fh:
            for name, tensor in self.tape.parameters.items():
                raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
                fh.write(raw)
                entries.append({
                    "name": name,
                    "shape": list(tensor.shape),
                    "trainable": tensor.requires_grad,
                    "offset": offset,
                })
                offset += len(raw)
        manifest = {
            "model": self.model_cfg.model_dump(mode="json"),
            "prompts": self.prompt_cfg.model_dump(mode="json"),
            "seed": self.seed,
            "tensors": entries,
        }
        (directory / SNAPSHOT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.info("snapshot_saved", path=str(directory), tensors=len(entries), bytes=offset)
        return directory

    @classmethod
    def load_snapshot(cls, directory: str | Path) -> "PromptedViT":
        directory = Path(directory)
        manifest_path = directory / SNAPSHOT_MANIFEST
        try:
            manifest = json.loads(manifest_path.read_text())
            raw = (directory / SNAPSHOT_WEIGHTS).read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"snapshot incomplete: {exc.filename}", path=str(directory)) from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"snapshot manifest is not valid JSON: {manifest_path}") from exc

        try:
            model = cls(
                ModelConfig.model_validate(manifest["model"]),
                PromptConfig.model_validate(manifest["prompts"]),
                seed=manifest.get("seed", 0),
            )
            entries = [(e["name"], tuple(e["shape"]), int(e["offset"])) for e in manifest["tensors"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed snapshot manifest {manifest_path}: {exc}", path=str(manifest_path)) from exc

        for name, shape, offset in entries:
            tensor = model.tape.parameters.get(name)
            if tensor is None or tensor.shape != shape:
                raise DataError(f"snapshot tensor {name} {shape} does not fit the model")
            count = int(np.prod(shape, dtype=np.int64))
            if offset < 0 or offset + count * 8 > len(raw):
                raise DataError(
                    f"{SNAPSHOT_WEIGHTS} too short for {name}: needs bytes {offset}..{offset + count * 8}, has {len(raw)}",
                    path=str(directory),
                )
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            tensor.data = values.reshape(shape).astype(np.float64)
        return model
