"""
Frozen-backbone optimization: linear warmup then cosine decay, SGD with momentum, mean
cross-entropy, per-epoch metrics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from promptvit.data import Sample, stack
from promptvit.errors import ContractError, NonFiniteLossError, NumericOverflowError
from promptvit.functional import cross_entropy, linear
from promptvit.logger import logger
from promptvit.metrics import TrainingMetrics
from promptvit.model import PromptedViT
from promptvit.schemas import EpochMetrics, RunMetrics, TrainConfig
from promptvit.tensor import Tape, Tensor
from promptvit.vit import Backbone, HeadParams, xavier_uniform

EVAL_BATCH = 256


# ========== Schedule ==========

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr over `warmup_epochs`, cosine decay to zero afterwards."""
    if not 0 <= epoch < cfg.epochs_total:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs_total})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs_total - cfg.warmup_epochs)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ========== Optimizer ==========

def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: Optional[dict[str, np.ndarray]] = None,
) -> dict[str, np.ndarray]:
    """
    v <- momentum * v + g + wd * p;  p <- p - lr * v.

    Updates `params` in place and returns the new velocity. A missing gradient counts as zero.
    """
    velocity = {} if velocity is None else velocity
    for name, param in params.items():
        if not param.requires_grad:
            raise ContractError(f"sgd_step got frozen parameter '{name}'")
        grad = grads.get(name)
        grad = np.zeros(param.shape) if grad is None else grad
        v = velocity.get(name)
        v = grad + weight_decay * param.data if v is None else momentum * v + grad + weight_decay * param.data
        velocity[name] = v
        param.data -= lr * v
    return velocity


class SGD:
    """Momentum SGD over a fixed set of trainable tensors."""

    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        self.velocity = sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Full shuffle per call; the last partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ========== Evaluation ==========

def evaluate(model: PromptedViT, images: np.ndarray, labels: np.ndarray, batch_size: int = EVAL_BATCH) -> float:
    """Top-1 accuracy; 0.0 on an empty set."""
    if len(labels) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(labels), batch_size):
        predicted = model.predict(images[start:start + batch_size])
        correct += int(np.sum(predicted == labels[start:start + batch_size]))
    return correct / len(labels)


# ========== Training loop ==========

def train(
    model: PromptedViT,
    train_set: Sequence[Sample],
    eval_set: Sequence[Sample],
    cfg: TrainConfig,
    metrics_path: Optional[str | Path] = None,
) -> RunMetrics:
    """
    Train the prompt bank and head; the backbone stays frozen.

    Deterministic for a given (model seed, cfg.seed): the shuffle stream comes from cfg.seed
    alone and every kernel has a fixed reduction order.
    """
    train_x, train_y = stack(train_set)
    eval_x, eval_y = stack(eval_set)
    rng = np.random.default_rng(cfg.seed)
    tape = model.tape
    tracker = TrainingMetrics(metrics_path)
    optimizer = SGD(tape.trainable(), cfg.momentum, cfg.weight_decay)

    hash_before = model.backbone_hash()
    initial_eval = evaluate(model, eval_x, eval_y)
    logger.info(
        "training_started",
        structure=model.prompt_cfg.structure.value,
        learnable_params=tape.trainable_count(),
        n_train=len(train_y),
        n_eval=len(eval_y),
        epochs=cfg.epochs_total,
    )

    for epoch in range(cfg.epochs_total):
        lr = lr_schedule(epoch, cfg)
        loss_sum, correct = 0.0, 0
        for step, idx in enumerate(iterate_batches(len(train_y), cfg.batch_size, rng)):
            tape.zero_grad()
            try:
                loss, result = model.loss(train_x[idx], train_y[idx])
            except NumericOverflowError as exc:
                logger.error("non_finite_loss", epoch=epoch, step=step, lr=lr, error=str(exc))
                raise NonFiniteLossError(
                    f"loss became non-finite at epoch {epoch}, step {step}", epoch=epoch, step=step, lr=lr
                ) from exc
            tape.backward(loss)
            optimizer.step(lr)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(result.logits.data, axis=1) == train_y[idx]))

        n = max(len(train_y), 1)
        tracker.record(EpochMetrics(
            epoch=epoch,
            lr=lr,
            loss=loss_sum / n,
            train_acc=correct / n,
            eval_acc=evaluate(model, eval_x, eval_y),
        ))

    hash_after = model.backbone_hash()
    if hash_after != hash_before:
        logger.critical("backbone_modified", before=hash_before, after=hash_after)
        raise ContractError("frozen backbone changed during training")

    run = tracker.finish(
        initial_eval_acc=initial_eval,
        learnable_params=tape.trainable_count(),
        backbone_hash_before=hash_before,
        backbone_hash_after=hash_after,
    )
    logger.info(
        "training_finished",
        final_top1=run.final_top1,
        initial_eval_acc=initial_eval,
        **tracker.get_stats(),
    )
    return run


# ========== Sanity utilities ==========

def first_batch_descent(model: PromptedViT, images: np.ndarray, labels: np.ndarray, lr: float) -> tuple[float, float]:
    """Loss before and after one plain gradient step on a single batch; parameters are restored."""
    params = model.tape.trainable()
    saved = {name: p.data.copy() for name, p in params.items()}
    model.tape.zero_grad()
    loss, _ = model.loss(images, labels)
    model.tape.backward(loss)
    sgd_step(params, {name: p.grad for name, p in params.items()}, lr, momentum=0.0, weight_decay=0.0)
    after, _ = model.loss(images, labels)
    for name, p in params.items():
        p.data = saved[name]
        p.grad = None
    return loss.item(), after.item()


@dataclass
class ProbeResult:
    train_acc: float
    eval_acc: float


def linear_probe(
    backbone: Backbone,
    train_set: Sequence[Sample],
    eval_set: Sequence[Sample],
    steps: int = 300,
    lr: float = 0.5,
    seed: int = 0,
) -> ProbeResult:
    """Softmax regression on standardized frozen class-token features (no prompts)."""
    train_x, train_y = stack(train_set)
    eval_x, eval_y = stack(eval_set)
    num_classes = backbone.cfg.num_classes
    features = backbone.features(train_x)
    mean, std = features.mean(axis=0), features.std(axis=0) + 1e-8

    rng = np.random.default_rng(seed)
    probe = HeadParams(
        weight=Tensor(xavier_uniform(rng, features.shape[1], num_classes), requires_grad=True),
        bias=Tensor(np.zeros(num_classes), requires_grad=True),
    )
    inputs = Tensor((features - mean) / std)
    tape = Tape()
    optimizer = SGD(probe.tensors(), momentum=0.9)
    for _ in range(steps):
        for t in probe.tensors().values():
            t.grad = None
        tape.backward(cross_entropy(linear(inputs, probe.weight, probe.bias), train_y))
        optimizer.step(lr)

    def accuracy(x: np.ndarray, y: np.ndarray) -> float:
        if len(y) == 0:
            return 0.0
        logits = linear(Tensor((backbone.features(x) - mean) / std), probe.weight, probe.bias)
        return float(np.mean(np.argmax(logits.data, axis=1) == y))

    result = ProbeResult(train_acc=accuracy(train_x, train_y), eval_acc=accuracy(eval_x, eval_y))
    logger.info("linear_probe_finished", train_acc=result.train_acc, eval_acc=result.eval_acc)
    return result
