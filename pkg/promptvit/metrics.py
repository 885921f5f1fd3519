"""
Training metrics for one run.

This module tracks:
- Per-epoch learning rate, loss and accuracies (JSON lines, one object per epoch)
- Run duration
- The final RunMetrics summary
"""
from __future__ import annotations

import time
from pathlib import Path
from typing import Any, Dict, Optional

from promptvit.logger import logger
from promptvit.schemas import EpochMetrics, RunMetrics


class TrainingMetrics:
    """
    Collector owned by a single training run.

    The JSON-lines file carries no wall-clock fields, so reruns with the same seed write
    byte-identical files.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.epochs: list[EpochMetrics] = []
        self.path = Path(path) if path is not None else None
        self.start_time = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, entry: EpochMetrics) -> None:
        """Append one epoch to memory and to the stream."""
        self.epochs.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(entry.model_dump_json() + "\n")
        logger.info("epoch_completed", **entry.model_dump())

    def elapsed(self) -> float:
        return time.perf_counter() - self.start_time

    def get_stats(self) -> Dict[str, Any]:
        """Running summary; the training loop logs it with `training_finished`."""
        if not self.epochs:
            return {"epochs": 0, "elapsed_seconds": round(self.elapsed(), 2)}
        last = self.epochs[-1]
        return {
            "epochs": len(self.epochs),
            "last_loss": last.loss,
            "last_eval_acc": last.eval_acc,
            "best_eval_acc": max(e.eval_acc for e in self.epochs),
            "elapsed_seconds": round(self.elapsed(), 2),
        }

    def finish(
        self,
        initial_eval_acc: float,
        learnable_params: int,
        backbone_hash_before: str,
        backbone_hash_after: str,
    ) -> RunMetrics:
        final_top1 = self.epochs[-1].eval_acc if self.epochs else initial_eval_acc
        return RunMetrics(
            epochs=list(self.epochs),
            initial_eval_acc=initial_eval_acc,
            final_top1=final_top1,
            learnable_params=learnable_params,
            wall_clock_seconds=self.elapsed(),
            backbone_hash_before=backbone_hash_before,
            backbone_hash_after=backbone_hash_after,
        )


def read_metrics_stream(path: str | Path) -> list[EpochMetrics]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EpochMetrics.model_validate_json(line) for line in lines if line.strip()]
