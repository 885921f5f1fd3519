"""
Experiment runners behind the CLI subcommands.

A sweep is a list of independent cells (one prompt configuration x one seed). Cells run in a
process pool when `jobs > 1`; aggregation happens after every cell has returned.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import multiprocessing
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError
from scipy.stats import spearmanr
from tqdm import tqdm

from promptvit.analysis import BYPASS_LN, LN_PATH, TOLERANCE, export_attention, verify_model, write_attention_csv
from promptvit.config import settings
from promptvit.data import build_datasets, corrupt_dataset, gen_count_task, gen_pattern_task, save_raw_dataset, stack
from promptvit.errors import ConfigError, ContractError, DataError, VerificationError
from promptvit.gradcheck import gradcheck_report
from promptvit.logger import logger
from promptvit.model import PromptedViT
from promptvit.prompts import count_learnable_params
from promptvit.schemas import (
    ARMode,
    ExperimentConfig,
    ParamBreakdown,
    PromptConfig,
    ResultRecord,
    RunMetrics,
    Structure,
    Task,
)
from promptvit.training import evaluate, train

ABLATION_AXES = ("structure", "da", "ar", "n_prompts", "ar_k")
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_BATCH = 4


# ========== Config helpers ==========

def canonical_json(cfg: ExperimentConfig) -> str:
    """Sorted keys, no whitespace; output location is not part of the experiment."""
    payload = cfg.model_dump(mode="json", exclude={"output_dir"})
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def derive_config(cfg: ExperimentConfig, **updates: Any) -> ExperimentConfig:
    """Copy of `cfg` with top-level sections replaced, validated again."""
    payload = cfg.model_dump(mode="json")
    for key, value in updates.items():
        payload[key] = value.model_dump(mode="json") if isinstance(value, BaseModel) else value
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid derived configuration: {exc.errors()[0]['msg']}", updates=list(updates)) from exc


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", label).strip("_")


def map_cells(fn: Callable, cells: Sequence, jobs: int, desc: str) -> list:
    """fn over cells, in order; a process pool when jobs > 1."""
    jobs = max(1, min(jobs, len(cells)))
    if jobs == 1:
        return [fn(cell) for cell in tqdm(cells, desc=desc, leave=False)]
    with multiprocessing.Pool(processes=jobs) as pool:
        return list(tqdm(pool.imap(fn, cells), total=len(cells), desc=desc, leave=False))


# ========== Single run ==========

class RunCell(BaseModel):
    label: str
    config: ExperimentConfig
    seed: int
    run_dir: str


def run_cell(cell: RunCell, snapshot: bool = False) -> tuple[ResultRecord, RunMetrics]:
    cfg = cell.config
    train_set, eval_set = build_datasets(cfg.data, cfg.model)
    model = PromptedViT(cfg.model, cfg.prompts, seed=cell.seed)
    run_dir = Path(cell.run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    run = train(model, train_set, eval_set, cfg.train.model_copy(update={"seed": cell.seed}), metrics_path)
    if snapshot:
        model.save_snapshot(run_dir / "snapshot")

    breakdown = model.breakdown()
    if breakdown.total != run.learnable_params:
        raise ContractError(
            f"parameter formula gives {breakdown.total}, registry holds {run.learnable_params}",
            label=cell.label,
        )
    record = ResultRecord(
        config_hash=config_hash(cfg),
        label=cell.label,
        structure=cfg.prompts.structure,
        da=cfg.prompts.da,
        ar_mode=cfg.prompts.ar_mode,
        ar_k=cfg.prompts.ar_k,
        n_prompts=cfg.prompts.n_prompts,
        seed=cell.seed,
        final_top1=run.final_top1,
        params=breakdown,
        metrics_path=str(metrics_path),
    )
    return record, run


def _run_cell_record(cell: RunCell) -> ResultRecord:
    return run_cell(cell)[0]


def run_train(cfg: ExperimentConfig, seed: int) -> tuple[ResultRecord, RunMetrics]:
    """One training run; writes metrics, the run summary and a model snapshot."""
    cfg = derive_config(cfg, seeds=[seed])
    label = run_label(cfg.prompts)
    run_dir = Path(cfg.output_dir) / "train" / f"{slug(label)}_s{seed}"
    record, run = run_cell(RunCell(label=label, config=cfg, seed=seed, run_dir=str(run_dir)), snapshot=True)
    (run_dir / "run.json").write_text(run.model_dump_json(indent=2))
    (run_dir / "result.json").write_text(record.model_dump_json(indent=2))
    return record, run


# ========== Ablation ==========

def run_label(prompts: PromptConfig, axes: Sequence[str] = ()) -> str:
    """e.g. "cdc", "cdc+da", "cdc+da+ar(topk)", "cdc+ar(k=2)", "vpt-deep[n=8]"."""
    label = prompts.structure.value
    if prompts.da:
        label += "+da"
    if "ar_k" in axes:
        label += f"+ar(k={prompts.ar_k})"
    elif prompts.ar_mode != ARMode.NONE:
        label += f"+ar({prompts.ar_mode.value})"
    if "n_prompts" in axes:
        label += f"[n={prompts.n_prompts}]"
    return label


def ablation_prompts(cfg: ExperimentConfig, axes: Sequence[str]) -> list[PromptConfig]:
    """Cartesian product of the requested axes over the base prompt configuration."""
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axis {unknown[0]!r}; choose from {', '.join(ABLATION_AXES)}")
    axes = list(dict.fromkeys(axes))
    values = {
        "structure": list(Structure),
        "da": [False, True],
        "ar": list(ARMode),
        "n_prompts": list(cfg.sweep_n_prompts),
        "ar_k": list(cfg.sweep_ar_k),
    }
    base = cfg.prompts.model_dump(mode="json")
    variants = []
    for combo in itertools.product(*(values[a] for a in axes)):
        update = dict(base)
        for axis, value in zip(axes, combo):
            if axis == "structure":
                update["structure"] = value.value
            elif axis == "da":
                update["da"] = value
            elif axis == "ar":
                update["ar_mode"] = value.value
            elif axis == "n_prompts":
                update["n_prompts"] = value
                if "ar" not in axes and "ar_k" not in axes:
                    update["ar_mode"] = ARMode.NONE.value
            else:
                update["ar_mode"] = ARMode.TOPK.value
                update["ar_k"] = value
        variants.append(PromptConfig.model_validate(update))
    return variants


def records_frame(records: Sequence[ResultRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = r.model_dump(mode="json", exclude={"params"})
        row.update({f"params_{k}": v for k, v in r.params.model_dump().items()})
        rows.append(row)
    return pd.DataFrame(rows)


def summarize_records(frame: pd.DataFrame) -> pd.DataFrame:
    """mean / std of final top-1 over seeds, one row per label in sweep order."""
    grouped = frame.groupby("label", sort=False)
    summary = grouped.agg(
        top1_mean=("final_top1", "mean"),
        top1_std=("final_top1", "std"),
        runs=("seed", "count"),
        params_total=("params_total", "first"),
    ).reset_index()
    summary["top1_std"] = summary["top1_std"].fillna(0.0)
    return summary


def run_ablate(cfg: ExperimentConfig, axes: Sequence[str], jobs: Optional[int] = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    jobs = settings.jobs if jobs is None else jobs
    variants = ablation_prompts(cfg, axes)
    out = Path(cfg.output_dir) / "ablate"
    cells = []
    for prompts in variants:
        label = run_label(prompts, axes)
        for seed in cfg.seeds:
            cell_cfg = derive_config(cfg, prompts=prompts, seeds=[seed])
            cells.append(RunCell(label=label, config=cell_cfg, seed=seed, run_dir=str(out / "runs" / f"{slug(label)}_s{seed}")))
    logger.info("ablation_started", axes=list(axes), variants=len(variants), seeds=len(cfg.seeds), jobs=jobs)

    records = map_cells(_run_cell_record, cells, jobs, "ablate")
    frame = records_frame(records)
    summary = summarize_records(frame)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "ablate.csv", index=False)
    summary.to_csv(out / "ablate_summary.csv", index=False)
    logger.info("ablation_finished", rows=len(frame), path=str(out))
    return frame, summary


# ========== Noise sweep ==========

class NoiseCell(BaseModel):
    config: ExperimentConfig
    structure: Structure
    seed: int
    train_rho: Optional[float] = None  # None: train on clean data
    eval_rhos: list[float]


def run_noise_cell(cell: NoiseCell) -> list[dict]:
    cfg = cell.config
    noise = cfg.noise
    train_set, eval_set = build_datasets(cfg.data, cfg.model)
    if cell.train_rho is not None:
        train_set = corrupt_dataset(train_set, noise.model_copy(update={"rho": cell.train_rho}), stream=1)
    model = PromptedViT(cfg.model, cfg.prompts, seed=cell.seed)
    train(model, train_set, eval_set, cfg.train.model_copy(update={"seed": cell.seed}))

    rows = []
    for rho in cell.eval_rhos:
        corrupted = corrupt_dataset(eval_set, noise.model_copy(update={"rho": rho}), stream=0)
        acc = evaluate(model, *stack(corrupted))
        rows.append({"structure": cell.structure.value, "rho": rho, "seed": cell.seed, "acc": acc})
    return rows


def noise_summary(curves: pd.DataFrame) -> pd.DataFrame:
    """Per structure and rho: mean / std over seeds; per structure: drop and Spearman trend."""
    summary = (
        curves.groupby(["structure", "rho"], sort=False)["acc"]
        .agg(["mean", "std"])
        .reset_index()
    )
    summary["std"] = summary["std"].fillna(0.0)
    trend = {}
    for structure, part in curves.groupby("structure", sort=False):
        means = summary[summary["structure"] == structure].set_index("rho")["mean"]
        rho_stat, _ = spearmanr(part["rho"], part["acc"])
        trend[structure] = (float(means.loc[means.index.min()] - means.loc[means.index.max()]), float(rho_stat))
    summary["drop"] = summary["structure"].map(lambda s: trend[s][0])
    summary["spearman"] = summary["structure"].map(lambda s: trend[s][1])
    return summary


@dataclass
class NoiseSweepResult:
    curves: pd.DataFrame
    summary: pd.DataFrame
    cdc_more_robust: Optional[bool]


def run_noise_sweep(
    cfg: ExperimentConfig,
    rhos: Optional[Sequence[float]] = None,
    structures: Optional[Sequence[Structure]] = None,
    noise_train: Optional[bool] = None,
    jobs: Optional[int] = None,
) -> NoiseSweepResult:
    rhos = list(cfg.noise_rhos if rhos is None else rhos)
    structures = list(cfg.noise_structures if structures is None else structures)
    noise_train = cfg.noise_train if noise_train is None else noise_train
    jobs = settings.jobs if jobs is None else jobs
    if any(not 0.0 <= rho <= 1.0 for rho in rhos):
        raise ConfigError(f"noise rates must lie in [0, 1], got {rhos}")

    cells = []
    for structure in structures:
        prompts = cfg.prompts.model_copy(update={"structure": structure})
        for seed in cfg.seeds:
            cell_cfg = derive_config(cfg, prompts=prompts, seeds=[seed])
            if noise_train:
                cells.extend(
                    NoiseCell(config=cell_cfg, structure=structure, seed=seed, train_rho=rho, eval_rhos=[rho])
                    for rho in rhos
                )
            else:
                cells.append(NoiseCell(config=cell_cfg, structure=structure, seed=seed, eval_rhos=rhos))
    logger.info("noise_sweep_started", structures=[s.value for s in structures], rhos=rhos, noise_train=noise_train)

    rows = [row for part in map_cells(run_noise_cell, cells, jobs, "noise-sweep") for row in part]
    curves = pd.DataFrame(rows, columns=["structure", "rho", "seed", "acc"])
    curves = curves.sort_values(["structure", "rho", "seed"], kind="mergesort").reset_index(drop=True)
    summary = noise_summary(curves)

    for structure, part in summary.groupby("structure", sort=False):
        spearman = part["spearman"].iloc[0]
        if spearman > 0:
            logger.warning("noise_trend_not_decreasing", structure=structure, spearman=spearman)

    drops = summary.drop_duplicates("structure").set_index("structure")["drop"]
    cdc_more_robust = None
    if Structure.CDC.value in drops and Structure.EXPRESS.value in drops:
        cdc_more_robust = bool(drops[Structure.CDC.value] <= drops[Structure.EXPRESS.value])
        if not cdc_more_robust:
            logger.warning(
                "noise_robustness_check_failed",
                cdc_drop=float(drops[Structure.CDC.value]),
                express_drop=float(drops[Structure.EXPRESS.value]),
            )

    out = Path(cfg.output_dir) / "noise"
    out.mkdir(parents=True, exist_ok=True)
    curves.to_csv(out / "noise_curves.csv", index=False)
    summary.to_csv(out / "noise_summary.csv", index=False)
    return NoiseSweepResult(curves=curves, summary=summary, cdc_more_robust=cdc_more_robust)


# ========== Verification ==========

def gradient_groups(model: PromptedViT, images: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Finite-difference check of every trainable tensor, reduced to its group (P, gamma, P_re, express, head)."""
    report = gradcheck_report(lambda: model.loss(images, labels)[0], model.tape.trainable())
    groups: dict[str, float] = {}
    for name, error in report.items():
        group = ".".join(name.split(".")[:2])
        groups[group] = max(groups.get(group, 0.0), error)
    return groups


def run_verify(
    cfg: ExperimentConfig,
    seed: int = 0,
    key_path: str = BYPASS_LN,
    gradcheck: bool = False,
) -> dict:
    """Decomposition checks at init and after `verify_epochs` of training; raises on failure."""
    train_set, eval_set = build_datasets(cfg.data, cfg.model)
    probes = eval_set or train_set
    if not probes:
        raise DataError("verification needs at least one sample")
    image = probes[0].image

    model = PromptedViT(cfg.model, cfg.prompts, seed=seed)
    phases = {"init": verify_model(model, image, TOLERANCE, key_path)}
    if cfg.verify_epochs > 0:
        brief = cfg.train.model_copy(update={
            "epochs_total": cfg.verify_epochs,
            "warmup_epochs": min(cfg.train.warmup_epochs, cfg.verify_epochs - 1),
            "seed": seed,
        })
        train(model, train_set, eval_set, brief)
        phases["trained"] = verify_model(model, image, TOLERANCE, key_path)

    checks = [
        {"phase": phase, **r.summary(), "proportionality_spread": r.proportionality_spread, "reweighting": r.reweighting}
        for phase, reports in phases.items()
        for r in reports
    ]
    report: dict[str, Any] = {
        "config_hash": config_hash(cfg),
        "key_path": key_path,
        "tolerance": TOLERANCE,
        "checks": checks,
        "passed": all(c["pass"] for c in checks),
    }

    if gradcheck:
        fresh = PromptedViT(cfg.model, cfg.prompts, seed=seed)
        x, y = stack(list(train_set[:GRADCHECK_BATCH]) or list(probes[:GRADCHECK_BATCH]))
        groups = gradient_groups(fresh, x, y)
        report["gradcheck"] = {"tolerance": GRADCHECK_TOLERANCE, "groups": groups}
        report["gradcheck_passed"] = all(e < GRADCHECK_TOLERANCE for e in groups.values())

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    if key_path == LN_PATH:
        logger.info("ln_path_residuals", max_residual=max((c["max_residual"] for c in checks), default=0.0))
        return report
    failures = [f"{c['phase']}:layer{c['layer']}/head{c['head']}" for c in checks if not c["pass"]]
    if failures:
        raise VerificationError(f"decomposition failed at {', '.join(failures)}", failures=failures)
    if gradcheck and not report["gradcheck_passed"]:
        bad = [g for g, e in report["gradcheck"]["groups"].items() if e >= GRADCHECK_TOLERANCE]
        raise VerificationError(f"gradient check failed for {', '.join(bad)}", groups=bad)
    return report


# ========== Small commands ==========

def attn_dump(cfg: ExperimentConfig, seed: int = 0, index: int = 0, snapshot: Optional[str] = None) -> pd.DataFrame:
    model = PromptedViT.load_snapshot(snapshot) if snapshot else PromptedViT(cfg.model, cfg.prompts, seed=seed)
    _, eval_set = build_datasets(cfg.data, model.model_cfg)
    if not 0 <= index < len(eval_set):
        raise DataError(f"sample index {index} outside the {len(eval_set)} evaluation samples")
    frame = export_attention(model, eval_set[index].image)
    write_attention_csv(frame, Path(cfg.output_dir) / "attention.csv")
    return frame


def params(cfg: ExperimentConfig, registry: bool = False) -> tuple[ParamBreakdown, Optional[int]]:
    """Closed-form breakdown; with `registry`, also builds the model and counts trainable scalars."""
    breakdown = count_learnable_params(cfg.model, cfg.prompts)
    if not registry:
        return breakdown, None
    count = PromptedViT(cfg.model, cfg.prompts).tape.trainable_count()
    if count != breakdown.total:
        raise ContractError(f"registry holds {count} trainable scalars, formula gives {breakdown.total}")
    return breakdown, count


def generate(cfg: ExperimentConfig, n: int, out_dir: str | Path) -> Path:
    spec, model = cfg.data, cfg.model
    if spec.task == Task.PATTERN:
        samples = gen_pattern_task(n, spec.num_classes, spec.seed, model.image_size, model.channels, model.patch_size)
    else:
        samples = gen_count_task(n, spec.max_objects, spec.seed, model.image_size, model.channels)
    if cfg.noise.rho > 0:
        samples = corrupt_dataset(samples, cfg.noise)
    return save_raw_dataset(samples, out_dir)
