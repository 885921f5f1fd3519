"""
Command-line runner: train / verify / ablate / noise-sweep / attn-dump / params / generate.

Flags build an ExperimentConfig; a `--config` JSON file is merged on top of them. Machine
artifacts go under the output directory, a human summary goes to stdout, logs to stderr.
"""
from __future__ import annotations

import functools
import json
import sys
from pathlib import Path
from typing import Any, Optional

import click
import sentry_sdk
from pydantic import ValidationError

from promptvit import experiments
from promptvit.analysis import BYPASS_LN, LN_PATH
from promptvit.config import settings
from promptvit.errors import ConfigError, PromptVitError
from promptvit.logger import logger
from promptvit.logging_config import configure_logging
from promptvit.schemas import ARMode, DatasetSpec, ExperimentConfig, GammaInit, NoiseModel, Structure, Task

# flag name -> location inside ExperimentConfig
FLAG_PATHS: dict[str, tuple[str, ...]] = {
    "structure": ("prompts", "structure"),
    "da": ("prompts", "da"),
    "ar": ("prompts", "ar_mode"),
    "ar_k": ("prompts", "ar_k"),
    "ar_layers": ("prompts", "ar_layers"),
    "n_prompts": ("prompts", "n_prompts"),
    "gamma_init": ("prompts", "gamma_init"),
    "dim": ("model", "dim"),
    "heads": ("model", "heads"),
    "layers": ("model", "layers"),
    "patch_size": ("model", "patch_size"),
    "num_classes": ("model", "num_classes"),
    "epochs": ("train", "epochs_total"),
    "warmup": ("train", "warmup_epochs"),
    "lr": ("train", "base_lr"),
    "momentum": ("train", "momentum"),
    "weight_decay": ("train", "weight_decay"),
    "batch_size": ("train", "batch_size"),
    "task": ("data", "task"),
    "n_train": ("data", "n_train"),
    "n_eval": ("data", "n_eval"),
    "max_objects": ("data", "max_objects"),
    "data_seed": ("data", "seed"),
    "manifest": ("data", "manifest"),
    "noise_rho": ("noise", "rho"),
    "noise_sigma": ("noise", "sigma"),
    "noise_model": ("noise", "model"),
    "verify_epochs": ("verify_epochs",),
    "seeds": ("seeds",),
    "output_dir": ("output_dir",),
}


def _int_list(ctx, param, value: Optional[str]):
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def _float_list(ctx, param, value: Optional[str]):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


def _choices(enum) -> click.Choice:
    return click.Choice([member.value for member in enum])


EXPERIMENT_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config merged over the flags."),
    click.option("--structure", type=_choices(Structure)),
    click.option("--da", type=click.Choice(["on", "off"]), help="Dynamic aggregation."),
    click.option("--ar", type=_choices(ARMode), help="Attentive reinforcement setting."),
    click.option("--ar-k", type=int),
    click.option("--ar-layers", callback=_int_list, help="Comma-separated layer indices."),
    click.option("--n-prompts", type=int),
    click.option("--gamma-init", type=_choices(GammaInit)),
    click.option("--dim", type=int),
    click.option("--heads", type=int),
    click.option("--layers", type=int),
    click.option("--patch-size", type=int),
    click.option("--num-classes", type=int),
    click.option("--epochs", type=int),
    click.option("--warmup", type=int),
    click.option("--lr", type=float),
    click.option("--momentum", type=float),
    click.option("--weight-decay", type=float),
    click.option("--batch-size", type=int),
    click.option("--task", type=_choices(Task)),
    click.option("--n-train", type=int),
    click.option("--n-eval", type=int),
    click.option("--max-objects", type=int),
    click.option("--data-seed", type=int),
    click.option("--manifest", type=click.Path(dir_okay=False), help="Raw dataset manifest instead of a generator."),
    click.option("--noise-rho", type=float),
    click.option("--noise-sigma", type=float),
    click.option("--noise-model", type=_choices(NoiseModel)),
    click.option("--verify-epochs", type=int),
    click.option("--seeds", callback=_int_list, help="Comma-separated seeds for sweeps."),
    click.option("--output-dir", type=click.Path(file_okay=False)),
]


def experiment_options(fn):
    for option in reversed(EXPERIMENT_OPTIONS):
        fn = option(fn)
    return fn


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(options: dict[str, Any]) -> ExperimentConfig:
    """Flags first, then the --config file on top; unknown keys are rejected."""
    payload: dict[str, Any] = {"output_dir": settings.output_dir}
    for flag, path in FLAG_PATHS.items():
        value = options.get(flag)
        if value is None:
            continue
        if flag == "da":
            value = value == "on"
        node = payload
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    config_path = options.get("config_path")
    if config_path:
        try:
            payload = _merge(payload, json.loads(Path(config_path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {config_path} ({exc.msg})") from exc

    # The head follows the task's label count unless it is given explicitly
    data = payload.get("data", {})
    if "num_classes" not in payload.get("model", {}) and not data.get("manifest"):
        try:
            payload.setdefault("model", {})["num_classes"] = DatasetSpec.model_validate(data).label_count
        except ValidationError:
            pass  # reported below with the full config
    if "num_classes" in payload.get("model", {}) and "num_classes" not in data and data.get("task", "pattern") == "pattern":
        payload.setdefault("data", {})["num_classes"] = payload["model"]["num_classes"]

    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid configuration at {where or '<root>'}: {first['msg']}") from exc


def handle_errors(fn):
    """Map PromptVitError to its exit code; anything unexpected exits 4."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except PromptVitError as exc:
            logger.error("command_failed", error=type(exc).__name__, detail=str(exc), exit_code=exc.exit_code)
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
        except Exception as exc:
            sentry_sdk.capture_exception(exc)
            logger.critical("command_crashed", error=type(exc).__name__, detail=str(exc))
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
@click.option("--log-level", default=None, help="Overrides IVPT_LOG_LEVEL.")
@click.option("--jobs", type=int, default=None, help="Concurrent sweep cells (process pool).")
@click.pass_context
def cli(ctx, log_level, jobs):
    """Prompt-tuned ViT experiments on a frozen desk-scale backbone."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["jobs"] = settings.jobs if jobs is None else jobs


@cli.command()
@click.option("--seed", type=int, default=None, help="Run seed (default IVPT_SEED).")
@experiment_options
@handle_errors
def train(seed, **options):
    """Train one prompt configuration; writes metrics, run summary and snapshot."""
    cfg = build_config(options)
    seed = settings.seed if seed is None else seed
    record, run = experiments.run_train(cfg, seed)
    click.echo(
        f"{record.label} seed={seed} top1={record.final_top1:.4f} "
        f"initial={run.initial_eval_acc:.4f} params={record.params.total} hash={record.config_hash[:12]}"
    )


@cli.command()
@click.option("--seed", type=int, default=None)
@click.option("--ln-path", is_flag=True, help="Run the check through LayerNorm; informational only.")
@click.option("--gradcheck", "with_gradcheck", is_flag=True, help="Also finite-difference every trainable group.")
@experiment_options
@handle_errors
def verify(seed, ln_path, with_gradcheck, **options):
    """Check the attention re-weighting identities on every layer and head."""
    cfg = build_config(options)
    seed = settings.seed if seed is None else seed
    report = experiments.run_verify(cfg, seed, LN_PATH if ln_path else BYPASS_LN, with_gradcheck)
    checks = report["checks"]
    passed = sum(c["pass"] for c in checks)
    worst = max((c["max_residual"] for c in checks), default=0.0)
    click.echo(f"{passed}/{len(checks)} checks passed ({report['key_path']}), max residual {worst:.3e}")
    if "gradcheck" in report:
        for group, error in report["gradcheck"]["groups"].items():
            click.echo(f"gradcheck {group}: {error:.3e}")


@cli.command()
@click.option("--axes", default="", help="Comma-separated subset of structure,da,ar,n_prompts,ar_k.")
@experiment_options
@click.pass_context
@handle_errors
def ablate(ctx, axes, **options):
    """Cartesian sweep over component axes x seeds."""
    cfg = build_config(options)
    axis_list = [a.strip() for a in axes.split(",") if a.strip()]
    _, summary = experiments.run_ablate(cfg, axis_list, ctx.obj["jobs"])
    click.echo(summary.to_string(index=False))


@cli.command("noise-sweep")
@click.option("--rhos", callback=_float_list, help="Comma-separated noise rates.")
@click.option("--structures", default=None, help="Comma-separated structures (default cdc,express).")
@click.option("--noise-train", is_flag=True, default=False, help="Corrupt the training split too.")
@experiment_options
@click.pass_context
@handle_errors
def noise_sweep(ctx, rhos, structures, noise_train, **options):
    """Accuracy under Gaussian input noise, per structure, rate and seed."""
    cfg = build_config(options)
    chosen = None
    if structures:
        try:
            chosen = [Structure(s.strip()) for s in structures.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    result = experiments.run_noise_sweep(cfg, rhos, chosen, noise_train or None, ctx.obj["jobs"])
    click.echo(result.summary.to_string(index=False))
    if result.cdc_more_robust is not None:
        verdict = "holds" if result.cdc_more_robust else "does not hold (soft)"
        click.echo(f"cdc drop <= express drop: {verdict}")


@cli.command("attn-dump")
@click.option("--seed", type=int, default=None)
@click.option("--index", type=int, default=0, help="Evaluation sample to trace.")
@click.option("--snapshot", type=click.Path(file_okay=False), default=None, help="Snapshot directory to load.")
@experiment_options
@handle_errors
def attn_dump(seed, index, snapshot, **options):
    """Per-layer class-token attention over image tokens, as CSV."""
    cfg = build_config(options)
    seed = settings.seed if seed is None else seed
    frame = experiments.attn_dump(cfg, seed, index, snapshot)
    click.echo(f"{len(frame)} layers x {frame.shape[1] - 1} slots -> {Path(cfg.output_dir) / 'attention.csv'}")


@cli.command()
@click.option("--registry", is_flag=True, help="Build the model and cross-check the trainable-scalar count.")
@experiment_options
@handle_errors
def params(registry, **options):
    """Learnable-parameter breakdown of the configured structure."""
    cfg = build_config(options)
    breakdown, count = experiments.params(cfg, registry)
    payload = breakdown.model_dump()
    if count is not None:
        payload["registry"] = count
    click.echo(json.dumps(payload, sort_keys=True))


@cli.command()
@click.option("--n", "n", type=int, required=True, help="Number of samples.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@experiment_options
@handle_errors
def generate(n, out, **options):
    """Write a synthetic dataset in the raw manifest format."""
    cfg = build_config(options)
    manifest = experiments.generate(cfg, n, out)
    click.echo(str(manifest))
