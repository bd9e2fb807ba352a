"""Deterministic training loop, Adam, ablation runs and the ``train``/``ablate`` commands.

All randomness of a run is derived statelessly: batches and crop choices from
``(seed, epoch)``, head dropout from ``(seed, iteration)``. A checkpoint therefore only
needs parameters, BN statistics, Adam moments and bookkeeping to resume bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

import click
import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from .checkpoint import Checkpoint
from .cli import cli
from .config import AblationSwitches, TrainConfig, config_hash, load_config
from .data import Batch, Dataset, VideoLabel, VideoRecord, batch_iter, load_dataset
from .evaluate import evaluate_records
from .exceptions import (
    ConfigError,
    DatasetError,
    DegenerateBatchError,
    TrainingAbortedError,
)
from .losses import (
    LossBreakdown,
    batch_topk_scores,
    build_triplet,
    focal_loss,
    topk_scatter,
    total_loss,
    triplet_loss,
    video_cls_loss,
)
from .model import DamsModel
from .tensor import Array, Parameter
from .utils import _remove_output, dump_json, format_run_time, json_line, require_path

logger: Final[logging.Logger] = logging.getLogger(name=__name__)

INIT_STREAM = 0x494E4954
DROPOUT_STREAM = 0x44524F50

LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
TRAIN_LOG = "train_log.jsonl"


class Adam:
    """Adam with bias correction; ``weight_decay`` adds an L2 term to network weights only,
    the uncertainty log-variances are never decayed."""

    def __init__(
        self, params: Sequence[Parameter], config: TrainConfig, no_decay: Iterable[str] = ()
    ) -> None:
        self.params = list(params)
        self.config = config
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m = {param.name: np.zeros_like(param.value) for param in self.params}
        self.v = {param.name: np.zeros_like(param.value) for param in self.params}

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        correction1 = 1.0 - cfg.beta1**self.step_count
        correction2 = 1.0 - cfg.beta2**self.step_count
        for param in self.params:
            grad = param.grad
            if cfg.weight_decay and param.name not in self.no_decay:
                grad = grad + cfg.weight_decay * param.value
            m = self.m[param.name]
            v = self.v[param.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + cfg.epsilon)
            param.value -= cfg.learning_rate * update

    def state_dict(self) -> dict[str, Array]:
        state: dict[str, Array] = {"step": np.array(self.step_count, dtype=np.int64)}
        for name in self.m:
            state[f"{name}.m"] = self.m[name].copy()
            state[f"{name}.v"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: dict[str, Array]) -> None:
        expected = {"step"} | {f"{name}.{moment}" for name in self.m for moment in ("m", "v")}
        if set(state) != expected:
            raise ConfigError("Optimizer state does not match the model parameters")
        self.step_count = int(state["step"])
        for name in self.m:
            self.m[name][...] = state[f"{name}.m"]
            self.v[name][...] = state[f"{name}.v"]


@dataclass(slots=True)
class StepResult:
    breakdown: LossBreakdown
    active: tuple[bool, bool, bool]


def train_step(
    model: DamsModel, batch: Batch, config: TrainConfig, iteration: int
) -> StepResult:
    """One forward/backward pass; gradients are left in the parameters for the optimizer.

    Frame pseudo-labels are thresholded pseudo-probabilities and are always 0 in normal
    videos. A loss term with nothing to act on in this batch (no pseudo-labelled frames,
    no triplet because the batch holds one class) is inactive for the step.
    """
    switches = config.ablation
    loss_cfg = config.loss
    model.zero_grads()
    dropout_rng = np.random.default_rng([config.seed, DROPOUT_STREAM, iteration])
    output, cache = model.forward(batch.features, "train", batch.mask, dropout_rng)

    anomalous = batch.video_labels.astype(bool)
    pseudo = (batch.pseudo_probs > config.clip.threshold) & anomalous[:, None] & batch.mask
    focal_mask = batch.mask & (batch.has_pseudo | ~anomalous)[:, None]

    l_pse, grad_scores = 0.0, np.zeros_like(output.frame_scores)
    pse_on = switches.use_l_pse and bool(focal_mask.any())
    if pse_on:
        l_pse, grad_scores = focal_loss(
            output.frame_scores, pseudo, focal_mask, loss_cfg.focal_alpha, loss_cfg.focal_gamma
        )

    video_logits, picked = batch_topk_scores(
        output.frame_logits, batch.lengths, loss_cfg.topk_fraction
    )
    l_cls, grad_video = video_cls_loss(video_logits, batch.video_labels)

    selection = None
    if switches.use_l_trip:
        selection = build_triplet(
            output.embeddings,
            output.frame_logits,
            pseudo,
            batch.video_labels,
            batch.mask,
            loss_cfg.topk_fraction,
        )
    triplet = None
    if selection is not None:
        triplet = triplet_loss(
            selection.anchor, selection.positive, selection.negative, loss_cfg.triplet_margin
        )
    l_trip = triplet[0] if triplet is not None else 0.0

    active = (pse_on, True, selection is not None)
    breakdown = total_loss(l_pse, l_cls, l_trip, model.log_vars.value, active)
    w_pse, w_cls, w_trip = breakdown.grad_terms

    grad_logits = w_cls * topk_scatter(grad_video, picked, output.frame_logits.shape)
    grad_embeddings = None
    if selection is not None and triplet is not None:
        grad_embeddings = w_trip * selection.embedding_grad(output.embeddings.shape, *triplet[1:])
    model.backward(
        cache,
        grad_logits=grad_logits,
        grad_embeddings=grad_embeddings,
        grad_scores=w_pse * grad_scores,
    )
    model.log_vars.accumulate(breakdown.grad_log_vars)
    for param in model.parameters():
        if not np.all(np.isfinite(param.grad)):
            raise TrainingAbortedError(f"Non-finite gradient in {param.name}", iteration)
    return StepResult(breakdown=breakdown, active=active)


@dataclass(slots=True)
class TrainResult:
    last: Checkpoint
    best: Checkpoint
    log: list[dict[str, Any]] = field(default_factory=list)


def _check_dataset(train: Sequence[VideoRecord], config: TrainConfig) -> None:
    if not train:
        raise DatasetError("The train split has no videos")
    labels = {record.label for record in train}
    if labels != {VideoLabel.NORMAL, VideoLabel.ANOMALOUS}:
        raise DatasetError("The train split must hold both normal and anomalous videos")
    dims = {record.input_dim for record in train}
    if dims != {config.model.input_dim}:
        raise DatasetError(
            f"Feature dimension {sorted(dims)} does not match model input_dim "
            f"{config.model.input_dim}"
        )


def _log_entry(iteration: int, step: StepResult | None) -> dict[str, Any]:
    if step is None:
        return {"iter": iteration, "skipped": True}
    b = step.breakdown
    return {
        "iter": iteration,
        "l_pse": b.l_pse,
        "l_cls": b.l_cls,
        "l_trip": b.l_trip,
        "total": b.total,
        "sigma2": list(b.sigma2),
    }


def _read_log(path: Path, upto: int) -> list[dict[str, Any]]:
    if not path.is_file():
        return []
    entries = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    return [entry for entry in entries if entry["iter"] <= upto]


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: Path | None = None,
    resume: Checkpoint | None = None,
    progress: bool = True,
) -> TrainResult:
    """Trains for ``config.max_iterations`` iterations, validating every
    ``config.validate_every`` iterations on the val split and keeping the best-AUC state.

    With ``out_dir`` the last and best checkpoints and the JSON-lines log are written
    there as training goes, so an interrupted run can be resumed from ``last.ckpt``.
    """
    train_records = dataset.split("train")
    val_records = dataset.split("val")
    _check_dataset(train_records, config)
    if not val_records:
        logger.warning("No val split; the last iterate is kept as the best checkpoint")

    model = DamsModel(
        config.model, np.random.default_rng([config.seed, INIT_STREAM]), config.ablation
    )
    optimizer = Adam(list(model.parameters()), config, no_decay=[model.log_vars.name])
    start = 0
    best: Checkpoint | None = None
    log: list[dict[str, Any]] = []
    log_path = out_dir / TRAIN_LOG if out_dir is not None else None

    def snapshot(iteration: int, best_state: Checkpoint | None) -> Checkpoint:
        return Checkpoint(
            config=config,
            model_state=model.state_dict(),
            optimizer_state=optimizer.state_dict(),
            iteration=iteration,
            best_auc=best_state.best_auc if best_state else None,
            best_ap=best_state.best_ap if best_state else None,
            best_iteration=best_state.best_iteration if best_state else None,
        )

    if resume is not None:
        if resume.config_hash != config_hash(config):
            raise ConfigError("Checkpoint was written by a run with a different config")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        start = resume.iteration
        if out_dir is not None and (out_dir / BEST_CHECKPOINT).is_file():
            best = Checkpoint.load(out_dir / BEST_CHECKPOINT)
        if log_path is not None:
            log = _read_log(log_path, start)
        logger.info("Resuming from iteration %d", start)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_json(out_dir / "config.json", config.model_dump(mode="json"))
        if log_path is not None:
            log_path.write_text("".join(json_line(e) + "\n" for e in log), encoding="utf-8")

    batches_per_epoch = math.ceil(len(train_records) / config.batch_size)
    epoch_batches: tuple[int, list[Batch]] | None = None
    bar = tqdm(
        range(start + 1, config.max_iterations + 1),
        desc="Training",
        initial=start,
        total=config.max_iterations,
        disable=None if progress else True,
    )
    for iteration in bar:
        epoch, index = divmod(iteration - 1, batches_per_epoch)
        if epoch_batches is None or epoch_batches[0] != epoch:
            epoch_batches = (
                epoch,
                batch_iter(train_records, config.batch_size, config.seed, "train", epoch),
            )
        batch = epoch_batches[1][index]
        step: StepResult | None
        try:
            step = train_step(model, batch, config, iteration)
        except DegenerateBatchError as error:
            logger.warning("Iteration %d skipped: %s", iteration, error)
            step = None
        except TrainingAbortedError as error:
            raise TrainingAbortedError(f"Iteration {iteration}: {error}", iteration) from error
        if step is not None:
            optimizer.step()
        entry = _log_entry(iteration, step)
        if step is not None:
            bar.set_postfix(loss=f"{step.breakdown.total:.4f}")

        if iteration % config.validate_every == 0 and val_records:
            report = evaluate_records(model, val_records, config.eval_batch_size)
            entry["val_auc"] = report.auc
            entry["val_ap"] = report.ap
            if best is None or best.best_auc is None or report.auc > best.best_auc:
                best = snapshot(iteration, None)
                best.best_auc, best.best_ap, best.best_iteration = report.auc, report.ap, iteration
                if out_dir is not None:
                    best.save(out_dir / BEST_CHECKPOINT)
            logger.info("Iteration %d: val AUC %.4f AP %.4f", iteration, report.auc, report.ap)

        log.append(entry)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as stream:
                stream.write(json_line(entry) + "\n")
        if out_dir is not None and iteration % config.validate_every == 0:
            snapshot(iteration, best).save(out_dir / LAST_CHECKPOINT)
    bar.close()

    last = snapshot(max(config.max_iterations, start), best)
    if best is None:
        best = last
    if out_dir is not None:
        last.save(out_dir / LAST_CHECKPOINT)
        if not (out_dir / BEST_CHECKPOINT).is_file():
            best.save(out_dir / BEST_CHECKPOINT)
    return TrainResult(last=last, best=best, log=log)


# Ablations

ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no-amtpn": {"use_amtpn": False},
    "no-cbam": {"use_cbam": False},
    "no-ca": {"use_ca": False},
    "no-sa": {"use_sa": False},
    "no-aff": {"use_aff": False},
    "no-tce": {"use_tce": False},
    "no-tpp": {"use_tpp": False},
    "no-l_pse": {"use_l_pse": False},
    "no-l_trip": {"use_l_trip": False},
    "baseline": {"use_amtpn": False, "use_cbam": False},
}


def variant_config(config: TrainConfig, variant: str, seed: int | None = None) -> TrainConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"Unknown ablation variant {variant!r}")
    switches = config.ablation.model_copy(update=ABLATION_VARIANTS[variant])
    update: dict[str, Any] = {"ablation": switches}
    if seed is not None:
        update["seed"] = seed
    return config.model_copy(update=update)


@dataclass(slots=True)
class AblationRow:
    variant: str
    aucs: list[float]
    aps: list[float]

    @property
    def median_auc(self) -> float:
        return statistics.median(self.aucs)

    @property
    def median_ap(self) -> float:
        return statistics.median(self.aps)

    def to_json(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "auc": self.aucs,
            "ap": self.aps,
            "median_auc": self.median_auc,
            "median_ap": self.median_ap,
        }


def ablate(
    config: TrainConfig,
    dataset: Dataset,
    variants: Sequence[str],
    seeds: Sequence[int],
    out_dir: Path | None = None,
) -> list[AblationRow]:
    """Trains every variant with every seed on an identical budget and reports the
    validation AUC/AP of each best checkpoint."""
    val_records = dataset.split("val")
    if not val_records:
        raise DatasetError("Ablation needs a val split to compare variants")
    rows: list[AblationRow] = []
    for variant in variants:
        row = AblationRow(variant=variant, aucs=[], aps=[])
        for seed in seeds:
            cfg = variant_config(config, variant, seed)
            run_dir = out_dir / variant / f"seed{seed}" if out_dir is not None else None
            result = train(cfg, dataset, run_dir, progress=False)
            model = result.best.build_model()
            report = evaluate_records(model, val_records, cfg.eval_batch_size)
            row.aucs.append(report.auc)
            row.aps.append(report.ap)
            logger.info("%s seed %d: AUC %.4f AP %.4f", variant, seed, report.auc, report.ap)
        rows.append(row)
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'variant':<12} {'median AUC':>10} {'median AP':>10}  runs"]
    for row in rows:
        lines.append(
            f"{row.variant:<12} {row.median_auc:>10.4f} {row.median_ap:>10.4f}  {len(row.aucs)}"
        )
    return "\n".join(lines)


# Commands


def _effective_config(
    config_path: Path | None,
    seed: int | None,
    iters: int | None,
    disabled: dict[str, bool],
) -> TrainConfig:
    config = load_config(config_path) if config_path is not None else TrainConfig()
    update: dict[str, Any] = {}
    if seed is not None:
        update["seed"] = seed
    if iters is not None:
        update["max_iterations"] = iters
    off = {f"use_{name}": False for name, flag in disabled.items() if flag}
    if off:
        update["ablation"] = config.ablation.model_copy(update=off).model_dump()
    try:
        return TrainConfig.model_validate(config.model_dump() | update)
    except ValidationError as error:
        raise ConfigError(f"Invalid config override: {error}") from error


def _switch_options(function: Any) -> Any:
    for name in reversed(AblationSwitches.model_fields):
        short = name.removeprefix("use_")
        flags = sorted({f"--no-{short.replace('_', '-')}", f"--no-{short}"})
        function = click.option(
            *flags, short, is_flag=True, default=False, help=f"Disable {short}."
        )(function)
    return function


def _load_train_inputs(dataset_dir: Path) -> Dataset:
    require_path(dataset_dir, "Dataset directory")
    return load_dataset(dataset_dir)


@cli.command(
    "train",
    help="Trains a model on the train split of a dataset, validating on its val split. "
    "Writes last.ckpt, best.ckpt, config.json and train_log.jsonl to the output directory.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="JSON training config. By default the built-in defaults.",
)
@click.option(
    "--dataset",
    "dataset_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Dataset directory with a manifest.",
)
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory.",
)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Run seed.")
@click.option("--iters", type=click.IntRange(min=0), default=None, help="Iteration budget.")
@_switch_options
@click.option(
    "--resume",
    is_flag=True,
    default=False,
    help="Continue from last.ckpt in the output directory.",
)
@click.option(
    "-f",
    "--force",
    is_flag=True,
    default=False,
    help="Override the output directory if it exists.",
)
def train_command(
    config_path: Path | None,
    dataset_dir: Path,
    out_dir: Path,
    seed: int | None,
    iters: int | None,
    resume: bool,
    force: bool,
    **disabled: bool,
) -> None:
    config = _effective_config(config_path, seed, iters, disabled)
    dataset = _load_train_inputs(dataset_dir)
    checkpoint = None
    if resume:
        checkpoint = Checkpoint.load(out_dir / LAST_CHECKPOINT)
    else:
        _remove_output(
            out_dir, "Output directory %s already exists. Add -f option for overwrite", force
        )
    started = time.monotonic()
    result = train(config, dataset, out_dir, resume=checkpoint)
    done = result.last.iteration - (checkpoint.iteration if checkpoint is not None else 0)
    elapsed = format_run_time(time.monotonic() - started, done)
    if result.best.best_auc is not None:
        click.echo(
            f"Best val AUC {result.best.best_auc:.4f} AP {result.best.best_ap:.4f} "
            f"at iteration {result.best.best_iteration} ({elapsed})"
        )
    else:
        click.echo(f"Trained {result.last.iteration} iterations ({elapsed})")


@cli.command(
    "ablate",
    help="Trains every ablation variant with every seed and prints median validation AUC/AP.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="JSON training config shared by all variants.",
)
@click.option(
    "--dataset",
    "dataset_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Dataset directory with a manifest.",
)
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory for runs and ablation.json.",
)
@click.option(
    "--variant",
    "variants",
    multiple=True,
    type=click.Choice(list(ABLATION_VARIANTS)),
    help="Variant to run; repeatable. By default all variants.",
)
@click.option(
    "--seeds", type=click.IntRange(min=1), default=5, show_default=True, help="Seeds per variant."
)
@click.option("--iters", type=click.IntRange(min=0), default=None, help="Iteration budget.")
@click.option(
    "-f",
    "--force",
    is_flag=True,
    default=False,
    help="Override the output directory if it exists.",
)
def ablate_command(
    config_path: Path | None,
    dataset_dir: Path,
    out_dir: Path,
    variants: tuple[str, ...],
    seeds: int,
    iters: int | None,
    force: bool,
) -> None:
    config = _effective_config(config_path, None, iters, {})
    dataset = _load_train_inputs(dataset_dir)
    _remove_output(
        out_dir, "Output directory %s already exists. Add -f option for overwrite", force
    )
    chosen = list(variants) or list(ABLATION_VARIANTS)
    seed_list = [config.seed + offset for offset in range(seeds)]
    rows = []
    for variant in tqdm(chosen, desc="Ablation variants", disable=None):
        rows.extend(ablate(config, dataset, [variant], seed_list, out_dir))
    dump_json(out_dir / "ablation.json", [row.to_json() for row in rows])
    click.echo(format_ablation_table(rows))
