"""Offline CLIP path: turns stored frame and class-text embeddings into per-frame anomaly
probabilities and pseudo-labels. No encoder runs here; embeddings come from files."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Final

import click
import numpy as np
import numpy.typing as npt

from .cli import cli
from .config import ClipPathConfig
from .data import (
    read_class_names,
    read_feature_file,
    read_manifest,
    write_feature_file,
    write_manifest,
)
from .exceptions import DatasetError, DimensionError
from .tensor import Array, sigmoid, softmax
from .utils import require_path

logger: Final[logging.Logger] = logging.getLogger(name=__name__)


def _normalize_rows(embeds: Array, what: str) -> Array:
    if embeds.ndim != 2:
        raise DimensionError(f"{what} embeddings must be [N, D], got shape {embeds.shape}")
    norms = np.linalg.norm(embeds, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DimensionError(f"Degenerate {what} embedding with zero norm")
    return embeds / norms


def cosine_matrix(frame_embeds: Array, text_embeds: Array) -> Array:
    frames = _normalize_rows(np.asarray(frame_embeds, dtype=np.float64), "frame")
    texts = _normalize_rows(np.asarray(text_embeds, dtype=np.float64), "text")
    if frames.shape[1] != texts.shape[1]:
        raise DimensionError(
            f"Frame embeddings have dim {frames.shape[1]}, text embeddings {texts.shape[1]}"
        )
    return frames @ texts.T


def clip_scores(frame_embeds: Array, text_embeds: Array, config: ClipPathConfig) -> Array:
    """Class distribution per frame: softmax over classes of cos(v_t, u_c) / tau -> [T, Ncls]."""
    return softmax(cosine_matrix(frame_embeds, text_embeds) / config.temperature, axis=1)


def clip_binary_probs(
    frame_embeds: Array, abn_text_embeds: Array, config: ClipPathConfig
) -> Array:
    """Per-frame anomaly probability sigmoid(lambda * (max_c cos - mean_t max_c cos))."""
    if len(abn_text_embeds) == 0:
        raise DimensionError("At least one anomaly class text embedding is required")
    best = cosine_matrix(frame_embeds, abn_text_embeds).max(axis=1)
    return sigmoid(config.scale * (best - best.mean()))


def pseudo_labels(probs: Array, threshold: float) -> npt.NDArray[np.int8]:
    return (np.asarray(probs) > threshold).astype(np.int8)


@cli.command(
    help="Computes CLIP-path pseudo-probabilities for every video of DATASET_DIR that has "
    "stored frame embeddings, writes them as feature files and updates the manifest."
)
@click.argument("dataset_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option(
    "--text",
    "text_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Anomaly-class text embeddings [Ncls, De]. By default DATASET_DIR/clip/text.feat.",
)
@click.option(
    "--scale",
    type=click.FloatRange(min=0.0, min_open=True),
    default=None,
    help="Similarity scaling lambda. By default 100.",
)
def pseudo(dataset_dir: Path, text_path: Path | None, scale: float | None) -> None:
    require_path(dataset_dir, "Dataset directory")
    text_path = text_path or dataset_dir / "clip" / "text.feat"
    text_embeds = read_feature_file(text_path)
    names = read_class_names(text_path)
    if len(names) != len(text_embeds):
        raise DatasetError(
            f"{len(names)} class names for {len(text_embeds)} text embeddings in {text_path}"
        )
    config = ClipPathConfig() if scale is None else ClipPathConfig(scale=scale)
    descriptors = read_manifest(dataset_dir)
    updated = 0
    for descriptor in descriptors:
        if descriptor.clip_embeds is None:
            logger.warning("Video %s has no frame embeddings; skipped", descriptor.id)
            continue
        probs = clip_binary_probs(
            read_feature_file(dataset_dir / descriptor.clip_embeds), text_embeds, config
        )
        relative = f"pseudo/{descriptor.id}.feat"
        write_feature_file(dataset_dir / relative, probs)
        descriptor.pseudo_probs = relative
        updated += 1
    write_manifest(dataset_dir, descriptors)
    click.echo(f"Pseudo-probabilities written for {updated} of {len(descriptors)} videos")
