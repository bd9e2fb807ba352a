"""Frame scoring of whole videos, evaluation reports and the ``eval``, ``score`` and ``ci``
commands."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Final

import click
import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .checkpoint import load_model
from .cli import cli
from .config import MiEstimatorConfig
from .data import VideoRecord, load_dataset, tencrop_aggregate
from .exceptions import DatasetError, UndefinedMetricError
from .metrics import ScoredFrames, average_precision, complementarity_index, roc_auc
from .model import DamsModel
from .tensor import Array
from .utils import _remove_output, dump_json, require_path

logger: Final[logging.Logger] = logging.getLogger(name=__name__)


def score_records(
    model: DamsModel, records: Sequence[VideoRecord], batch_size: int = 10
) -> dict[str, Array]:
    """Per-frame anomaly scores for every video, averaged over its crops.

    Videos are run in eval mode in chunks of ``batch_size``; inside a chunk, videos of the
    same length share a forward pass so that no frame is ever padded.
    """
    scores: dict[str, Array] = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        by_length: dict[int, list[VideoRecord]] = defaultdict(list)
        for record in chunk:
            by_length[record.length].append(record)
        for group in by_length.values():
            crops = max(len(record.crops) for record in group)
            per_crop: list[list[Array]] = [[] for _ in group]
            for k in range(crops):
                rows = [(i, r) for i, r in enumerate(group) if k < len(r.crops)]
                features = np.stack([record.crops[k] for _, record in rows])
                output, _ = model.forward(features, "eval")
                for (i, _), row_scores in zip(rows, output.frame_scores, strict=True):
                    per_crop[i].append(row_scores)
            for record, crop_scores in zip(group, per_crop, strict=True):
                scores[record.id] = tencrop_aggregate(crop_scores)
    return {record.id: scores[record.id] for record in records}


@dataclass(slots=True)
class VideoResult:
    video_id: str
    label: int
    scores: Array
    gt: npt.NDArray[np.int8] | None

    def to_json(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "label": "anomalous" if self.label else "normal",
            "frames": int(self.scores.size),
            "max_score": float(self.scores.max()),
            "mean_score": float(self.scores.mean()),
            "scores": [float(score) for score in self.scores],
            "gt": None if self.gt is None else [int(value) for value in self.gt],
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> VideoResult:
        gt = payload.get("gt")
        return cls(
            video_id=str(payload["video_id"]),
            label=int(payload["label"] == "anomalous"),
            scores=np.array(payload["scores"], dtype=np.float64),
            gt=None if gt is None else np.array(gt, dtype=np.int8),
        )


@dataclass(slots=True)
class EvalReport:
    auc: float
    ap: float
    per_video: list[VideoResult]

    def to_json(self) -> dict[str, Any]:
        return {
            "auc": self.auc,
            "ap": self.ap,
            "per_video": [video.to_json() for video in self.per_video],
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> EvalReport:
        return cls(
            auc=float(payload["auc"]),
            ap=float(payload["ap"]),
            per_video=[VideoResult.from_json(video) for video in payload["per_video"]],
        )


def _results(
    model: DamsModel, records: Sequence[VideoRecord], batch_size: int
) -> list[VideoResult]:
    scores = score_records(model, records, batch_size)
    return [
        VideoResult(
            video_id=record.id,
            label=int(record.label),
            scores=scores[record.id],
            gt=record.frame_gt,
        )
        for record in records
    ]


def evaluate_records(
    model: DamsModel, records: Sequence[VideoRecord], batch_size: int = 10
) -> EvalReport:
    """Frame-level AUC and AP over all frames of ``records``, which need ground truth."""
    if not records:
        raise DatasetError("Nothing to evaluate: the split has no videos")
    missing = [record.id for record in records if record.frame_gt is None]
    if missing:
        raise DatasetError(f"Videos without frame ground truth: {', '.join(missing[:5])}")
    results = _results(model, records, batch_size)
    frames = ScoredFrames(
        scores=np.concatenate([result.scores for result in results]),
        labels=np.concatenate([result.gt for result in results if result.gt is not None]),
    )
    return EvalReport(auc=roc_auc(frames), ap=average_precision(frames), per_video=results)


def write_scores_csv(path: Path, results: Sequence[VideoResult]) -> None:
    with path.open("w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["video_id", "frame", "score", "gt"])
        for result in results:
            for frame, score in enumerate(result.scores):
                gt = "" if result.gt is None else int(result.gt[frame])
                writer.writerow([result.video_id, frame, repr(float(score)), gt])


def read_scores_csv(path: Path) -> dict[str, tuple[Array, npt.NDArray[np.int8] | None]]:
    require_path(path, "Score file")
    rows: dict[str, list[tuple[int, float, str]]] = defaultdict(list)
    with path.open(encoding="utf-8", newline="") as stream:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None or set(reader.fieldnames) < {"video_id", "frame", "score"}:
            raise DatasetError(f"{path} is not a score file (video_id, frame, score, gt)")
        for row in reader:
            rows[row["video_id"]].append((int(row["frame"]), float(row["score"]), row["gt"]))
    videos: dict[str, tuple[Array, npt.NDArray[np.int8] | None]] = {}
    for video_id, frames in rows.items():
        frames.sort()
        scores = np.array([score for _, score, _ in frames])
        gt = None
        if all(value != "" for _, _, value in frames):
            gt = np.array([int(value) for _, _, value in frames], dtype=np.int8)
        videos[video_id] = (scores, gt)
    return videos


def read_report(path: Path) -> EvalReport:
    """Loads an ``eval --out`` report, per-frame scores included."""
    require_path(path, "Report file")
    try:
        return EvalReport.from_json(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{path} is not an evaluation report: {e}") from e


def _split_records(dataset_dir: Path, split: str) -> list[VideoRecord]:
    require_path(dataset_dir, "Dataset directory")
    records = load_dataset(dataset_dir).split(split)
    if not records:
        raise DatasetError(f"Split {split!r} of {dataset_dir} has no videos")
    return records


_checkpoint_argument = click.argument(
    "checkpoint", type=click.Path(dir_okay=False, path_type=Path)
)
_dataset_option = click.option(
    "--dataset",
    "dataset_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Dataset directory with a manifest.",
)
_split_option = click.option(
    "--split",
    type=click.Choice(["train", "val", "test"]),
    default="val",
    show_default=True,
    help="Dataset split to use.",
)
_force_option = click.option(
    "-f",
    "--force",
    is_flag=True,
    default=False,
    help="Override the output file if it exists.",
)


@cli.command(
    "eval",
    help="Evaluates CHECKPOINT on a dataset split and writes a JSON report "
    "with frame-level AUC, AP and per-video summaries.",
)
@_checkpoint_argument
@_dataset_option
@_split_option
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Report path. By default the report is printed.",
)
@click.option(
    "--scores",
    "scores_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Also write per-frame scores as CSV.",
)
@_force_option
def evaluate(
    checkpoint: Path,
    dataset_dir: Path,
    split: str,
    out_path: Path | None,
    scores_path: Path | None,
    force: bool,
) -> None:
    for path in (out_path, scores_path):
        if path is not None:
            _remove_output(path, "File %s already exists. Add -f option for overwrite", force)
    model, ckpt = load_model(checkpoint)
    records = _split_records(dataset_dir, split)
    report = evaluate_records(model, records, ckpt.config.eval_batch_size)
    if scores_path is not None:
        write_scores_csv(scores_path, report.per_video)
    if out_path is not None:
        dump_json(out_path, report.to_json())
        click.echo(f"AUC {report.auc:.4f}  AP {report.ap:.4f}  ({len(records)} videos)")
    else:
        click.echo(json.dumps(report.to_json(), indent=2, sort_keys=True))


@cli.command(help="Writes per-frame anomaly scores of CHECKPOINT on a dataset split to CSV.")
@_checkpoint_argument
@_dataset_option
@_split_option
@click.option(
    "--out",
    "out_path",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="CSV path (video_id, frame, score, gt).",
)
@_force_option
def score(checkpoint: Path, dataset_dir: Path, split: str, out_path: Path, force: bool) -> None:
    _remove_output(out_path, "File %s already exists. Add -f option for overwrite", force)
    model, ckpt = load_model(checkpoint)
    records = _split_records(dataset_dir, split)
    results = _results(model, records, ckpt.config.eval_batch_size)
    write_scores_csv(out_path, results)
    click.echo(f"Scored {sum(r.scores.size for r in results)} frames of {len(results)} videos")


# Complementarity Index


@dataclass(slots=True)
class PairIndex:
    scale_i: int
    scale_j: int
    index: float | None
    mi_i: float
    mi_j: float
    mi_joint: float


def scale_complementarity(
    model: DamsModel,
    records: Sequence[VideoRecord],
    config: MiEstimatorConfig | None = None,
) -> list[PairIndex]:
    """CI for every pair of pyramid scales, over all frames of ``records`` (crop 0)."""
    if model.amtpn is None:
        raise DatasetError("Checkpoint was trained without AMTPN; there are no scales to compare")
    scales = model.amtpn.scales
    per_scale: list[list[Array]] = [[] for _ in scales]
    labels: list[npt.NDArray[np.int8]] = []
    for record in tqdm(records, desc="Extracting pyramid branches", disable=None):
        if record.frame_gt is None:
            raise DatasetError(f"Video {record.id} has no frame ground truth")
        branches = model.pyramid_branches(record.crops[0][None])
        for slot, branch in enumerate(branches):
            per_scale[slot].append(branch[0].T)
        labels.append(record.frame_gt)
    y = np.concatenate(labels)
    features = [np.concatenate(chunks) for chunks in per_scale]
    pairs: list[PairIndex] = []
    for i, j in itertools.combinations(range(len(scales)), 2):
        try:
            report = complementarity_index(features[i], features[j], y, config)
        except UndefinedMetricError as error:
            logger.warning("CI for scales %d and %d: %s", scales[i], scales[j], error)
            pairs.append(PairIndex(scales[i], scales[j], None, 0.0, 0.0, 0.0))
            continue
        pairs.append(
            PairIndex(
                scales[i], scales[j], report.index, report.mi_i, report.mi_j, report.mi_joint
            )
        )
    return pairs


@cli.command(
    help="Computes the Complementarity Index between every pair of AMTPN pyramid scales "
    "of CHECKPOINT on a dataset split."
)
@_checkpoint_argument
@_dataset_option
@_split_option
@click.option(
    "--bins", type=click.IntRange(min=2), default=8, show_default=True, help="Quantile bins."
)
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Write the table as JSON.",
)
@_force_option
def ci(
    checkpoint: Path,
    dataset_dir: Path,
    split: str,
    bins: int,
    out_path: Path | None,
    force: bool,
) -> None:
    if out_path is not None:
        _remove_output(out_path, "File %s already exists. Add -f option for overwrite", force)
    model, _ = load_model(checkpoint)
    records = _split_records(dataset_dir, split)
    pairs = scale_complementarity(model, records, MiEstimatorConfig(bins=bins))
    for pair in pairs:
        value = "undefined" if pair.index is None else f"{pair.index:+.4f}"
        click.echo(
            f"scales {pair.scale_i:>3} x {pair.scale_j:<3} CI {value}  "
            f"I_i {pair.mi_i:.4f}  I_j {pair.mi_j:.4f}  I_ij {pair.mi_joint:.4f}"
        )
    if out_path is not None:
        dump_json(
            out_path,
            [
                {
                    "scale_i": pair.scale_i,
                    "scale_j": pair.scale_j,
                    "ci": pair.index,
                    "mi_i": pair.mi_i,
                    "mi_j": pair.mi_j,
                    "mi_joint": pair.mi_joint,
                }
                for pair in pairs
            ],
        )
