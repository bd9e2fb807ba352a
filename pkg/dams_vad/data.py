"""Feature files, dataset manifests, seeded batching, ten-crop aggregation and the
synthetic planted-anomaly generator."""

from __future__ import annotations

import enum
import logging
import struct
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Final, Literal

import click
import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from .cli import cli
from .const import FEATURE_FORMAT_VERSION, FEATURE_MAGIC, MANIFEST_NAME, SYNTHETIC_DURATIONS
from .exceptions import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    CrcMismatchError,
    DatasetError,
    DimensionError,
    FeatureFormatError,
    MissingPathError,
    TruncatedFileError,
)
from .tensor import Array
from .utils import _remove_output, json_line

logger: Final[logging.Logger] = logging.getLogger(name=__name__)

_HEADER = struct.Struct("<8sHB")
_CRC = struct.Struct("<I")
CLASS_NAMES_SUFFIX = ".classes.txt"


# Feature files


def write_feature_file(path: Path, tensor: npt.ArrayLike) -> None:
    """Magic, u16 version, u8 rank, u32 extents, little-endian float64 payload, CRC32."""
    array = np.asarray(tensor, dtype=np.float64)
    if not 1 <= array.ndim <= 3:
        raise DimensionError(f"Feature files hold rank 1-3 tensors, got rank {array.ndim}")
    if 0 in array.shape:
        raise DimensionError(f"Feature files cannot hold empty extents, got {array.shape}")
    payload = array.astype("<f8").tobytes(order="C")
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_FORMAT_VERSION, array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + extents + payload + _CRC.pack(zlib.crc32(payload)))


def read_feature_file(path: Path) -> Array:
    if not path.is_file():
        raise MissingPathError(f"Feature file {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    magic, version, rank = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {magic!r})")
    if version != FEATURE_FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported format version {version}")
    if not 1 <= rank <= 3:
        raise FeatureFormatError(f"{path}: invalid rank {rank}")
    offset = _HEADER.size
    if len(blob) < offset + 4 * rank:
        raise TruncatedFileError(f"{path}: file ends inside the extents")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    if 0 in shape:
        raise DimensionError(f"{path}: empty extent in shape {shape}")
    offset += 4 * rank
    size = 8 * int(np.prod(shape))
    if len(blob) < offset + size + _CRC.size:
        raise TruncatedFileError(f"{path}: expected {size} payload bytes plus checksum")
    if len(blob) > offset + size + _CRC.size:
        raise FeatureFormatError(f"{path}: unexpected trailing bytes")
    payload = blob[offset : offset + size]
    (crc,) = _CRC.unpack_from(blob, offset + size)
    if zlib.crc32(payload) != crc:
        raise CrcMismatchError(f"{path}: payload checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def read_class_names(embeddings_path: Path) -> list[str]:
    """Class names sit next to a text-embedding file, one UTF-8 name per line."""
    sidecar = embeddings_path.with_name(embeddings_path.name + CLASS_NAMES_SUFFIX)
    if not sidecar.is_file():
        raise MissingPathError(f"Class-name list {sidecar} does not exist")
    return [line for line in sidecar.read_text(encoding="utf-8").splitlines() if line]


def write_class_names(embeddings_path: Path, names: Sequence[str]) -> None:
    sidecar = embeddings_path.with_name(embeddings_path.name + CLASS_NAMES_SUFFIX)
    sidecar.write_text("".join(f"{name}\n" for name in names), encoding="utf-8")


# Records and manifests


class VideoLabel(enum.IntEnum):
    NORMAL = 0
    ANOMALOUS = 1

    @property
    def text(self) -> str:
        return self.name.lower()


@dataclass(slots=True)
class VideoRecord:
    id: str
    crops: list[Array]
    label: VideoLabel
    frame_gt: npt.NDArray[np.int8] | None = None
    pseudo_probs: Array | None = None
    split: str = "train"
    clip_embeds: Array | None = None

    def __post_init__(self) -> None:
        if not self.crops:
            raise DatasetError(f"Video {self.id} has no feature crops")
        shape = self.crops[0].shape
        if len(shape) != 2 or any(crop.shape != shape for crop in self.crops):
            raise DatasetError(f"Video {self.id}: crops must share one [Din, T] shape")
        for name in ("frame_gt", "pseudo_probs"):
            values = getattr(self, name)
            if values is not None and values.shape != (shape[1],):
                raise DatasetError(f"Video {self.id}: {name} length differs from T={shape[1]}")

    @property
    def length(self) -> int:
        return self.crops[0].shape[1]

    @property
    def input_dim(self) -> int:
        return self.crops[0].shape[0]


class VideoDescriptor(BaseModel):
    """One manifest line. Paths are relative to the dataset directory."""

    model_config = ConfigDict(extra="forbid")

    id: str
    split: Literal["train", "val", "test"] = "train"
    label: Literal["normal", "anomalous"]
    crops: list[str] = Field(min_length=1)
    frame_gt: str | None = None
    pseudo_probs: str | None = None
    clip_embeds: str | None = None


@dataclass(slots=True)
class Dataset:
    root: Path
    records: list[VideoRecord] = field(default_factory=list)

    def split(self, name: str) -> list[VideoRecord]:
        return [record for record in self.records if record.split == name]


def _record_paths(record: VideoRecord) -> VideoDescriptor:
    return VideoDescriptor(
        id=record.id,
        split=record.split,  # type: ignore[arg-type]
        label="anomalous" if record.label == VideoLabel.ANOMALOUS else "normal",
        crops=[f"features/{record.id}_crop{k}.feat" for k in range(len(record.crops))],
        frame_gt=f"labels/{record.id}_gt.feat" if record.frame_gt is not None else None,
        pseudo_probs=f"pseudo/{record.id}.feat" if record.pseudo_probs is not None else None,
        clip_embeds=f"clip/{record.id}.feat" if record.clip_embeds is not None else None,
    )


def write_dataset(root: Path, records: Sequence[VideoRecord]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for record in records:
        descriptor = _record_paths(record)
        for crop, rel in zip(record.crops, descriptor.crops, strict=True):
            write_feature_file(root / rel, crop)
        if descriptor.frame_gt is not None and record.frame_gt is not None:
            write_feature_file(root / descriptor.frame_gt, record.frame_gt)
        if descriptor.pseudo_probs is not None and record.pseudo_probs is not None:
            write_feature_file(root / descriptor.pseudo_probs, record.pseudo_probs)
        if descriptor.clip_embeds is not None and record.clip_embeds is not None:
            write_feature_file(root / descriptor.clip_embeds, record.clip_embeds)
        lines.append(json_line(descriptor.model_dump(mode="json")))
    (root / MANIFEST_NAME).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def read_manifest(root: Path) -> list[VideoDescriptor]:
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise MissingPathError(f"Dataset manifest {manifest} does not exist")
    descriptors: list[VideoDescriptor] = []
    for number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            descriptors.append(VideoDescriptor.model_validate_json(line))
        except ValidationError as error:
            raise DatasetError(f"{manifest}:{number}: invalid descriptor: {error}") from error
    return descriptors


def write_manifest(root: Path, descriptors: Sequence[VideoDescriptor]) -> None:
    lines = [json_line(descriptor.model_dump(mode="json")) for descriptor in descriptors]
    (root / MANIFEST_NAME).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def load_dataset(root: Path) -> Dataset:
    records: list[VideoRecord] = []
    for descriptor in read_manifest(root):
        records.append(
            VideoRecord(
                id=descriptor.id,
                crops=[read_feature_file(root / rel) for rel in descriptor.crops],
                label=(
                    VideoLabel.ANOMALOUS if descriptor.label == "anomalous" else VideoLabel.NORMAL
                ),
                frame_gt=(
                    read_feature_file(root / descriptor.frame_gt).astype(np.int8)
                    if descriptor.frame_gt
                    else None
                ),
                pseudo_probs=(
                    read_feature_file(root / descriptor.pseudo_probs)
                    if descriptor.pseudo_probs
                    else None
                ),
                split=descriptor.split,
                clip_embeds=(
                    read_feature_file(root / descriptor.clip_embeds)
                    if descriptor.clip_embeds
                    else None
                ),
            )
        )
    logger.info("Loaded %d videos from %s", len(records), root)
    return Dataset(root=root, records=records)


# Batching


@dataclass(slots=True)
class Batch:
    ids: list[str]
    features: Array
    mask: npt.NDArray[np.bool_]
    lengths: npt.NDArray[np.intp]
    video_labels: npt.NDArray[np.int8]
    pseudo_probs: Array
    has_pseudo: npt.NDArray[np.bool_]
    frame_gt: npt.NDArray[np.int8]


def collate(records: Sequence[VideoRecord], crop_choice: Sequence[int] | None = None) -> Batch:
    """Stack one crop per video, zero-padding T to the batch maximum."""
    # Padding is zero at the input only. Deeper layers produce activations on padded
    # frames, so convolution and pooling windows near the end of a shorter video differ
    # from its true-length pass. Scoring groups equal lengths and never pads.
    lengths = np.array([record.length for record in records], dtype=np.intp)
    longest = int(lengths.max())
    size = len(records)
    features = np.zeros((size, records[0].input_dim, longest))
    mask = np.zeros((size, longest), dtype=bool)
    pseudo = np.zeros((size, longest))
    gt = np.zeros((size, longest), dtype=np.int8)
    for row, record in enumerate(records):
        crop = record.crops[crop_choice[row] if crop_choice is not None else 0]
        features[row, :, : record.length] = crop
        mask[row, : record.length] = True
        if record.pseudo_probs is not None:
            pseudo[row, : record.length] = record.pseudo_probs
        if record.frame_gt is not None:
            gt[row, : record.length] = record.frame_gt
    return Batch(
        ids=[record.id for record in records],
        features=features,
        mask=mask,
        lengths=lengths,
        video_labels=np.array([int(record.label) for record in records], dtype=np.int8),
        pseudo_probs=pseudo,
        has_pseudo=np.array([record.pseudo_probs is not None for record in records]),
        frame_gt=gt,
    )


def _balance(groups: list[list[int]], labels: npt.NDArray[np.int8]) -> None:
    """Swap videos between batches so each batch of two or more holds both classes
    whenever another batch can spare one."""
    for group in groups:
        if len(group) < 2:
            continue
        for wanted in (0, 1):
            if any(labels[i] == wanted for i in group):
                continue
            for donor in groups:
                if donor is group:
                    continue
                spare = [i for i in donor if labels[i] == wanted]
                if len(spare) >= 2:
                    give = spare[-1]
                    take = group[-1]
                    donor[donor.index(give)] = take
                    group[-1] = give
                    break


def batch_iter(
    records: Sequence[VideoRecord],
    batch_size: int,
    seed: int = 0,
    mode: Literal["train", "eval"] = "eval",
    epoch: int = 0,
) -> list[Batch]:
    """Train mode shuffles with a permutation seeded by (seed, epoch), picks a random crop
    per video and balances classes across batches; eval mode keeps order and crop 0."""
    if not records:
        return []
    order = np.arange(len(records))
    crop_choice = np.zeros(len(records), dtype=np.intp)
    if mode == "train":
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(records))
        crop_choice = np.array([rng.integers(len(record.crops)) for record in records])
    groups = [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    if mode == "train":
        labels = np.array([int(record.label) for record in records], dtype=np.int8)
        _balance(groups, labels)
    return [
        collate([records[i] for i in group], [int(crop_choice[i]) for i in group])
        for group in groups
    ]


def tencrop_aggregate(per_crop_scores: Sequence[Array]) -> Array:
    if not per_crop_scores:
        raise DimensionError("Ten-crop aggregation needs at least one crop")
    stacked = np.stack([np.asarray(scores, dtype=np.float64) for scores in per_crop_scores])
    if stacked.ndim != 2:
        raise DimensionError("Per-crop scores must be equal-length 1-D sequences")
    return stacked.mean(axis=0)


# Synthetic planted-anomaly benchmark


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    videos: Annotated[int, Field(gt=0)] = 200
    t_min: Annotated[int, Field(gt=0)] = 64
    t_max: Annotated[int, Field(gt=0)] = 128
    input_dim: Annotated[int, Field(gt=0)] = 64
    anomaly_fraction: Annotated[float, Field(ge=0.0, le=1.0)] = 0.5
    durations: tuple[int, ...] = SYNTHETIC_DURATIONS
    snr: Annotated[float, Field(ge=0.0)] = 4.0
    anomaly_classes: Annotated[int, Field(gt=0)] = 3
    smoothness: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.5
    crops: Annotated[int, Field(gt=0)] = 1
    crop_noise: Annotated[float, Field(ge=0.0)] = 0.1
    flip_noise: Annotated[float, Field(ge=0.0, le=1.0)] = 0.1
    val_fraction: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.25
    with_clip: bool = False
    clip_dim: Annotated[int, Field(gt=0)] = 32
    clip_signal: Annotated[float, Field(ge=0.0)] = 3.0
    seed: Annotated[int, Field(ge=0)] = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> SyntheticSpec:
        if self.t_min > self.t_max:
            raise ValueError(f"t_min {self.t_min} exceeds t_max {self.t_max}")
        if not self.durations or min(self.durations) < 1:
            raise ValueError("planted durations must be positive")
        if self.anomaly_classes > self.input_dim:
            raise ValueError("anomaly_classes cannot exceed input_dim")
        return self


@dataclass(slots=True)
class SyntheticDataset:
    records: list[VideoRecord]
    directions: Array
    class_names: list[str]
    text_embeds: Array | None


def _orthonormal(rng: np.random.Generator, count: int, dim: int) -> Array:
    q, _ = np.linalg.qr(rng.normal(size=(dim, count)))
    return q.T[:count]


def _baseline(rng: np.random.Generator, length: int, dim: int, smoothness: float) -> Array:
    """AR(1) Gaussian process over time with unit marginal variance per dimension."""
    noise = rng.normal(size=(length, dim))
    frames = np.empty((length, dim))
    frames[0] = noise[0]
    innovation = np.sqrt(1.0 - smoothness**2)
    for t in range(1, length):
        frames[t] = smoothness * frames[t - 1] + innovation * noise[t]
    return frames


def _stratified_split(
    labels: Sequence[int], val_fraction: float, rng: np.random.Generator
) -> list[str]:
    splits = ["train"] * len(labels)
    for cls in (0, 1):
        members = [i for i, label in enumerate(labels) if label == cls]
        members = [members[j] for j in rng.permutation(len(members))]
        for i in members[: round(val_fraction * len(members))]:
            splits[i] = "val"
    return splits


def synthesize_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Normal frames follow a smooth Gaussian process over Din; anomalous videos carry one
    to three planted segments that add ``snr`` times a class direction. Pseudo
    probabilities are the ground truth with ``flip_noise`` of the frames flipped."""
    rng = np.random.default_rng(spec.seed)
    directions = _orthonormal(rng, spec.anomaly_classes, spec.input_dim)
    class_names = [f"anomaly_{c}" for c in range(spec.anomaly_classes)]
    text_embeds = (
        _orthonormal(rng, spec.anomaly_classes, spec.clip_dim) if spec.with_clip else None
    )

    n_anomalous = round(spec.anomaly_fraction * spec.videos)
    labels = np.zeros(spec.videos, dtype=np.int8)
    labels[rng.permutation(spec.videos)[:n_anomalous]] = 1
    splits = _stratified_split(labels.tolist(), spec.val_fraction, rng)

    records: list[VideoRecord] = []
    for index in tqdm(range(spec.videos), desc="Synthesizing videos", disable=None):
        length = int(rng.integers(spec.t_min, spec.t_max + 1))
        frames = _baseline(rng, length, spec.input_dim, spec.smoothness)
        gt = np.zeros(length, dtype=np.int8)
        anomaly_class = int(rng.integers(spec.anomaly_classes))
        if labels[index]:
            for _ in range(int(rng.integers(1, 4))):
                duration = min(int(rng.choice(spec.durations)), length)
                start = int(rng.integers(0, length - duration + 1))
                gt[start : start + duration] = 1
            frames += spec.snr * gt[:, None] * directions[anomaly_class][None, :]
        base = frames.T
        if spec.crops == 1:
            crops = [base]
        else:
            crops = [
                base + spec.crop_noise * rng.normal(size=base.shape) for _ in range(spec.crops)
            ]
        flipped = gt ^ (rng.random(length) < spec.flip_noise).astype(np.int8)
        pseudo = 0.5 + (2.0 * flipped - 1.0) * rng.uniform(0.05, 0.45, size=length)
        clip_embeds = None
        if text_embeds is not None:
            clip_embeds = rng.normal(size=(length, spec.clip_dim))
            clip_embeds += spec.clip_signal * gt[:, None] * text_embeds[anomaly_class][None, :]
        records.append(
            VideoRecord(
                id=f"video_{index:05d}",
                crops=crops,
                label=VideoLabel(int(labels[index])),
                frame_gt=gt,
                pseudo_probs=pseudo,
                split=splits[index],
                clip_embeds=clip_embeds,
            )
        )
    return SyntheticDataset(records, directions, class_names, text_embeds)


def write_synthetic(root: Path, synthetic: SyntheticDataset, spec: SyntheticSpec) -> None:
    write_dataset(root, synthetic.records)
    write_feature_file(root / "directions.feat", synthetic.directions)
    (root / "synthetic_spec.json").write_text(
        spec.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    if synthetic.text_embeds is not None:
        text_path = root / "clip" / "text.feat"
        write_feature_file(text_path, synthetic.text_embeds)
        write_class_names(text_path, synthetic.class_names)


@cli.command(help="Writes a synthetic planted-anomaly dataset to OUTPUT_DIR.")
@click.argument("output_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=int, default=None, help="Generator seed. By default 0.")
@click.option("--videos", type=int, default=None, help="Number of videos. By default 200.")
@click.option("--snr", type=float, default=None, help="Planted signal-to-noise ratio.")
@click.option("--crops", type=int, default=None, help="Feature crops per video (10 for ten-crop).")
@click.option(
    "--with-clip",
    is_flag=True,
    default=False,
    help="Also write synthetic frame and class-text embeddings for the CLIP path.",
)
@click.option(
    "--spec",
    "spec_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="JSON file with a full synthetic spec; flags override its fields.",
)
@click.option(
    "-f",
    "--force",
    is_flag=True,
    default=False,
    help="Override the output directory if it exists.",
)
def synth(
    output_dir: Path,
    seed: int | None,
    videos: int | None,
    snr: float | None,
    crops: int | None,
    with_clip: bool,
    spec_path: Path | None,
    force: bool,
) -> None:
    spec = load_synthetic_spec(spec_path)
    overrides = {
        key: value
        for key, value in {"seed": seed, "videos": videos, "snr": snr, "crops": crops}.items()
        if value is not None
    }
    if with_clip:
        overrides["with_clip"] = True
    try:
        spec = SyntheticSpec.model_validate(spec.model_dump() | overrides)
    except ValidationError as error:
        raise ConfigError(f"Invalid synthetic spec: {error}") from error
    _remove_output(
        output_dir, "Output directory %s already exists. Add -f option for overwrite", force
    )
    synthetic = synthesize_dataset(spec)
    write_synthetic(output_dir, synthetic, spec)
    anomalous = sum(record.label == VideoLabel.ANOMALOUS for record in synthetic.records)
    click.echo(f"Wrote {len(synthetic.records)} videos ({anomalous} anomalous) to {output_dir}")


def load_synthetic_spec(path: Path | None) -> SyntheticSpec:
    if path is None:
        return SyntheticSpec()
    if not path.is_file():
        raise MissingPathError(f"Synthetic spec {path} does not exist")
    try:
        return SyntheticSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as error:
        raise ConfigError(f"Invalid synthetic spec {path}: {error}") from error
