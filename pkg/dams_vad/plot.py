"""Per-video score curves as SVG and feature-map heatmaps as PNG."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
import numpy.typing as npt
from PIL import Image

from .checkpoint import load_model
from .cli import cli
from .data import load_dataset
from .evaluate import read_report, read_scores_csv
from .exceptions import DatasetError, DimensionError
from .model import DamsModel
from .tensor import Array
from .utils import _remove_output, require_path

SVG_NS = "http://www.w3.org/2000/svg"
CURVE_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
GT_FILL = "#f4c7c3"

WIDTH = 800
HEIGHT = 240
MARGIN = 40


@dataclass(slots=True)
class Curve:
    label: str
    scores: Array


def gt_segments(gt: npt.ArrayLike) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of anomalous frames."""
    values = np.asarray(gt).astype(np.int8).ravel()
    edges = np.diff(np.concatenate([[0], values, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends, strict=True)]


def render_score_svg(
    curves: Sequence[Curve], gt: npt.ArrayLike | None = None, title: str = ""
) -> str:
    if not curves:
        raise DimensionError("At least one score curve is required")
    length = curves[0].scores.size
    if length == 0 or any(curve.scores.size != length for curve in curves):
        raise DimensionError("Score curves must be non-empty and share one length")
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    x_step = plot_w / max(length - 1, 1)

    def x_of(frame: float) -> float:
        return MARGIN + frame * x_step

    def y_of(score: float) -> float:
        return MARGIN + (1.0 - float(np.clip(score, 0.0, 1.0))) * plot_h

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(
        f"{{{SVG_NS}}}svg",
        {"width": str(WIDTH), "height": str(HEIGHT), "viewBox": f"0 0 {WIDTH} {HEIGHT}"},
    )
    if title:
        ET.SubElement(svg, f"{{{SVG_NS}}}title").text = title
    ET.SubElement(
        svg, f"{{{SVG_NS}}}rect", {"width": str(WIDTH), "height": str(HEIGHT), "fill": "white"}
    )
    if gt is not None:
        for start, end in gt_segments(gt):
            # a lone frame still gets half a step on each side
            left = x_of(max(start - 0.5, 0))
            right = x_of(min(end - 0.5, length - 1))
            ET.SubElement(
                svg,
                f"{{{SVG_NS}}}rect",
                {
                    "class": "gt",
                    "x": f"{left:.2f}",
                    "y": str(MARGIN),
                    "width": f"{max(right - left, 1.0):.2f}",
                    "height": str(plot_h),
                    "fill": GT_FILL,
                },
            )
    ET.SubElement(
        svg,
        f"{{{SVG_NS}}}polyline",
        {
            "class": "axis",
            "points": f"{MARGIN},{MARGIN} {MARGIN},{MARGIN + plot_h} "
            f"{MARGIN + plot_w},{MARGIN + plot_h}",
            "fill": "none",
            "stroke": "black",
        },
    )
    for value, label in ((0.0, "0"), (1.0, "1")):
        text = ET.SubElement(
            svg,
            f"{{{SVG_NS}}}text",
            {"x": str(MARGIN - 8), "y": f"{y_of(value) + 4:.2f}", "text-anchor": "end"},
        )
        text.text = label
    for index, curve in enumerate(curves):
        points = " ".join(
            f"{x_of(frame):.2f},{y_of(score):.2f}" for frame, score in enumerate(curve.scores)
        )
        color = CURVE_COLORS[index % len(CURVE_COLORS)]
        line = ET.SubElement(
            svg,
            f"{{{SVG_NS}}}polyline",
            {
                "class": "curve",
                "points": points,
                "fill": "none",
                "stroke": color,
                "stroke-width": "1.5",
            },
        )
        ET.SubElement(line, f"{{{SVG_NS}}}title").text = curve.label
        legend = ET.SubElement(
            svg,
            f"{{{SVG_NS}}}text",
            {"x": str(MARGIN + 10 + 140 * index), "y": str(MARGIN - 12), "fill": color},
        )
        legend.text = curve.label
    return ET.tostring(svg, encoding="unicode", xml_declaration=True)


# Feature heatmaps


def _to_gray(feature_map: Array) -> Image.Image:
    """Min-max scales a [C, T] map to an 8-bit image, time along x."""
    values = np.asarray(feature_map, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if high == low else (values - low) / (high - low)
    return Image.fromarray(np.round(scaled * 255).astype(np.uint8))


def render_feature_heatmaps(maps: Sequence[Array], pixel: int = 4, gap: int = 8) -> Image.Image:
    """Stacks the maps vertically, each scaled on its own, with ``pixel``-sized cells."""
    if not maps:
        raise DimensionError("At least one feature map is required")
    tiles = [
        _to_gray(m).resize((m.shape[1] * pixel, m.shape[0] * pixel), Image.Resampling.NEAREST)
        for m in maps
    ]
    width = max(tile.width for tile in tiles)
    height = sum(tile.height for tile in tiles) + gap * (len(tiles) - 1)
    canvas = Image.new("L", (width, height), color=255)
    top = 0
    for tile in tiles:
        canvas.paste(tile, (0, top))
        top += tile.height + gap
    return canvas


def feature_panels(model: DamsModel, features: Array) -> list[tuple[str, Array]]:
    """Input, one map per pyramid scale, then the fused AMTPN output; [C, T] each."""
    batch = features[None]
    panels = [("input", features)]
    if model.amtpn is not None:
        branches = model.pyramid_branches(batch)
        panels += [
            (f"scale {scale}", branch[0])
            for scale, branch in zip(model.amtpn.scales, branches, strict=True)
        ]
    panels.append(("fused", model.fused_features(batch)[0]))
    return panels


@cli.command(
    help="Renders anomaly-score curves of one video from score CSV files (one curve per "
    "file or eval report) with ground-truth shading to SVG, or with --features renders the "
    "video's input, per-scale pyramid and AMTPN-fused feature maps to PNG."
)
@click.argument("score_files", nargs=-1, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--video", "video_id", required=True, help="Video id to plot.")
@click.option(
    "--out",
    "out_path",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Output SVG (curves) or PNG (--features) path.",
)
@click.option("--label", "labels", multiple=True, help="Curve label per score file.")
@click.option(
    "--features",
    "features_checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Checkpoint whose pyramid branches and AMTPN output are rendered under the input.",
)
@click.option(
    "--dataset",
    "dataset_dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Dataset directory, required with --features.",
)
@click.option(
    "-f",
    "--force",
    is_flag=True,
    default=False,
    help="Override the output file if it exists.",
)
def plot(
    score_files: tuple[Path, ...],
    video_id: str,
    out_path: Path,
    labels: tuple[str, ...],
    features_checkpoint: Path | None,
    dataset_dir: Path | None,
    force: bool,
) -> None:
    _remove_output(out_path, "File %s already exists. Add -f option for overwrite", force)
    if features_checkpoint is not None:
        if dataset_dir is None:
            raise click.UsageError("--features needs --dataset")
        require_path(dataset_dir, "Dataset directory")
        model, _ = load_model(features_checkpoint)
        records = {record.id: record for record in load_dataset(dataset_dir).records}
        if video_id not in records:
            raise DatasetError(f"Video {video_id} is not in {dataset_dir}")
        panels = feature_panels(model, records[video_id].crops[0])
        render_feature_heatmaps([m for _, m in panels]).save(out_path, format="PNG")
        names = ", ".join(name for name, _ in panels)
        click.echo(f"Feature maps of {video_id} ({names}) written to {out_path}")
        return

    if not score_files:
        raise click.UsageError("Give at least one score CSV or --features")
    if labels and len(labels) != len(score_files):
        raise click.UsageError("--label must be given once per score file")
    curves: list[Curve] = []
    gt = None
    for index, path in enumerate(score_files):
        if path.suffix == ".json":
            report = read_report(path)
            videos = {v.video_id: (v.scores, v.gt) for v in report.per_video}
        else:
            videos = read_scores_csv(path)
        if video_id not in videos:
            raise DatasetError(f"Video {video_id} has no scores in {path}")
        scores, video_gt = videos[video_id]
        curves.append(Curve(labels[index] if labels else path.stem, scores))
        gt = gt if gt is not None else video_gt
    out_path.write_text(render_score_svg(curves, gt, title=video_id), encoding="utf-8")
    click.echo(f"Score plot of {video_id} written to {out_path}")
