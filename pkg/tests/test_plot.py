import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from dams_vad import cli
from dams_vad.checkpoint import load_model
from dams_vad.data import load_dataset
from dams_vad.evaluate import EvalReport, VideoResult, write_scores_csv
from dams_vad.exceptions import DimensionError
from dams_vad.plot import (
    SVG_NS,
    Curve,
    feature_panels,
    gt_segments,
    render_feature_heatmaps,
    render_score_svg,
)


def _elements(svg: str, tag: str, css_class: str) -> list[ET.Element]:
    root = ET.fromstring(svg)
    return [el for el in root.iter(f"{{{SVG_NS}}}{tag}") if el.get("class") == css_class]


class TestScoreSvg:
    def test_segments(self):
        assert gt_segments([0, 1, 1, 0, 1]) == [(1, 3), (4, 5)]
        assert gt_segments([0, 0]) == []
        assert gt_segments([1, 1]) == [(0, 2)]

    def test_one_polyline_per_curve(self):
        curves = [Curve("a", np.linspace(0, 1, 10)), Curve("b", np.full(10, 0.5))]
        svg = render_score_svg(curves, gt=[0, 0, 1, 1, 1, 0, 0, 0, 1, 0], title="video")
        polylines = _elements(svg, "polyline", "curve")
        assert len(polylines) == 2
        assert len(polylines[0].get("points", "").split()) == 10
        assert len(_elements(svg, "rect", "gt")) == 2
        assert svg.startswith("<?xml")

    def test_scores_map_inside_plot(self):
        svg = render_score_svg([Curve("a", np.array([0.0, 1.0, 2.0]))])
        (line,) = _elements(svg, "polyline", "curve")
        ys = [float(point.split(",")[1]) for point in line.get("points", "").split()]
        assert ys[0] > ys[1]
        assert ys[1] == ys[2]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            render_score_svg([Curve("a", np.zeros(3)), Curve("b", np.zeros(4))])
        with pytest.raises(DimensionError):
            render_score_svg([])


class TestHeatmaps:
    def test_tiles_are_stacked(self, rng):
        image = render_feature_heatmaps([rng.normal(size=(6, 10)), rng.normal(size=(8, 10))])
        assert image.mode == "L"
        assert image.size == (40, 4 * 6 + 4 * 8 + 8)

    def test_constant_map(self):
        image = render_feature_heatmaps([np.ones((2, 3))], pixel=1)
        assert np.asarray(image).max() == 0


class TestPlotCommand:
    def test_svg_from_score_files(self, tmp_path):
        for name, offset in (("first", 0.0), ("second", 0.2)):
            write_scores_csv(
                tmp_path / f"{name}.csv",
                [VideoResult("v1", 1, np.array([0.1, 0.5]) + offset, np.array([0, 1]))],
            )
        out = tmp_path / "v1.svg"
        args = [str(tmp_path / "first.csv"), str(tmp_path / "second.csv")]
        result = CliRunner().invoke(cli, ["plot", *args, "--video", "v1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert len(_elements(out.read_text(), "polyline", "curve")) == 2

    def test_unknown_video(self, tmp_path):
        write_scores_csv(tmp_path / "s.csv", [VideoResult("v1", 0, np.zeros(2), None)])
        result = CliRunner().invoke(
            cli, ["plot", str(tmp_path / "s.csv"), "--video", "v9", "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 6

    def test_feature_png(self, tmp_path, checkpoint_path, dataset_dir):
        out = tmp_path / "maps.png"
        result = CliRunner().invoke(
            cli,
            [
                "plot",
                "--features",
                str(checkpoint_path),
                "--dataset",
                str(dataset_dir),
                "--video",
                "video_00000",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        with Image.open(out) as image:
            assert image.format == "PNG"
            # input (6 rows), three pyramid scales and the fused map (8 rows each)
            assert image.size[1] == 4 * (6 + 4 * 8) + 8 * 4

    def test_needs_input(self, tmp_path):
        result = CliRunner().invoke(cli, ["plot", "--video", "v", "--out", str(tmp_path / "x")])
        assert result.exit_code == 2

    def test_svg_from_eval_report(self, tmp_path):
        report = EvalReport(
            auc=0.5,
            ap=0.5,
            per_video=[VideoResult("v1", 1, np.array([0.2, 0.9, 0.4]), np.array([0, 1, 0]))],
        )
        path = tmp_path / "report.json"
        path.write_text(json.dumps(report.to_json()))
        out = tmp_path / "v1.svg"
        result = CliRunner().invoke(cli, ["plot", str(path), "--video", "v1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        svg = out.read_text()
        (line,) = _elements(svg, "polyline", "curve")
        assert len(line.get("points", "").split()) == 3
        assert len(_elements(svg, "rect", "gt")) == 1


class TestFeaturePanels:
    def test_one_panel_per_scale(self, checkpoint_path, dataset_dir):
        model, _ = load_model(checkpoint_path)
        features = load_dataset(dataset_dir).records[0].crops[0]
        panels = feature_panels(model, features)
        names = [name for name, _ in panels]
        assert names == ["input", "scale 1", "scale 3", "scale 5", "fused"]
        assert len(panels) == len(model.amtpn.scales) + 2
        np.testing.assert_array_equal(panels[0][1], features)
        for _, feature_map in panels[1:]:
            assert feature_map.shape == (8, features.shape[1])
