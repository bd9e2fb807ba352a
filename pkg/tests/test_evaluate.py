import json
import zipfile

import numpy as np
import pytest
from click.testing import CliRunner

from dams_vad import cli
from dams_vad.checkpoint import Checkpoint, load_model
from dams_vad.data import VideoLabel, VideoRecord, load_dataset
from dams_vad.evaluate import (
    VideoResult,
    evaluate_records,
    read_report,
    read_scores_csv,
    scale_complementarity,
    score_records,
    write_scores_csv,
)
from dams_vad.exceptions import (
    BadMagicError,
    BadVersionError,
    DatasetError,
    MissingPathError,
    TruncatedFileError,
)


@pytest.fixture(scope="module")
def val_records(dataset_dir):
    return load_dataset(dataset_dir).split("val")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, checkpoint_path):
        checkpoint = Checkpoint.load(checkpoint_path)
        assert checkpoint.iteration == 3
        assert checkpoint.best_iteration == 3
        copy = tmp_path / "copy.ckpt"
        checkpoint.save(copy)
        assert copy.read_bytes() == checkpoint_path.read_bytes()

    def test_not_an_archive(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"plain bytes")
        with pytest.raises(BadMagicError):
            Checkpoint.load(path)

    def test_missing_meta(self, tmp_path):
        path = tmp_path / "x.ckpt"
        with zipfile.ZipFile(path, "w") as archive:
            archive.writestr("model/w.npy", b"")
        with pytest.raises(TruncatedFileError):
            Checkpoint.load(path)

    def test_version_mismatch(self, tmp_path, checkpoint_path):
        path = tmp_path / "x.ckpt"
        with zipfile.ZipFile(checkpoint_path) as source, zipfile.ZipFile(path, "w") as target:
            for name in source.namelist():
                payload = source.read(name)
                if name == "meta.json":
                    meta = json.loads(payload)
                    meta["format_version"] = 99
                    payload = json.dumps(meta).encode()
                target.writestr(name, payload)
        with pytest.raises(BadVersionError):
            Checkpoint.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingPathError):
            Checkpoint.load(tmp_path / "absent.ckpt")


class TestScoring:
    def test_scores_match_single_video_forward(self, checkpoint_path, val_records):
        model, _ = load_model(checkpoint_path)
        scores = score_records(model, val_records, batch_size=4)
        assert list(scores) == [record.id for record in val_records]
        for record in val_records:
            expected = np.mean(
                [model.forward(crop[None], "eval")[0].frame_scores[0] for crop in record.crops],
                axis=0,
            )
            np.testing.assert_allclose(scores[record.id], expected, atol=1e-12)

    def test_batch_size_does_not_change_scores(self, checkpoint_path, val_records):
        model, _ = load_model(checkpoint_path)
        one = score_records(model, val_records, batch_size=1)
        many = score_records(model, val_records, batch_size=10)
        for video_id, values in one.items():
            np.testing.assert_allclose(many[video_id], values, atol=1e-12)

    def test_crops_are_averaged(self, checkpoint_path, rng):
        model, _ = load_model(checkpoint_path)
        crops = [rng.normal(size=(6, 9)) for _ in range(3)]
        record = VideoRecord(id="v", crops=crops, label=VideoLabel.NORMAL)
        expected = np.mean(
            [model.forward(crop[None], "eval")[0].frame_scores[0] for crop in crops], axis=0
        )
        np.testing.assert_allclose(score_records(model, [record])["v"], expected, atol=1e-12)

    def test_report(self, checkpoint_path, val_records):
        model, _ = load_model(checkpoint_path)
        report = evaluate_records(model, val_records)
        assert 0.0 <= report.auc <= 1.0
        assert 0.0 <= report.ap <= 1.0
        payload = report.to_json()
        assert len(payload["per_video"]) == len(val_records)
        assert set(payload["per_video"][0]) == {
            "video_id",
            "label",
            "frames",
            "max_score",
            "mean_score",
            "scores",
            "gt",
        }
        for video in payload["per_video"]:
            assert len(video["scores"]) == video["frames"]
            assert max(video["scores"]) == video["max_score"]

    def test_report_json_round_trip(self, tmp_path, checkpoint_path, val_records):
        model, _ = load_model(checkpoint_path)
        report = evaluate_records(model, val_records)
        path = tmp_path / "report.json"
        path.write_text(json.dumps(report.to_json()))
        loaded = read_report(path)
        assert loaded.auc == report.auc
        assert [v.video_id for v in loaded.per_video] == [v.video_id for v in report.per_video]
        for original, copy in zip(report.per_video, loaded.per_video, strict=True):
            assert copy.label == original.label
            np.testing.assert_array_equal(copy.scores, original.scores)
            np.testing.assert_array_equal(copy.gt, original.gt)

    def test_read_report_rejects_other_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text(json.dumps({"auc": 0.5}))
        with pytest.raises(DatasetError):
            read_report(path)
        with pytest.raises(MissingPathError):
            read_report(tmp_path / "absent.json")

    def test_report_needs_ground_truth(self, checkpoint_path, rng):
        model, _ = load_model(checkpoint_path)
        record = VideoRecord(id="v", crops=[rng.normal(size=(6, 4))], label=VideoLabel.NORMAL)
        with pytest.raises(DatasetError):
            evaluate_records(model, [record])
        with pytest.raises(DatasetError):
            evaluate_records(model, [])

    def test_scores_csv(self, tmp_path):
        results = [
            VideoResult("a", 1, np.array([0.1, 0.25]), np.array([0, 1], dtype=np.int8)),
            VideoResult("b", 0, np.array([1 / 3]), None),
        ]
        path = tmp_path / "scores.csv"
        write_scores_csv(path, results)
        lines = path.read_text().splitlines()
        assert lines[0] == "video_id,frame,score,gt"
        assert lines[2] == "a,1,0.25,1"
        videos = read_scores_csv(path)
        np.testing.assert_array_equal(videos["a"][0], [0.1, 0.25])
        np.testing.assert_array_equal(videos["a"][1], [0, 1])
        assert videos["b"][0][0] == 1 / 3
        assert videos["b"][1] is None

    def test_scale_complementarity(self, checkpoint_path, val_records):
        model, _ = load_model(checkpoint_path)
        pairs = scale_complementarity(model, val_records)
        assert [(p.scale_i, p.scale_j) for p in pairs] == [(1, 3), (1, 5), (3, 5)]
        for pair in pairs:
            assert pair.index is None or pair.index >= -1e-12


class TestCommands:
    def test_eval_writes_report_and_scores(self, tmp_path, checkpoint_path, dataset_dir):
        report = tmp_path / "report.json"
        scores = tmp_path / "scores.csv"
        args = [
            "eval",
            str(checkpoint_path),
            "--dataset",
            str(dataset_dir),
            "--out",
            str(report),
            "--scores",
            str(scores),
        ]
        result = CliRunner().invoke(cli, args)
        assert result.exit_code == 0, result.output
        payload = json.loads(report.read_text())
        assert {"auc", "ap", "per_video"} <= payload.keys()
        assert len(read_scores_csv(scores)) == len(payload["per_video"])
        assert CliRunner().invoke(cli, args).exit_code == 11
        assert CliRunner().invoke(cli, [*args, "-f"]).exit_code == 0

    def test_eval_prints_report(self, checkpoint_path, dataset_dir):
        result = CliRunner().invoke(
            cli, ["eval", str(checkpoint_path), "--dataset", str(dataset_dir)]
        )
        assert result.exit_code == 0, result.output
        assert '"per_video"' in result.output

    def test_score_and_ci(self, tmp_path, checkpoint_path, dataset_dir):
        out = tmp_path / "scores.csv"
        base = [str(checkpoint_path), "--dataset", str(dataset_dir)]
        result = CliRunner().invoke(cli, ["score", *base, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert out.is_file()
        table = tmp_path / "ci.json"
        result = CliRunner().invoke(cli, ["ci", *base, "--bins", "4", "--out", str(table)])
        assert result.exit_code == 0, result.output
        assert len(json.loads(table.read_text())) == 3

    def test_ci_rejects_single_bin(self, checkpoint_path, dataset_dir):
        result = CliRunner().invoke(
            cli, ["ci", str(checkpoint_path), "--dataset", str(dataset_dir), "--bins", "1"]
        )
        assert result.exit_code == 2

    def test_corrupt_checkpoint_exit_code(self, tmp_path, dataset_dir):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nope")
        result = CliRunner().invoke(cli, ["eval", str(bad), "--dataset", str(dataset_dir)])
        assert result.exit_code == 5
