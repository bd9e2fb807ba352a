import shutil

import numpy as np
import pytest
from click.testing import CliRunner

from dams_vad import cli
from dams_vad.clip import clip_binary_probs, clip_scores, cosine_matrix, pseudo_labels
from dams_vad.config import ClipPathConfig
from dams_vad.data import read_feature_file, read_manifest
from dams_vad.exceptions import DimensionError


class TestClipPath:
    def test_cosine_is_scale_invariant(self, rng):
        frames = rng.normal(size=(5, 8))
        texts = rng.normal(size=(3, 8))
        np.testing.assert_allclose(
            cosine_matrix(frames * 7.0, texts * 0.1), cosine_matrix(frames, texts), atol=1e-12
        )
        assert (np.abs(cosine_matrix(frames, texts)) <= 1.0 + 1e-12).all()

    def test_scores_rows_sum_to_one(self, rng):
        scores = clip_scores(rng.normal(size=(9, 8)), rng.normal(size=(4, 8)), ClipPathConfig())
        assert scores.shape == (9, 4)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)

    def test_scores_favor_matching_class(self, rng):
        texts = np.eye(3, 8)
        frames = texts[[2, 0, 1]] + 0.01 * rng.normal(size=(3, 8))
        scores = clip_scores(frames, texts, ClipPathConfig())
        np.testing.assert_array_equal(scores.argmax(axis=1), [2, 0, 1])

    def test_binary_probs_in_unit_interval(self, rng):
        probs = clip_binary_probs(
            rng.normal(size=(20, 8)), rng.normal(size=(2, 8)), ClipPathConfig()
        )
        assert probs.shape == (20,)
        assert ((probs > 0) & (probs < 1)).all()

    def test_binary_probs_rank_aligned_frames_higher(self, rng):
        texts = np.eye(2, 8)
        frames = rng.normal(size=(10, 8))
        frames[3] = texts[1] * 5.0
        probs = clip_binary_probs(frames, texts, ClipPathConfig())
        assert probs.argmax() == 3

    def test_tiny_scale_collapses_to_half(self, rng):
        probs = clip_binary_probs(
            rng.normal(size=(6, 8)), rng.normal(size=(2, 8)), ClipPathConfig(scale=1e-9)
        )
        np.testing.assert_allclose(probs, 0.5, atol=1e-9)

    def test_pseudo_labels_monotone_in_threshold(self, rng):
        probs = rng.uniform(size=100)
        counts = [int(pseudo_labels(probs, threshold).sum()) for threshold in (0.2, 0.5, 0.8)]
        assert counts == sorted(counts, reverse=True)
        np.testing.assert_array_equal(pseudo_labels(np.array([0.5, 0.51]), 0.5), [0, 1])

    def test_zero_norm_embedding_rejected(self, rng):
        frames = rng.normal(size=(3, 4))
        frames[1] = 0.0
        with pytest.raises(DimensionError):
            cosine_matrix(frames, rng.normal(size=(2, 4)))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cosine_matrix(rng.normal(size=(3, 4)), rng.normal(size=(2, 5)))


class TestPseudoCommand:
    def test_writes_pseudo_files(self, tmp_path, dataset_dir):
        root = tmp_path / "data"
        shutil.copytree(dataset_dir, root)
        result = CliRunner().invoke(cli, ["pseudo", str(root)])
        assert result.exit_code == 0, result.output
        descriptors = read_manifest(root)
        assert all(d.pseudo_probs == f"pseudo/{d.id}.feat" for d in descriptors)
        probs = read_feature_file(root / descriptors[0].pseudo_probs)
        assert probs.ndim == 1
        assert ((probs > 0) & (probs < 1)).all()

    def test_missing_dataset(self, tmp_path):
        result = CliRunner().invoke(cli, ["pseudo", str(tmp_path / "absent")])
        assert result.exit_code == 4


class TestClipClosedForm:
    def test_matching_class_probability(self):
        texts = np.eye(4)
        scores = clip_scores(texts[:1], texts, ClipPathConfig(temperature=1.0))
        np.testing.assert_allclose(scores[0, 0], np.e / (np.e + 3.0), atol=1e-12)
        np.testing.assert_allclose(scores[0, 1:], 1.0 / (np.e + 3.0), atol=1e-12)

    def test_binary_probs_by_hand(self):
        texts = np.array([[1.0, 0.0]])
        frames = np.array([[0.9, np.sqrt(1.0 - 0.81)], [0.1, np.sqrt(1.0 - 0.01)]])
        probs = clip_binary_probs(frames, texts, ClipPathConfig(scale=10.0))
        expected = 1.0 / (1.0 + np.exp(-np.array([4.0, -4.0])))
        np.testing.assert_allclose(probs, expected, atol=1e-12)
