import numpy as np
import pytest

from dams_vad.config import AblationSwitches, ModelConfig
from dams_vad.exceptions import DimensionError
from dams_vad.gradcheck import run_checks
from dams_vad.model import DamsModel


def _model(config: ModelConfig, seed: int = 0, **switches: bool) -> DamsModel:
    return DamsModel(config, np.random.default_rng(seed), AblationSwitches(**switches))


class TestDamsModel:
    def test_output_shapes(self, rng, tiny_model_config):
        model = _model(tiny_model_config)
        output, _ = model.forward(rng.normal(size=(3, 6, 11)))
        assert output.frame_logits.shape == (3, 11)
        assert output.frame_scores.shape == (3, 11)
        assert output.embeddings.shape == (3, 8, 11)
        assert ((output.frame_scores > 0) & (output.frame_scores < 1)).all()

    def test_same_seed_same_weights(self, tiny_model_config):
        first = _model(tiny_model_config, seed=4).state_dict()
        second = _model(tiny_model_config, seed=4).state_dict()
        assert first.keys() == second.keys()
        for name, value in first.items():
            np.testing.assert_array_equal(value, second[name])

    def test_state_dict_round_trip(self, rng, tiny_model_config):
        source = _model(tiny_model_config, seed=1)
        source.forward(rng.normal(size=(4, 6, 9)), "train")
        target = _model(tiny_model_config, seed=2)
        target.load_state_dict(source.state_dict())
        x = rng.normal(size=(2, 6, 7))
        np.testing.assert_array_equal(
            target.forward(x)[0].frame_scores, source.forward(x)[0].frame_scores
        )

    def test_state_dict_includes_running_statistics(self, tiny_model_config):
        state = _model(tiny_model_config).state_dict()
        assert "backbone.block0.bn.running_mean" in state
        assert "amtpn.tpp.s3.bn.running_var" in state
        assert "uncertainty.log_var" in state

    def test_load_rejects_other_architecture(self, tiny_model_config):
        state = _model(tiny_model_config, use_cbam=False).state_dict()
        with pytest.raises(DimensionError):
            _model(tiny_model_config).load_state_dict(state)

    def test_uncertainty_starts_at_zero(self, tiny_model_config):
        np.testing.assert_array_equal(_model(tiny_model_config).log_vars.value, np.zeros(3))

    @pytest.mark.parametrize(
        "switch", ["use_amtpn", "use_cbam", "use_ca", "use_sa", "use_aff", "use_tce", "use_tpp"]
    )
    def test_ablation_switches_build(self, rng, tiny_model_config, switch):
        full = sum(p.value.size for p in _model(tiny_model_config).parameters())
        ablated = _model(tiny_model_config, **{switch: False})
        assert sum(p.value.size for p in ablated.parameters()) < full
        output, _ = ablated.forward(rng.normal(size=(2, 6, 5)))
        assert output.frame_scores.shape == (2, 5)

    def test_eval_is_deterministic(self, rng, tiny_model_config):
        model = _model(tiny_model_config)
        x = rng.normal(size=(2, 6, 8))
        np.testing.assert_array_equal(
            model.forward(x)[0].frame_scores, model.forward(x)[0].frame_scores
        )

    def test_dropout_needs_generator_in_train(self, rng, tiny_model_config):
        model = _model(tiny_model_config.model_copy(update={"dropout": 0.5}))
        with pytest.raises(ValueError, match="generator"):
            model.forward(rng.normal(size=(2, 6, 8)), "train")
        output, _ = model.forward(rng.normal(size=(2, 6, 8)), "eval")
        assert output.frame_scores.shape == (2, 8)

    def test_masked_valid_frames_match_unpadded_eval(self, rng, tiny_model_config):
        model = _model(tiny_model_config, use_tpp=False)
        x = rng.normal(size=(1, 6, 7))
        padded = np.concatenate([x, np.zeros((1, 6, 5))], axis=2)
        mask = np.array([[True] * 7 + [False] * 5])
        short = model.forward(x, "eval", np.ones((1, 7), dtype=bool))[0].frame_scores
        long = model.forward(padded, "eval", mask)[0].frame_scores
        # each k=3 convolution reads one frame past the boundary
        np.testing.assert_allclose(long[:, :5], short[:, :5], atol=1e-12)

    def test_padding_reaches_only_the_tail_window(self, rng, tiny_model_config):
        model = _model(tiny_model_config)
        x = rng.normal(size=(1, 6, 12))
        padded = np.concatenate([x, np.zeros((1, 6, 6))], axis=2)
        mask = np.array([[True] * 12 + [False] * 6])
        short = model.forward(x, "eval", np.ones((1, 12), dtype=bool))[0].frame_scores
        long = model.forward(padded, "eval", mask)[0].frame_scores
        # backbone k=3, widest pyramid window 5 and temporal attention k=3 add up to 4 frames
        np.testing.assert_allclose(long[:, :8], short[:, :8], atol=1e-12)
        assert not np.allclose(long[:, 8:12], short[:, 8:12], atol=1e-12)

    def test_rejects_wrong_input_dim(self, rng, tiny_model_config):
        with pytest.raises(DimensionError):
            _model(tiny_model_config).forward(rng.normal(size=(1, 5, 4)))

    def test_backward_returns_input_gradient(self, rng, tiny_model_config):
        model = _model(tiny_model_config)
        x = rng.normal(size=(2, 6, 9))
        _, cache = model.forward(x, "train")
        grad_x = model.backward(cache, grad_logits=np.ones((2, 9)))
        assert grad_x.shape == x.shape
        assert np.abs(model.head2_b.grad).sum() == pytest.approx(18.0)

    def test_pyramid_diagnostics(self, rng, tiny_model_config):
        model = _model(tiny_model_config)
        x = rng.normal(size=(2, 6, 10))
        assert len(model.pyramid_branches(x)) == 3
        assert model.fused_features(x).shape == (2, 8, 10)
        with pytest.raises(DimensionError):
            _model(tiny_model_config, use_amtpn=False).pyramid_branches(x)

    @pytest.mark.parametrize("check", ["backbone", "head", "model"])
    def test_gradients(self, check):
        for result in run_checks([check], seeds=(0, 1)):
            assert result.report.passed, (result.seed, result.report.per_parameter)
