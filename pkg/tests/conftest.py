from pathlib import Path

import numpy as np
import pytest

from dams_vad.config import CbamConfig, LossConfig, ModelConfig, PyramidConfig, TrainConfig
from dams_vad.data import SyntheticSpec, load_dataset, synthesize_dataset, write_synthetic
from dams_vad.trainer import BEST_CHECKPOINT, train


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="Run end-to-end training benchmarks.",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        input_dim=6,
        width=8,
        depth=1,
        pyramid=PyramidConfig(scales=(1, 3, 5), reduction=4),
        cbam=CbamConfig(reduction=4, kernel_size=3),
    )


@pytest.fixture
def tiny_train_config(tiny_model_config: ModelConfig) -> TrainConfig:
    return TrainConfig(
        max_iterations=6,
        validate_every=3,
        batch_size=8,
        eval_batch_size=4,
        learning_rate=1e-2,
        seed=5,
        model=tiny_model_config,
        loss=LossConfig(topk_fraction=0.2),
    )


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        videos=24,
        t_min=16,
        t_max=24,
        input_dim=6,
        durations=(2, 4, 8),
        anomaly_classes=2,
        snr=4.0,
        with_clip=True,
        clip_dim=8,
        seed=3,
    )


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory, small_spec: SyntheticSpec) -> Path:
    root = tmp_path_factory.mktemp("synthetic")
    write_synthetic(root, synthesize_dataset(small_spec), small_spec)
    return root


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory: pytest.TempPathFactory, dataset_dir: Path) -> Path:
    config = TrainConfig(
        max_iterations=3,
        validate_every=3,
        batch_size=8,
        eval_batch_size=4,
        seed=1,
        model=ModelConfig(
            input_dim=6,
            width=8,
            depth=1,
            pyramid=PyramidConfig(scales=(1, 3, 5), reduction=4),
            cbam=CbamConfig(reduction=4, kernel_size=3),
        ),
    )
    out_dir = tmp_path_factory.mktemp("run")
    train(config, load_dataset(dataset_dir), out_dir, progress=False)
    return out_dir / BEST_CHECKPOINT
