from . import clip, data, evaluate, gradcheck, plot, trainer
from .checkpoint import Checkpoint, load_model
from .cli import cli
from .config import TrainConfig, load_config
from .data import SyntheticSpec, load_dataset, synthesize_dataset
from .evaluate import EvalReport, evaluate_records, score_records
from .model import DamsModel
from .trainer import ablate, train

__all__ = [
    "Checkpoint",
    "DamsModel",
    "EvalReport",
    "SyntheticSpec",
    "TrainConfig",
    "ablate",
    "clip",
    "cli",
    "data",
    "evaluate",
    "evaluate_records",
    "gradcheck",
    "load_config",
    "load_dataset",
    "load_model",
    "plot",
    "score_records",
    "synthesize_dataset",
    "train",
    "trainer",
]
