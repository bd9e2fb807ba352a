"""Checkpoint archives: a zip of ``.npy`` members plus ``meta.json``.

Members are written in sorted order with a fixed timestamp, so two identical training
states produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import TrainConfig, config_hash
from .const import CHECKPOINT_FORMAT_VERSION
from .exceptions import BadMagicError, BadVersionError, ConfigError, TruncatedFileError
from .model import DamsModel
from .tensor import Array
from .utils import require_path

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_META = "meta.json"
_MODEL_PREFIX = "model/"
_OPTIMIZER_PREFIX = "optimizer/"


@dataclass(slots=True)
class Checkpoint:
    config: TrainConfig
    model_state: dict[str, Array]
    optimizer_state: dict[str, Array] = field(default_factory=dict)
    iteration: int = 0
    best_auc: float | None = None
    best_ap: float | None = None
    best_iteration: int | None = None

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def build_model(self) -> DamsModel:
        model = DamsModel(
            self.config.model, np.random.default_rng(self.config.seed), self.config.ablation
        )
        model.load_state_dict(self.model_state)
        return model

    def save(self, path: Path) -> None:
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "iteration": self.iteration,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config.model_dump(mode="json"),
            "best_auc": self.best_auc,
            "best_ap": self.best_ap,
            "best_iteration": self.best_iteration,
        }
        members: dict[str, bytes] = {
            _META: json.dumps(meta, indent=2, sort_keys=True).encode("utf-8")
        }
        for prefix, state in (
            (_MODEL_PREFIX, self.model_state),
            (_OPTIMIZER_PREFIX, self.optimizer_state),
        ):
            for name, value in state.items():
                buffer = io.BytesIO()
                np.save(buffer, np.ascontiguousarray(value), allow_pickle=False)
                members[f"{prefix}{name}.npy"] = buffer.getvalue()

        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_name(path.name + ".tmp")
        with zipfile.ZipFile(tmp_path, "w") as archive:
            for name in sorted(members):
                info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                archive.writestr(info, members[name])
        tmp_path.replace(path)

    @classmethod
    def load(cls, path: Path) -> Checkpoint:
        require_path(path, "Checkpoint")
        if not zipfile.is_zipfile(path):
            raise BadMagicError(f"{path} is not a checkpoint archive")
        try:
            with zipfile.ZipFile(path) as archive:
                names = archive.namelist()
                if _META not in names:
                    raise TruncatedFileError(f"{path} has no {_META} member")
                meta = json.loads(archive.read(_META))
                if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                    raise BadVersionError(
                        f"{path} has checkpoint format {meta.get('format_version')}, "
                        f"expected {CHECKPOINT_FORMAT_VERSION}"
                    )
                model_state: dict[str, Array] = {}
                optimizer_state: dict[str, Array] = {}
                for name in names:
                    for prefix, state in (
                        (_MODEL_PREFIX, model_state),
                        (_OPTIMIZER_PREFIX, optimizer_state),
                    ):
                        if name.startswith(prefix) and name.endswith(".npy"):
                            key = name.removeprefix(prefix).removesuffix(".npy")
                            payload = io.BytesIO(archive.read(name))
                            state[key] = np.load(payload, allow_pickle=False)
        except (zipfile.BadZipFile, EOFError, ValueError) as error:
            raise TruncatedFileError(f"Damaged checkpoint {path}: {error}") from error

        try:
            config = TrainConfig.model_validate(meta["config"])
        except ValidationError as error:
            raise ConfigError(f"Invalid config recorded in {path}: {error}") from error
        if config_hash(config) != meta["config_hash"]:
            raise ConfigError(f"Config hash recorded in {path} does not match its config")
        return cls(
            config=config,
            model_state=model_state,
            optimizer_state=optimizer_state,
            iteration=int(meta["iteration"]),
            best_auc=meta["best_auc"],
            best_ap=meta["best_ap"],
            best_iteration=meta["best_iteration"],
        )


def load_model(path: Path) -> tuple[DamsModel, Checkpoint]:
    checkpoint = Checkpoint.load(path)
    return checkpoint.build_model(), checkpoint
