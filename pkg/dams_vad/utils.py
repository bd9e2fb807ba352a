import json
import logging
import shutil
from pathlib import Path
from typing import Any

from .const import LOG_LEVELS
from .exceptions import MissingPathError, OutputExistsError


def _remove_output(path: Path, message: str, force: bool = False) -> None:
    if not path.exists():
        return
    if not force:
        raise OutputExistsError(message % str(path))
    if path.is_dir():
        shutil.rmtree(path)
    else:
        path.unlink()


def require_path(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPathError(f"{what} {path} does not exist")
    return path


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=LOG_LEVELS[level],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(LOG_LEVELS[level])


def format_run_time(seconds: float, iterations: int = 0) -> str:
    """Wall time as ``1h02m03.0s`` (hours only when nonzero), plus the iteration rate."""
    minutes, secs = divmod(float(seconds), 60.0)
    hours, minutes = divmod(int(minutes), 60)
    text = f"{hours}h{minutes:02}m{secs:04.1f}s" if hours else f"{minutes}m{secs:04.1f}s"
    if iterations > 0 and seconds > 0:
        text += f", {iterations / seconds:.1f} it/s"
    return text


def dump_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def json_line(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
