import json
from pathlib import Path
from typing import Any

import click
from click_help_colors import HelpColorsGroup

from .config import TrainConfig, config_hash, load_config
from .const import CHECKPOINT_FORMAT_VERSION, FEATURE_FORMAT_VERSION, LOG_LEVELS
from .exceptions import DamsError
from .utils import configure_logging

EXIT_CODES_EPILOG = """\b
Exit codes:
  0   success
  2   usage error
  3   invalid config
  4   missing path
  5   malformed feature or checkpoint file
  6   invalid dataset
  7   training aborted (non-finite loss)
  8   gradient check failed
  9   undefined metric
  10  numeric error (shape mismatch, degenerate batch)
  11  output exists (use -f)
"""


class DamsGroup(HelpColorsGroup):
    """Reports ``DamsError`` as one JSON line on stderr and exits with its code."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except DamsError as error:
            payload = {"error": error.category, "message": str(error)}
            code = getattr(error, "code", None)
            if code is not None:
                payload["code"] = code
            click.echo(json.dumps(payload, sort_keys=True), err=True)
            ctx.exit(error.exit_code)


@click.group(
    cls=DamsGroup,
    help_headers_color="bright_green",
    help_options_color="bright_yellow",
    epilog=EXIT_CODES_EPILOG,
)
@click.option(
    "--log-level",
    type=click.Choice(list(LOG_LEVELS)),
    envvar="DAMS_LOG",
    default="warn",
    show_default=True,
    help="Logging verbosity; also read from DAMS_LOG.",
)
def cli(log_level: str) -> None:
    configure_logging(log_level)


@cli.command(help="Prints the effective training config and the file format versions.")
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="JSON training config. By default the built-in defaults.",
)
def info(config_path: Path | None) -> None:
    config = load_config(config_path) if config_path is not None else TrainConfig()
    payload = {
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "feature_format_version": FEATURE_FORMAT_VERSION,
        "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
    }
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
