import json

from click.testing import CliRunner

from dams_vad import cli
from dams_vad.config import TrainConfig, config_hash
from dams_vad.const import CHECKPOINT_FORMAT_VERSION, FEATURE_FORMAT_VERSION


def _last_json_line(output: str) -> dict:
    line = [line for line in output.splitlines() if line.startswith("{")][-1]
    return json.loads(line)


class TestGroup:
    def test_help_lists_commands_and_exit_codes(self):
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("train", "eval", "score", "synth", "pseudo", "ablate", "ci", "plot"):
            assert command in result.output
        assert "Exit codes:" in result.output
        assert "11  output exists" in result.output

    def test_log_level_from_environment(self):
        result = CliRunner().invoke(cli, ["info"], env={"DAMS_LOG": "debug"})
        assert result.exit_code == 0, result.output

    def test_unknown_log_level(self):
        result = CliRunner().invoke(cli, ["--log-level", "loud", "info"])
        assert result.exit_code == 2


class TestInfo:
    def test_defaults(self):
        result = CliRunner().invoke(cli, ["info"])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["config_hash"] == config_hash(TrainConfig())
        assert payload["feature_format_version"] == FEATURE_FORMAT_VERSION
        assert payload["checkpoint_format_version"] == CHECKPOINT_FORMAT_VERSION
        assert payload["config"]["model"]["pyramid"]["scales"] == [1, 3, 9, 27]

    def test_config_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 9, "model": {"input_dim": 6}}))
        result = CliRunner().invoke(cli, ["info", "--config", str(path)])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["config"]["seed"] == 9
        assert payload["config"]["model"]["input_dim"] == 6

    def test_missing_config(self, tmp_path):
        result = CliRunner().invoke(cli, ["info", "--config", str(tmp_path / "none.json")])
        assert result.exit_code == 4
        error = _last_json_line(result.output)
        assert error["error"] == "missing-path"
        assert "none.json" in error["message"]

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"learning_rate": -1.0}))
        result = CliRunner().invoke(cli, ["info", "--config", str(path)])
        assert result.exit_code == 3
        assert _last_json_line(result.output)["error"] == "config"

    def test_format_error_carries_code(self, tmp_path):
        bad = tmp_path / "bad.feat"
        bad.write_bytes(b"x" * 40)
        result = CliRunner().invoke(cli, ["pseudo", str(tmp_path), "--text", str(bad)])
        assert result.exit_code == 5
        error = _last_json_line(result.output)
        assert error == {"error": "format", "code": "bad-magic", "message": error["message"]}
