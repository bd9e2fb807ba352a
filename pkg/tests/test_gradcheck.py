import pytest
from click.testing import CliRunner

from dams_vad import cli
from dams_vad.exceptions import GradCheckError
from dams_vad.gradcheck import CHECKS, run_checks

OP_CHECKS = [
    "conv1d",
    "avg_pool1d",
    "max_pool1d",
    "global_pools",
    "linear",
    "softmax",
    "sigmoid",
    "relu",
    "batch_norm1d",
]


@pytest.mark.parametrize("check", OP_CHECKS)
def test_op_backward_matches_finite_differences(check):
    for result in run_checks([check], seeds=(0, 1, 2)):
        assert result.report.passed, (result.name, result.seed, result.report.per_parameter)


def test_every_check_is_registered():
    assert set(OP_CHECKS) <= set(CHECKS)
    assert {"model", "total_loss", "aff", "cbam"} <= set(CHECKS)


def test_results_follow_requested_order():
    results = run_checks(["relu", "linear"], seeds=(3, 4))
    assert [(r.name, r.seed) for r in results] == [
        ("relu", 3),
        ("relu", 4),
        ("linear", 3),
        ("linear", 4),
    ]


def test_unknown_check():
    with pytest.raises(GradCheckError, match="bogus"):
        run_checks(["bogus"])


class TestCommand:
    def test_passing_check(self):
        result = CliRunner().invoke(cli, ["gradcheck", "--check", "linear", "--seeds", "1"])
        assert result.exit_code == 0, result.output
        assert "linear" in result.output
        assert "ok" in result.output

    def test_impossible_tolerance_fails(self):
        result = CliRunner().invoke(
            cli, ["gradcheck", "--check", "softmax", "--seeds", "1", "--tolerance", "-1"]
        )
        assert result.exit_code == 8
        assert "FAIL" in result.output

    def test_unknown_name_is_usage_error(self):
        result = CliRunner().invoke(cli, ["gradcheck", "--check", "bogus"])
        assert result.exit_code == 2
