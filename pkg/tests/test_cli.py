from __future__ import annotations

import pytest

from codecshield.acceptance import DEFENDED_CHECKS, GENERAL_CHECKS, run_checks
from codecshield.cli import build_parser, main
from codecshield.config import ENV_WORK_DIR, ExperimentConfig, save_config


@pytest.fixture
def config_file(tmp_path, tiny_config, monkeypatch):
    monkeypatch.delenv(ENV_WORK_DIR, raising=False)
    return save_config(tiny_config, tmp_path / "tiny.yaml")


def test_no_command_prints_help(capsys):
    assert main([]) == 0
    assert "codecshield" in capsys.readouterr().out


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("gen-data", "train-asv", "train-codec", "attack", "calibrate", "evaluate", "run-all"):
        args = parser.parse_args([command, "--config", "x.yaml", "--force", "--jobs", "3"])
        assert (args.force, args.jobs) == (True, 3)
    for command in ("check", "show-config", "show-report"):
        assert parser.parse_args([command]).func is not None


def test_init_config_refuses_to_overwrite(tmp_path, capsys):
    path = tmp_path / "cfg.yaml"
    assert main(["init-config", str(path)]) == 0
    assert path.is_file()
    with pytest.raises(SystemExit) as info:
        main(["init-config", str(path)])
    assert info.value.code == 1
    assert "--force" in capsys.readouterr().err
    assert main(["init-config", str(path), "--force"]) == 0


def test_show_config_prints_fingerprint(config_file, capsys):
    assert main(["show-config", "--config", str(config_file)]) == 0
    err = capsys.readouterr().err
    assert "Fingerprint" in err
    assert '"seed": 11' in err


def test_missing_upstream_artifact_exits_with_hint(config_file, capsys):
    assert main(["gen-data", "--config", str(config_file)]) == 0
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--config", str(config_file)])
    assert info.value.code == 1
    assert "codecshield train-asv" in capsys.readouterr().err


def test_show_report_before_evaluate_fails(config_file):
    with pytest.raises(SystemExit):
        main(["show-report", "--config", str(config_file)])


@pytest.mark.slow
def test_run_all_then_check_and_report(config_file, tiny_config, capsys):
    assert main(["run-all", "--config", str(config_file), "--jobs", "2"]) == 0
    assert main(["run-all", "--config", str(config_file)]) == 0
    assert "skipped" in capsys.readouterr().err
    assert main(["show-report", "--config", str(config_file)]) == 0
    results = run_checks(tiny_config)
    assert len(results) == len(GENERAL_CHECKS) + len(DEFENDED_CHECKS)
    assert {r.status for r in results} <= {"pass", "FAIL", "skipped"}
    # The tiny config calibrates no fpr 0.05 threshold, so the headline detection check cannot run.
    assert results[len(GENERAL_CHECKS)].status == "skipped"
    assert (tiny_config.work_dir / "reports" / "acceptance.csv").is_file()


@pytest.mark.slow
def test_reference_run_passes_every_check(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_WORK_DIR, raising=False)
    config = ExperimentConfig.from_dict({"paths": {"work_dir": str(tmp_path / "reference")}})
    path = save_config(config, tmp_path / "reference.yaml")
    assert main(["run-all", "--config", str(path), "--jobs", "4"]) == 0
    assert main(["check", "--config", str(path)]) == 0
