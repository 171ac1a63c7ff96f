from __future__ import annotations

from pathlib import Path

import pytest

from codecshield.config import ENV_WORK_DIR, ExperimentConfig, load_config, save_config
from codecshield.errors import ConfigError

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.yaml"


def test_reference_file_matches_defaults(monkeypatch):
    monkeypatch.delenv(ENV_WORK_DIR, raising=False)
    assert load_config(REFERENCE).to_dict() == ExperimentConfig().to_dict()


def test_defaults_describe_the_reference_sweep():
    config = ExperimentConfig()
    config.ensure_valid()
    assert config.codec.names == ["identity", "bitcrush", "rvq"]
    assert config.attack.epsilon_lsb == [2, 5, 10]
    assert config.detector.fpr_given == [0.05, 0.01, 0.001]
    assert (config.corpus.n_speakers, config.corpus.utts_per_speaker) == (20, 10)


def test_save_load_round_trip(tmp_path, monkeypatch, tiny_config):
    monkeypatch.delenv(ENV_WORK_DIR, raising=False)
    path = save_config(tiny_config, tmp_path / "nested" / "cfg.yaml")
    assert load_config(path).to_dict() == tiny_config.to_dict()


def test_unknown_keys_are_rejected_with_dotted_name(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("attack:\n  epsilon: [2]\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="attack.epsilon"):
        load_config(path)
    path.write_text("seeds: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="seeds"):
        load_config(path)


def test_missing_keys_take_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_WORK_DIR, raising=False)
    path = tmp_path / "cfg.yaml"
    path.write_text("seed: 5\ncorpus:\n  n_speakers: 4\n", encoding="utf-8")
    config = load_config(path)
    assert config.seed == 5
    assert config.corpus.n_speakers == 4
    assert config.corpus.utts_per_speaker == 10
    assert config.asv.lr == 1e-3


@pytest.mark.parametrize(
    "text",
    [
        "attack:\n  epsilon_lsb: []\n",
        "detector:\n  fpr_given: [1.5]\n",
        "codec:\n  names: [mp3]\n",
        "codec:\n  codebook_size: 512\n",
        "corpus:\n  n_speakers: 1\n",
        "detector:\n  hist_range: [1.0, 0.0]\n",
        "asv:\n  epochs: many\n",
        "seed: [1, 2\n",
    ],
)
def test_invalid_configs_raise_config_error(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file_raises_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_environment_overrides_work_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_WORK_DIR, str(tmp_path / "elsewhere"))
    config = load_config(REFERENCE)
    assert config.work_dir == tmp_path / "elsewhere"


def test_fingerprint_ignores_paths_but_tracks_values():
    a, b = ExperimentConfig(), ExperimentConfig()
    b.paths.work_dir = "other"
    assert a.fingerprint() == b.fingerprint()
    b.seed += 1
    assert a.fingerprint() != b.fingerprint()
    assert a.section_fingerprint("corpus") == b.section_fingerprint("corpus")
