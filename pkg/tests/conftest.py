from __future__ import annotations

from pathlib import Path

import pytest

from codecshield.asv import embed, init_model
from codecshield.codec import train_rvq
from codecshield.config import ExperimentConfig
from codecshield.signal import gen_corpus, read_wav

TINY_SPEAKERS = 3
TINY_UTTS = 4
TINY_DURATION_S = 0.5


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> tuple[Path, object]:
    root = tmp_path_factory.mktemp("corpus")
    trials = gen_corpus(TINY_SPEAKERS, TINY_UTTS, TINY_DURATION_S, seed=7, out_dir=root / "corpus", trials_path=root / "trials.txt")
    return root / "corpus", trials


@pytest.fixture(scope="session")
def corpus_dir(corpus) -> Path:
    return corpus[0]


@pytest.fixture(scope="session")
def trials(corpus):
    return corpus[1]


@pytest.fixture(scope="session")
def model():
    return init_model(seed=3, n_train_speakers=TINY_SPEAKERS)


@pytest.fixture(scope="session")
def wave(corpus_dir):
    return read_wav(corpus_dir / "spk000/utt03.wav")


@pytest.fixture(scope="session")
def enroll(model, corpus_dir):
    return embed(model, read_wav(corpus_dir / "spk001/utt02.wav"))


@pytest.fixture(scope="session")
def small_codec(corpus_dir, trials):
    return train_rvq(corpus_dir, seed=5, holdout=trials, codebook_size=16, kmeans_iters=5, min_frames=100)


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(
        {
            "seed": 11,
            "corpus": {"n_speakers": TINY_SPEAKERS, "utts_per_speaker": TINY_UTTS, "duration_s": TINY_DURATION_S},
            "asv": {"epochs": 1, "batch": 4, "crop_s": 0.3},
            "codec": {"codebook_size": 16, "kmeans_iters": 3, "min_frames": 100},
            "attack": {"epsilon_lsb": [1, 2]},
            "detector": {"fpr_given": [0.5, 0.1], "hist_bins": 5},
            "paths": {"work_dir": str(tmp_path / "work")},
        }
    )
