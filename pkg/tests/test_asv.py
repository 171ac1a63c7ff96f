from __future__ import annotations

import numpy as np
import pytest

from codecshield.asv import (
    EMBED_DIM,
    MAGIC,
    Embedding,
    Hyperparams,
    Score,
    embed,
    load_model,
    save_model,
    score,
    score_grad,
    train,
)
from codecshield.errors import ContainerFormatError, InsufficientDataError
from codecshield.signal import Waveform, read_wav
from codecshield.tensorfile import read_container, write_container


def test_embedding_has_unit_norm(model, wave):
    e = embed(model, wave)
    assert e.vector.shape == (EMBED_DIM,)
    assert np.linalg.norm(e.vector) == pytest.approx(1.0, abs=1e-12)


def test_embedding_and_score_validation():
    with pytest.raises(ValueError):
        Embedding(np.ones(EMBED_DIM))
    with pytest.raises(ValueError):
        Score(1.5)


def test_self_score_is_one(model, wave):
    assert float(score(model, embed(model, wave), wave)) == pytest.approx(1.0, abs=1e-12)


def test_score_grad_matches_finite_differences(model, enroll):
    rng = np.random.default_rng(4)
    for trial in range(3):
        x = rng.uniform(-0.3, 0.3, 4000)
        value, grad = score_grad(model, enroll, x)
        assert float(value) == pytest.approx(float(score(model, enroll, x)), abs=1e-12)
        direction = rng.standard_normal(x.size)
        direction /= np.linalg.norm(direction)
        h = 1e-4
        numeric = (float(score(model, enroll, x + h * direction)) - float(score(model, enroll, x - h * direction))) / (2 * h)
        analytic = float(grad @ direction)
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8), f"input {trial}"


def test_negated_enrollment_negates_gradient(model, enroll, wave):
    value, grad = score_grad(model, enroll, wave)
    neg_value, neg_grad = score_grad(model, -enroll, wave)
    assert float(neg_value) == -float(value)
    np.testing.assert_array_equal(neg_grad, -grad)


def test_save_load_round_trip(tmp_path, model, wave):
    path = tmp_path / "asv.model"
    save_model(model, path)
    loaded = load_model(path)
    np.testing.assert_array_equal(embed(loaded, wave).vector, embed(model, wave).vector)
    for name, tensor in model.params.items():
        np.testing.assert_array_equal(loaded.params[name], tensor)


def test_load_rejects_wrong_magic_and_truncation(tmp_path, model):
    path = tmp_path / "asv.model"
    save_model(model, path)
    data = path.read_bytes()
    (tmp_path / "magic.model").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ContainerFormatError, match="ASVM"):
        load_model(tmp_path / "magic.model")
    (tmp_path / "short.model").write_bytes(data[:-10])
    with pytest.raises(ContainerFormatError):
        load_model(tmp_path / "short.model")


def test_load_rejects_other_mel_count(tmp_path, model):
    path = tmp_path / "asv.model"
    save_model(model, path)
    tensors = read_container(path, MAGIC)
    tensors["frontend.mel"] = np.array([40.0, 20.0, 7600.0, 16000.0])
    write_container(path, MAGIC, tensors)
    with pytest.raises(ContainerFormatError, match="mel"):
        load_model(path)


def test_training_is_deterministic_and_reports_epochs(corpus_dir, trials, wave):
    hp = Hyperparams(epochs=2, batch=4, crop_s=0.3)
    losses = []
    a = train(corpus_dir, trials, hp, seed=1, on_epoch=lambda epoch, loss: losses.append((epoch, loss)))
    b = train(corpus_dir, trials, hp, seed=1)
    assert [e for e, _ in losses] == [1, 2]
    assert all(np.isfinite(loss) for _, loss in losses)
    assert a.n_train_speakers == 3
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_training_needs_utterances(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(InsufficientDataError):
        train(tmp_path / "empty", None, Hyperparams(epochs=1), seed=0)


def test_score_accepts_raw_arrays(model, enroll, wave):
    assert float(score(model, enroll, wave.samples)) == float(score(model, enroll, Waveform(wave.samples)))


@pytest.fixture(scope="module")
def trained(corpus_dir, trials):
    return train(corpus_dir, trials, Hyperparams(epochs=3, batch=4, crop_s=0.3), seed=2)


def _score_pairs(corpus_dir, trials, n_pairs: int, seed: int):
    """(enroll wave, 0.3 s dithered test crop) pairs drawn from the corpus."""
    rng = np.random.default_rng(seed)
    paths = sorted(trials.utterances())
    n = int(0.3 * 16000)
    for _ in range(n_pairs):
        enroll_path, test_path = rng.choice(paths, size=2, replace=False)
        test = read_wav(corpus_dir / test_path).samples
        offset = int(rng.integers(0, test.size - n + 1))
        crop = np.clip(test[offset : offset + n] + 1e-2 * rng.standard_normal(n), -1.0, 1.0)
        yield read_wav(corpus_dir / enroll_path), crop


@pytest.mark.parametrize("which", ["untrained", "trained"])
def test_score_grad_matches_finite_differences_on_corpus_pairs(which, model, trained, corpus_dir, trials):
    net = model if which == "untrained" else trained
    rng = np.random.default_rng(11)
    for pair, (enroll_wave, x) in enumerate(_score_pairs(corpus_dir, trials, 20, seed=len(which))):
        enrollment = embed(net, enroll_wave)
        _, grad = score_grad(net, enrollment, x)
        direction = rng.standard_normal(x.size)
        direction /= np.linalg.norm(direction)
        h = 1e-5
        plus = float(score(net, enrollment, x + h * direction))
        minus = float(score(net, enrollment, x - h * direction))
        numeric = (plus - minus) / (2 * h)
        analytic = float(grad @ direction)
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-6), f"{which} pair {pair}"


def test_opposite_enrollment_scores_minus_one(model, wave):
    assert float(score(model, -embed(model, wave), wave)) == pytest.approx(-1.0, abs=1e-12)


def test_score_is_symmetric_under_embedding_swap(model, corpus_dir, trials):
    for t in trials:
        a = read_wav(corpus_dir / t.enroll_path)
        b = read_wav(corpus_dir / t.test_path)
        forward = float(score(model, embed(model, a), b))
        backward = float(score(model, embed(model, b), a))
        assert forward == pytest.approx(backward, abs=1e-9)


def test_thirty_epochs_lower_the_training_loss(corpus_dir, trials):
    losses = []
    train(
        corpus_dir, trials, Hyperparams(epochs=30, batch=4, crop_s=0.5), seed=4,
        on_epoch=lambda epoch, loss: losses.append(loss),
    )
    assert len(losses) == 30
    assert losses[-1] < losses[0]
