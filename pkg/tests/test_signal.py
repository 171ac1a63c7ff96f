from __future__ import annotations

import numpy as np
import pytest
from scipy.io import wavfile

from codecshield.errors import WavFormatError
from codecshield.signal import (
    PCM_SCALE,
    Trial,
    TrialList,
    Waveform,
    derive_seed,
    gen_corpus,
    list_corpus,
    read_trials,
    read_wav,
    synth_speaker,
    synth_utterance,
    training_utterances,
    write_trials,
    write_wav,
)


def test_waveform_rejects_out_of_range_and_2d():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), sample_rate=8000)


def test_wav_round_trip_error_and_rewrite_identical(tmp_path):
    rng = np.random.default_rng(0)
    samples = np.concatenate([rng.uniform(-1, 1, 1000), [1.0, -1.0, 0.9, 0.0]])
    first = tmp_path / "a.wav"
    write_wav(Waveform(samples), first)
    back = read_wav(first)
    assert len(back) == samples.size
    assert np.max(np.abs(back.samples - samples)) <= 1.0 / PCM_SCALE
    second = tmp_path / "b.wav"
    write_wav(back, second)
    assert first.read_bytes() == second.read_bytes()


def test_full_scale_stores_max_code(tmp_path):
    path = tmp_path / "x.wav"
    write_wav(Waveform(np.array([1.0, -1.0])), path)
    _, data = wavfile.read(str(path))
    assert data.tolist() == [32767, -32768]


@pytest.mark.parametrize(
    "rate,data",
    [
        (16000, np.zeros((100, 2), dtype=np.int16)),
        (16000, np.zeros(100, dtype=np.uint8)),
        (8000, np.zeros(100, dtype=np.int16)),
    ],
)
def test_read_wav_rejects_unsupported_formats(tmp_path, rate, data):
    path = tmp_path / "bad.wav"
    wavfile.write(str(path), rate, data)
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_read_wav_rejects_garbage(tmp_path):
    path = tmp_path / "garbage.wav"
    path.write_bytes(b"not a riff file at all")
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_derive_seed_is_stable_and_label_dependent():
    assert derive_seed(1, "attack") == derive_seed(1, "attack")
    assert derive_seed(1, "attack") != derive_seed(1, "train-asv")
    assert derive_seed(1, "attack") != derive_seed(2, "attack")


def test_synth_utterance_is_deterministic_and_peak_normalized():
    profile = synth_speaker(42)
    a = synth_utterance(profile, 0, 0.5)
    b = synth_utterance(profile, 0, 0.5)
    c = synth_utterance(profile, 1, 0.5)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert len(a) == 8000
    assert np.max(np.abs(a.samples)) == pytest.approx(0.9)


def test_synth_utterance_rejects_bad_duration():
    with pytest.raises(ValueError):
        synth_utterance(synth_speaker(1), 0, 0.1)


def test_corpus_layout_and_trials(corpus_dir, trials):
    assert len(list_corpus(corpus_dir)) == 12
    assert trials.n_target == trials.n_nontarget == 3
    train = set(training_utterances(corpus_dir, trials))
    assert train.isdisjoint(trials.utterances())
    assert len(train) == 6
    for t in trials:
        same = t.enroll_path.split("/")[0] == t.test_path.split("/")[0]
        assert same == t.is_target


def test_gen_corpus_is_reproducible(tmp_path):
    a = gen_corpus(2, 2, 0.5, seed=9, out_dir=tmp_path / "a")
    b = gen_corpus(2, 2, 0.5, seed=9, out_dir=tmp_path / "b")
    assert a == b
    for rel in list_corpus(tmp_path / "a"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_trial_list_round_trip_and_validation(tmp_path, trials):
    path = tmp_path / "trials.txt"
    write_trials(trials, path)
    assert read_trials(path) == trials
    path.write_text("2 a.wav b.wav\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_trials(path)
    with pytest.raises(ValueError):
        TrialList((Trial("a.wav", "b.wav", True),))
    with pytest.raises(ValueError):
        Trial("a.wav", "a.wav", True)


def test_read_wav_rejects_truncated_file(tmp_path):
    path = tmp_path / "short.wav"
    write_wav(Waveform(np.linspace(-0.5, 0.5, 100)), path)
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_forced_regeneration_drops_stale_speakers(tmp_path):
    out = tmp_path / "corpus"
    gen_corpus(3, 2, 0.5, seed=4, out_dir=out)
    assert {rel.split("/")[0] for rel in list_corpus(out)} == {"spk000", "spk001", "spk002"}
    trials = gen_corpus(2, 2, 0.5, seed=4, out_dir=out)
    assert {rel.split("/")[0] for rel in list_corpus(out)} == {"spk000", "spk001"}
    assert set(training_utterances(out, trials)) == set()


def test_utterances_pause_between_syllables():
    w = synth_utterance(synth_speaker(5), 2, 2.0)
    frames = w.samples[: len(w) // 320 * 320].reshape(-1, 320)
    level_db = 10.0 * np.log10(np.mean(frames**2, axis=1) + 1e-20)
    # Quiet frames sit tens of dB below the loud ones but never reach digital silence.
    assert level_db.max() - level_db.min() > 35.0
    assert np.all(np.abs(frames).max(axis=1) > 0.0)


def test_speaker_envelope_also_shapes_the_noise():
    profile = synth_speaker(6)
    w = synth_utterance(profile, 0, 1.0)
    spectrum = np.abs(np.fft.rfft(w.samples * np.hanning(len(w)))) ** 2
    freqs = np.fft.rfftfreq(len(w), 1.0 / 16000)
    voiced_band = spectrum[(freqs > 200) & (freqs < 1500)].mean()
    high_band = spectrum[(freqs > 6000) & (freqs < 7500)].mean()
    assert 10.0 * np.log10(voiced_band / high_band) > 40.0
