"""Waveforms, 16-bit WAV I/O, the synthetic speaker corpus, and trial lists."""

from __future__ import annotations

import hashlib
import shutil
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Set, Tuple

import numpy as np
from scipy.fft import irfft, rfft, rfftfreq
from scipy.io import wavfile

from .console import get_logger
from .errors import WavFormatError

log = get_logger("signal")

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0
PCM_MIN, PCM_MAX = -32768, 32767
MIN_DURATION_S, MAX_DURATION_S = 0.5, 4.0
PEAK_LEVEL = 0.9
NOISE_DB = -30.0
# Harmonics at or above this frequency are not synthesized.
HARMONIC_CEILING_HZ = 7600.0
# Voicing level between syllables, relative to a syllable plateau.
PAUSE_DB = -50.0
SYLLABLE_S = (0.10, 0.20)
RAMP_S = (0.06, 0.09)
PAUSE_S = (0.06, 0.13)


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio in [-1, 1] at the corpus sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
            raise ValueError("waveform samples must lie in [-1, 1]")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.size)

    @classmethod
    def clipped(cls, samples: np.ndarray) -> "Waveform":
        return cls(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0))


# --- WAV ------------------------------------------------------------------


def quantize(samples: np.ndarray) -> np.ndarray:
    """Map float samples to 16-bit integers: round(s * 32768), clamped."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, PCM_MIN, PCM_MAX).astype(np.int16)


def dequantize(pcm: np.ndarray) -> np.ndarray:
    return pcm.astype(np.float64) / PCM_SCALE


def write_wav(w: Waveform, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, quantize(w.samples))


def read_wav(path: Path | str) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, struct.error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    return Waveform(dequantize(data))


# --- Synthetic speakers -----------------------------------------------------


def derive_seed(master: int, label: str) -> int:
    """Stable 32-bit seed for a named sub-task of a seeded run."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0_base: float
    formants: Tuple[float, float, float]
    bandwidths: Tuple[float, float, float]
    harmonic_tilt: float
    vibrato_rate: float
    vibrato_depth: float
    seed: int

    def __post_init__(self) -> None:
        if not 80.0 <= self.f0_base <= 300.0:
            raise ValueError(f"f0_base {self.f0_base} outside [80, 300] Hz")
        if any(b <= a for a, b in zip(self.formants, self.formants[1:])):
            raise ValueError(f"formants must be strictly increasing: {self.formants}")
        if self.formants[-1] >= HARMONIC_CEILING_HZ:
            raise ValueError(f"formants must lie below {HARMONIC_CEILING_HZ} Hz")

    def harmonic_gain(self, freqs: np.ndarray) -> np.ndarray:
        """Formant resonance times spectral tilt at the given frequencies."""
        gain = np.ones_like(freqs)
        for center, bandwidth in zip(self.formants, self.bandwidths):
            gain *= center**2 / np.sqrt((center**2 - freqs**2) ** 2 + (bandwidth * freqs) ** 2)
        gain *= 10.0 ** (self.harmonic_tilt * np.log2(freqs / self.f0_base) / 20.0)
        return np.where(freqs < HARMONIC_CEILING_HZ, gain, 0.0)


def synth_speaker(seed: int) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    # f0 stays low enough that neighbouring harmonics overlap in the 25 ms analysis window.
    f0_base = rng.uniform(85.0, 180.0)
    f1 = rng.uniform(300.0, 850.0)
    f2 = f1 + rng.uniform(500.0, 1500.0)
    f3 = f2 + rng.uniform(500.0, 1200.0)
    bandwidths = (rng.uniform(60.0, 150.0), rng.uniform(80.0, 200.0), rng.uniform(120.0, 300.0))
    return SpeakerProfile(
        speaker_id=f"spk-{seed}",
        f0_base=float(f0_base),
        formants=(float(f1), float(f2), float(f3)),
        bandwidths=tuple(float(b) for b in bandwidths),  # type: ignore[arg-type]
        harmonic_tilt=float(rng.uniform(-8.0, -2.0)),
        vibrato_rate=float(rng.uniform(4.5, 6.5)),
        vibrato_depth=float(rng.uniform(15.0, 60.0)),
        seed=int(seed),
    )


def synth_utterance(profile: SpeakerProfile, utt_seed: int, duration_s: float) -> Waveform:
    if not MIN_DURATION_S <= duration_s <= MAX_DURATION_S:
        raise ValueError(f"duration_s must lie in [{MIN_DURATION_S}, {MAX_DURATION_S}], got {duration_s}")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([profile.seed, utt_seed])
    t = np.arange(n) / SAMPLE_RATE

    # Pitch contour in semitones: declination plus two slow random sweeps.
    semitones = rng.uniform(-1.0, 1.0) - rng.uniform(0.5, 2.0) * t / duration_s
    for _ in range(2):
        semitones += rng.uniform(0.3, 1.5) * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t + rng.uniform(0, 2 * np.pi))
    cents = 100.0 * semitones
    cents += profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    f0 = profile.f0_base * 2.0 ** (cents / 1200.0)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    voiced = np.zeros(n)
    n_harmonics = int(HARMONIC_CEILING_HZ // f0.min())
    offsets = rng.uniform(0, 2 * np.pi, size=n_harmonics)
    for k in range(1, n_harmonics + 1):
        voiced += profile.harmonic_gain(k * f0) * np.sin(k * phase + offsets[k - 1])

    # Aspiration noise passes through the same vocal tract as the harmonics.
    freqs = rfftfreq(n, 1.0 / SAMPLE_RATE)
    noise = irfft(rfft(rng.standard_normal(n)) * profile.harmonic_gain(np.maximum(freqs, profile.f0_base)), n)
    noise *= np.sqrt(np.mean(voiced**2) / np.mean(noise**2)) * 10.0 ** (NOISE_DB / 20.0)

    audio = (voiced + noise) * syllable_envelope(rng, t)
    audio *= PEAK_LEVEL / np.max(np.abs(audio))
    return Waveform(audio)


def syllable_envelope(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Syllable plateaus separated by pauses, with ramps linear in dB."""
    knots_t = [-rng.uniform(0.0, 0.4)]
    knots_db = [PAUSE_DB]
    while knots_t[-1] < t[-1]:
        peak = rng.uniform(-4.0, 0.0)
        for span, level in ((RAMP_S, peak), (SYLLABLE_S, peak), (RAMP_S, PAUSE_DB), (PAUSE_S, PAUSE_DB)):
            knots_t.append(knots_t[-1] + rng.uniform(*span))
            knots_db.append(level)
    return 10.0 ** (np.interp(t, knots_t, knots_db) / 20.0)


# --- Trials -----------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    enroll_path: str
    test_path: str
    is_target: bool

    def __post_init__(self) -> None:
        if self.enroll_path == self.test_path:
            raise ValueError(f"trial enrolls and tests the same utterance: {self.test_path}")


@dataclass(frozen=True)
class TrialList:
    trials: Tuple[Trial, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trials", tuple(self.trials))
        if not any(t.is_target for t in self.trials) or all(t.is_target for t in self.trials):
            raise ValueError("trial list needs at least one target and one non-target trial")

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target

    def utterances(self) -> Set[str]:
        return {p for t in self.trials for p in (t.enroll_path, t.test_path)}


def write_trials(trials: TrialList, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{int(t.is_target)} {t.enroll_path} {t.test_path}\n" for t in trials]
    path.write_text("".join(lines), encoding="utf-8")


def read_trials(path: Path | str) -> TrialList:
    trials: List[Trial] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in {"0", "1"}:
            raise ValueError(f"{path}:{lineno}: expected `<0|1> <enroll> <test>`, got {line!r}")
        trials.append(Trial(enroll_path=parts[1], test_path=parts[2], is_target=parts[0] == "1"))
    return TrialList(tuple(trials))


# --- Corpus -----------------------------------------------------------------


def utterance_path(speaker: int, utt: int) -> str:
    return f"spk{speaker:03d}/utt{utt:02d}.wav"


def n_holdout(utts_per_speaker: int) -> int:
    """Utterances per speaker reserved for trials (one enrollment, rest tests)."""
    return max(2, utts_per_speaker // 2)


def list_corpus(corpus_dir: Path | str) -> List[str]:
    corpus_dir = Path(corpus_dir)
    return sorted(p.relative_to(corpus_dir).as_posix() for p in corpus_dir.glob("spk*/*.wav"))


def speaker_of(relpath: str) -> str:
    return relpath.split("/", 1)[0]


def _build_trials(n_speakers: int, utts_per_speaker: int, seed: int) -> TrialList:
    rng = np.random.default_rng(derive_seed(seed, "trials"))
    first_holdout = utts_per_speaker - n_holdout(utts_per_speaker)
    trials: List[Trial] = []
    for spk in range(n_speakers):
        enroll = utterance_path(spk, first_holdout)
        for utt in range(first_holdout + 1, utts_per_speaker):
            test = utterance_path(spk, utt)
            other = (spk + 1 + int(rng.integers(n_speakers - 1))) % n_speakers
            trials.append(Trial(enroll, test, True))
            trials.append(Trial(utterance_path(other, first_holdout), test, False))
    return TrialList(tuple(trials))


def gen_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    duration_s: float,
    seed: int,
    out_dir: Path | str,
    *,
    trials_path: Path | str | None = None,
    jobs: int = 1,
) -> TrialList:
    """Write the synthetic corpus and its balanced trial list.

    ``out_dir`` is replaced, not merged: anything already in it is removed first.
    """
    if n_speakers < 2 or utts_per_speaker < 2:
        raise ValueError("gen_corpus needs n_speakers >= 2 and utts_per_speaker >= 2")
    out_dir = Path(out_dir)
    # Utterances from an earlier, larger corpus must not leak into training.
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    profiles = [synth_speaker(derive_seed(seed, f"speaker{spk}")) for spk in range(n_speakers)]

    def _write(job: Tuple[int, int]) -> None:
        spk, utt = job
        wave = synth_utterance(profiles[spk], utt, duration_s)
        write_wav(wave, out_dir / utterance_path(spk, utt))

    jobs_list = [(spk, utt) for spk in range(n_speakers) for utt in range(utts_per_speaker)]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(_write, jobs_list))

    trials = _build_trials(n_speakers, utts_per_speaker, seed)
    write_trials(trials, trials_path if trials_path is not None else out_dir / "trials.txt")
    log.info(
        "Wrote %d utterances for %d speakers; %d target / %d non-target trials",
        len(jobs_list), n_speakers, trials.n_target, trials.n_nontarget,
    )
    return trials


def training_utterances(corpus_dir: Path | str, holdout: TrialList | None) -> List[str]:
    """Corpus utterances not referenced by the holdout trial list."""
    excluded = holdout.utterances() if holdout is not None else set()
    return [p for p in list_corpus(corpus_dir) if p not in excluded]


def load_waves(corpus_dir: Path | str, relpaths: Iterable[str]) -> List[Waveform]:
    corpus_dir = Path(corpus_dir)
    return [read_wav(corpus_dir / p) for p in relpaths]

