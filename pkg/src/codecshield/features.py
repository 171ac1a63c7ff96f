"""Log-mel filterbank front-end with an exact adjoint.

The forward pass is framing, Hamming windowing, a real-arithmetic DFT,
power spectrum, mel weighting and a floored log. ``logmel_backward`` maps a
gradient on the log-mel matrix back onto the input samples so the speaker
score can be differentiated with respect to raw audio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import librosa
import numpy as np
from scipy.signal import get_window

from .errors import InputTooShortError
from .signal import SAMPLE_RATE, Waveform

LOG_FLOOR = 1e-10

AudioLike = Union[Waveform, np.ndarray]


@dataclass(frozen=True, eq=False)
class FrameSpec:
    win_len: int
    hop: int
    nfft: int
    window: np.ndarray

    def __post_init__(self) -> None:
        if not (0 < self.hop <= self.win_len <= self.nfft):
            raise ValueError(f"need 0 < hop <= win_len <= nfft, got {self.hop}, {self.win_len}, {self.nfft}")
        window = np.asarray(self.window, dtype=np.float64)
        if window.shape != (self.win_len,):
            raise ValueError(f"window must have length {self.win_len}, got {window.shape}")
        object.__setattr__(self, "window", window)
        # Real DFT of a frame zero-padded to nfft: only the first win_len rows matter.
        angle = 2.0 * np.pi * np.outer(np.arange(self.win_len), np.arange(self.n_bins)) / self.nfft
        object.__setattr__(self, "dft_real", np.cos(angle))
        object.__setattr__(self, "dft_imag", -np.sin(angle))

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1


def frame_spec(win_len: int = 400, hop: int = 160, nfft: int = 512) -> FrameSpec:
    """25 ms Hamming frames with a 10 ms stride at 16 kHz."""
    return FrameSpec(win_len, hop, nfft, get_window("hamming", win_len))


@dataclass(frozen=True, eq=False)
class MelBank:
    n_mels: int
    fmin: float
    fmax: float
    weights: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != self.n_mels:
            raise ValueError(f"mel weights must have {self.n_mels} rows, got shape {weights.shape}")
        if np.any(weights < 0) or not np.all(weights.max(axis=1) > 0):
            raise ValueError("mel weights must be non-negative with a positive entry in every row")
        object.__setattr__(self, "weights", weights)

    def center_frequencies(self) -> np.ndarray:
        return librosa.mel_frequencies(self.n_mels + 2, fmin=self.fmin, fmax=self.fmax, htk=True)[1:-1]


def mel_bank(n_mels: int = 64, fmin: float = 20.0, fmax: float = 7600.0, nfft: int = 512) -> MelBank:
    """HTK-scale triangular filters with unit peak over the one-sided power spectrum."""
    weights = librosa.filters.mel(
        sr=SAMPLE_RATE, n_fft=nfft, n_mels=n_mels, fmin=fmin, fmax=fmax, htk=True, norm=None, dtype=np.float64
    )
    return MelBank(n_mels, float(fmin), float(fmax), weights)


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ForwardCache:
    n_samples: int
    spec: FrameSpec
    bank: MelBank
    real: np.ndarray
    imag: np.ndarray
    mel: np.ndarray
    unfloored: np.ndarray


def frame_count(n_samples: int, spec: FrameSpec) -> int:
    if n_samples < spec.win_len:
        raise InputTooShortError(f"need at least {spec.win_len} samples, got {n_samples}")
    return 1 + (n_samples - spec.win_len) // spec.hop


def _as_samples(w: AudioLike) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def logmel_forward(w: AudioLike, spec: FrameSpec, bank: MelBank) -> Tuple[LogMelSpectrogram, ForwardCache]:
    samples = _as_samples(w)
    frame_count(samples.size, spec)
    frames = librosa.util.frame(samples, frame_length=spec.win_len, hop_length=spec.hop, axis=0)
    windowed = frames * spec.window
    real = windowed @ spec.dft_real
    imag = windowed @ spec.dft_imag
    power = real**2 + imag**2
    mel = power @ bank.weights.T
    unfloored = mel > LOG_FLOOR
    values = np.log(np.maximum(mel, LOG_FLOOR)).T
    cache = ForwardCache(samples.size, spec, bank, real, imag, mel, unfloored)
    return LogMelSpectrogram(values), cache


def logmel_backward(grad_out: np.ndarray, cache: ForwardCache) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = (cache.bank.n_mels, cache.mel.shape[0])
    if grad_out.shape != expected:
        raise ValueError(f"gradient shape {grad_out.shape} does not match forward output {expected}")
    spec = cache.spec

    grad_mel = np.zeros_like(cache.mel)
    np.divide(grad_out.T, cache.mel, out=grad_mel, where=cache.unfloored)
    grad_power = grad_mel @ cache.bank.weights
    grad_windowed = (2.0 * grad_power * cache.real) @ spec.dft_real.T + (2.0 * grad_power * cache.imag) @ spec.dft_imag.T
    grad_frames = grad_windowed * spec.window

    n_frames = grad_frames.shape[0]
    index = np.arange(n_frames)[:, None] * spec.hop + np.arange(spec.win_len)[None, :]
    grad = np.zeros(cache.n_samples)
    np.add.at(grad, index, grad_frames)
    return grad
