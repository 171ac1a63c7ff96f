"""Resynthesis codecs: identity, mu-law bit-crush and a trained residual VQ codec.

The RVQ codec works on 20 ms sqrt-Hann frames with 50% overlap. Each frame is
DCT-transformed and split into a scalar gain (log of the coefficient norm,
quantized on a uniform grid) and a unit-norm shape that is quantized by four
residual codebook stages. Entry 0 of every stage is the zero vector.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import librosa
import numpy as np
from scipy.fft import dct, idct
from scipy.signal import get_window
from sklearn.cluster import KMeans

from .console import get_logger
from .errors import CodeFormatError, ContainerFormatError, InputTooShortError, InsufficientDataError
from .signal import SAMPLE_RATE, TrialList, Waveform, dequantize, derive_seed, load_waves, quantize, training_utterances
from .tensorfile import as_stored, read_container, require, write_container

log = get_logger("codec")

MAGIC = b"RVQC"
FRAME_LEN = 320
HOP = 160
N_STAGES = 4
CODEBOOK_SIZE = 256
GAIN_LEVELS = 64
STAGE_BITS = 8
MU = 255
CRUSH_BITS = 6
# Frames whose coefficient norm is below this are coded as silence.
SILENCE_NORM = 1e-6
SEGMENT_LEN = 320
SEGSNR_RANGE_DB = (-10.0, 35.0)
_SEARCH_CHUNK = 64


@runtime_checkable
class CodecInterface(Protocol):
    name: str

    @property
    def bitrate_bps(self) -> float: ...

    def resynth(self, w: Waveform) -> Waveform: ...


class IdentityCodec:
    name = "identity"

    @property
    def bitrate_bps(self) -> float:
        return SAMPLE_RATE * 16.0

    def resynth(self, w: Waveform) -> Waveform:
        return w


class BitCrushCodec:
    """mu-law companding with a 6-bit mid-tread quantizer."""

    name = "bitcrush"

    def __init__(self, mu: int = MU, bits: int = CRUSH_BITS) -> None:
        if bits < 2:
            raise ValueError(f"bits must be >= 2, got {bits}")
        self.mu = mu
        self.bits = bits

    @property
    def bitrate_bps(self) -> float:
        return SAMPLE_RATE * float(self.bits)

    def resynth(self, w: Waveform) -> Waveform:
        steps = 2 ** (self.bits - 1) - 1
        companded = librosa.mu_compress(w.samples, mu=self.mu, quantize=False)
        coarse = np.clip(np.round(companded * steps), -steps, steps) / steps
        return Waveform.clipped(librosa.mu_expand(coarse, mu=self.mu, quantize=False))


# --- Framing -----------------------------------------------------------------


def synthesis_window() -> np.ndarray:
    """Square root of the periodic Hann window at file precision; its square sums to 1 at 50% overlap."""
    return as_stored(np.sqrt(get_window("hann", FRAME_LEN)))


def n_frames(n_samples: int) -> int:
    return -(-n_samples // HOP) + 1


def analyze(samples: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Windowed orthonormal DCT-II of every frame, one hop of leading zeros."""
    n = samples.size
    if n < FRAME_LEN:
        raise InputTooShortError(f"need at least {FRAME_LEN} samples, got {n}")
    count = n_frames(n)
    padded = np.zeros((count + 1) * HOP)
    padded[HOP : HOP + n] = samples
    frames = librosa.util.frame(padded, frame_length=FRAME_LEN, hop_length=HOP, axis=0)
    return dct(frames * window, type=2, norm="ortho", axis=1)


def synthesize(coeffs: np.ndarray, window: np.ndarray, n_samples: int) -> np.ndarray:
    blocks = idct(coeffs, type=2, norm="ortho", axis=1) * window
    count = blocks.shape[0]
    # Each hop-long output segment is the tail of one frame plus the head of the next.
    segments = np.zeros((count + 1, HOP))
    segments[:count] += blocks[:, :HOP]
    segments[1:] += blocks[:, HOP:]
    return segments.ravel()[HOP : HOP + n_samples]


# --- Residual search -----------------------------------------------------------


def nearest(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row for each vector; ties go to the lowest index."""
    out = np.empty(vectors.shape[0], dtype=np.int64)
    for start in range(0, vectors.shape[0], _SEARCH_CHUNK):
        chunk = vectors[start : start + _SEARCH_CHUNK]
        dist = np.sum((chunk[:, None, :] - codebook[None, :, :]) ** 2, axis=2)
        out[start : start + chunk.shape[0]] = np.argmin(dist, axis=1)
    return out


def residual_search(codebooks: np.ndarray, shapes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy stage-by-stage quantization.

    Returns the stage indices, shape (n, stages), and the residual norms before
    and after every stage, shape (n, stages + 1).
    """
    residual = np.array(shapes, dtype=np.float64)
    indices = np.empty((residual.shape[0], codebooks.shape[0]), dtype=np.int64)
    norms = np.empty((residual.shape[0], codebooks.shape[0] + 1))
    norms[:, 0] = np.linalg.norm(residual, axis=1)
    for s, codebook in enumerate(codebooks):
        indices[:, s] = nearest(residual, codebook)
        residual = residual - codebook[indices[:, s]]
        norms[:, s + 1] = np.linalg.norm(residual, axis=1)
    return indices, norms


# --- Codes -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CodeSequence:
    gain_index: np.ndarray
    stage_index: np.ndarray
    n_samples: int
    gain_bits: int = 6

    def __post_init__(self) -> None:
        gain = np.asarray(self.gain_index, dtype=np.int64)
        stages = np.asarray(self.stage_index, dtype=np.int64)
        if gain.ndim != 1 or stages.ndim != 2 or stages.shape[0] != gain.shape[0]:
            raise CodeFormatError(f"inconsistent code shapes {gain.shape} and {stages.shape}")
        if gain.shape[0] != n_frames(self.n_samples):
            raise CodeFormatError(f"{gain.shape[0]} frames do not match {self.n_samples} samples")
        if gain.size and (gain.min() < 0 or gain.max() >= 2**self.gain_bits):
            raise CodeFormatError(f"gain index out of range for {self.gain_bits} bits")
        if stages.size and (stages.min() < 0 or stages.max() >= 2**STAGE_BITS):
            raise CodeFormatError("stage index out of range for 8 bits")
        object.__setattr__(self, "gain_index", gain)
        object.__setattr__(self, "stage_index", stages)

    @property
    def n_frames(self) -> int:
        return int(self.gain_index.shape[0])

    @property
    def n_stages(self) -> int:
        return int(self.stage_index.shape[1])

    @property
    def bits_per_frame(self) -> int:
        return self.gain_bits + self.n_stages * STAGE_BITS

    @property
    def n_bits(self) -> int:
        """Packed code size."""
        return self.n_frames * self.bits_per_frame

    def to_bytes(self) -> bytes:
        body = np.column_stack([self.gain_index, self.stage_index]).astype(np.uint8)
        return struct.pack("<II", self.n_frames, self.n_samples) + body.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes, n_stages: int = N_STAGES, gain_bits: int = 6) -> "CodeSequence":
        if len(data) < 8:
            raise CodeFormatError(f"code stream too short: {len(data)} bytes")
        frames, length = struct.unpack("<II", data[:8])
        expected = 8 + frames * (1 + n_stages)
        if len(data) != expected:
            raise CodeFormatError(f"code stream has {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data[8:], dtype=np.uint8).reshape(frames, 1 + n_stages)
        return cls(body[:, 0], body[:, 1:], length, gain_bits)


# --- RVQ codec -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RvqCodec:
    gain_grid: np.ndarray
    codebooks: np.ndarray
    trained_on: bytes
    window: Optional[np.ndarray] = None

    name = "rvq"

    def __post_init__(self) -> None:
        grid = np.asarray(self.gain_grid, dtype=np.float64)
        books = np.asarray(self.codebooks, dtype=np.float64)
        if grid.ndim != 1 or not 1 <= grid.size <= 256 or np.any(np.diff(grid) < 0):
            raise ValueError(f"gain grid must be a sorted vector of 1..256 levels, got shape {grid.shape}")
        if books.ndim != 3 or books.shape[2] != FRAME_LEN or not 2 <= books.shape[1] <= 2**STAGE_BITS:
            raise ValueError(f"codebooks must have shape (stages, 2..256, {FRAME_LEN}), got {books.shape}")
        if np.any(books[:, 0, :] != 0.0):
            raise ValueError("entry 0 of every codebook must be the zero vector")
        window = synthesis_window() if self.window is None else np.asarray(self.window, dtype=np.float64)
        object.__setattr__(self, "gain_grid", grid)
        object.__setattr__(self, "codebooks", books)
        object.__setattr__(self, "window", window)

    @property
    def n_stages(self) -> int:
        return int(self.codebooks.shape[0])

    @property
    def codebook_size(self) -> int:
        return int(self.codebooks.shape[1])

    @property
    def gain_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.gain_grid.size)))

    @property
    def bitrate_bps(self) -> float:
        return SAMPLE_RATE / HOP * (self.gain_bits + self.n_stages * STAGE_BITS)

    @property
    def fingerprint(self) -> str:
        return self.trained_on.hex()

    def resynth(self, w: Waveform) -> Waveform:
        return decode(self, encode(self, w))


def _gain_indices(grid: np.ndarray, log_gain: np.ndarray) -> np.ndarray:
    # Out-of-range energies saturate at the grid ends.
    return np.argmin(np.abs(log_gain[:, None] - grid[None, :]), axis=1)


def encode(codec: RvqCodec, w: Waveform) -> CodeSequence:
    coeffs = analyze(w.samples, codec.window)
    gains = np.linalg.norm(coeffs, axis=1)
    active = gains > SILENCE_NORM
    gain_index = np.zeros(coeffs.shape[0], dtype=np.int64)
    stage_index = np.zeros((coeffs.shape[0], codec.n_stages), dtype=np.int64)
    if np.any(active):
        gain_index[active] = _gain_indices(codec.gain_grid, np.log(gains[active]))
        shapes = coeffs[active] / gains[active, None]
        stage_index[active], _ = residual_search(codec.codebooks, shapes)
    return CodeSequence(gain_index, stage_index, len(w), codec.gain_bits)


def decode(codec: RvqCodec, codes: CodeSequence) -> Waveform:
    if codes.n_stages != codec.n_stages:
        raise CodeFormatError(f"codes have {codes.n_stages} stages, codec has {codec.n_stages}")
    if codes.gain_index.size and codes.gain_index.max() >= codec.gain_grid.size:
        raise CodeFormatError(f"gain index {codes.gain_index.max()} >= {codec.gain_grid.size} levels")
    if codes.stage_index.size and codes.stage_index.max() >= codec.codebook_size:
        raise CodeFormatError(f"stage index {codes.stage_index.max()} >= codebook size {codec.codebook_size}")
    shapes = np.zeros((codes.n_frames, FRAME_LEN))
    for s in range(codec.n_stages):
        shapes += codec.codebooks[s][codes.stage_index[:, s]]
    coeffs = shapes * np.exp(codec.gain_grid[codes.gain_index])[:, None]
    # The decoder emits 16-bit PCM, like the audio it was trained on.
    return Waveform(dequantize(quantize(synthesize(coeffs, codec.window, codes.n_samples))))


def resynth(codec: CodecInterface, w: Waveform) -> Waveform:
    return codec.resynth(w)


def _corpus_fingerprint(corpus_dir: Path, relpaths: Sequence[str]) -> bytes:
    digest = hashlib.sha256()
    for rel in relpaths:
        digest.update(rel.encode("utf-8"))
        digest.update((corpus_dir / rel).read_bytes())
    return digest.digest()


def train_rvq(
    corpus_dir: Path | str,
    seed: int,
    *,
    holdout: TrialList | None = None,
    n_stages: int = N_STAGES,
    codebook_size: int = CODEBOOK_SIZE,
    gain_levels: int = GAIN_LEVELS,
    kmeans_iters: int = 20,
    min_frames: int = 10000,
) -> RvqCodec:
    """Fit the gain grid and residual codebooks on genuine training audio."""
    corpus_dir = Path(corpus_dir)
    relpaths = training_utterances(corpus_dir, holdout)
    if not relpaths:
        raise InsufficientDataError(f"no training utterances under {corpus_dir}")
    window = synthesis_window()
    coeffs = np.concatenate([analyze(w.samples, window) for w in load_waves(corpus_dir, relpaths)])
    gains = np.linalg.norm(coeffs, axis=1)
    active = gains > SILENCE_NORM
    n_active = int(active.sum())
    if n_active < max(min_frames, codebook_size):
        raise InsufficientDataError(
            f"need at least {max(min_frames, codebook_size)} non-silent frames, found {n_active}"
        )

    log_gain = np.log(gains[active])
    lo, hi = np.percentile(log_gain, [1.0, 99.0])
    grid = as_stored(np.linspace(lo, hi, gain_levels))

    residual = coeffs[active] / gains[active, None]
    books: List[np.ndarray] = []
    for s in range(n_stages):
        km = KMeans(
            n_clusters=codebook_size - 1,
            init="k-means++",
            n_init=1,
            max_iter=kmeans_iters,
            random_state=derive_seed(seed, f"rvq-stage{s}") % (2**31),
        ).fit(residual)
        book = as_stored(np.vstack([np.zeros((1, FRAME_LEN)), km.cluster_centers_]))
        residual = residual - book[nearest(residual, book)]
        log.info("stage %d: mean squared residual %.6f", s + 1, float(np.mean(np.sum(residual**2, axis=1))))
        books.append(book)

    log.info("Trained RVQ codec on %d frames from %d utterances", n_active, len(relpaths))
    return RvqCodec(grid, np.stack(books), _corpus_fingerprint(corpus_dir, relpaths), window)


def training_shapes(codec: RvqCodec, waves: Sequence[Waveform]) -> np.ndarray:
    """Unit-norm shapes of the non-silent frames of ``waves``."""
    coeffs = np.concatenate([analyze(w.samples, codec.window) for w in waves])
    gains = np.linalg.norm(coeffs, axis=1)
    active = gains > SILENCE_NORM
    return coeffs[active] / gains[active, None]


def save_codec(codec: RvqCodec, path: Path | str) -> None:
    write_container(
        path,
        MAGIC,
        {
            "gain_grid": codec.gain_grid,
            "codebooks": codec.codebooks,
            "window": codec.window,
            "trained_on": np.frombuffer(codec.trained_on, dtype=np.uint8).astype(np.float64),
        },
    )


def load_codec(path: Path | str) -> RvqCodec:
    source = str(path)
    tensors = read_container(path, MAGIC)
    for name in ("gain_grid", "codebooks"):
        if name not in tensors:
            raise ContainerFormatError(f"{source}: missing tensor {name!r}")
    books = tensors["codebooks"]
    if books.ndim != 3:
        raise ContainerFormatError(f"{source}: codebooks must be 3-D, got shape {books.shape}")
    require(tensors, "codebooks", (books.shape[0], books.shape[1], FRAME_LEN), source)
    window = require(tensors, "window", (FRAME_LEN,), source)
    grid = tensors["gain_grid"]
    trained_on = require(tensors, "trained_on", (32,), source)
    try:
        return RvqCodec(grid, books, trained_on.astype(np.uint8).tobytes(), window)
    except ValueError as exc:
        raise ContainerFormatError(f"{source}: {exc}") from exc


# --- Quality metrics -------------------------------------------------------------


def segmental_snr(reference: Waveform, estimate: Waveform, segment: int = SEGMENT_LEN) -> float:
    """Mean per-segment SNR in dB, each segment clamped to [-10, 35] dB."""
    if len(reference) != len(estimate):
        raise ValueError(f"length mismatch: {len(reference)} vs {len(estimate)}")
    count = max(1, len(reference) // segment)
    ref = reference.samples[: count * segment].reshape(count, -1)
    err = ref - estimate.samples[: count * segment].reshape(count, -1)
    tiny = np.finfo(np.float64).tiny
    snr = 10.0 * np.log10((np.sum(ref**2, axis=1) + tiny) / (np.sum(err**2, axis=1) + tiny))
    return float(np.mean(np.clip(snr, *SEGSNR_RANGE_DB)))


def idempotence_ratio(codec: CodecInterface, w: Waveform) -> float:
    """||r(r(x)) - r(x)|| / ||r(x)|| for the codec's resynthesis r."""
    once = codec.resynth(w)
    twice = codec.resynth(once)
    norm = float(np.linalg.norm(once.samples))
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(twice.samples - once.samples)) / norm


def build_codec(name: str, rvq: Optional[RvqCodec] = None) -> CodecInterface:
    if name == "identity":
        return IdentityCodec()
    if name == "bitcrush":
        return BitCrushCodec()
    if name == "rvq":
        if rvq is None:
            raise ValueError("the rvq codec needs a trained codec file")
        return rvq
    raise ValueError(f"unknown codec {name!r}")
