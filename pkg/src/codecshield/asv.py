"""Desk-scale x-vector style speaker embedding model.

Architecture: log-mel (64) -> conv1 (48, k=5) -> ReLU -> conv2 (48, k=3) ->
ReLU -> mean/std statistics pooling (96) -> affine (32) -> L2 normalize.
Every layer has a hand-written backward pass so the cosine score can be
differentiated all the way down to the waveform samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .console import get_logger
from .errors import ContainerFormatError, InsufficientDataError
from .features import AudioLike, FrameSpec, MelBank, frame_count, frame_spec, logmel_backward, logmel_forward, mel_bank
from .signal import SAMPLE_RATE, TrialList, read_wav, speaker_of, training_utterances
from .tensorfile import as_stored, read_container, require, write_container

log = get_logger("asv")

MAGIC = b"ASVM"
N_MELS = 64
CHANNELS = 48
EMBED_DIM = 32
KERNEL1, KERNEL2 = 5, 3
STD_EPS = 1e-5

Params = Dict[str, np.ndarray]


def param_shapes(n_train_speakers: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "conv1.weight": (CHANNELS, N_MELS, KERNEL1),
        "conv1.bias": (CHANNELS,),
        "conv2.weight": (CHANNELS, CHANNELS, KERNEL2),
        "conv2.bias": (CHANNELS,),
        "proj.weight": (EMBED_DIM, 2 * CHANNELS),
        "proj.bias": (EMBED_DIM,),
        "classifier.weight": (n_train_speakers, EMBED_DIM),
        "classifier.bias": (n_train_speakers,),
    }


@dataclass
class Hyperparams:
    epochs: int = 30
    batch: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    crop_s: float = 0.8


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    params: Params
    frame_spec: FrameSpec
    mel_bank: MelBank
    n_train_speakers: int

    def __post_init__(self) -> None:
        for name, shape in param_shapes(self.n_train_speakers).items():
            tensor = self.params.get(name)
            if tensor is None or tensor.shape != shape:
                got = None if tensor is None else tensor.shape
                raise ValueError(f"parameter {name!r} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"parameter {name!r} is not finite")
        if self.mel_bank.n_mels != N_MELS:
            raise ValueError(f"model expects {N_MELS} mel bands, got {self.mel_bank.n_mels}")


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray

    def __post_init__(self) -> None:
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must have {EMBED_DIM} entries, got {vector.shape}")
        if abs(np.linalg.norm(vector) - 1.0) >= 1e-6:
            raise ValueError("embedding must have unit L2 norm")
        object.__setattr__(self, "vector", vector)

    def __neg__(self) -> "Embedding":
        return Embedding(-self.vector)


class Score(float):
    """Cosine similarity in [-1, 1]."""

    def __new__(cls, value: float) -> "Score":
        value = float(value)
        if not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
            raise ValueError(f"score {value} outside [-1, 1]")
        return super().__new__(cls, value)


# --- Layers -----------------------------------------------------------------


def _conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 convolution over time via im2col; returns (output, columns)."""
    c_out, c_in, k = weight.shape
    pad = k // 2
    n_frames = x.shape[1]
    padded = np.pad(x, ((0, 0), (pad, pad)))
    cols = np.stack([padded[:, j : j + n_frames] for j in range(k)], axis=1).reshape(c_in * k, n_frames)
    return weight.reshape(c_out, -1) @ cols + bias[:, None], cols


def _conv1d_backward(
    grad: np.ndarray, weight: np.ndarray, cols: np.ndarray, need_input: bool
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    c_out, c_in, k = weight.shape
    pad = k // 2
    n_frames = grad.shape[1]
    grad_weight = (grad @ cols.T).reshape(weight.shape)
    grad_bias = grad.sum(axis=1)
    if not need_input:
        return grad_weight, grad_bias, None
    grad_cols = (weight.reshape(c_out, -1).T @ grad).reshape(c_in, k, n_frames)
    grad_padded = np.zeros((c_in, n_frames + 2 * pad))
    for j in range(k):
        grad_padded[:, j : j + n_frames] += grad_cols[:, j]
    return grad_weight, grad_bias, grad_padded[:, pad : pad + n_frames]


@dataclass
class _Activations:
    pre1: np.ndarray
    cols1: np.ndarray
    pre2: np.ndarray
    cols2: np.ndarray
    centered: np.ndarray
    std: np.ndarray
    pooled: np.ndarray
    proj: np.ndarray


def _forward(params: Params, feats: np.ndarray) -> _Activations:
    pre1, cols1 = _conv1d(feats, params["conv1.weight"], params["conv1.bias"])
    pre2, cols2 = _conv1d(np.maximum(pre1, 0.0), params["conv2.weight"], params["conv2.bias"])
    act2 = np.maximum(pre2, 0.0)
    mean = act2.mean(axis=1)
    centered = act2 - mean[:, None]
    std = np.sqrt((centered**2).mean(axis=1) + STD_EPS)
    pooled = np.concatenate([mean, std])
    proj = params["proj.weight"] @ pooled + params["proj.bias"]
    return _Activations(pre1, cols1, pre2, cols2, centered, std, pooled, proj)


def _backward(
    params: Params, acts: _Activations, grad_proj: np.ndarray, need_input: bool
) -> Tuple[Params, Optional[np.ndarray]]:
    grads: Params = {
        "proj.weight": np.outer(grad_proj, acts.pooled),
        "proj.bias": grad_proj,
    }
    grad_pooled = params["proj.weight"].T @ grad_proj
    grad_mean, grad_std = grad_pooled[:CHANNELS], grad_pooled[CHANNELS:]
    n_frames = acts.centered.shape[1]
    grad_act2 = (grad_mean[:, None] + (grad_std / acts.std)[:, None] * acts.centered) / n_frames

    grad_pre2 = grad_act2 * (acts.pre2 > 0)
    grads["conv2.weight"], grads["conv2.bias"], grad_act1 = _conv1d_backward(
        grad_pre2, params["conv2.weight"], acts.cols2, need_input=True
    )
    grad_pre1 = grad_act1 * (acts.pre1 > 0)
    grads["conv1.weight"], grads["conv1.bias"], grad_feats = _conv1d_backward(
        grad_pre1, params["conv1.weight"], acts.cols1, need_input=need_input
    )
    return grads, grad_feats


def _normalize(proj: np.ndarray) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(proj))
    return proj / norm, norm


# --- Inference --------------------------------------------------------------


def embed(model: EmbeddingModel, w: AudioLike) -> Embedding:
    feats, _ = logmel_forward(w, model.frame_spec, model.mel_bank)
    unit, _ = _normalize(_forward(model.params, feats.values).proj)
    return Embedding(unit)


def score(model: EmbeddingModel, enroll: Embedding, test_wave: AudioLike) -> Score:
    return Score(np.dot(enroll.vector, embed(model, test_wave).vector))


def score_grad(model: EmbeddingModel, enroll: Embedding, test_wave: AudioLike) -> Tuple[Score, np.ndarray]:
    """Cosine score and its exact gradient with respect to every input sample."""
    feats, cache = logmel_forward(test_wave, model.frame_spec, model.mel_bank)
    acts = _forward(model.params, feats.values)
    unit, norm = _normalize(acts.proj)
    value = float(np.dot(enroll.vector, unit))
    grad_proj = (enroll.vector - unit * value) / norm
    _, grad_feats = _backward(model.params, acts, grad_proj, need_input=True)
    return Score(value), logmel_backward(grad_feats, cache)


# --- Construction and training ----------------------------------------------


def stored_frontend() -> Tuple[FrameSpec, MelBank]:
    """Front-end tables at file precision, so saved models reload bit-exactly."""
    spec = frame_spec()
    bank = mel_bank(n_mels=N_MELS, nfft=spec.nfft)
    return (
        FrameSpec(spec.win_len, spec.hop, spec.nfft, as_stored(spec.window)),
        MelBank(bank.n_mels, bank.fmin, bank.fmax, as_stored(bank.weights)),
    )


def init_params(rng: np.random.Generator, n_train_speakers: int) -> Params:
    params: Params = {}
    for name, shape in param_shapes(n_train_speakers).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 2.0 if name.startswith("conv") else 1.0
        params[name] = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
    # Zero-sum input filters make conv1 blind to a global log-energy offset at start.
    conv1 = params["conv1.weight"]
    params["conv1.weight"] = conv1 - conv1.mean(axis=(1, 2), keepdims=True)
    return params


def init_model(seed: int, n_train_speakers: int) -> EmbeddingModel:
    spec, bank = stored_frontend()
    params = init_params(np.random.default_rng(seed), n_train_speakers)
    return EmbeddingModel({k: as_stored(v) for k, v in params.items()}, spec, bank, n_train_speakers)


def _softmax_xent(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    shifted = logits - logits.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    grad = np.exp(log_probs)
    grad[label] -= 1.0
    return float(-log_probs[label]), grad


EpochCallback = Callable[[int, float], None]


def train(
    corpus_dir: Path | str,
    trial_list_holdout: TrialList | None,
    hp: Hyperparams,
    seed: int,
    *,
    on_epoch: EpochCallback | None = None,
) -> EmbeddingModel:
    """Train with softmax cross-entropy over speaker identity on non-trial utterances."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    relpaths = training_utterances(corpus_dir, trial_list_holdout)
    if not relpaths:
        raise InsufficientDataError(f"no training utterances under {corpus_dir} outside the trial list")
    speakers = sorted({speaker_of(p) for p in relpaths})
    if len(speakers) < 2:
        raise InsufficientDataError("training needs utterances from at least two speakers")
    labels = np.array([speakers.index(speaker_of(p)) for p in relpaths])

    spec, bank = stored_frontend()
    feats = [logmel_forward(read_wav(corpus_dir / p), spec, bank)[0].values for p in relpaths]
    crop = frame_count(int(round(hp.crop_s * SAMPLE_RATE)), spec)

    rng = np.random.default_rng(seed)
    params = init_params(rng, len(speakers))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    steps_per_epoch = math.ceil(len(relpaths) / hp.batch)
    total_steps = hp.epochs * steps_per_epoch
    log.info("Training on %d utterances from %d speakers, %d steps", len(relpaths), len(speakers), total_steps)

    step = 0
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(relpaths))
        epoch_loss = 0.0
        for start in range(0, len(order), hp.batch):
            batch = order[start : start + hp.batch]
            lr = hp.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                sample = feats[i]
                if sample.shape[1] > crop:
                    offset = int(rng.integers(0, sample.shape[1] - crop + 1))
                    sample = sample[:, offset : offset + crop]
                acts = _forward(params, sample)
                logits = params["classifier.weight"] @ acts.proj + params["classifier.bias"]
                loss, grad_logits = _softmax_xent(logits, int(labels[i]))
                epoch_loss += loss
                grads["classifier.weight"] += np.outer(grad_logits, acts.proj)
                grads["classifier.bias"] += grad_logits
                layer_grads, _ = _backward(params, acts, params["classifier.weight"].T @ grad_logits, need_input=False)
                for name, g in layer_grads.items():
                    grads[name] += g
            for name in params:
                velocity[name] = hp.momentum * velocity[name] + grads[name] / len(batch)
                params[name] = params[name] - lr * velocity[name]
            step += 1
        mean_loss = epoch_loss / len(relpaths)
        log.info("epoch %d/%d loss %.4f", epoch, hp.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    return EmbeddingModel({k: as_stored(v) for k, v in params.items()}, spec, bank, len(speakers))


# --- Model file -------------------------------------------------------------


def save_model(model: EmbeddingModel, path: Path | str) -> None:
    spec, bank = model.frame_spec, model.mel_bank
    tensors = dict(model.params)
    tensors["frontend.frame"] = np.array([spec.win_len, spec.hop, spec.nfft], dtype=np.float64)
    tensors["frontend.window"] = spec.window
    tensors["frontend.mel"] = np.array([bank.n_mels, bank.fmin, bank.fmax, bank.sample_rate], dtype=np.float64)
    tensors["frontend.mel_weights"] = bank.weights
    write_container(path, MAGIC, tensors)


def load_model(path: Path | str) -> EmbeddingModel:
    source = str(path)
    tensors = read_container(path, MAGIC)
    win_len, hop, nfft = (int(v) for v in require(tensors, "frontend.frame", (3,), source))
    n_mels, fmin, fmax, sample_rate = require(tensors, "frontend.mel", (4,), source)
    if int(n_mels) != N_MELS:
        raise ContainerFormatError(f"{source}: model has {int(n_mels)} mel bands, expected {N_MELS}")
    window = require(tensors, "frontend.window", (win_len,), source)
    weights = require(tensors, "frontend.mel_weights", (N_MELS, nfft // 2 + 1), source)
    if "classifier.bias" not in tensors or tensors["classifier.bias"].ndim != 1:
        raise ContainerFormatError(f"{source}: missing tensor 'classifier.bias'")
    n_train_speakers = tensors["classifier.bias"].shape[0]
    params = {name: require(tensors, name, shape, source) for name, shape in param_shapes(n_train_speakers).items()}
    try:
        spec = FrameSpec(win_len, hop, nfft, window)
        bank = MelBank(N_MELS, float(fmin), float(fmax), weights, int(sample_rate))
        return EmbeddingModel(params, spec, bank, n_train_speakers)
    except ValueError as exc:
        raise ContainerFormatError(f"{source}: {exc}") from exc
