"""Basic Iterative Method attacks on the speaker verification score."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .asv import Embedding, EmbeddingModel, embed, score, score_grad
from .console import get_logger
from .errors import TrialFailuresError, WavFormatError
from .signal import PCM_SCALE, Trial, TrialList, Waveform, dequantize, quantize, read_wav, write_wav

log = get_logger("attack")

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("trial_idx", "is_target", "orig_path", "adv_path", "score_before", "score_after", "epsilon_lsb")


@dataclass(frozen=True)
class AttackConfig:
    """L-inf budget and step in 16-bit LSB units; polarity 1 lowers the score."""

    epsilon_lsb: int
    alpha_lsb: int = 1
    polarity_I: int = 0

    def __post_init__(self) -> None:
        if self.epsilon_lsb < 0:
            raise ValueError(f"epsilon_lsb must be >= 0, got {self.epsilon_lsb}")
        if self.alpha_lsb < 1:
            raise ValueError(f"alpha_lsb must be >= 1, got {self.alpha_lsb}")
        if self.polarity_I not in (0, 1):
            raise ValueError(f"polarity_I must be 0 or 1, got {self.polarity_I}")

    @property
    def iterations(self) -> int:
        return -(-self.epsilon_lsb // self.alpha_lsb)

    @property
    def epsilon(self) -> float:
        return self.epsilon_lsb / PCM_SCALE

    @property
    def alpha(self) -> float:
        return self.alpha_lsb / PCM_SCALE

    def for_trial(self, trial: Trial) -> "AttackConfig":
        return AttackConfig(self.epsilon_lsb, self.alpha_lsb, 1 if trial.is_target else 0)


StepCallback = Callable[[int, float], None]


def bim(
    model: EmbeddingModel,
    enroll: Embedding,
    x0: Waveform,
    cfg: AttackConfig,
    *,
    on_step: Optional[StepCallback] = None,
) -> Waveform:
    """Sign-gradient steps projected onto the eps-ball around x0 and [-1, 1]."""
    origin = x0.samples
    lower = np.maximum(origin - cfg.epsilon, -1.0)
    upper = np.minimum(origin + cfg.epsilon, 1.0)
    direction = -1.0 if cfg.polarity_I else 1.0
    x = origin.copy()
    for k in range(cfg.iterations):
        value, grad = score_grad(model, enroll, x)
        if on_step is not None:
            on_step(k, float(value))
        x = np.clip(x + cfg.alpha * direction * np.sign(grad), lower, upper)
    return Waveform(x)


@dataclass(frozen=True)
class ManifestRow:
    trial_idx: int
    is_target: bool
    orig_path: str
    adv_path: str
    score_before: float
    score_after: float
    epsilon_lsb: int

    def as_csv(self) -> List[str]:
        return [
            str(self.trial_idx),
            str(int(self.is_target)),
            self.orig_path,
            self.adv_path,
            f"{self.score_before:.9f}",
            f"{self.score_after:.9f}",
            str(self.epsilon_lsb),
        ]


def adversarial_name(trial_idx: int) -> str:
    return f"trial{trial_idx:04d}.wav"


def write_manifest(rows: Sequence[ManifestRow], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(row.as_csv() for row in rows)


def read_manifest(path: Path | str) -> List[ManifestRow]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [
            ManifestRow(
                trial_idx=int(r["trial_idx"]),
                is_target=r["is_target"] == "1",
                orig_path=r["orig_path"],
                adv_path=r["adv_path"],
                score_before=float(r["score_before"]),
                score_after=float(r["score_after"]),
                epsilon_lsb=int(r["epsilon_lsb"]),
            )
            for r in reader
        ]


def enrollment_embeddings(model: EmbeddingModel, trials: TrialList, corpus_dir: Path) -> Dict[str, Embedding]:
    paths = sorted({t.enroll_path for t in trials})
    return {p: embed(model, read_wav(corpus_dir / p)) for p in paths}


def attack_trial_set(
    model: EmbeddingModel,
    trials: TrialList,
    cfg: AttackConfig,
    out_dir: Path | str,
    *,
    corpus_dir: Path | str,
    jobs: int = 1,
    on_trial: Optional[Callable[[int], None]] = None,
) -> List[ManifestRow]:
    """Attack every trial's test utterance and persist 16-bit adversarial audio plus a manifest."""
    out_dir, corpus_dir = Path(out_dir), Path(corpus_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enrolls = enrollment_embeddings(model, trials, corpus_dir)

    def _attack(job: Tuple[int, Trial]) -> ManifestRow | Tuple[int, str]:
        idx, trial = job
        try:
            original = read_wav(corpus_dir / trial.test_path)
            enroll = enrolls[trial.enroll_path]
            adversarial = bim(model, enroll, original, cfg.for_trial(trial))
            write_wav(adversarial, out_dir / adversarial_name(idx))
            persisted = Waveform(dequantize(quantize(adversarial.samples)))
            return ManifestRow(
                trial_idx=idx,
                is_target=trial.is_target,
                orig_path=trial.test_path,
                adv_path=adversarial_name(idx),
                score_before=float(score(model, enroll, original)),
                score_after=float(score(model, enroll, persisted)),
                epsilon_lsb=cfg.epsilon_lsb,
            )
        except (OSError, WavFormatError) as exc:
            log.error("trial %d (%s): %s", idx, trial.test_path, exc)
            return idx, str(exc)
        finally:
            if on_trial is not None:
                on_trial(idx)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(_attack, enumerate(trials)))

    rows = [r for r in results if isinstance(r, ManifestRow)]
    failures = [r for r in results if not isinstance(r, ManifestRow)]
    write_manifest(rows, out_dir / MANIFEST_NAME)
    if failures:
        raise TrialFailuresError(failures)
    log.info("Attacked %d trials at eps=%d LSB", len(rows), cfg.epsilon_lsb)
    return rows
