"""Score-variation detection: calibration on genuine data, detection rate and EER."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Literal, Sequence, Tuple

import numpy as np

from .asv import Embedding, EmbeddingModel, score
from .codec import CodecInterface, resynth
from .errors import CalibrationError
from .signal import Waveform

Population = str
Verdict = Literal["genuine", "adversarial"]

DETECTION_HEADER = ("codec", "epsilon_lsb", "fpr_given", "tau", "achieved_fpr", "detection_rate")
EER_HEADER = ("codec", "population", "eer", "eer_threshold")
HISTOGRAM_HEADER = ("population", "bin_lo", "bin_hi", "count")
TRADEOFF_HEADER = ("codec", "epsilon_lsb", "genuine_eer", "adversarial_eer")


def fmt(value: float) -> str:
    return f"{value:.9f}"


@dataclass(frozen=True)
class ScoreVariation:
    d: float
    trial_idx: int = -1
    population: Population = "genuine"
    score: float = math.nan
    score_resynth: float = math.nan

    def __post_init__(self) -> None:
        if not self.d >= 0.0:
            raise ValueError(f"score variation must be >= 0, got {self.d}")


@dataclass(frozen=True)
class ScoreVariationSet:
    values: Tuple[ScoreVariation, ...] = field(default_factory=tuple)
    population: Population = "genuine"

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))

    @classmethod
    def of(cls, ds: Iterable[float], population: Population = "genuine") -> "ScoreVariationSet":
        return cls(tuple(ScoreVariation(float(d), i, population) for i, d in enumerate(ds)), population)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def ds(self) -> np.ndarray:
        return np.array([v.d for v in self.values], dtype=np.float64)


@dataclass(frozen=True)
class DetectionThreshold:
    tau: float
    fpr_given: float
    achieved_fpr: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.fpr_given <= 1.0:
            raise ValueError(f"fpr_given must lie in [0, 1], got {self.fpr_given}")
        if self.achieved_fpr > self.fpr_given:
            raise ValueError(f"achieved FPR {self.achieved_fpr} exceeds the budget {self.fpr_given}")


def score_variation(
    model: EmbeddingModel,
    codec: CodecInterface,
    enroll: Embedding,
    test_wave: Waveform,
    *,
    trial_idx: int = -1,
    population: Population = "genuine",
) -> ScoreVariation:
    """|s - s'| between the test utterance and its resynthesis."""
    s = float(score(model, enroll, test_wave))
    s_resynth = float(score(model, enroll, resynth(codec, test_wave)))
    return ScoreVariation(abs(s - s_resynth), trial_idx, population, s, s_resynth)


def _exceeding(ds: np.ndarray, tau: float) -> float:
    return float(np.count_nonzero(ds > tau)) / ds.size


def calibrate(genuine_ds: ScoreVariationSet, fpr_given: float) -> DetectionThreshold:
    """Threshold from genuine variations only, never exceeding the false-alarm budget."""
    if not 0.0 <= fpr_given <= 1.0:
        raise ValueError(f"fpr_given must lie in [0, 1], got {fpr_given}")
    ds = genuine_ds.ds
    n = ds.size
    if n == 0:
        raise CalibrationError("cannot calibrate on an empty genuine set")
    m = math.floor(fpr_given * n)
    # Guard against fpr_given * n landing just below an integer.
    while m < n and (m + 1) / n <= fpr_given:
        m += 1
    while m > 0 and m / n > fpr_given:
        m -= 1
    ordered = np.sort(ds)[::-1]
    tau = float(ordered[m]) if m < n else float(ordered[-1])
    return DetectionThreshold(tau, fpr_given, _exceeding(ds, tau))


def detection_rate(adv_ds: ScoreVariationSet, thr: DetectionThreshold) -> float:
    ds = adv_ds.ds
    if ds.size == 0:
        raise CalibrationError("cannot compute a detection rate on an empty adversarial set")
    return _exceeding(ds, thr.tau)


def classify(d: ScoreVariation | float, thr: DetectionThreshold) -> Verdict:
    value = d.d if isinstance(d, ScoreVariation) else float(d)
    return "adversarial" if value > thr.tau else "genuine"


def compute_eer(target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> Tuple[float, float]:
    """Equal error rate with linear interpolation where FAR - FRR changes sign.

    FAR(t) is the fraction of non-target scores above t, FRR(t) the fraction of
    target scores at or below t. Returns (eer, threshold).
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise ValueError("compute_eer needs non-empty target and non-target scores")

    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([tar, non]))])
    far = 1.0 - np.searchsorted(non, thresholds, side="right") / non.size
    frr = np.searchsorted(tar, thresholds, side="right") / tar.size
    diff = far - frr
    i = int(np.argmax(diff <= 0.0))
    a, b = diff[i - 1], diff[i]
    lam = a / (a - b)
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    if i == 1:
        threshold = thresholds[1]
    else:
        threshold = thresholds[i - 1] + lam * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(threshold)


def histogram(ds: ScoreVariationSet, n_bins: int, value_range: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform bins over [lo, hi]; out-of-range values land in the edge bins."""
    lo, hi = value_range
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if not lo < hi:
        raise ValueError(f"invalid histogram range [{lo}, {hi}]")
    counts, edges = np.histogram(np.clip(ds.ds, lo, hi), bins=n_bins, range=(lo, hi))
    return edges, counts


@dataclass(frozen=True)
class TradeoffPoint:
    codec: str
    genuine_eer: float
    adversarial_eer: float
    epsilon_lsb: int = 0

    def __post_init__(self) -> None:
        for label, rate in (("genuine", self.genuine_eer), ("adversarial", self.adversarial_eer)):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{label} EER must lie in [0, 1], got {rate}")


def tradeoff_point(genuine_eer: float, adversarial_eer: float, codec_name: str, epsilon_lsb: int = 0) -> TradeoffPoint:
    return TradeoffPoint(codec_name, genuine_eer, adversarial_eer, epsilon_lsb)


@dataclass(frozen=True)
class DetectionRow:
    codec: str
    epsilon_lsb: int
    threshold: DetectionThreshold
    detection_rate: float

    def as_csv(self) -> List[str]:
        t = self.threshold
        return [self.codec, str(self.epsilon_lsb), repr(t.fpr_given), fmt(t.tau), fmt(t.achieved_fpr), fmt(self.detection_rate)]


@dataclass(frozen=True)
class EerRow:
    codec: str
    population: Population
    eer: float
    eer_threshold: float

    def as_csv(self) -> List[str]:
        return [self.codec, self.population, fmt(self.eer), fmt(self.eer_threshold)]


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Path | str) -> List[dict]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def histogram_rows(population: Population, edges: np.ndarray, counts: np.ndarray) -> List[List[str]]:
    return [[population, fmt(edges[i]), fmt(edges[i + 1]), str(int(c))] for i, c in enumerate(counts)]


def tradeoff_rows(points: Iterable[TradeoffPoint]) -> List[List[str]]:
    return [[p.codec, str(p.epsilon_lsb), fmt(p.genuine_eer), fmt(p.adversarial_eer)] for p in points]
