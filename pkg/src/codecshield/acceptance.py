"""Regression bounds measured on the reference desk run, checked over a finished work directory."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .attack import ManifestRow, read_manifest
from .config import ExperimentConfig
from .console import get_logger
from .detector import fmt, read_csv, write_csv
from .errors import MissingArtifactError
from .pipeline import GENUINE, NO_CODEC, Workspace, adversarial_population

log = get_logger("acceptance")

ACCEPTANCE_HEADER = ("check", "value", "bound", "status")

GENUINE_EER_MAX = 0.05
NONTARGET_INCREASE_MIN = 0.95
FALSE_ACCEPT_MIN = 0.80
DETECTION_RATE_MIN = 0.80
DETECTION_FPR = 0.05
SEPARATION_RATIO_MIN = 3.0
GENUINE_EER_INCREASE_MAX = 0.03
SEGSNR_MIN_DB = 8.0
IDEMPOTENCE_MAX = 0.35
SCORE_SHIFT_MIN = 0.70
DEFENDED_CODEC = "rvq"


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: Optional[float]
    bound: str
    passed: Optional[bool]

    @property
    def status(self) -> str:
        if self.passed is None:
            return "skipped"
        return "pass" if self.passed else "FAIL"

    def as_csv(self) -> List[str]:
        return [self.name, "" if self.value is None else fmt(self.value), self.bound, self.status]


class RunReports:
    """Read-only view of the CSVs and manifests of a finished run."""

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config
        self.workspace = Workspace(config.work_dir)
        ws = self.workspace
        for name in ("eer.csv", "detection_report.csv", "scores.csv", "codec_quality.csv"):
            if not ws.report(name).is_file():
                raise MissingArtifactError(f"reports/{name}", "evaluate")
        self.eer = {(r["codec"], r["population"]): r for r in read_csv(ws.report("eer.csv"))}
        self.detection = read_csv(ws.report("detection_report.csv"))
        self.scores = read_csv(ws.report("scores.csv"))
        self.quality = {r["codec"]: r for r in read_csv(ws.report("codec_quality.csv"))}
        self.manifests: Dict[int, List[ManifestRow]] = {}
        for eps in config.attack.epsilon_lsb:
            path = ws.manifest_path(eps)
            if not path.is_file():
                raise MissingArtifactError(f"adv/eps{eps}/manifest.csv", "attack")
            self.manifests[eps] = read_manifest(path)

    @property
    def strongest(self) -> int:
        return max(self.config.attack.epsilon_lsb)

    def eer_value(self, codec: str, population: str, key: str = "eer") -> float:
        return float(self.eer[(codec, population)][key])

    def variations(self, codec: str, population: str) -> np.ndarray:
        return np.array([float(r["variation"]) for r in self.scores if r["codec"] == codec and r["population"] == population])


def _fraction(mask: Sequence[bool]) -> float:
    values = np.asarray(mask, dtype=bool)
    return float(values.mean()) if values.size else 0.0


def _attack_success(rows: Sequence[ManifestRow], threshold: float) -> float:
    """Fraction of non-target trials accepted at the threshold after the attack."""
    return _fraction([r.score_after > threshold for r in rows if not r.is_target])


def check_genuine_eer(rep: RunReports) -> CheckResult:
    value = rep.eer_value(NO_CODEC, GENUINE)
    return CheckResult("genuine EER without codec", value, f"<= {GENUINE_EER_MAX}", value <= GENUINE_EER_MAX)


def check_nontarget_increase(rep: RunReports) -> CheckResult:
    rows = [r for r in rep.manifests[rep.strongest] if not r.is_target]
    value = _fraction([r.score_after > r.score_before for r in rows])
    return CheckResult(
        f"non-target score increase at eps{rep.strongest}", value, f">= {NONTARGET_INCREASE_MIN}",
        value >= NONTARGET_INCREASE_MIN,
    )


def check_false_accept(rep: RunReports) -> CheckResult:
    threshold = rep.eer_value(NO_CODEC, GENUINE, "eer_threshold")
    value = _attack_success(rep.manifests[rep.strongest], threshold)
    return CheckResult(
        f"false acceptance at eps{rep.strongest}", value, f">= {FALSE_ACCEPT_MIN}", value >= FALSE_ACCEPT_MIN
    )


def check_attack_monotone(rep: RunReports) -> CheckResult:
    threshold = rep.eer_value(NO_CODEC, GENUINE, "eer_threshold")
    rates = [_attack_success(rep.manifests[e], threshold) for e in sorted(rep.manifests)]
    ok = all(b >= a for a, b in zip(rates, rates[1:]))
    return CheckResult("attack success non-decreasing in eps", rates[-1], "monotone", ok)


def check_detection_rate(rep: RunReports) -> CheckResult:
    for row in rep.detection:
        if (
            row["codec"] == DEFENDED_CODEC
            and int(row["epsilon_lsb"]) == rep.strongest
            and float(row["fpr_given"]) == DETECTION_FPR
        ):
            value = float(row["detection_rate"])
            return CheckResult(
                f"detection rate rvq eps{rep.strongest} fpr{DETECTION_FPR}", value, f">= {DETECTION_RATE_MIN}",
                value >= DETECTION_RATE_MIN,
            )
    return CheckResult(f"detection rate rvq fpr{DETECTION_FPR}", None, f">= {DETECTION_RATE_MIN}", None)


def check_separation(rep: RunReports) -> CheckResult:
    genuine = np.median(rep.variations(DEFENDED_CODEC, GENUINE))
    adversarial = np.median(rep.variations(DEFENDED_CODEC, adversarial_population(rep.strongest)))
    ratio = float(adversarial / genuine) if genuine > 0 else float("inf")
    return CheckResult(
        "median adversarial d / median genuine d", ratio, f">= {SEPARATION_RATIO_MIN}", ratio >= SEPARATION_RATIO_MIN
    )


def check_genuine_preservation(rep: RunReports) -> CheckResult:
    value = rep.eer_value(DEFENDED_CODEC, GENUINE) - rep.eer_value(NO_CODEC, GENUINE)
    return CheckResult(
        "genuine EER increase with rvq", value, f"<= {GENUINE_EER_INCREASE_MAX}", value <= GENUINE_EER_INCREASE_MAX
    )


def check_tradeoff(rep: RunReports) -> CheckResult:
    population = adversarial_population(rep.strongest)
    defended = rep.eer_value(DEFENDED_CODEC, population)
    undefended = rep.eer_value(NO_CODEC, population)
    return CheckResult(
        f"adversarial EER rvq vs none at eps{rep.strongest}", defended, f"< {fmt(undefended)}", defended < undefended
    )


def check_segsnr(rep: RunReports) -> CheckResult:
    value = float(rep.quality[DEFENDED_CODEC]["median_segsnr_db"])
    return CheckResult("rvq median segmental SNR (dB)", value, f">= {SEGSNR_MIN_DB}", value >= SEGSNR_MIN_DB)


def check_idempotence(rep: RunReports) -> CheckResult:
    value = float(rep.quality[DEFENDED_CODEC]["idempotence_ratio"])
    return CheckResult("rvq idempotence ratio", value, f"< {IDEMPOTENCE_MAX}", value < IDEMPOTENCE_MAX)


def check_score_shift(rep: RunReports) -> CheckResult:
    population = adversarial_population(rep.strongest)
    before = {r.trial_idx: r.score_before for r in rep.manifests[rep.strongest]}
    moved = [
        abs(float(r["score_resynth"]) - before[int(r["trial_idx"])]) < abs(float(r["score"]) - before[int(r["trial_idx"])])
        for r in rep.scores
        if r["codec"] == DEFENDED_CODEC and r["population"] == population
    ]
    value = _fraction(moved)
    return CheckResult("rvq score shift toward genuine", value, f">= {SCORE_SHIFT_MIN}", value >= SCORE_SHIFT_MIN)


GENERAL_CHECKS: Sequence[Callable[[RunReports], CheckResult]] = (
    check_genuine_eer,
    check_nontarget_increase,
    check_false_accept,
    check_attack_monotone,
)

DEFENDED_CHECKS: Sequence[Callable[[RunReports], CheckResult]] = (
    check_detection_rate,
    check_separation,
    check_genuine_preservation,
    check_tradeoff,
    check_segsnr,
    check_idempotence,
    check_score_shift,
)


def run_checks(config: ExperimentConfig) -> List[CheckResult]:
    rep = RunReports(config)
    results = [check(rep) for check in GENERAL_CHECKS]
    if DEFENDED_CODEC in config.codec.names:
        results.extend(check(rep) for check in DEFENDED_CHECKS)
    else:
        log.warning("rvq not in codec.names; codec checks skipped")
        results.extend(CheckResult(c.__name__.removeprefix("check_"), None, "", None) for c in DEFENDED_CHECKS)
    write_csv(rep.workspace.report("acceptance.csv"), ACCEPTANCE_HEADER, [r.as_csv() for r in results])
    return results


def all_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.passed is not False for r in results)


def summary(results: Sequence[CheckResult]) -> Mapping[str, int]:
    counts = {"pass": 0, "FAIL": 0, "skipped": 0}
    for r in results:
        counts[r.status] += 1
    return counts
