"""Experiment stages, their on-disk layout and content-hash fingerprints.

Every stage writes ``stages/<stage>.done`` with a fingerprint over the stage
name, the config values it depends on and the hashes of its input files. A
stage whose fingerprint matches is skipped; a mismatch is an error unless the
run is forced.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, NamedTuple, Sequence, Tuple, TypeVar

import numpy as np

from .asv import load_model, save_model, train
from .attack import AttackConfig, ManifestRow, attack_trial_set, enrollment_embeddings, read_manifest
from .codec import CodecInterface, build_codec, idempotence_ratio, load_codec, resynth, save_codec, segmental_snr, train_rvq
from .config import ExperimentConfig
from .console import get_logger, progress_bar, stage_log
from .detector import (
    DETECTION_HEADER,
    EER_HEADER,
    HISTOGRAM_HEADER,
    TRADEOFF_HEADER,
    DetectionRow,
    DetectionThreshold,
    EerRow,
    ScoreVariation,
    ScoreVariationSet,
    calibrate,
    compute_eer,
    detection_rate,
    fmt,
    histogram,
    histogram_rows,
    read_csv,
    score_variation,
    tradeoff_point,
    tradeoff_rows,
    write_csv,
)
from .errors import MissingArtifactError, StageError, StaleArtifactError
from .signal import TrialList, derive_seed, gen_corpus, read_trials, read_wav

log = get_logger("pipeline")

STAGES = ("gen-data", "train-asv", "train-codec", "attack", "calibrate", "evaluate")
NO_CODEC = "none"
GENUINE = "genuine"

THRESHOLDS_HEADER = ("codec", "fpr_given", "tau", "achieved_fpr", "n_genuine")
SCORES_HEADER = ("trial_idx", "is_target", "population", "codec", "score", "score_resynth", "variation")
QUALITY_HEADER = ("codec", "bitrate_bps", "median_segsnr_db", "idempotence_ratio")

T = TypeVar("T")
R = TypeVar("R")


def adversarial_population(epsilon_lsb: int) -> str:
    return f"adversarial_eps{epsilon_lsb}"


@dataclass(frozen=True)
class Workspace:
    root: Path

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def trials_path(self) -> Path:
        return self.root / "trials.txt"

    @property
    def model_path(self) -> Path:
        return self.root / "asv.model"

    @property
    def codec_path(self) -> Path:
        return self.root / "rvq.codec"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def adv_dir(self, epsilon_lsb: int) -> Path:
        return self.root / "adv" / f"eps{epsilon_lsb}"

    def manifest_path(self, epsilon_lsb: int) -> Path:
        return self.adv_dir(epsilon_lsb) / "manifest.csv"

    def report(self, name: str) -> Path:
        return self.reports_dir / name

    def log_path(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.log"

    def done_path(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.done"


class Artifact(NamedTuple):
    path: Path
    label: str
    command: str


def content_hash(path: Path) -> str:
    """sha256 over a file, or over every file below a directory in sorted order."""
    digest = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(child.relative_to(path).as_posix().encode("utf-8"))
            digest.update(child.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class PipelineContext:
    config: ExperimentConfig
    force: bool = False
    jobs: int = 1

    @property
    def workspace(self) -> Workspace:
        return Workspace(self.config.work_dir)

    @property
    def rvq_enabled(self) -> bool:
        return "rvq" in self.config.codec.names

    def seed_for(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    def fingerprint(self, stage: str, params: Mapping[str, Any], inputs: Sequence[Artifact]) -> Tuple[str, Dict[str, str]]:
        root = self.workspace.root
        hashes = {_relative(a.path, root): content_hash(a.path) for a in inputs}
        payload = json.dumps({"stage": stage, "params": params, "inputs": hashes}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest(), hashes

    @contextmanager
    def stage(
        self,
        name: str,
        params: Mapping[str, Any],
        inputs: Sequence[Artifact],
        outputs: Sequence[Path],
    ) -> Iterator[bool]:
        """Yield True when the stage body must run; record its fingerprint on success."""
        for artifact in inputs:
            if not artifact.path.exists():
                raise MissingArtifactError(artifact.label, artifact.command)
        fingerprint, hashes = self.fingerprint(name, params, inputs)
        done = self.workspace.done_path(name)
        if done.is_file() and not self.force:
            recorded = json.loads(done.read_text(encoding="utf-8")).get("fingerprint")
            if recorded != fingerprint:
                raise StaleArtifactError(name)
            if all(p.exists() for p in outputs):
                log.info("%s: up to date, skipping", name)
                yield False
                return
        with stage_log(self.workspace.log_path(name)):
            log.info("%s: running (fingerprint %s)", name, fingerprint[:12])
            yield True
        done.parent.mkdir(parents=True, exist_ok=True)
        record = {"stage": name, "fingerprint": fingerprint, "params": params, "inputs": hashes}
        done.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def map(self, fn: Callable[[T], R], items: Sequence[T], description: str) -> List[R]:
        """Ordered parallel map with a progress bar."""
        results: List[R] = []
        with progress_bar() as progress, ThreadPoolExecutor(max_workers=max(1, self.jobs)) as pool:
            task = progress.add_task(description, total=len(items))
            for result in pool.map(fn, items):
                results.append(result)
                progress.advance(task)
        return results


def _relative(path: Path, root: Path) -> str:
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()


# --- Artifacts --------------------------------------------------------------------


def _corpus(ws: Workspace) -> List[Artifact]:
    return [
        Artifact(ws.corpus_dir, "corpus", "gen-data"),
        Artifact(ws.trials_path, "trial list", "gen-data"),
    ]


def _model(ws: Workspace) -> Artifact:
    return Artifact(ws.model_path, "ASV model", "train-asv")


def _codec(ctx: PipelineContext) -> List[Artifact]:
    return [Artifact(ctx.workspace.codec_path, "RVQ codec", "train-codec")] if ctx.rvq_enabled else []


def _manifests(ctx: PipelineContext) -> List[Artifact]:
    ws = ctx.workspace
    # The stage record exists only once every epsilon has been attacked to completion.
    done = Artifact(ws.done_path("attack"), "completed attack stage", "attack")
    return [done] + [Artifact(ws.adv_dir(e), f"adversarial set eps{e}", "attack") for e in ctx.config.attack.epsilon_lsb]


def _calibration(ws: Workspace) -> List[Artifact]:
    return [
        Artifact(ws.report("thresholds.csv"), "thresholds", "calibrate"),
        Artifact(ws.report("genuine_scores.csv"), "genuine scores", "calibrate"),
    ]


def _load_codecs(ctx: PipelineContext) -> Dict[str, CodecInterface]:
    rvq = load_codec(ctx.workspace.codec_path) if ctx.rvq_enabled else None
    return {name: build_codec(name, rvq) for name in ctx.config.codec.names}


# --- Stages -----------------------------------------------------------------------


def stage_gen_data(ctx: PipelineContext) -> bool:
    ws, cfg = ctx.workspace, ctx.config
    params = {"seed": cfg.seed, "corpus": cfg.to_dict()["corpus"]}
    with ctx.stage("gen-data", params, [], [ws.corpus_dir, ws.trials_path]) as run:
        if run:
            c = cfg.corpus
            gen_corpus(
                c.n_speakers, c.utts_per_speaker, c.duration_s, ctx.seed_for("gen-data"),
                ws.corpus_dir, trials_path=ws.trials_path, jobs=ctx.jobs,
            )
    return run


def stage_train_asv(ctx: PipelineContext) -> bool:
    ws, cfg = ctx.workspace, ctx.config
    params = {"seed": cfg.seed, "asv": cfg.to_dict()["asv"]}
    with ctx.stage("train-asv", params, _corpus(ws), [ws.model_path]) as run:
        if run:
            with progress_bar() as progress:
                task = progress.add_task("train-asv", total=cfg.asv.epochs)
                model = train(
                    ws.corpus_dir, read_trials(ws.trials_path), cfg.asv, ctx.seed_for("train-asv"),
                    on_epoch=lambda epoch, loss: progress.advance(task),
                )
            save_model(model, ws.model_path)
    return run


def stage_train_codec(ctx: PipelineContext) -> bool:
    ws, cfg = ctx.workspace, ctx.config
    if not ctx.rvq_enabled:
        log.info("train-codec: rvq not in codec.names, nothing to train")
        return False
    k = cfg.codec
    params = {
        "seed": cfg.seed,
        "codec": {
            "n_stages": k.n_stages, "codebook_size": k.codebook_size, "gain_levels": k.gain_levels,
            "kmeans_iters": k.kmeans_iters, "min_frames": k.min_frames,
        },
    }
    with ctx.stage("train-codec", params, _corpus(ws), [ws.codec_path]) as run:
        if run:
            codec = train_rvq(
                ws.corpus_dir, ctx.seed_for("train-codec"), holdout=read_trials(ws.trials_path),
                n_stages=k.n_stages, codebook_size=k.codebook_size, gain_levels=k.gain_levels,
                kmeans_iters=k.kmeans_iters, min_frames=k.min_frames,
            )
            save_codec(codec, ws.codec_path)
    return run


def stage_attack(ctx: PipelineContext) -> bool:
    ws, cfg = ctx.workspace, ctx.config
    params = {"attack": cfg.to_dict()["attack"]}
    outputs = [ws.manifest_path(e) for e in cfg.attack.epsilon_lsb]
    with ctx.stage("attack", params, _corpus(ws) + [_model(ws)], outputs) as run:
        if run:
            trials = read_trials(ws.trials_path)
            model = load_model(ws.model_path)
            for eps in cfg.attack.epsilon_lsb:
                with progress_bar() as progress:
                    task = progress.add_task(f"attack eps{eps}", total=len(trials))
                    attack_trial_set(
                        model, trials, AttackConfig(eps, cfg.attack.alpha_lsb), ws.adv_dir(eps),
                        corpus_dir=ws.corpus_dir, jobs=ctx.jobs, on_trial=lambda _: progress.advance(task),
                    )
    return run


def _score_rows(trials: TrialList, variations: Sequence[ScoreVariation], codec: str) -> List[List[str]]:
    return [
        [
            str(v.trial_idx), str(int(trials.trials[v.trial_idx].is_target)), v.population, codec,
            fmt(v.score), fmt(v.score_resynth), fmt(v.d),
        ]
        for v in variations
    ]


def stage_calibrate(ctx: PipelineContext) -> bool:
    """Thresholds from genuine test audio only; adversarial sets are not inputs."""
    ws, cfg = ctx.workspace, ctx.config
    params = {"fpr_given": cfg.detector.fpr_given, "codecs": cfg.codec.names}
    inputs = _corpus(ws) + [_model(ws)] + _codec(ctx)
    with ctx.stage("calibrate", params, inputs, [a.path for a in _calibration(ws)]) as run:
        if run:
            trials = read_trials(ws.trials_path)
            model = load_model(ws.model_path)
            enrolls = enrollment_embeddings(model, trials, ws.corpus_dir)
            threshold_rows: List[List[str]] = []
            score_rows: List[List[str]] = []
            for name, codec in _load_codecs(ctx).items():

                def _variation(job, codec=codec) -> ScoreVariation:
                    idx, trial = job
                    wave = read_wav(ws.corpus_dir / trial.test_path)
                    return score_variation(model, codec, enrolls[trial.enroll_path], wave, trial_idx=idx)

                variations = ctx.map(_variation, list(enumerate(trials)), f"calibrate {name}")
                genuine = ScoreVariationSet(tuple(variations), GENUINE)
                for fpr in cfg.detector.fpr_given:
                    thr = calibrate(genuine, fpr)
                    threshold_rows.append([name, repr(fpr), fmt(thr.tau), fmt(thr.achieved_fpr), str(len(genuine))])
                    log.info("%s fpr=%s: tau=%.6f achieved=%.4f", name, fpr, thr.tau, thr.achieved_fpr)
                score_rows.extend(_score_rows(trials, variations, name))
            write_csv(ws.report("thresholds.csv"), THRESHOLDS_HEADER, threshold_rows)
            write_csv(ws.report("genuine_scores.csv"), SCORES_HEADER, score_rows)
    return run


def read_thresholds(path: Path) -> Dict[Tuple[str, float], DetectionThreshold]:
    return {
        (r["codec"], float(r["fpr_given"])): DetectionThreshold(
            float(r["tau"]), float(r["fpr_given"]), float(r["achieved_fpr"])
        )
        for r in read_csv(path)
    }


def _column(rows: Sequence[Mapping[str, str]], key: str) -> np.ndarray:
    return np.array([float(r[key]) for r in rows])


def _indices(rows: Sequence[Mapping[str, str]]) -> List[int]:
    return [int(r["trial_idx"]) for r in rows]


def _eer_row(codec: str, population: str, scores: np.ndarray, trial_idx: Sequence[int], trials: TrialList) -> EerRow:
    """EER over scored rows; each row's label comes from the trial it names."""
    labels = np.array([trials.trials[i].is_target for i in trial_idx], dtype=bool)
    eer, threshold = compute_eer(scores[labels], scores[~labels])
    return EerRow(codec, population, eer, threshold)


def _complete_manifest(ws: Workspace, trials: TrialList, epsilon_lsb: int) -> List[ManifestRow]:
    rows = read_manifest(ws.manifest_path(epsilon_lsb))
    covered = sorted(r.trial_idx for r in rows)
    if covered != list(range(len(trials))):
        raise StageError(
            f"adversarial set eps{epsilon_lsb} covers {len(set(covered))} of {len(trials)} trials. "
            "Re-run `codecshield attack --force`."
        )
    return rows


def stage_evaluate(ctx: PipelineContext) -> bool:
    ws, cfg = ctx.workspace, ctx.config
    params = {"detector": cfg.to_dict()["detector"], "epsilon_lsb": cfg.attack.epsilon_lsb, "codecs": cfg.codec.names}
    inputs = _corpus(ws) + [_model(ws)] + _codec(ctx) + _manifests(ctx) + _calibration(ws)
    outputs = [ws.report(n) for n in ("detection_report.csv", "eer.csv", "tradeoff.csv", "scores.csv", "codec_quality.csv")]
    with ctx.stage("evaluate", params, inputs, outputs) as run:
        if run:
            _evaluate(ctx)
    return run


def _evaluate(ctx: PipelineContext) -> None:
    ws, cfg = ctx.workspace, ctx.config
    trials = read_trials(ws.trials_path)
    model = load_model(ws.model_path)
    codecs = _load_codecs(ctx)
    enrolls = enrollment_embeddings(model, trials, ws.corpus_dir)
    thresholds = read_thresholds(ws.report("thresholds.csv"))
    genuine_rows: Dict[str, List[Mapping[str, str]]] = {}
    for row in read_csv(ws.report("genuine_scores.csv")):
        genuine_rows.setdefault(row["codec"], []).append(row)
    manifests: Dict[int, List[ManifestRow]] = {e: _complete_manifest(ws, trials, e) for e in cfg.attack.epsilon_lsb}
    original = genuine_rows[cfg.codec.names[0]]

    eer_rows = [_eer_row(NO_CODEC, GENUINE, _column(original, "score"), _indices(original), trials)]
    for eps in cfg.attack.epsilon_lsb:
        rows = manifests[eps]
        after = np.array([r.score_after for r in rows])
        eer_rows.append(_eer_row(NO_CODEC, adversarial_population(eps), after, [r.trial_idx for r in rows], trials))
    tradeoff = [
        tradeoff_point(eer_rows[0].eer, eer_rows[1 + i].eer, NO_CODEC, eps)
        for i, eps in enumerate(cfg.attack.epsilon_lsb)
    ]

    detection: List[DetectionRow] = []
    score_rows: List[List[str]] = []
    lo, hi = cfg.detector.hist_range
    for name, codec in codecs.items():
        rows = genuine_rows[name]
        genuine = ScoreVariationSet(
            tuple(ScoreVariation(float(r["variation"]), int(r["trial_idx"]), GENUINE) for r in rows), GENUINE
        )
        genuine_eer = _eer_row(name, GENUINE, _column(rows, "score_resynth"), _indices(rows), trials)
        eer_rows.append(genuine_eer)
        hist = histogram_rows(GENUINE, *histogram(genuine, cfg.detector.hist_bins, (lo, hi)))
        score_rows.extend(
            [r["trial_idx"], r["is_target"], GENUINE, name, r["score"], r["score_resynth"], r["variation"]] for r in rows
        )
        for eps in cfg.attack.epsilon_lsb:
            population = adversarial_population(eps)

            def _variation(row: ManifestRow, codec=codec, population=population, eps=eps) -> ScoreVariation:
                wave = read_wav(ws.adv_dir(eps) / row.adv_path)
                enroll = enrolls[trials.trials[row.trial_idx].enroll_path]
                return score_variation(model, codec, enroll, wave, trial_idx=row.trial_idx, population=population)

            variations = ctx.map(_variation, manifests[eps], f"evaluate {name} eps{eps}")
            adversarial = ScoreVariationSet(tuple(variations), population)
            for fpr in cfg.detector.fpr_given:
                thr = thresholds[(name, fpr)]
                detection.append(DetectionRow(name, eps, thr, detection_rate(adversarial, thr)))
            resynth_scores = np.array([v.score_resynth for v in variations])
            adversarial_eer = _eer_row(name, population, resynth_scores, [v.trial_idx for v in variations], trials)
            eer_rows.append(adversarial_eer)
            tradeoff.append(tradeoff_point(genuine_eer.eer, adversarial_eer.eer, name, eps))
            hist.extend(histogram_rows(population, *histogram(adversarial, cfg.detector.hist_bins, (lo, hi))))
            score_rows.extend(_score_rows(trials, variations, name))
        write_csv(ws.report(f"histogram_{name}.csv"), HISTOGRAM_HEADER, hist)

    write_csv(ws.report("detection_report.csv"), DETECTION_HEADER, [r.as_csv() for r in detection])
    write_csv(ws.report("eer.csv"), EER_HEADER, [r.as_csv() for r in eer_rows])
    write_csv(ws.report("tradeoff.csv"), TRADEOFF_HEADER, tradeoff_rows(tradeoff))
    write_csv(ws.report("scores.csv"), SCORES_HEADER, score_rows)
    write_csv(ws.report("codec_quality.csv"), QUALITY_HEADER, _codec_quality(ctx, trials, codecs))
    log.info("evaluate: %d detection rows, %d EER rows", len(detection), len(eer_rows))


def _codec_quality(ctx: PipelineContext, trials: TrialList, codecs: Mapping[str, CodecInterface]) -> List[List[str]]:
    tests = sorted({t.test_path for t in trials})
    rows = []
    for name, codec in codecs.items():

        def _measure(rel: str, codec=codec) -> Tuple[float, float]:
            wave = read_wav(ctx.workspace.corpus_dir / rel)
            return segmental_snr(wave, resynth(codec, wave)), idempotence_ratio(codec, wave)

        measured = np.array(ctx.map(_measure, tests, f"quality {name}"))
        rows.append([name, fmt(codec.bitrate_bps), fmt(float(np.median(measured[:, 0]))), fmt(float(np.median(measured[:, 1])))])
    return rows


STAGE_FUNCS: Dict[str, Callable[[PipelineContext], bool]] = {
    "gen-data": stage_gen_data,
    "train-asv": stage_train_asv,
    "train-codec": stage_train_codec,
    "attack": stage_attack,
    "calibrate": stage_calibrate,
    "evaluate": stage_evaluate,
}


def run_stage(ctx: PipelineContext, name: str) -> bool:
    return STAGE_FUNCS[name](ctx)


def run_all(ctx: PipelineContext) -> Dict[str, bool]:
    """Run every stage in order; the result maps stage name to whether it ran."""
    return {name: run_stage(ctx, name) for name in STAGES}
