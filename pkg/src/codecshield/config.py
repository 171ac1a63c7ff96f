"""Experiment configuration: YAML file, dataclass sections and validation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Type, TypeVar

import yaml

from .asv import Hyperparams
from .errors import ConfigError
from .signal import MAX_DURATION_S, MIN_DURATION_S

ENV_WORK_DIR = "CODECSHIELD_WORK_DIR"
DEFAULT_SEED = 20240611
CODEC_NAMES = ("identity", "bitcrush", "rvq")

T = TypeVar("T")


def _check_keys(data: Mapping[str, Any], cls: type, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key `{prefix}{key}`")


def _section(cls: Type[T], data: Any, prefix: str) -> T:
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section `{prefix.rstrip('.')}` must be a mapping")
    _check_keys(data, cls, prefix)
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        default = getattr(defaults, f.name)
        value = data.get(f.name, default)
        try:
            if isinstance(default, list):
                item_type = type(default[0]) if default else str
                kwargs[f.name] = [item_type(v) for v in value]
            elif isinstance(default, bool):
                kwargs[f.name] = bool(value)
            else:
                kwargs[f.name] = type(default)(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for `{prefix}{f.name}`: {value!r}") from exc
    return cls(**kwargs)


@dataclass
class CorpusSection:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    duration_s: float = 2.0


@dataclass
class CodecSection:
    names: List[str] = field(default_factory=lambda: list(CODEC_NAMES))
    n_stages: int = 4
    codebook_size: int = 256
    gain_levels: int = 64
    kmeans_iters: int = 20
    min_frames: int = 10000


@dataclass
class AttackSection:
    epsilon_lsb: List[int] = field(default_factory=lambda: [2, 5, 10])
    alpha_lsb: int = 1


@dataclass
class DetectorSection:
    fpr_given: List[float] = field(default_factory=lambda: [0.05, 0.01, 0.001])
    hist_bins: int = 40
    hist_range: List[float] = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class PathsSection:
    work_dir: str = "work"


@dataclass
class ExperimentConfig:
    """One reproducible experiment; the defaults are the reference desk run."""

    seed: int = DEFAULT_SEED
    corpus: CorpusSection = field(default_factory=CorpusSection)
    asv: Hyperparams = field(default_factory=Hyperparams)
    codec: CodecSection = field(default_factory=CodecSection)
    attack: AttackSection = field(default_factory=AttackSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "ExperimentConfig":
        data = data or {}
        if not isinstance(data, Mapping):
            raise ConfigError("config file must contain a mapping at the top level")
        _check_keys(data, cls, "")
        try:
            seed = int(data.get("seed", DEFAULT_SEED))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for `seed`: {data.get('seed')!r}") from exc
        return cls(
            seed=seed,
            corpus=_section(CorpusSection, data.get("corpus"), "corpus."),
            asv=_section(Hyperparams, data.get("asv"), "asv."),
            codec=_section(CodecSection, data.get("codec"), "codec."),
            attack=_section(AttackSection, data.get("attack"), "attack."),
            detector=_section(DetectorSection, data.get("detector"), "detector."),
            paths=_section(PathsSection, data.get("paths"), "paths."),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def ensure_valid(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        c = self.corpus
        if c.n_speakers < 2 or c.utts_per_speaker < 2:
            raise ConfigError("corpus needs n_speakers >= 2 and utts_per_speaker >= 2")
        if not MIN_DURATION_S <= c.duration_s <= MAX_DURATION_S:
            raise ConfigError(f"corpus.duration_s must lie in [{MIN_DURATION_S}, {MAX_DURATION_S}]")
        a = self.asv
        if a.epochs < 1 or a.batch < 1 or a.lr <= 0 or not 0 <= a.momentum < 1 or a.crop_s <= 0:
            raise ConfigError("asv hyperparameters out of range")
        if a.crop_s > c.duration_s:
            raise ConfigError("asv.crop_s must not exceed corpus.duration_s")
        k = self.codec
        if not k.names or any(n not in CODEC_NAMES for n in k.names) or len(set(k.names)) != len(k.names):
            raise ConfigError(f"codec.names must be a non-empty subset of {list(CODEC_NAMES)}")
        if k.n_stages < 1 or not 2 <= k.codebook_size <= 256 or not 1 <= k.gain_levels <= 256:
            raise ConfigError("codec needs n_stages >= 1, codebook_size in [2, 256], gain_levels in [1, 256]")
        if k.kmeans_iters < 1 or k.min_frames < 1:
            raise ConfigError("codec.kmeans_iters and codec.min_frames must be positive")
        t = self.attack
        if not t.epsilon_lsb or any(e < 0 for e in t.epsilon_lsb) or t.alpha_lsb < 1:
            raise ConfigError("attack needs a non-empty epsilon_lsb list of values >= 0 and alpha_lsb >= 1")
        d = self.detector
        if not d.fpr_given or any(not 0.0 <= f <= 1.0 for f in d.fpr_given):
            raise ConfigError("detector.fpr_given must be a non-empty list of values in [0, 1]")
        if d.hist_bins < 1 or len(d.hist_range) != 2 or not d.hist_range[0] < d.hist_range[1]:
            raise ConfigError("detector needs hist_bins >= 1 and hist_range [lo, hi] with lo < hi")
        if not self.paths.work_dir:
            raise ConfigError("paths.work_dir must not be empty")

    @property
    def work_dir(self) -> Path:
        return Path(self.paths.work_dir).expanduser()

    def section_fingerprint(self, *names: str) -> str:
        """Stable hash of the named sections, used to detect stale stage outputs."""
        data = self.to_dict()
        payload = json.dumps({n: data[n] for n in names}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def fingerprint(self) -> str:
        return self.section_fingerprint(*(f.name for f in fields(self) if f.name != "paths"))


def load_config(path: Path | str) -> ExperimentConfig:
    """Read and validate a YAML config; the work-dir environment override wins."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fp:
            data = yaml.safe_load(fp)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"Failed to load config {path}: {exc}") from exc
    config = ExperimentConfig.from_dict(data)
    override = os.getenv(ENV_WORK_DIR)
    if override:
        config.paths.work_dir = override
    config.ensure_valid()
    return config


def save_config(config: ExperimentConfig, path: Path | str) -> Path:
    """Persist config as YAML, creating the parent directory as required."""
    config.ensure_valid()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fp:
        yaml.safe_dump(config.to_dict(), fp, sort_keys=False, default_flow_style=None)
    return path
