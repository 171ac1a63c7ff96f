"""Exception hierarchy for codecshield."""

from __future__ import annotations

from typing import List, Tuple


class CodecShieldError(Exception):
    """Base class for every error raised on purpose by codecshield."""


class InputTooShortError(CodecShieldError, ValueError):
    """Waveform shorter than one analysis frame."""


class WavFormatError(CodecShieldError):
    """WAV file with a malformed header or an unsupported layout."""


class ContainerFormatError(CodecShieldError):
    """Model or codec file that cannot be decoded."""


class CodeFormatError(CodecShieldError):
    """Code sequence with out-of-range indices or a malformed payload."""


class InsufficientDataError(CodecShieldError):
    """Not enough audio to train a model or a codebook."""


class CalibrationError(CodecShieldError, ValueError):
    """Empty or invalid score-variation set."""


class ConfigError(CodecShieldError):
    """Invalid experiment configuration."""


class StageError(CodecShieldError):
    """Pipeline stage cannot run."""


class MissingArtifactError(StageError):
    """An upstream artifact is absent."""

    def __init__(self, artifact: str, command: str) -> None:
        super().__init__(f"Missing {artifact}. Run `codecshield {command}` first.")
        self.artifact = artifact
        self.command = command


class StaleArtifactError(StageError):
    """Stage outputs were produced from a different config or inputs."""

    def __init__(self, stage: str) -> None:
        super().__init__(
            f"Outputs of `{stage}` do not match the current config or inputs. "
            "Re-run with --force to recompute."
        )
        self.stage = stage


class TrialFailuresError(CodecShieldError):
    """One or more trials failed; the others were processed."""

    def __init__(self, failures: List[Tuple[int, str]]) -> None:
        listing = "; ".join(f"trial {idx}: {reason}" for idx, reason in failures[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"{len(failures)} trial(s) failed: {listing}{more}")
        self.failures = failures
