from __future__ import annotations

from typing import Dict, List

import pytest

from codecshield.acceptance import _attack_success, check_attack_monotone, check_false_accept
from codecshield.attack import ManifestRow


def _row(idx: int, is_target: bool, after: float, eps: int) -> ManifestRow:
    return ManifestRow(idx, is_target, f"spk000/utt{idx:02d}.wav", f"adv_{idx:03d}.wav", 0.5, after, eps)


class _Reports:
    """Just the parts of a finished run the attack checks read."""

    def __init__(self, manifests: Dict[int, List[ManifestRow]], threshold: float) -> None:
        self.manifests = manifests
        self.threshold = threshold

    @property
    def strongest(self) -> int:
        return max(self.manifests)

    def eer_value(self, codec: str, population: str, key: str = "eer") -> float:
        return self.threshold


def test_attack_success_counts_accepted_non_targets_only():
    rows = [
        _row(0, True, 0.1, 10),
        _row(1, True, 0.2, 10),
        _row(2, False, 0.95, 10),
        _row(3, False, 0.4, 10),
    ]
    # Rejected targets are not successes of an attack that pushes non-targets up.
    assert _attack_success(rows, 0.9) == pytest.approx(0.5)
    assert _attack_success(rows[:2], 0.9) == 0.0


def test_monotone_check_ignores_target_rows():
    threshold = 0.9
    manifests = {
        2: [_row(0, True, 0.1, 2), _row(1, False, 0.5, 2), _row(2, False, 0.95, 2)],
        # More targets fall below the threshold at eps5 while non-target acceptance holds.
        5: [_row(0, True, 0.95, 5), _row(1, False, 0.5, 5), _row(2, False, 0.95, 5)],
        10: [_row(0, True, 0.99, 10), _row(1, False, 0.97, 10), _row(2, False, 0.95, 10)],
    }
    result = check_attack_monotone(_Reports(manifests, threshold))
    assert result.passed is True
    assert result.value == pytest.approx(1.0)

    manifests[10] = [_row(0, True, 0.1, 10), _row(1, False, 0.2, 10), _row(2, False, 0.3, 10)]
    assert check_attack_monotone(_Reports(manifests, threshold)).passed is False


def test_false_accept_uses_the_same_success_rate():
    rows = [_row(i, i % 2 == 0, 0.95 if i < 6 else 0.1, 10) for i in range(10)]
    result = check_false_accept(_Reports({10: rows}, 0.9))
    assert result.value == pytest.approx(_attack_success(rows, 0.9))
    assert result.value == pytest.approx(0.6)
