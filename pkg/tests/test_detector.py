from __future__ import annotations

import numpy as np
import pytest

from codecshield.codec import IdentityCodec
from codecshield.detector import (
    DetectionThreshold,
    ScoreVariation,
    ScoreVariationSet,
    calibrate,
    classify,
    compute_eer,
    detection_rate,
    histogram,
    score_variation,
    tradeoff_point,
)
from codecshield.errors import CalibrationError


def _oracle_eer(tar: np.ndarray, non: np.ndarray) -> float:
    """Threshold sweep over midpoints of consecutive sorted scores, linearly interpolated."""
    s = np.sort(np.concatenate([tar, non]))
    points = np.concatenate([[s[0] - 1.0], (s[:-1] + s[1:]) / 2.0, [s[-1] + 1.0]])
    far = np.array([np.mean(non > t) for t in points])
    frr = np.array([np.mean(tar <= t) for t in points])
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def _oracle_tau(ds: np.ndarray, fpr: float) -> float:
    """Smallest observed value whose exceedance fraction stays within the budget."""
    ok = [t for t in np.unique(ds) if np.count_nonzero(ds > t) / ds.size <= fpr]
    return float(min(ok))


def test_calibrate_worked_example():
    ds = ScoreVariationSet.of(np.arange(1, 11) / 10.0)
    thr = calibrate(ds, 0.2)
    assert thr.tau == pytest.approx(0.8)
    assert thr.achieved_fpr == pytest.approx(0.2)


def test_calibrate_zero_budget_uses_max():
    ds = ScoreVariationSet.of([0.3, 0.9, 0.1])
    thr = calibrate(ds, 0.0)
    assert thr.tau == 0.9
    assert thr.achieved_fpr == 0.0


def test_calibrate_constant_set():
    thr = calibrate(ScoreVariationSet.of([0.4] * 7), 0.5)
    assert thr.tau == 0.4
    assert thr.achieved_fpr == 0.0


def test_calibrate_full_budget_uses_min():
    thr = calibrate(ScoreVariationSet.of([0.2, 0.5, 0.7]), 1.0)
    assert thr.tau == 0.2
    assert thr.achieved_fpr == pytest.approx(2 / 3)


def test_calibrate_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(1, 120))
        ds = np.round(rng.exponential(0.1, n), 3)
        for fpr in (0.0, 0.001, 0.01, 0.05, 0.29, 0.5, 1.0):
            thr = calibrate(ScoreVariationSet.of(ds), fpr)
            assert thr.achieved_fpr <= fpr
            assert thr.tau == _oracle_tau(ds, fpr), f"trial {trial}, fpr {fpr}"


def test_calibrate_rejects_empty_and_bad_budget():
    with pytest.raises(CalibrationError):
        calibrate(ScoreVariationSet(), 0.05)
    with pytest.raises(ValueError):
        calibrate(ScoreVariationSet.of([0.1]), 1.5)


def test_detection_rate_counts_strict_exceedance():
    thr = DetectionThreshold(0.7, 0.05, 0.0)
    assert detection_rate(ScoreVariationSet.of([0.5, 0.9]), thr) == 0.5
    assert detection_rate(ScoreVariationSet.of([0.7, 0.7]), thr) == 0.0
    with pytest.raises(CalibrationError):
        detection_rate(ScoreVariationSet(), thr)


def test_detection_rate_is_monotone_in_budget():
    rng = np.random.default_rng(1)
    genuine = ScoreVariationSet.of(rng.exponential(0.05, 200))
    adversarial = ScoreVariationSet.of(rng.exponential(0.2, 200), "adversarial")
    rates = [detection_rate(adversarial, calibrate(genuine, f)) for f in (0.001, 0.01, 0.05, 0.2)]
    assert rates == sorted(rates)


def test_classify_boundary_is_genuine():
    thr = DetectionThreshold(0.25, 0.05, 0.0)
    assert classify(0.25, thr) == "genuine"
    assert classify(0.25 + 1e-12, thr) == "adversarial"
    assert classify(ScoreVariation(0.0), DetectionThreshold(0.0, 0.0, 0.0)) == "genuine"


def test_score_variation_rejects_negative():
    with pytest.raises(ValueError):
        ScoreVariation(-0.1)


def test_identity_codec_gives_zero_variation(model, enroll, wave):
    v = score_variation(model, IdentityCodec(), enroll, wave)
    assert v.d == 0.0
    assert v.score == v.score_resynth
    thr = DetectionThreshold(1e-9, 0.05, 0.0)
    assert detection_rate(ScoreVariationSet((v,)), thr) == 0.0


def test_eer_perfect_separation():
    eer, _ = compute_eer([0.9, 0.8], [0.1, 0.2])
    assert eer == 0.0


def test_eer_identical_populations():
    scores = [0.1, 0.4, 0.4, 0.7]
    eer, _ = compute_eer(scores, scores)
    assert eer == pytest.approx(0.5)


def test_eer_matches_threshold_sweep_oracle():
    rng = np.random.default_rng(2)
    for pair in range(100):
        tar = rng.normal(1.0, 1.0, int(rng.integers(5, 80)))
        non = rng.normal(0.0, 1.0, int(rng.integers(5, 80)))
        if pair % 2:
            # Coarse scores force ties across and within the two populations.
            tar, non = np.round(tar, 1), np.round(non, 1)
        eer, _ = compute_eer(tar, non)
        assert eer == pytest.approx(_oracle_eer(tar, non), abs=1e-9)
        assert 0.0 <= eer <= 1.0


def test_eer_is_invariant_to_increasing_affine_maps():
    rng = np.random.default_rng(3)
    tar = rng.normal(0.5, 0.3, 40)
    non = rng.normal(0.0, 0.3, 60)
    eer, _ = compute_eer(tar, non)
    for a, b in ((2.0, 0.0), (0.5, -3.0), (10.0, 7.0)):
        mapped, _ = compute_eer(a * tar + b, a * non + b)
        assert mapped == pytest.approx(eer, abs=1e-9)


def test_eer_threshold_lies_between_populations():
    _, threshold = compute_eer([0.9, 0.8], [0.1, 0.2])
    assert 0.2 <= threshold <= 0.8


def test_eer_rejects_empty():
    with pytest.raises(ValueError):
        compute_eer([], [0.1])


def test_histogram_counts_and_clamping():
    ds = ScoreVariationSet.of([0.0, 0.05, 0.5, 2.0, 0.999])
    edges, counts = histogram(ds, 10, (0.0, 1.0))
    assert edges.size == 11
    assert counts.sum() == len(ds)
    assert counts[0] == 2
    assert counts[-1] == 2
    edges, counts = histogram(ScoreVariationSet.of([0.0]), 4, (0.0, 1.0))
    assert counts.tolist() == [1, 0, 0, 0]
    with pytest.raises(ValueError):
        histogram(ds, 4, (1.0, 1.0))
    with pytest.raises(ValueError):
        histogram(ds, 0, (0.0, 1.0))


def test_tradeoff_point_validates_rates():
    point = tradeoff_point(0.02, 0.1, "rvq", 10)
    assert (point.codec, point.epsilon_lsb) == ("rvq", 10)
    with pytest.raises(ValueError):
        tradeoff_point(1.2, 0.1, "rvq")
