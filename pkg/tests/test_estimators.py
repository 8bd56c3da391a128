import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calibra import scores, synth
from calibra.core import LabeledPredictions, ValidationError
from calibra.estimators import (
    BinningScheme,
    ConfigError,
    EstimatorConfig,
    bin_stats,
    cwce_p,
    ece,
    estimate,
    kde_tce,
    ks,
    mmce,
    rbs,
    skce,
    tce_p,
)

from conftest import random_labeled

EQUAL_MASS_2 = BinningScheme("equal_mass", 2)
ONE_BIN = BinningScheme("equal_width", 1)


def permuted(data, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(data.n_items)
    return data.subset(order)


# ---- binning ----------------------------------------------------------------


def test_bin_stats_single_full_bin():
    data = LabeledPredictions(np.array([[1.0, 0.0]] * 3), np.array([0, 0, 0]))
    stats = bin_stats(data, BinningScheme("equal_width", 15))
    assert len(stats.count) == 1
    assert stats.conf[0] == 1.0
    assert stats.acc[0] == 1.0
    assert stats.empty_bins == 14


def test_bin_stats_four_point(four_point):
    stats = bin_stats(four_point, ONE_BIN)
    assert stats.conf[0] == pytest.approx(0.8, abs=1e-12)
    assert stats.acc[0] == pytest.approx(0.75, abs=1e-12)


def test_equal_mass_sorted_split():
    data = LabeledPredictions(
        np.array([[0.6, 0.4], [0.7, 0.3], [0.8, 0.2], [0.9, 0.1]]),
        np.array([0, 0, 0, 0]),
    )
    stats = bin_stats(data, EQUAL_MASS_2)
    assert stats.count.tolist() == [2, 2]
    assert np.allclose(stats.conf, [0.65, 0.85])


def test_equal_mass_keeps_duplicates_together():
    vals = np.array([0.5, 0.7, 0.7, 0.7, 0.8, 0.9])
    data = LabeledPredictions(
        np.column_stack([vals, 1 - vals]), np.zeros(6, dtype=int)
    )
    stats = bin_stats(data, BinningScheme("equal_mass", 3))
    # no confidence value may straddle a bin boundary
    edges = np.cumsum(stats.count)[:-1]
    s = np.sort(vals)
    for e in edges:
        assert s[e - 1] != s[e]


@given(seed=st.integers(0, 10**6), kind=st.sampled_from(["equal_width", "equal_mass"]))
@settings(max_examples=60, deadline=None)
def test_bin_stats_invariants(seed, kind):
    data = random_labeled(seed, n_items=30)
    stats = bin_stats(data, BinningScheme(kind, 7))
    assert stats.count.sum() == data.n_items
    assert stats.freq.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(stats.var_conf >= 0)


# ---- binned estimators -------------------------------------------------------


def test_ece_four_point(four_point):
    assert ece(four_point) == pytest.approx(0.05, abs=1e-12)


def test_ece_perfect(perfect):
    assert ece(perfect) == 0.0


def test_ece_no_cancellation():
    # two equal-mass bins with gaps +0.1 and -0.1
    preds = np.vstack([np.tile([0.7, 0.3], (10, 1)), np.tile([0.5, 0.5], (10, 1))])
    labels = np.array([0] * 6 + [1] * 4 + [0] * 6 + [1] * 4)
    data = LabeledPredictions(preds, labels)
    assert ece(data) == pytest.approx(0.1, abs=1e-12)


def test_tce_calibrated_bins_zero():
    preds = np.vstack([np.tile([0.7, 0.3], (10, 1)), np.tile([0.5, 0.5], (10, 1))])
    labels = np.array([0] * 7 + [1] * 3 + [0] * 5 + [1] * 5)
    data = LabeledPredictions(preds, labels)
    for p in (1.0, 2.0, 3.0):
        assert tce_p(data, p=p) == pytest.approx(0.0, abs=1e-12)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_tce_1_equals_ece(seed):
    # the identity needs both estimators on one binning
    data = random_labeled(seed)
    scheme = BinningScheme("equal_width", 15)
    assert tce_p(data, p=1.0, scheme=scheme) == pytest.approx(
        ece(data, scheme), abs=1e-12
    )


def test_tce_debias_requires_p2(four_point):
    with pytest.raises(ConfigError):
        tce_p(four_point, p=1.0, debias=True)


def test_tce_debias_clamps_at_zero(four_point):
    # plug-in variance 0.75*0.25/3 exceeds the squared gap 0.0025
    assert tce_p(four_point, p=2.0, debias=True) == 0.0


def test_tce_debias_singleton_bin_no_correction():
    data = LabeledPredictions(np.array([[0.8, 0.2]]), np.array([1]))
    plain = tce_p(data, p=2.0)
    assert tce_p(data, p=2.0, debias=True) == pytest.approx(plain, abs=1e-15)


def test_cwce_mirrored_binary(four_point):
    assert cwce_p(four_point, p=1.0, scheme=ONE_BIN) == pytest.approx(0.1, abs=1e-12)
    assert cwce_p(four_point, p=2.0, scheme=ONE_BIN) == pytest.approx(
        math.sqrt(2 * 0.05**2), abs=1e-12
    )


def test_cwce_consistency_on_calibrated_model():
    j = synth.random_joint(3, 6, seed=14)
    calibrated = synth.FiniteJointModel(j.predictions, j.weights, j.predictions)
    data = synth.sample(calibrated, 20000, seed=15)
    assert cwce_p(data, p=2.0) < 0.05


def test_ks_hand_values():
    sure = LabeledPredictions(np.array([[1.0, 0.0]] * 3), np.array([0, 0, 0]))
    assert ks(sure) == 0.0
    wrong = LabeledPredictions(np.array([[0.7, 0.3]]), np.array([1]))
    assert ks(wrong) == pytest.approx(0.7, abs=1e-12)
    right = LabeledPredictions(np.array([[0.7, 0.3]]), np.array([0]))
    assert ks(right) == pytest.approx(0.3, abs=1e-12)


def test_kde_matched_rate_vanishes():
    data = LabeledPredictions(
        np.tile([0.5, 0.5], (10, 1)), np.array([0, 1] * 5)
    )
    assert kde_tce(data) == pytest.approx(0.0, abs=1e-12)


def test_kde_constant_conf_all_wrong():
    data = LabeledPredictions(np.tile([0.9, 0.1], (12, 1)), np.ones(12, dtype=int))
    assert kde_tce(data) == pytest.approx(0.9, abs=1e-12)


def test_kde_needs_ten_items():
    data = LabeledPredictions(np.tile([0.9, 0.1], (9, 1)), np.zeros(9, dtype=int))
    with pytest.raises(ValidationError):
        kde_tce(data)


def test_kde_shrinks_on_calibrated_samples():
    j = synth.random_joint(2, 5, seed=9)
    calibrated = synth.FiniteJointModel(j.predictions, j.weights, j.predictions)
    small = kde_tce(synth.sample(calibrated, 200, seed=31))
    large = kde_tce(synth.sample(calibrated, 5000, seed=32))
    assert large < small


def test_mmce_hand_values():
    sure = LabeledPredictions(np.array([[1.0, 0.0]] * 2), np.array([0, 0]))
    assert mmce(sure) == pytest.approx(0.0, abs=1e-12)
    single = LabeledPredictions(np.array([[0.7, 0.3]]), np.array([1]))
    assert mmce(single) == pytest.approx(0.7, abs=1e-12)
    two = LabeledPredictions(np.array([[0.6, 0.4], [0.8, 0.2]]), np.array([0, 1]))
    expected = math.sqrt((0.4**2 + 0.8**2 - 2 * 0.4 * 0.8 * math.exp(-0.5)) / 4)
    assert mmce(two) == pytest.approx(expected, abs=1e-12)


def test_skce_hand_values():
    zeros = LabeledPredictions(np.array([[1.0, 0.0]] * 2), np.array([0, 0]))
    assert skce(zeros) == pytest.approx(0.0, abs=1e-15)
    pair = LabeledPredictions(np.array([[0.5, 0.5]] * 2), np.array([0, 1]))
    assert skce(pair) == pytest.approx(-0.5, abs=1e-12)


def skce_brute(data, nu=1.0):
    p = data.predictions
    n = data.n_items
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            r_i = np.eye(data.n_classes)[data.labels[i]] - p[i]
            r_j = np.eye(data.n_classes)[data.labels[j]] - p[j]
            k = math.exp(-np.sum((p[i] - p[j]) ** 2) / (2 * nu * nu))
            total += k * float(r_i @ r_j)
    return total / (n * (n - 1))


@pytest.mark.parametrize("seed", range(6))
def test_skce_matches_brute_force(seed):
    data = random_labeled(seed, n_items=5 + 5 * seed)
    assert skce(data) == pytest.approx(skce_brute(data), abs=1e-12)


def test_skce_needs_two_items():
    single = LabeledPredictions(np.array([[0.5, 0.5]]), np.array([0]))
    with pytest.raises(ValidationError):
        skce(single)


def test_rbs_delegates(four_point):
    assert rbs(four_point) == scores.rbs(four_point)
    assert rbs(four_point) == pytest.approx(math.sqrt(0.38), abs=1e-12)


# ---- bounds and symmetry ------------------------------------------------------


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_estimator_ranges(seed):
    data = random_labeled(seed)
    assert 0.0 <= ece(data) <= 1.0
    assert 0.0 <= tce_p(data, p=2.0) <= 1.0
    assert 0.0 <= cwce_p(data, p=2.0) <= 2 ** 0.5 + 1e-12
    assert 0.0 <= cwce_p(data, p=1.0) <= 2 + 1e-12
    assert 0.0 <= ks(data) <= 1.0
    assert 0.0 <= rbs(data) <= math.sqrt(2) + 1e-12


@given(seed=st.integers(0, 10**6), perm_seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_permutation_invariance(seed, perm_seed):
    data = random_labeled(seed, n_items=25)
    shuffled = permuted(data, perm_seed)
    assert ece(data) == pytest.approx(ece(shuffled), abs=1e-12)
    assert tce_p(data, p=2.0, scheme=EQUAL_MASS_2) == pytest.approx(
        tce_p(shuffled, p=2.0, scheme=EQUAL_MASS_2), abs=1e-12
    )
    assert ks(data) == pytest.approx(ks(shuffled), abs=1e-12)
    assert mmce(data) == pytest.approx(mmce(shuffled), abs=1e-12)
    assert skce(data) == pytest.approx(skce(shuffled), abs=1e-12)


# ---- config front door ---------------------------------------------------------


def test_estimate_ece_config(four_point):
    cfg = EstimatorConfig("ece", binning=BinningScheme("equal_width", 15))
    result = estimate(four_point, cfg)
    assert result.value == pytest.approx(0.05, abs=1e-12)
    assert result.metadata["n"] == 4
    assert result.metadata["estimator"] == cfg.label()


def test_estimate_unknown_name(four_point):
    with pytest.raises(ConfigError):
        estimate(four_point, EstimatorConfig("nope"))


def test_config_labels():
    assert "ece" in EstimatorConfig("ece").label()
    lbl = EstimatorConfig("tce", p=2.0, debias=True).label()
    assert "tce" in lbl and "debias" in lbl
