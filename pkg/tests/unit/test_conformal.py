"""Unit tests for split-conformal prediction"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal import (ConformalCalibration, ConformalKind, PredictionSet, aci_run, aps_scores, aps_set_mask,
                       calibrate_aps, calibrate_cqr, conformal_rank, evaluate_coverage, evaluate_interval_coverage,
                       evaluate_mask_coverage, predict_interval_cqr, predict_intervals_cqr, predict_set_aps,
                       predict_sets_aps, split_calibration)
from exceptions import CalibrationError

FIXED_PROBS = np.array([0.5, 0.3, 0.1, 0.05, 0.05])
LABEL_SHARES = np.array([0.5, 0.3, 0.12, 0.04, 0.04])


def aps_calibration(threshold, q=None):
    return ConformalCalibration(ConformalKind.APS, 0.1, threshold if q is None else q, 10, threshold)


def cqr_calibration(margin):
    return ConformalCalibration(ConformalKind.CQR, 0.1, margin, 10, margin)


def dirichlet_rows(rng, n, n_classes=5):
    """Probability rows with labels drawn from the rows themselves"""
    probs = rng.dirichlet(np.ones(n_classes), size=n)
    draws = rng.random(n)
    labels = np.minimum((np.cumsum(probs, axis=1) < draws[:, None]).sum(axis=1), n_classes - 1)
    return probs, labels


def fixed_stream(rng, n):
    """Identical probability rows; labels drawn from LABEL_SHARES"""
    return np.tile(FIXED_PROBS, (n, 1)), rng.choice(len(LABEL_SHARES), size=n, p=LABEL_SHARES)


class TestQuantileLevel:
    """Test the calibrated quantile level"""

    def test_small_calibration_saturates(self):
        """Test n=9 at alpha 0.1 gives q = 1.0"""
        rng = np.random.default_rng(0)
        probs, labels = dirichlet_rows(rng, 9)
        calib = calibrate_aps(probs, labels, 0.1)
        assert calib.q == 1.0
        assert calib.set_threshold == math.inf

    def test_nineteen_rows(self):
        """Test n=19 gives q = 18/19 and the 18th smallest score"""
        rng = np.random.default_rng(1)
        probs, labels = dirichlet_rows(rng, 19)
        calib = calibrate_aps(probs, labels, 0.1)
        assert calib.q == pytest.approx(18 / 19)
        assert calib.threshold == np.sort(aps_scores(probs, labels))[17]
        assert calib.set_threshold == calib.threshold

    def test_large_alpha(self):
        """Test alpha 0.99 over 100 rows gives q = 0.02"""
        rng = np.random.default_rng(2)
        probs, labels = dirichlet_rows(rng, 100)
        assert calibrate_aps(probs, labels, 0.99).q == pytest.approx(0.02)

    def test_rank_guard(self):
        """Test exact products are not rounded up by float error"""
        assert conformal_rank(9, 0.1) == 9
        assert conformal_rank(19, 0.1) == 18
        assert conformal_rank(100, 0.1) == 91

    @pytest.mark.parametrize('alpha', [0.0, 1.0, -0.1, 1.5])
    def test_alpha_bounds(self, alpha):
        """Test alpha outside (0, 1) raises CalibrationError"""
        with pytest.raises(CalibrationError):
            calibrate_aps([[0.5, 0.5]], [0], alpha)

    def test_empty_calibration(self):
        """Test an empty calibration set raises CalibrationError"""
        with pytest.raises(CalibrationError):
            calibrate_aps(np.zeros((0, 3)), [], 0.1)

    def test_label_out_of_range(self):
        """Test label indices beyond the class count are rejected"""
        with pytest.raises(CalibrationError):
            calibrate_aps([[0.5, 0.5]], [2], 0.1)


class TestApsSets:
    """Test APS scores and prediction sets"""

    def test_score_includes_own_mass(self):
        """Test the score sums classes ranked at or above the label"""
        probs = np.array([[0.7, 0.2, 0.1]])
        assert aps_scores(probs, np.array([1]))[0] == pytest.approx(0.9)
        assert aps_scores(probs, np.array([0]))[0] == pytest.approx(0.7)

    def test_ties_break_by_class_index(self):
        """Test tied classes are ranked by ascending index"""
        probs = np.full((1, 4), 0.25)
        assert aps_scores(probs, np.array([0]))[0] == pytest.approx(0.25)
        assert aps_scores(probs, np.array([3]))[0] == pytest.approx(1.0)

    def test_crossing_class_is_included(self):
        """Test (0.7, 0.2, 0.1) at 0.85 gives {0, 1}"""
        assert predict_set_aps([0.7, 0.2, 0.1], aps_calibration(0.85)).members == (0, 1)

    def test_uniform_half(self):
        """Test uniform probabilities over 4 classes at 0.5 give 2 classes"""
        assert predict_set_aps([0.25] * 4, aps_calibration(0.5)).members == (0, 1)

    def test_set_follows_descending_probability(self):
        """Test members are the top-ranked classes, reported by index"""
        assert predict_set_aps([0.1, 0.6, 0.3], aps_calibration(0.8)).members == (1, 2)

    def test_saturated_quantile_returns_all_classes(self):
        """Test q = 1 puts every class in the set, zero-probability ones included"""
        calib = aps_calibration(1.0, q=1.0)
        assert predict_set_aps([1.0, 0.0, 0.0], calib).members == (0, 1, 2)

    def test_threshold_of_one_keeps_nonzero_classes(self):
        """Test a data threshold of 1.0 below saturation stops at the last nonzero class"""
        calib = aps_calibration(1.0, q=0.9)
        assert predict_set_aps([0.6, 0.4, 0.0], calib).members == (0, 1)

    def test_batch_matches_single_row(self):
        """Test predict_sets_aps agrees with predict_set_aps row by row"""
        rng = np.random.default_rng(3)
        probs, _ = dirichlet_rows(rng, 20)
        calib = aps_calibration(0.8)
        batch = predict_sets_aps(probs, calib)
        assert batch == [predict_set_aps(row, calib) for row in probs]

    def test_randomized_score_counts_part_of_own_mass(self):
        """Test a draw u counts only u of the label's own probability"""
        probs = np.array([[0.5, 0.3, 0.2]])
        assert aps_scores(probs, np.array([1]), u=np.array([0.5]))[0] == pytest.approx(0.65)
        assert aps_scores(probs, np.array([1]), u=np.array([1.0]))[0] == pytest.approx(0.8)

    @pytest.mark.parametrize('u,expected', [(0.5, [True, True, False]), (0.9, [True, False, False])])
    def test_randomized_crossing_class(self, u, expected):
        """Test the crossing class joins the set only when its randomized score fits"""
        mask = aps_set_mask(np.array([[0.5, 0.3, 0.2]]), 0.65, u=np.array([u]))
        assert mask[0].tolist() == expected

    def test_randomized_saturated_threshold(self):
        """Test an infinite threshold keeps every class under randomization"""
        assert aps_set_mask(np.array([[1.0, 0.0]]), math.inf, u=np.array([0.3]))[0].tolist() == [True, True]

    def test_rejects_cqr_calibration(self):
        """Test APS sets need an APS calibration"""
        with pytest.raises(CalibrationError):
            predict_set_aps([0.5, 0.5], cqr_calibration(1.0))

    @settings(max_examples=60, deadline=None)
    @given(
        weights=st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=6),
        low=st.floats(min_value=0.0, max_value=1.0),
        high=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_sets_nest_as_threshold_grows(self, weights, low, high):
        """Test a higher threshold never drops a class from the set"""
        probs = np.asarray(weights) / np.sum(weights)
        low, high = min(low, high), max(low, high)
        small = aps_set_mask(probs, low)[0]
        large = aps_set_mask(probs, high)[0]
        assert small.sum() >= 1
        assert np.all(large[small])


class TestCoverageGuarantee:
    """Test the split-conformal guarantee on exchangeable data"""

    def test_fresh_scores_meet_the_quantile(self):
        """Test the share of fresh scores under the threshold averages 1 - alpha over 50 trials"""
        rng = np.random.default_rng(11)
        score_shares, coverages = [], []
        for _ in range(50):
            probs, labels = dirichlet_rows(rng, 1200)
            calib = calibrate_aps(probs[:200], labels[:200], 0.1)
            fresh, truth = probs[200:], labels[200:]
            score_shares.append(np.mean(aps_scores(fresh, truth) <= calib.threshold))
            coverages.append(evaluate_mask_coverage(aps_set_mask(fresh, calib.set_threshold), truth).coverage)
        assert 0.87 <= np.mean(score_shares) <= 0.93
        assert np.mean(coverages) >= 0.87

    def test_randomized_sets_are_exact(self):
        """Test randomized APS sets cover at 1 - alpha without the deterministic surplus"""
        rng = np.random.default_rng(12)
        coverages = []
        for _ in range(50):
            probs, labels = dirichlet_rows(rng, 1200)
            u = rng.random(1200)
            calib = calibrate_aps(probs[:200], labels[:200], 0.1, u=u[:200])
            mask = aps_set_mask(probs[200:], calib.set_threshold, u=u[200:])
            coverages.append(evaluate_mask_coverage(mask, labels[200:]).coverage)
        assert 0.88 <= np.mean(coverages) <= 0.92

    def test_draws_must_align(self):
        """Test one uniform draw is needed per calibration row"""
        with pytest.raises(CalibrationError):
            calibrate_aps(np.array([[0.5, 0.5]] * 3), [0, 1, 0], 0.1, u=np.array([0.5]))


class TestCqr:
    """Test conformalized quantile regression"""

    def test_slack_shrinks_intervals(self):
        """Test targets inside their intervals with slack >= 1 give Q <= -1"""
        y = np.linspace(0.0, 10.0, 20)
        slack = 1.0 + np.linspace(0.0, 2.0, 20)
        calib = calibrate_cqr((y - slack, y + slack), y, 0.1)
        assert calib.q <= -1.0

    def test_targets_on_upper_bound(self):
        """Test y = hi everywhere gives Q = 0"""
        hi = np.arange(10, dtype=float)
        assert calibrate_cqr((hi - 1.0, hi), hi, 0.1).q == 0.0

    def test_rank_of_margin(self):
        """Test n=19 at alpha 0.1 picks the 18th smallest score"""
        rng = np.random.default_rng(4)
        scores = rng.permutation(19).astype(float)
        zeros = np.zeros(19)
        calib = calibrate_cqr((zeros, zeros), scores, 0.1)
        assert calib.q == 17.0

    def test_non_finite_targets_rejected(self):
        """Test a NaN calibration target raises instead of poisoning the margin"""
        y = np.full(10, 0.5)
        y[3] = np.nan
        with pytest.raises(CalibrationError):
            calibrate_cqr((np.zeros(10), np.ones(10)), y, 0.1)

    def test_crossed_bounds_rejected(self):
        """Test calibration intervals with lo > hi raise CalibrationError"""
        with pytest.raises(CalibrationError):
            calibrate_cqr((np.array([2.0]), np.array([1.0])), [1.5], 0.1)

    @pytest.mark.parametrize('margin,expected', [(1.0, (1.0, 6.0)), (0.0, (2.0, 5.0)), (-2.0, (3.5, 3.5))])
    def test_interval_adjustment(self, margin, expected):
        """Test widening, identity and the midpoint collapse of crossed intervals"""
        interval = predict_interval_cqr((2.0, 5.0), cqr_calibration(margin))
        assert (interval.lo, interval.hi) == expected

    def test_vectorized_matches_single(self):
        """Test predict_intervals_cqr agrees with the scalar path"""
        lo, hi = predict_intervals_cqr(np.array([2.0, 0.0]), np.array([5.0, 10.0]), cqr_calibration(-2.0))
        np.testing.assert_allclose(lo, [3.5, 2.0])
        np.testing.assert_allclose(hi, [3.5, 8.0])

    def test_rejects_aps_calibration(self):
        """Test CQR intervals need a CQR calibration"""
        with pytest.raises(CalibrationError):
            predict_interval_cqr((0.0, 1.0), aps_calibration(0.9))


class TestEvaluateCoverage:
    """Test coverage accounting"""

    def test_universal_sets(self):
        """Test sets holding every class always cover"""
        sets = [PredictionSet(members=(0, 1, 2))] * 4
        report = evaluate_coverage(sets, [0, 1, 2, 1])
        assert report.coverage == 1.0
        assert report.mean_set_size == 3.0

    def test_misplaced_intervals(self):
        """Test intervals away from every target never cover"""
        sets = [PredictionSet(lo=10.0, hi=11.0)] * 3
        assert evaluate_coverage(sets, [0.0, 1.0, 2.0]).coverage == 0.0

    def test_nine_of_ten(self):
        """Test 9 covered rows out of 10 give exactly 0.9"""
        sets = [PredictionSet(members=(0,))] * 10
        report = evaluate_coverage(sets, [0] * 9 + [1])
        assert report.coverage == 0.9
        assert report.n_covered == 9

    def test_zero_width_interval_covers_its_point(self):
        """Test a collapsed interval still covers a target on it"""
        report = evaluate_interval_coverage(np.array([3.5]), np.array([3.5]), [3.5])
        assert report.coverage == 1.0
        assert report.mean_set_size == 0.0

    def test_non_finite_interval_targets_rejected(self):
        """Test a NaN evaluation target is an error, not a miss"""
        with pytest.raises(CalibrationError):
            evaluate_interval_coverage(np.zeros(2), np.ones(2), [0.5, np.nan])

    def test_mask_coverage(self):
        """Test membership matrices are scored like explicit sets"""
        mask = np.array([[True, False], [True, True], [False, True]])
        report = evaluate_mask_coverage(mask, [0, 0, 0])
        assert report.n_covered == 2
        assert report.mean_set_size == pytest.approx(4 / 3)

    def test_empty_and_mismatched(self):
        """Test empty or misaligned inputs raise CalibrationError"""
        with pytest.raises(CalibrationError):
            evaluate_coverage([], [])
        with pytest.raises(CalibrationError):
            evaluate_coverage([PredictionSet(members=(0,))], [0, 1])


class TestAci:
    """Test adaptive conformal inference"""

    def test_zero_gamma_matches_static(self):
        """Test gamma 0 reproduces static APS exactly"""
        rng = np.random.default_rng(5)
        probs_cal, y_cal = dirichlet_rows(rng, 300)
        probs, labels = dirichlet_rows(rng, 500)
        calib = calibrate_aps(probs_cal, y_cal, 0.1)
        static = evaluate_mask_coverage(aps_set_mask(probs, calib.set_threshold), labels)
        report, trace = aci_run(probs, labels, 0.1, 0.0, calib)
        assert report.coverage == static.coverage
        assert report.mean_set_size == pytest.approx(static.mean_set_size)
        assert np.all(trace == 0.1)

    def test_exchangeable_stream_tracks_static(self):
        """Test gamma 0.01 stays within 3 points of static APS on an exchangeable stream"""
        rng = np.random.default_rng(6)
        probs_cal, y_cal = fixed_stream(rng, 5000)
        probs, labels = fixed_stream(rng, 2000)
        calib = calibrate_aps(probs_cal, y_cal, 0.1)
        static = evaluate_mask_coverage(aps_set_mask(probs, calib.set_threshold), labels)
        report, _ = aci_run(probs, labels, 0.1, 0.01, calib)
        assert abs(report.coverage - static.coverage) < 0.03

    def test_alpha_is_clamped(self):
        """Test repeated misses drive alpha_t to its floor and no further"""
        probs_cal = np.tile([0.97, 0.01, 0.01, 0.01], (2000, 1))
        calib = calibrate_aps(probs_cal, np.zeros(2000, dtype=int), 0.1)
        stream = np.tile([0.97, 0.01, 0.01, 0.01], (50, 1))
        report, trace = aci_run(stream, np.full(50, 3), 0.1, 0.05, calib)
        assert report.coverage == 0.0
        assert trace.min() == pytest.approx(0.001)

    def test_invalid_inputs(self):
        """Test negative gamma, CQR calibrations and empty streams are rejected"""
        calib = calibrate_aps([[0.6, 0.4]] * 10, [0] * 10, 0.1)
        with pytest.raises(CalibrationError):
            aci_run([[0.6, 0.4]], [0], 0.1, -0.1, calib)
        with pytest.raises(CalibrationError):
            aci_run([[0.6, 0.4]], [0], 0.1, 0.01, cqr_calibration(1.0))
        with pytest.raises(CalibrationError):
            aci_run(np.zeros((0, 2)), [], 0.1, 0.01, calib)


class TestSplitCalibration:
    """Test the seeded calibration/evaluation partition"""

    def test_halves_are_disjoint_and_complete(self):
        """Test the two halves partition every row"""
        cal, held_out = split_calibration(11, seed=3)
        assert len(cal) == 6 and len(held_out) == 5
        assert sorted(np.concatenate([cal, held_out]).tolist()) == list(range(11))

    def test_seeded(self):
        """Test one seed always gives the same partition"""
        first, _ = split_calibration(50, seed=8)
        second, _ = split_calibration(50, seed=8)
        other, _ = split_calibration(50, seed=9)
        np.testing.assert_array_equal(first, second)
        assert not np.array_equal(first, other)

    def test_needs_two_rows(self):
        """Test fewer than two rows cannot be split"""
        with pytest.raises(CalibrationError):
            split_calibration(1, seed=0)
