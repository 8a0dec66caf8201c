"""Unit tests for the experiment harnesses"""

import logging

import numpy as np
import pytest

from exceptions import HarnessError, StageError
from harness import (NOT_APPLICABLE, AciRow, Cadence, PlaceboResult, RetrainSchedule, SeedEnsembleResult, SeedRow,
                     aci_on_stream, compare_aci, compare_schedules, coverage_drop, frequency_factory,
                     run_cqr_ensemble, run_external_trial, run_placebo, run_retraining, run_seed_ensemble, summarize,
                     tree_factory)
from learner import TreeConfig
from tabular import (ID_FEATURE, LABEL, ConcentrationMode, FeatureTable, TaskKind, TemporalSplit, categorical_column,
                     generate_scenario)
from tests.conftest import FAST_TREES, scenario

DRIFT_LAYOUT = dict(train_periods=4, val_periods=1, test_periods=11, n_train=1200, n_val=300, n_test=3300)


def seed_row(seed, val, test):
    return SeedRow(seed, val, test, 1.0, 1.0, 100, 0.9)


def uneven_table(period_sizes):
    """Two-class table whose period p holds period_sizes[p] rows"""
    stamps = np.repeat(np.arange(len(period_sizes)), period_sizes)
    labels = ['a' if i % 3 else 'b' for i in range(len(stamps))]
    columns = {'f1': categorical_column('f1', ['v'] * len(stamps)), 'label': categorical_column('label', labels)}
    return FeatureTable(columns, stamps, 'label')


class TestSummaries:
    """Test summary statistics and drops"""

    def test_summarize(self):
        """Test mean, population std, median and IQR"""
        summary = summarize([4.0, 1.0, 3.0, 2.0])
        assert summary.mean == 2.5
        assert summary.std == pytest.approx(1.118034, abs=1e-6)
        assert summary.median == 2.5
        assert summary.iqr == pytest.approx(1.5)

    def test_summarize_ignores_order(self):
        """Test permuting the input leaves every field unchanged"""
        values = [0.91, 0.35, 0.88, 0.12, 0.64]
        assert summarize(values) == summarize(values[::-1])

    def test_drop_is_floored(self):
        """Test negative drops are reported as 0"""
        assert coverage_drop(0.9, 0.3) == pytest.approx(0.6)
        assert coverage_drop(0.8, 0.85) == 0.0

    def test_result_keeps_raw_drop(self):
        """Test raw_drop keeps the sign the floored drop discards"""
        result = SeedEnsembleResult([seed_row(0, 0.8, 0.9), seed_row(1, 0.8, 0.9)], 0.1)
        assert result.drop == 0.0
        assert result.raw_drop == pytest.approx(-0.1)


class TestSeedEnsemble:
    """Test the independent-trials protocol"""

    def test_exchangeable_validation_coverage(self, exchangeable_tables):
        """Test validation coverage reaches the target on exchangeable data"""
        table, split = exchangeable_tables
        result = run_seed_ensemble(table, split, tree_factory(FAST_TREES), 0.1, range(5))
        assert len(result.per_seed) == 5
        assert result.summary['val_coverage'].mean >= 0.87
        assert result.drop < 0.05

    def test_severe_turnover_drop(self, severe_tables):
        """Test a churned dominant ID loses more than 40 points of coverage"""
        table, split = severe_tables
        result = run_seed_ensemble(table, split, tree_factory(FAST_TREES), 0.1, [0, 1, 2])
        assert result.drop > 0.4
        assert result.summary['test_coverage'].mean < 0.5

    @pytest.mark.slow
    def test_distributed_scenario_is_robust(self):
        """Test stable distributed signal keeps the drop under 5 points"""
        table, split = generate_scenario(scenario(
            concentration_mode=ConcentrationMode.DISTRIBUTED, n_features=5, n_val=800, n_test=800))
        result = run_seed_ensemble(table, split, tree_factory(FAST_TREES), 0.1, range(5))
        assert result.drop < 0.05

    @pytest.mark.slow
    def test_fifty_seed_test_coverage(self):
        """Test 50 seeds on an exchangeable 5-feature, 5-class task cover the test span at 0.88 to 0.93"""
        table, split = generate_scenario(scenario(n_features=5, n_classes=5, n_train=2000, n_val=1000,
                                                  n_test=1000))
        result = run_seed_ensemble(table, split, tree_factory(FAST_TREES), 0.1, range(42, 92), randomized=True)
        assert len(result.per_seed) == 50
        assert 0.88 <= result.summary['test_coverage'].mean <= 0.93
        conservative = run_seed_ensemble(table, split, tree_factory(FAST_TREES), 0.1, range(42, 92))
        assert conservative.summary['test_coverage'].mean >= 0.88

    def test_randomized_trials_are_seeded(self, exchangeable_tables):
        """Test randomized APS rows repeat exactly for the same seeds"""
        table, split = exchangeable_tables
        first = run_seed_ensemble(table, split, frequency_factory(), 0.1, [0, 1], randomized=True)
        second = run_seed_ensemble(table, split, frequency_factory(), 0.1, [0, 1], randomized=True)
        assert first.per_seed == second.per_seed
        assert [row.n_cal for row in first.per_seed] == [200, 200]

    def test_frequency_model_is_seed_blind(self, exchangeable_tables):
        """Test two seeds of a seed-independent model differ only through the partition"""
        table, split = exchangeable_tables
        result = run_seed_ensemble(table, split, frequency_factory(), 0.1, [0, 1])
        assert [row.seed for row in result.per_seed] == [0, 1]
        assert result.per_seed[0].n_cal == result.per_seed[1].n_cal == 200

    def test_seed_order_does_not_change_summary(self, exchangeable_tables):
        """Test permuting seeds permutes rows and keeps the summary"""
        table, split = exchangeable_tables
        forward = run_seed_ensemble(table, split, frequency_factory(), 0.1, [3, 4, 5])
        backward = run_seed_ensemble(table, split, frequency_factory(), 0.1, [5, 4, 3])
        assert forward.per_seed == backward.per_seed[::-1]
        assert forward.summary == backward.summary

    def test_parallel_matches_serial(self, exchangeable_tables):
        """Test thread-pool trials return the serial rows"""
        table, split = exchangeable_tables
        serial = run_seed_ensemble(table, split, tree_factory(TreeConfig(n_trees=2)), 0.1, [0, 1])
        parallel = run_seed_ensemble(table, split, tree_factory(TreeConfig(n_trees=2)), 0.1, [0, 1], n_jobs=2)
        assert serial.per_seed == parallel.per_seed

    def test_needs_two_seeds(self, exchangeable_tables):
        """Test a single seed fails inside the ensemble stage"""
        table, split = exchangeable_tables
        with pytest.raises(StageError) as excinfo:
            run_seed_ensemble(table, split, frequency_factory(), 0.1, [0])
        assert excinfo.value.stage == 'ensemble'
        assert isinstance(excinfo.value.__cause__, HarnessError)

    def test_empty_test_split(self, exchangeable_tables):
        """Test a split leaving no test rows fails"""
        table, _ = exchangeable_tables
        with pytest.raises(StageError):
            run_seed_ensemble(table, TemporalSplit(6, 20), frequency_factory(), 0.1, [0, 1])

    def test_external_trial(self):
        """Test externally computed scores run through one calibration trial"""
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(3), size=200)
        labels = probs.argmax(axis=1)
        result = run_external_trial(probs[:100], labels[:100], probs[100:], labels[100:], 0.1, seed=0)
        assert len(result.per_seed) == 1
        assert result.per_seed[0].val_coverage == 1.0


class TestCqrEnsemble:
    """Test conformalized quantile regression over seeds"""

    def test_exchangeable_regression(self):
        """Test intervals reach their target on exchangeable data"""
        table, split = generate_scenario(scenario(task=TaskKind.REGRESSION))
        result = run_cqr_ensemble(table, split, ID_FEATURE, 0.1, [0, 1, 2])
        assert result.summary['val_coverage'].mean >= 0.85
        assert result.group_jaccard == 1.0
        assert all(row.width_test > 0 for row in result.per_seed)

    def test_churned_groups(self):
        """Test full turnover of the grouping feature is visible in the result"""
        table, split = generate_scenario(scenario(task=TaskKind.REGRESSION, id_feature_turnover=1.0))
        result = run_cqr_ensemble(table, split, ID_FEATURE, 0.1, [0, 1])
        assert result.group_jaccard == 0.0
        assert len(result.per_seed) == 2

    def test_unlabelled_targets_are_dropped(self):
        """Test NaN targets in every span are skipped rather than scored as misses"""
        table, split = generate_scenario(scenario(task=TaskKind.REGRESSION))
        targets = table.target_column.values.copy()
        targets[::10] = np.nan
        result = run_cqr_ensemble(table.with_values(LABEL, targets), split, ID_FEATURE, 0.1, [0, 1, 2])
        assert all(np.isfinite(row.margin) for row in result.per_seed)
        assert result.summary['val_coverage'].mean >= 0.85
        assert result.summary['test_coverage'].mean >= 0.8

    def test_all_targets_missing(self):
        """Test a span with no numeric target fails in the cqr stage"""
        table, split = generate_scenario(scenario(task=TaskKind.REGRESSION))
        targets = np.where(table.timestamps >= split.val_end, np.nan, table.target_column.values)
        with pytest.raises(StageError) as excinfo:
            run_cqr_ensemble(table.with_values(LABEL, targets), split, ID_FEATURE, 0.1, [0, 1])
        assert isinstance(excinfo.value.__cause__, HarnessError)


class TestRetrainSchedule:
    """Test cadence arithmetic"""

    @pytest.mark.parametrize('cadence,expected', [
        (Cadence.NONE, []),
        (Cadence.MONTHLY, list(range(1, 11))),
        (Cadence.QUARTERLY, [3, 6, 9]),
        (Cadence.BIANNUAL, [6]),
    ])
    def test_retrain_steps(self, cadence, expected):
        """Test retraining starts after the first period at multiples of the cadence"""
        schedule = RetrainSchedule(cadence, horizon=11)
        assert [step for step in range(11) if schedule.retrains_at(step)] == expected

    def test_horizon_must_be_positive(self):
        """Test a zero horizon raises HarnessError"""
        with pytest.raises(HarnessError):
            RetrainSchedule(Cadence.NONE, horizon=0)


class TestRetraining:
    """Test the walk-forward retraining simulator"""

    def test_no_retraining_trace(self):
        """Test NONE keeps one model over the whole horizon"""
        table, _ = generate_scenario(scenario(**DRIFT_LAYOUT))
        result = run_retraining(table, RetrainSchedule(Cadence.NONE, 11), tree_factory(FAST_TREES), 0.1, seed=0)
        assert len(result.trace) == 11
        assert result.retrain_count == 0
        assert [p.period for p in result.trace] == list(range(5, 16))

    def test_retrain_counts_are_ordered(self):
        """Test monthly retrains at least as often as quarterly and biannual"""
        table, _ = generate_scenario(scenario(**DRIFT_LAYOUT))
        results = compare_schedules(table, [Cadence.MONTHLY, Cadence.QUARTERLY, Cadence.BIANNUAL], 11,
                                    frequency_factory(), 0.1, seed=0)
        counts = {r.cadence: r.retrain_count for r in results}
        assert counts == {Cadence.NONE: 0, Cadence.MONTHLY: 10, Cadence.QUARTERLY: 3, Cadence.BIANNUAL: 1}
        assert next(r for r in results if r.cadence is Cadence.QUARTERLY).retrain_periods == [8, 11, 14]

    def test_horizon_beyond_data(self):
        """Test a horizon covering every period fails"""
        table, _ = generate_scenario(scenario(**DRIFT_LAYOUT))
        with pytest.raises(StageError):
            run_retraining(table, RetrainSchedule(Cadence.NONE, 16), frequency_factory(), 0.1, seed=0)

    def test_single_row_period_falls_back(self, caplog):
        """Test a one-row period before the horizon calibrates on the last period that can be halved"""
        table = uneven_table([20, 1, 20, 20])
        with caplog.at_level(logging.WARNING, logger='harness'):
            result = run_retraining(table, RetrainSchedule(Cadence.NONE, 2), frequency_factory(), 0.1, seed=0)
        assert [p.period for p in result.trace] == [2, 3]
        assert [p.n_eval for p in result.trace] == [20, 20]
        assert 'Period 1 is too small' in caplog.text

    def test_no_period_can_calibrate(self):
        """Test periods of one row each before the horizon fail in the retraining stage"""
        table = uneven_table([1, 1, 20])
        with pytest.raises(StageError) as excinfo:
            run_retraining(table, RetrainSchedule(Cadence.NONE, 1), frequency_factory(), 0.1, seed=0)
        assert excinfo.value.stage == 'retraining'
        assert isinstance(excinfo.value.__cause__, HarnessError)

    @pytest.mark.slow
    def test_quarterly_recovers_after_turnover(self):
        """Test quarterly retraining beats no retraining once IDs churn"""
        table, _ = generate_scenario(scenario(
            **DRIFT_LAYOUT, shift_period=10, id_feature_turnover=1.0, label_noise=0.0))
        results = compare_schedules(table, [Cadence.QUARTERLY], 11, tree_factory(FAST_TREES), 0.1, seed=0)
        none = next(r for r in results if r.cadence is Cadence.NONE)
        quarterly = next(r for r in results if r.cadence is Cadence.QUARTERLY)
        assert quarterly.mean > none.mean + 0.10
        assert quarterly.paired is not None
        assert quarterly.paired.p_value < 0.10

    @pytest.mark.slow
    def test_stationary_stream_is_neutral(self):
        """Test retraining changes little without drift"""
        table, _ = generate_scenario(scenario(**DRIFT_LAYOUT))
        results = compare_schedules(table, [Cadence.QUARTERLY], 11, tree_factory(FAST_TREES), 0.1, seed=0)
        means = [r.mean for r in results]
        assert max(means) - min(means) < 0.03


class TestPlacebo:
    """Test the placebo comparison"""

    def test_shift_dwarfs_placebo(self, severe_tables):
        """Test degradation at the real shift is more than 10x the pre-shift placebo"""
        table, split = severe_tables
        result = run_placebo(table, TemporalSplit(3, 5, 6), split, tree_factory(FAST_TREES), 0.1, [0, 1])
        assert result.shift_drop > 0.4
        assert result.shift_drop > 10 * result.placebo_drop

    def test_zero_over_zero(self):
        """Test two zero drops give the NOT_APPLICABLE sentinel"""
        flat = SeedEnsembleResult([seed_row(0, 0.9, 0.9), seed_row(1, 0.9, 0.9)], 0.1)
        result = PlaceboResult(flat, flat)
        assert result.ratio is None
        assert result.ratio_label == NOT_APPLICABLE

    def test_zero_shift_drop(self):
        """Test a placebo drop over a zero shift drop is infinite"""
        flat = SeedEnsembleResult([seed_row(0, 0.9, 0.9), seed_row(1, 0.9, 0.9)], 0.1)
        dropped = SeedEnsembleResult([seed_row(0, 0.9, 0.7), seed_row(1, 0.9, 0.7)], 0.1)
        assert PlaceboResult(dropped, flat).ratio == float('inf')


class TestAciComparison:
    """Test static against adaptive conformal"""

    def test_zero_overlap_stream(self):
        """Test ACI cannot rescue coverage when every test ID is new"""
        table, split = generate_scenario(scenario(id_feature_turnover=1.0, label_noise=0.0, n_val=4000))
        rows = compare_aci(table, split, tree_factory(FAST_TREES), 0.1, [0.0, 0.001, 0.01, 0.05], seed=0)
        static = rows[0]
        assert (static.method, static.gamma) == ('static', None)
        assert rows[1].coverage == static.coverage
        for row in rows:
            assert row.coverage < 0.5
            assert row.coverage <= static.coverage + 0.02

    def test_precomputed_stream(self):
        """Test gamma 0 on a precomputed stream reproduces the static row"""
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(4), size=600)
        labels = probs.argmax(axis=1)
        rows = aci_on_stream(probs[:300], labels[:300], probs[300:], labels[300:], 0.1, [0.0, 0.05])
        assert rows[1] == AciRow('aci', 0.0, rows[0].coverage, rows[0].mean_set_size, 0.1)
        assert len(rows) == 3

    def test_needs_gammas(self, exchangeable_tables):
        """Test an empty gamma list fails inside the aci stage"""
        table, split = exchangeable_tables
        with pytest.raises(StageError) as excinfo:
            compare_aci(table, split, frequency_factory(), 0.1, [], seed=0)
        assert isinstance(excinfo.value.__cause__, HarnessError)
