"""Experiment orchestration: seed ensembles, retraining schedules, placebo and ACI runs.

Every run is a pure function of (table, configuration, seeds). Seed trials
own their model and calibration and may run on a thread pool.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from conformal import (aci_run, aps_set_mask, calibrate_aps, calibrate_cqr, evaluate_interval_coverage,
                       evaluate_mask_coverage, predict_intervals_cqr, split_calibration)
from decorators import stage, timed
from diagnostics import jaccard_stability
from exceptions import AllZeroDifferences, HarnessError
from extensions import run_parallel
from learner import (ClassifierModel, TreeConfig, check_simplex, fit_bagged_trees, fit_frequency_classifier,
                     fit_grouped_quantiles)
from stats import PairedTestResult, wilcoxon_signed_rank
from tabular import MISSING, FeatureTable, TemporalSplit, apply_split

logger = logging.getLogger(__name__)

ModelFactory = Callable[[FeatureTable, int], ClassifierModel]
STOPPING_TOLERANCE = 0.05
NOT_APPLICABLE = "NOT_APPLICABLE"


def tree_factory(config: TreeConfig = TreeConfig()) -> ModelFactory:
    return partial(_fit_trees, config=config)


def _fit_trees(train: FeatureTable, seed: int, config: TreeConfig) -> ClassifierModel:
    return fit_bagged_trees(train, config, seed)


def frequency_factory() -> ModelFactory:
    return fit_frequency_classifier


@dataclass(frozen=True)
class ColumnSummary:
    mean: float
    std: float
    median: float
    iqr: float


def summarize(values: Sequence[float]) -> ColumnSummary:
    """Order-independent summary; std is the population standard deviation"""
    values = np.sort(np.asarray(values, dtype=np.float64))
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    return ColumnSummary(float(values.mean()), float(values.std(ddof=0)), float(median), float(q3 - q1))


def coverage_drop(val_mean: float, test_mean: float) -> float:
    return max(0.0, val_mean - test_mean)


def _labelled(table: FeatureTable, span: str) -> FeatureTable:
    """Rows with a target: MISSING categorical labels and NaN numeric targets are dropped"""
    if table.n_rows == 0:
        raise HarnessError(f"The {span} split is empty")
    target = table.target_column
    unlabelled = target.values == MISSING if target.is_categorical else np.isnan(target.values)
    if np.any(unlabelled):
        table = table.take(np.flatnonzero(~unlabelled))
        if table.n_rows == 0:
            raise HarnessError(f"The {span} split has no labelled rows")
        logger.debug(f"Dropped {int(unlabelled.sum())} unlabelled rows from the {span} split")
    return table


# ---------------------------------------------------------------------------
# Seed ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedRow:
    seed: int
    val_coverage: float
    test_coverage: float
    mean_set_size_val: float
    mean_set_size_test: float
    n_cal: int
    threshold: float


@dataclass
class SeedEnsembleResult:
    per_seed: List[SeedRow]
    alpha: float
    summary: Dict[str, ColumnSummary] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {
                name: summarize([getattr(row, name) for row in self.per_seed])
                for name in ("val_coverage", "test_coverage", "mean_set_size_val", "mean_set_size_test")
            }

    @property
    def raw_drop(self) -> float:
        return self.summary["val_coverage"].mean - self.summary["test_coverage"].mean

    @property
    def drop(self) -> float:
        return coverage_drop(self.summary["val_coverage"].mean, self.summary["test_coverage"].mean)

    def test_coverages(self) -> List[float]:
        return [row.test_coverage for row in self.per_seed]


def _uniform_draws(seed: int, n_val: int, n_test: int):
    """Seeded per-row draws for randomized APS, independent of the calibration partition"""
    rng = np.random.default_rng([seed, 1])
    return rng.random(n_val), rng.random(n_test)


def _score_trial(seed: int, probs_val: np.ndarray, y_val: np.ndarray, probs_test: np.ndarray,
                 y_test: np.ndarray, alpha: float, randomized: bool = False) -> SeedRow:
    cal, held_out = split_calibration(len(y_val), seed)
    u_cal = u_held_out = u_test = None
    if randomized:
        u_val, u_test = _uniform_draws(seed, len(y_val), len(y_test))
        u_cal, u_held_out = u_val[cal], u_val[held_out]
    calib = calibrate_aps(probs_val[cal], y_val[cal], alpha, u_cal)
    val_report = evaluate_mask_coverage(aps_set_mask(probs_val[held_out], calib.set_threshold, u_held_out),
                                        y_val[held_out])
    test_report = evaluate_mask_coverage(aps_set_mask(probs_test, calib.set_threshold, u_test), y_test)
    return SeedRow(seed, val_report.coverage, test_report.coverage, val_report.mean_set_size,
                   test_report.mean_set_size, calib.n_cal, calib.threshold)


@stage("ensemble")
@timed
def run_seed_ensemble(table: FeatureTable, split: TemporalSplit, model_factory: ModelFactory, alpha: float,
                      seeds: Sequence[int], n_jobs: int = 1, randomized: bool = False) -> SeedEnsembleResult:
    """Independent trials: fit with seed s, calibrate on a seeded half of validation,
    evaluate on the other half and on test. Not an ensemble prediction.

    `randomized` switches to APS with seeded randomized inclusion of the
    crossing class, whose coverage is exact rather than conservative."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise HarnessError(f"A seed ensemble needs at least 2 seeds, got {len(seeds)}")
    train, val, test = apply_split(table, split)
    train = _labelled(train, "train")
    val = _labelled(val, "validation")
    test = _labelled(test, "test")
    y_val, y_test = val.target_column.values, test.target_column.values

    def trial(seed: int) -> SeedRow:
        model = model_factory(train, seed)
        row = _score_trial(seed, model.predict_proba(val), y_val, model.predict_proba(test), y_test, alpha,
                           randomized)
        logger.info(f"Seed {seed}: val coverage {row.val_coverage:.3f}, test coverage {row.test_coverage:.3f}")
        return row

    rows = run_parallel(trial, seeds, n_jobs=n_jobs)
    return SeedEnsembleResult(rows, alpha)


@stage("ensemble")
def run_external_trial(probs_val: np.ndarray, y_val: Sequence[int], probs_test: np.ndarray, y_test: Sequence[int],
                       alpha: float, seed: int, randomized: bool = False) -> SeedEnsembleResult:
    """Single calibration/evaluation trial on externally computed scores"""
    row = _score_trial(seed, check_simplex(probs_val), np.asarray(y_val, dtype=np.int64), check_simplex(probs_test),
                       np.asarray(y_test, dtype=np.int64), alpha, randomized)
    return SeedEnsembleResult([row], alpha)


# ---------------------------------------------------------------------------
# Conformalized quantile regression ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CqrRow:
    seed: int
    val_coverage: float
    test_coverage: float
    width_val: float
    width_test: float
    margin: float


@dataclass
class CqrEnsembleResult:
    per_seed: List[CqrRow]
    alpha: float
    group_feature: str
    group_jaccard: float
    summary: Dict[str, ColumnSummary] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {
                name: summarize([getattr(row, name) for row in self.per_seed])
                for name in ("val_coverage", "test_coverage", "width_val", "width_test")
            }

    @property
    def drop(self) -> float:
        return coverage_drop(self.summary["val_coverage"].mean, self.summary["test_coverage"].mean)


@stage("cqr")
@timed
def run_cqr_ensemble(table: FeatureTable, split: TemporalSplit, group_feature: str, alpha: float,
                     seeds: Sequence[int], n_jobs: int = 1) -> CqrEnsembleResult:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise HarnessError(f"A seed ensemble needs at least 2 seeds, got {len(seeds)}")
    train, val, test = apply_split(table, split)
    train = _labelled(train, "train")
    val = _labelled(val, "validation")
    test = _labelled(test, "test")
    levels = (alpha / 2.0, 1.0 - alpha / 2.0)
    y_val, y_test = val.target_column.values, test.target_column.values

    def trial(seed: int) -> CqrRow:
        model = fit_grouped_quantiles(train, levels, group_feature, seed)
        lo_val, hi_val = model.predict(val)
        lo_test, hi_test = model.predict(test)
        cal, held_out = split_calibration(val.n_rows, seed)
        calib = calibrate_cqr((lo_val[cal], hi_val[cal]), y_val[cal], alpha)
        val_report = evaluate_interval_coverage(*predict_intervals_cqr(lo_val[held_out], hi_val[held_out], calib),
                                                y_val[held_out])
        test_report = evaluate_interval_coverage(*predict_intervals_cqr(lo_test, hi_test, calib), y_test)
        return CqrRow(seed, val_report.coverage, test_report.coverage, val_report.mean_set_size,
                      test_report.mean_set_size, calib.q)

    rows = run_parallel(trial, seeds, n_jobs=n_jobs)
    group_jaccard = jaccard_stability(train.column(group_feature), test.column(group_feature))
    return CqrEnsembleResult(rows, alpha, group_feature, group_jaccard)


# ---------------------------------------------------------------------------
# Retraining schedules
# ---------------------------------------------------------------------------

class Cadence(Enum):
    NONE = "NONE"
    MONTHLY = "MONTHLY"
    QUARTERLY = "QUARTERLY"
    BIANNUAL = "BIANNUAL"

    @property
    def period_length(self) -> Optional[int]:
        return {"NONE": None, "MONTHLY": 1, "QUARTERLY": 3, "BIANNUAL": 6}[self.value]


@dataclass(frozen=True)
class RetrainSchedule:
    cadence: Cadence
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise HarnessError(f"horizon must be >= 1, got {self.horizon}")

    def retrains_at(self, step: int) -> bool:
        """Retraining happens at the start of evaluation steps k * period, k >= 1"""
        length = self.cadence.period_length
        return length is not None and step > 0 and step % length == 0


@dataclass(frozen=True)
class PeriodCoverage:
    period: int
    coverage: float
    n_eval: int
    mean_set_size: float
    retrained: bool
    within_tolerance: bool


@dataclass
class ScheduleResult:
    cadence: Cadence
    trace: List[PeriodCoverage]
    retrain_periods: List[int]
    alpha: float
    paired: Optional[PairedTestResult] = None

    @property
    def coverages(self) -> np.ndarray:
        return np.array([p.coverage for p in self.trace])

    @property
    def retrain_count(self) -> int:
        return len(self.retrain_periods)

    @property
    def mean(self) -> float:
        return float(self.coverages.mean())

    @property
    def min(self) -> float:
        return float(self.coverages.min())

    @property
    def std(self) -> float:
        return float(self.coverages.std(ddof=0))


def _fit_and_calibrate(table: FeatureTable, stamps: np.ndarray, periods: np.ndarray, step_period: int,
                       model_factory: ModelFactory, alpha: float, seed: int):
    """Growing-window fit plus half of the latest completed period; the other half calibrates.

    A completed period with fewer than 2 rows cannot be halved, so the most
    recent period with at least 2 rows calibrates instead; the smaller
    periods after it still go to the fit.
    """
    completed = periods[periods < step_period]
    latest = next((p for p in completed[::-1] if np.sum(stamps == p) >= 2), None)
    if latest is None:
        raise HarnessError(f"No period before {step_period} has the 2 rows calibration needs")
    if latest != completed[-1]:
        logger.warning(f"Period {completed[-1]} is too small to calibrate on; using period {latest}")
    latest_rows = np.flatnonzero(stamps == latest)
    cal_half, fit_half = split_calibration(len(latest_rows), seed)
    earlier = (stamps < step_period) & (stamps != latest)
    fit_rows = np.sort(np.concatenate([np.flatnonzero(earlier), latest_rows[fit_half]]))
    model = model_factory(table.take(fit_rows), seed)
    cal_table = table.take(latest_rows[cal_half])
    calib = calibrate_aps(model.predict_proba(cal_table), cal_table.target_column.values, alpha)
    return model, calib


@stage("retraining")
@timed
def run_retraining(table: FeatureTable, schedule: RetrainSchedule, model_factory: ModelFactory, alpha: float,
                   seed: int, baseline: Optional[Sequence[float]] = None) -> ScheduleResult:
    """Walk forward over the last `horizon` periods of the table.

    Periods are the distinct timestamp values. The initial model is fitted on
    everything before the first evaluation period; refit and recalibration
    always happen together.
    """
    table = _labelled(table, "input")
    stamps = table.timestamps
    periods = np.unique(stamps)
    if schedule.horizon >= len(periods):
        raise HarnessError(
            f"Horizon {schedule.horizon} leaves no training period among {len(periods)} periods"
        )
    eval_periods = periods[-schedule.horizon:]
    model, calib = _fit_and_calibrate(table, stamps, periods, eval_periods[0], model_factory, alpha, seed)
    trace, retrain_periods = [], []
    for step, period in enumerate(eval_periods):
        retrained = schedule.retrains_at(step)
        if retrained:
            model, calib = _fit_and_calibrate(table, stamps, periods, period, model_factory, alpha, seed)
            retrain_periods.append(int(period))
        rows = table.take(np.flatnonzero(stamps == period))
        report = evaluate_mask_coverage(aps_set_mask(model.predict_proba(rows), calib.set_threshold),
                                        rows.target_column.values)
        trace.append(PeriodCoverage(int(period), report.coverage, report.n_eval, report.mean_set_size, retrained,
                                    abs(report.coverage - (1.0 - alpha)) <= STOPPING_TOLERANCE))
        logger.info(f"{schedule.cadence.value} period {period}: coverage {report.coverage:.3f}"
                    f"{' (retrained)' if retrained else ''}")
    result = ScheduleResult(schedule.cadence, trace, retrain_periods, alpha)
    if baseline is not None:
        result.paired = paired_against(result.coverages, baseline)
    return result


def paired_against(trace: Sequence[float], baseline: Sequence[float]) -> Optional[PairedTestResult]:
    if len(trace) != len(baseline):
        raise HarnessError(f"Baseline trace has {len(baseline)} periods, expected {len(trace)}")
    try:
        return wilcoxon_signed_rank(trace, baseline)
    except AllZeroDifferences:
        logger.warning("Trace identical to baseline; paired test skipped")
        return None


def compare_schedules(table: FeatureTable, cadences: Sequence[Cadence], horizon: int, model_factory: ModelFactory,
                      alpha: float, seed: int, n_jobs: int = 1) -> List[ScheduleResult]:
    """Run every cadence and test each against the no-retraining trace"""
    cadences = list(cadences)
    if Cadence.NONE not in cadences:
        cadences = [Cadence.NONE] + cadences
    results = run_parallel(
        lambda cadence: run_retraining(table, RetrainSchedule(cadence, horizon), model_factory, alpha, seed),
        cadences, n_jobs=n_jobs,
    )
    baseline = next(r for r in results if r.cadence is Cadence.NONE).coverages
    for result in results:
        if result.cadence is not Cadence.NONE:
            result.paired = paired_against(result.coverages, baseline)
    return results


# ---------------------------------------------------------------------------
# Placebo test
# ---------------------------------------------------------------------------

@dataclass
class PlaceboResult:
    placebo: SeedEnsembleResult
    shift: SeedEnsembleResult

    @property
    def placebo_drop(self) -> float:
        return self.placebo.drop

    @property
    def shift_drop(self) -> float:
        return self.shift.drop

    @property
    def ratio(self) -> Optional[float]:
        """placebo_drop / shift_drop; None when both are 0"""
        if self.shift_drop == 0.0:
            return None if self.placebo_drop == 0.0 else float("inf")
        return self.placebo_drop / self.shift_drop

    @property
    def ratio_label(self) -> str:
        return NOT_APPLICABLE if self.ratio is None else f"{self.ratio:.4g}"


@stage("placebo")
def run_placebo(table: FeatureTable, placebo_split: TemporalSplit, shift_split: TemporalSplit,
                model_factory: ModelFactory, alpha: float, seeds: Sequence[int], n_jobs: int = 1) -> PlaceboResult:
    placebo = run_seed_ensemble(table, placebo_split, model_factory, alpha, seeds, n_jobs=n_jobs)
    shift = run_seed_ensemble(table, shift_split, model_factory, alpha, seeds, n_jobs=n_jobs)
    result = PlaceboResult(placebo, shift)
    logger.info(f"Placebo drop {result.placebo_drop:.3f} vs shift drop {result.shift_drop:.3f}")
    return result


# ---------------------------------------------------------------------------
# Adaptive conformal comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AciRow:
    method: str
    gamma: Optional[float]
    coverage: float
    mean_set_size: float
    final_alpha: float


@stage("aci")
def compare_aci(table: FeatureTable, split: TemporalSplit, model_factory: ModelFactory, alpha: float,
                gammas: Sequence[float], seed: int, n_jobs: int = 1) -> List[AciRow]:
    """Static APS against ACI variants sharing one model and calibration.

    The test stream is replayed in timestamp order.
    """
    gammas = list(gammas)
    if not gammas:
        raise HarnessError("At least one gamma is required")
    train, val, test = apply_split(table, split)
    train = _labelled(train, "train")
    val = _labelled(val, "validation")
    test = _labelled(test, "test")
    model = model_factory(train, seed)
    probs_val, y_val = model.predict_proba(val), val.target_column.values
    cal, _ = split_calibration(val.n_rows, seed)
    calib = calibrate_aps(probs_val[cal], y_val[cal], alpha)

    order = np.argsort(test.timestamps, kind="stable")
    probs_test = model.predict_proba(test)[order]
    y_test = test.target_column.values[order]
    static = evaluate_mask_coverage(aps_set_mask(probs_test, calib.set_threshold), y_test)
    rows = [AciRow("static", None, static.coverage, static.mean_set_size, alpha)]

    def adaptive(gamma: float) -> AciRow:
        report, trace = aci_run(probs_test, y_test, alpha, gamma, calib)
        return AciRow("aci", gamma, report.coverage, report.mean_set_size, float(trace[-1]))

    rows.extend(run_parallel(adaptive, gammas, n_jobs=n_jobs))
    return rows


def aci_on_stream(probs_cal: np.ndarray, y_cal: Sequence[int], probs_stream: np.ndarray, y_stream: Sequence[int],
                  alpha: float, gammas: Sequence[float]) -> List[AciRow]:
    """compare_aci on precomputed probability streams"""
    calib = calibrate_aps(probs_cal, y_cal, alpha)
    static = evaluate_mask_coverage(aps_set_mask(probs_stream, calib.set_threshold), y_stream)
    rows = [AciRow("static", None, static.coverage, static.mean_set_size, alpha)]
    for gamma in gammas:
        report, trace = aci_run(probs_stream, y_stream, alpha, gamma, calib)
        rows.append(AciRow("aci", gamma, report.coverage, report.mean_set_size, float(trace[-1])))
    return rows
