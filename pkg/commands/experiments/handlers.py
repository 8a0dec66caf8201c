import logging

import click
import numpy as np

from commands import build_run_config, data_options, emit, load_inputs, make_factory, model_options, pass_config, \
    run_options, split_from_bounds, task_name
from commands.experiments import experiments_cli
from decorators import cli_errors, stage
from exceptions import ConfigError, StageError
from harness import Cadence, compare_aci, compare_schedules, run_cqr_ensemble, run_external_trial, run_placebo, \
    run_seed_ensemble
from learner import load_probability_matrix
from reporting import Report
from schemas import AciRowSchema, CqrEnsembleSchema, PlaceboSchema, ScheduleResultSchema, SeedEnsembleSchema
from tabular import apply_split

logger = logging.getLogger(__name__)


def _summary_rows(name, result, columns):
    return [
        {'task': name, 'metric': column, 'mean': result.summary[column].mean, 'std': result.summary[column].std,
         'median': result.summary[column].median, 'iqr': result.summary[column].iqr}
        for column in columns
    ]


@stage('load_scores')
def _external_scores(table, split, scores_val, scores_test):
    _, val, test = apply_split(table, split)
    labels = table.target_column.vocabulary
    probs_val = load_probability_matrix(scores_val, labels)
    probs_test = load_probability_matrix(scores_test, labels)
    if len(probs_val) != val.n_rows or len(probs_test) != test.n_rows:
        raise ConfigError(
            f"Score files hold {len(probs_val)}/{len(probs_test)} rows; "
            f"the validation/test spans hold {val.n_rows}/{test.n_rows}"
        )
    return probs_val, val.target_column.values, probs_test, test.target_column.values


@experiments_cli.command('ensemble')
@data_options
@run_options
@model_options
@click.option('--scores-val', type=click.Path(), help='External validation probabilities (single trial)')
@click.option('--scores-test', type=click.Path(), help='External test probabilities (single trial)')
@click.option('--randomized', is_flag=True, help='Randomized APS: exact rather than conservative coverage')
@click.option('--task', help='Task name shown in reports')
@pass_config
@cli_errors
def ensemble(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
             config_file, alpha, seeds, n_jobs, out_dir, fmt, model, n_trees, max_depth,
             scores_val, scores_test, randomized, task):
    """Per-seed calibration trials: validation vs test coverage."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs,
                                  n_trees=n_trees, max_depth=max_depth)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    if (scores_val is None) != (scores_test is None):
        raise StageError('config', '--scores-val and --scores-test must be given together')
    if scores_val:
        inputs = _external_scores(table, split, scores_val, scores_test)
        result = run_external_trial(*inputs, run_config.alpha, run_config.seeds[0], randomized=randomized)
    else:
        result = run_seed_ensemble(table, split, make_factory(model, run_config), run_config.alpha,
                                   run_config.seeds, n_jobs=run_config.n_jobs, randomized=randomized)

    name = task or task_name(data_path, scenario)
    report = Report(f"Seed ensemble: {name}", run_config)
    report.headline = {
        'task': name,
        'val_coverage': result.summary['val_coverage'].mean,
        'test_coverage': result.summary['test_coverage'].mean,
        'drop': result.drop,
    }
    columns = ['val_coverage', 'test_coverage', 'mean_set_size_val', 'mean_set_size_test']
    report.add_table('summary', ['task', 'metric', 'mean', 'std', 'median', 'iqr'],
                     _summary_rows(name, result, columns), 'Coverage summary')
    report.add_table('per_seed', ['seed'] + columns + ['n_cal', 'threshold'],
                     [vars(row) for row in result.per_seed], 'Per-seed trials')
    report.add_records('ensemble', SeedEnsembleSchema(), result, many=False)
    emit(report, fmt, out_dir, primary_table='summary')


@experiments_cli.command('cqr')
@data_options
@run_options
@click.option('--group-feature', default='entity_id', show_default=True, help='Grouping feature for quantiles')
@click.option('--task', help='Task name shown in reports')
@pass_config
@cli_errors
def cqr(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
        config_file, alpha, seeds, n_jobs, out_dir, fmt, group_feature, task):
    """Conformalized quantile regression trials on a numeric target."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs)
    if data_path and target not in numeric:
        numeric = tuple(numeric) + (target,)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    result = run_cqr_ensemble(table, split, group_feature, run_config.alpha, run_config.seeds,
                              n_jobs=run_config.n_jobs)

    name = task or task_name(data_path, scenario)
    report = Report(f"CQR ensemble: {name}", run_config)
    report.headline = {
        'task': name,
        'val_coverage': result.summary['val_coverage'].mean,
        'test_coverage': result.summary['test_coverage'].mean,
        'drop': result.drop,
        'group_jaccard': result.group_jaccard,
    }
    columns = ['val_coverage', 'test_coverage', 'width_val', 'width_test']
    report.add_table('summary', ['task', 'metric', 'mean', 'std', 'median', 'iqr'],
                     _summary_rows(name, result, columns), 'Interval coverage summary')
    report.add_table('per_seed', ['seed'] + columns + ['margin'], [vars(row) for row in result.per_seed],
                     'Per-seed trials')
    report.add_records('cqr', CqrEnsembleSchema(), result, many=False)
    emit(report, fmt, out_dir, primary_table='summary')


@experiments_cli.command('retrain')
@data_options
@run_options
@model_options
@click.option('--cadence', 'cadences', multiple=True, type=click.Choice([c.value for c in Cadence]),
              help='Cadence to simulate (repeatable; default all)')
@click.option('--horizon', type=int, help='Evaluation periods (default: periods of the test span)')
@pass_config
@cli_errors
def retrain(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
            config_file, alpha, seeds, n_jobs, out_dir, fmt, model, n_trees, max_depth, cadences, horizon):
    """Walk-forward retraining schedules compared against no retraining."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs,
                                  n_trees=n_trees, max_depth=max_depth)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    if horizon is None:
        horizon = int(len(np.unique(table.timestamps[table.timestamps >= split.val_end])))
    selected = [Cadence(c) for c in cadences] or list(Cadence)
    results = compare_schedules(table, selected, horizon, make_factory(model, run_config), run_config.alpha,
                                run_config.seeds[0], n_jobs=run_config.n_jobs)
    results = [r for r in results if r.cadence in selected]

    report = Report(f"Retraining schedules over {horizon} periods", run_config)
    summary = [
        {'cadence': r.cadence.value, 'retrains': r.retrain_count, 'mean': r.mean, 'min': r.min, 'std': r.std,
         'wilcoxon_w': '' if r.paired is None else r.paired.statistic,
         'wilcoxon_p': '' if r.paired is None else r.paired.p_value}
        for r in results
    ]
    report.add_table('schedules', ['cadence', 'retrains', 'mean', 'min', 'std', 'wilcoxon_w', 'wilcoxon_p'],
                     summary, 'Coverage by cadence (paired test vs NONE)')
    trace = [dict(vars(p), cadence=r.cadence.value) for r in results for p in r.trace]
    report.add_table('trace', ['cadence', 'period', 'coverage', 'n_eval', 'mean_set_size', 'retrained',
                               'within_tolerance'], trace, 'Per-period coverage')
    report.add_records('schedules', ScheduleResultSchema(), results)
    emit(report, fmt, out_dir, primary_table='schedules')


@experiments_cli.command('placebo')
@data_options
@run_options
@model_options
@click.option('--placebo-train-end', type=int, required=True)
@click.option('--placebo-val-end', type=int, required=True)
@click.option('--placebo-test-end', type=int, required=True)
@click.option('--task', help='Task name shown in reports')
@pass_config
@cli_errors
def placebo(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
            config_file, alpha, seeds, n_jobs, out_dir, fmt, model, n_trees, max_depth,
            placebo_train_end, placebo_val_end, placebo_test_end, task):
    """Coverage drop across a shift-free boundary vs the real shift boundary."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs,
                                  n_trees=n_trees, max_depth=max_depth)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    placebo_split = split_from_bounds(placebo_train_end, placebo_val_end, placebo_test_end)
    result = run_placebo(table, placebo_split, split, make_factory(model, run_config), run_config.alpha,
                         run_config.seeds, n_jobs=run_config.n_jobs)

    name = task or task_name(data_path, scenario)
    report = Report(f"Placebo test: {name}", run_config)
    row = {'task': name, 'placebo_drop': result.placebo_drop, 'shift_drop': result.shift_drop,
           'ratio': result.ratio_label}
    report.headline = dict(row)
    report.add_table('placebo', ['task', 'placebo_drop', 'shift_drop', 'ratio'], [row], 'Placebo vs shift')
    report.add_records('placebo', PlaceboSchema(), result, many=False)
    emit(report, fmt, out_dir, primary_table='placebo')


@experiments_cli.command('aci')
@data_options
@run_options
@model_options
@click.option('--gamma', 'gammas', multiple=True, type=float, help='ACI step size (repeatable)')
@pass_config
@cli_errors
def aci(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
        config_file, alpha, seeds, n_jobs, out_dir, fmt, model, n_trees, max_depth, gammas):
    """Static APS against adaptive conformal inference on the test stream."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs,
                                  n_trees=n_trees, max_depth=max_depth, gammas=list(gammas) or None)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    rows = compare_aci(table, split, make_factory(model, run_config), run_config.alpha, run_config.gammas,
                       run_config.seeds[0], n_jobs=run_config.n_jobs)

    report = Report("Adaptive conformal comparison", run_config)
    report.add_table('aci', ['method', 'gamma', 'coverage', 'mean_set_size', 'final_alpha'],
                     [dict(vars(r), gamma='' if r.gamma is None else r.gamma) for r in rows], 'Coverage by method')
    report.add_records('aci', AciRowSchema(), rows)
    emit(report, fmt, out_dir, primary_table='aci')


@stage('write_table')
def _write_csv(table, out_path):
    table.to_frame().to_csv(out_path, index=False)


@experiments_cli.command('generate')
@click.option('--scenario', required=True, help='Scenario as a JSON file path or inline JSON object')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='CSV file to write')
@cli_errors
def generate(scenario, out_path):
    """Write a synthetic shift scenario as CSV."""
    table, split = load_inputs(scenario=scenario)
    _write_csv(table, out_path)
    logger.info(f"Generated scenario with split {split}")
    click.echo(f"wrote {table.n_rows} rows to {out_path} (train_end={split.train_end}, val_end={split.val_end})")
