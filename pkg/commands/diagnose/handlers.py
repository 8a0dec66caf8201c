import logging
import sys

import click

from commands import build_run_config, data_options, emit, load_inputs, make_factory, model_options, pass_config, \
    run_options, task_name
from commands.diagnose import diagnose_cli
from decorators import cli_errors, stage
from diagnostics import build_diagnostics
from harness import run_seed_ensemble
from importance import exact_shapley, load_profile, permutation_importance, profile_for, sample_background
from reporting import Report
from schemas import ImportanceProfileSchema, ShiftDiagnosticsSchema, VerdictSchema
from tabular import apply_split
from verdict import decide

logger = logging.getLogger(__name__)

EXIT_ROBUST = 0
EXIT_VULNERABLE = 2


@stage('fit_model')
def _fit(factory, train, seed):
    return factory(train, seed)


@stage('importance')
def _importance(method, importances_file, model, train, val, run_config, shapley_rows):
    seed = run_config.seeds[0]
    if importances_file:
        return load_profile(importances_file)
    if method == 'shapley':
        background = sample_background(train, run_config.background_size, seed)
        rows = sample_background(val, shapley_rows, seed + 1)
        return exact_shapley(model, rows, background, n_jobs=run_config.n_jobs).profile
    return permutation_importance(model, val, run_config.permutation_repeats, seed, n_jobs=run_config.n_jobs)


@diagnose_cli.command('diagnose')
@data_options
@run_options
@model_options
@click.option('--importance', 'importance_method', type=click.Choice(['permutation', 'shapley']),
              default='permutation', show_default=True)
@click.option('--importances', 'importances_file', type=click.Path(),
              help='Two-column (feature, importance) table replacing the computed profile')
@click.option('--shapley-rows', type=int, default=50, show_default=True, help='Validation rows explained')
@click.option('--task', help='Task name shown in reports')
@pass_config
@cli_errors
def diagnose(cfg, data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end,
             config_file, alpha, seeds, n_jobs, out_dir, fmt, model, n_trees, max_depth,
             importance_method, importances_file, shapley_rows, task):
    """Diagnose shift vulnerability; exit 0 when robust, 2 when vulnerable."""
    run_config = build_run_config(cfg, config_file, alpha=alpha, seeds=seeds, n_jobs=n_jobs,
                                  n_trees=n_trees, max_depth=max_depth)
    table, split = load_inputs(data_path, scenario, target, timestamp, numeric, train_end, val_end, test_end)
    train, val, test = stage('split')(apply_split)(table, split)
    factory = make_factory(model, run_config)
    model_fit = _fit(factory, train, run_config.seeds[0])
    profile = _importance(importance_method, importances_file, model_fit, train, val, run_config, shapley_rows)

    coverages = None
    if seeds is not None and len(run_config.seeds) >= 2:
        ensemble = run_seed_ensemble(table, split, factory, run_config.alpha, run_config.seeds,
                                     n_jobs=run_config.n_jobs)
        coverages = ensemble.test_coverages()

    importances = profile_for(profile, train.feature_names)
    diag = stage('diagnostics')(build_diagnostics)(train, test, importances, coverages)
    verdict = stage('verdict')(decide)(diag)

    name = task or task_name(data_path, scenario)
    report = Report(f"Shift diagnosis: {name}", run_config)
    report.headline = {
        'task': name,
        'status': verdict.status.value,
        'recommendation': verdict.recommendation.value,
        'mean_top5_jaccard': diag.mean_top5_jaccard,
        'primary_jaccard': diag.primary_jaccard,
        'label_entropy_bits': diag.label_entropy_bits,
        'top_class_share': diag.top_class_share,
        'concentration': diag.concentration,
        'seed_cov': 'n/a' if diag.seed_cov is None else diag.seed_cov,
    }
    feature_rows = [
        {
            'feature': feature,
            'jaccard': 'NOT_APPLICABLE' if jaccard is None else jaccard,
            'importance': importances[feature],
            'share': diag.importance_shares[feature],
        }
        for feature, jaccard in sorted(diag.per_feature_jaccard.items(),
                                       key=lambda item: (-importances[item[0]], item[0]))
    ]
    report.add_table('features', ['feature', 'jaccard', 'importance', 'share'], feature_rows, 'Feature stability')
    report.add_table('rules', ['rule', 'observed', 'comparison', 'threshold'],
                     [vars(rule) for rule in verdict.triggered_rules], 'Triggered rules')
    report.add_records('diagnostics', ShiftDiagnosticsSchema(), diag, many=False)
    report.add_records('verdict', VerdictSchema(), verdict, many=False)
    report.add_records('importance', ImportanceProfileSchema(), profile, many=False)
    report.notes.extend(verdict.notes)
    emit(report, fmt, out_dir, primary_table='features')
    sys.exit(EXIT_ROBUST if verdict.status.is_robust else EXIT_VULNERABLE)
