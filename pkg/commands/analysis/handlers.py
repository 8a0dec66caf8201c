import logging
import os

import click
import pandas as pd

from commands import build_run_config, emit, pass_config
from commands.analysis import analysis_cli
from decorators import cli_errors, stage
from exceptions import MissingColumn, MissingFile
from importance import importance_dynamics, load_profile
from reporting import Report
from schemas import FeatureDynamicsSchema, StratumResultSchema
from stats import CorrelationKind, stratified_correlation

logger = logging.getLogger(__name__)


@stage('load_metrics')
def _load_metrics(path, columns):
    if not os.path.exists(path):
        raise MissingFile(f"Metrics file {path!r} does not exist")
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MissingColumn(f"Metrics file {path} lacks columns {missing}")
    return frame.to_dict(orient='records')


def _report_options(func):
    options = [
        click.option('--config', 'config_file', type=click.Path(), help='JSON run configuration'),
        click.option('--out', 'out_dir', type=click.Path(), help='Directory for CSV/JSONL/report files'),
        click.option('--format', 'fmt', type=click.Choice(['text', 'json', 'csv']), default='text',
                     show_default=True),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@analysis_cli.command('correlate')
@click.option('--metrics', 'metrics_path', required=True, type=click.Path(),
              help='CSV with one row per task')
@click.option('--x', 'x_key', default='mean_top5_jaccard', show_default=True)
@click.option('--y', 'y_key', default='drop', show_default=True)
@click.option('--stratum-key', default='mean_top5_jaccard', show_default=True)
@click.option('--threshold', type=float, default=0.1, show_default=True, help='Severe/moderate boundary')
@click.option('--kind', type=click.Choice([k.value for k in CorrelationKind], case_sensitive=False),
              default='SPEARMAN', show_default=True)
@click.option('--n-boot', type=int)
@click.option('--n-perm', type=int)
@click.option('--seed', type=int, default=0, show_default=True)
@_report_options
@pass_config
@cli_errors
def correlate(cfg, metrics_path, x_key, y_key, stratum_key, threshold, kind, n_boot, n_perm, seed,
              config_file, out_dir, fmt):
    """Correlate a stability metric with coverage drop, overall and per stratum."""
    run_config = build_run_config(cfg, config_file, n_boot=n_boot, n_perm=n_perm)
    records = _load_metrics(metrics_path, {x_key, y_key, stratum_key})
    results = stage('correlation')(stratified_correlation)(
        records, x_key, y_key, stratum_key, threshold, CorrelationKind(kind.upper()),
        n_boot=run_config.n_boot, n_perm=run_config.n_perm, seed=seed,
    )

    report = Report(f"{kind.capitalize()} correlation of {x_key} with {y_key}", run_config)
    rows = []
    for name, stratum in results.items():
        row = {'stratum': name, 'n': stratum.n}
        if stratum.result is None:
            row['note'] = stratum.skipped_reason
        else:
            r = stratum.result
            row.update(estimate=r.estimate, ci_low=r.ci_low, ci_high=r.ci_high, p_value=r.p_value,
                       skipped_resamples=r.skipped_resamples)
        rows.append(row)
    overall = results['all'].result
    if overall is not None:
        report.headline = {'estimate': overall.estimate, 'p_value': overall.p_value, 'n': overall.n}
    report.add_table('correlation', ['stratum', 'n', 'estimate', 'ci_low', 'ci_high', 'p_value',
                                     'skipped_resamples', 'note'], rows, 'Correlation by stratum')
    report.add_records('correlation', StratumResultSchema(), list(results.values()))
    emit(report, fmt, out_dir, primary_table='correlation')


@analysis_cli.command('dynamics')
@click.option('--before', 'before_path', required=True, type=click.Path(), help='Importance profile before the shift')
@click.option('--after', 'after_path', required=True, type=click.Path(), help='Importance profile after the shift')
@click.option('--top-k', type=int, default=5, show_default=True)
@_report_options
@pass_config
@cli_errors
def dynamics(cfg, before_path, after_path, top_k, config_file, out_dir, fmt):
    """Importance ratios and rank changes between two profiles."""
    run_config = build_run_config(cfg, config_file)
    before = stage('load_profile')(load_profile)(before_path, 'before')
    after = stage('load_profile')(load_profile)(after_path, 'after')
    result = stage('dynamics')(importance_dynamics)(before, after, top_k)

    report = Report("Importance dynamics", run_config)
    report.headline = {'mean_top_rank_change': result.mean_top_rank_change, 'top_k': result.top_k}
    report.add_table('dynamics', ['feature', 'before', 'after', 'ratio', 'rank_before', 'rank_after', 'rank_change'],
                     [vars(row) for row in result.features], 'Importance before vs after')
    report.add_records('dynamics', FeatureDynamicsSchema(), result.features)
    emit(report, fmt, out_dir, primary_table='dynamics')
