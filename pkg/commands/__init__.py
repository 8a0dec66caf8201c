"""Shared option sets and helpers for the command groups."""
import json
import logging
import os
from functools import wraps

import click
from marshmallow import ValidationError

from config import resolve_run_config
from decorators import stage
from exceptions import ConfigError, ScenarioError, StageError
from harness import frequency_factory, tree_factory
from learner import TreeConfig
from reporting import records_as_json, render_report, save_report, table_to_csv
from schemas import RunConfigSchema, ShiftScenarioSchema, TemporalSplitSchema
from tabular import TableSchema, generate_scenario, load_table

logger = logging.getLogger(__name__)


def data_options(func):
    """--data/--scenario source plus schema roles and split bounds"""
    options = [
        click.option('--data', 'data_path', type=click.Path(), help='CSV file with a header row'),
        click.option('--scenario', help='Scenario as a JSON file path or inline JSON object'),
        click.option('--target', default='label', show_default=True, help='Target column'),
        click.option('--timestamp', default='period', show_default=True, help='Integer period column'),
        click.option('--numeric', multiple=True, help='Numeric column (repeatable)'),
        click.option('--train-end', type=int, help='First period after the train span'),
        click.option('--val-end', type=int, help='First period after the validation span'),
        click.option('--test-end', type=int, help='First period excluded from the test span'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def run_options(func):
    options = [
        click.option('--config', 'config_file', type=click.Path(), help='JSON run configuration'),
        click.option('--alpha', type=float, help='Miscoverage target'),
        click.option('--seeds', help="Seed range '42..91' or list '1,2,3'"),
        click.option('--n-jobs', type=int, help='Parallel seed trials'),
        click.option('--out', 'out_dir', type=click.Path(), help='Directory for CSV/JSONL/report files'),
        click.option('--format', 'fmt', type=click.Choice(['text', 'json', 'csv']), default='text',
                     show_default=True),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def model_options(func):
    options = [
        click.option('--model', type=click.Choice(['trees', 'frequency']), default='trees', show_default=True),
        click.option('--n-trees', type=int),
        click.option('--max-depth', type=int),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def pass_config(func):
    """Inject the active Config class from the click context"""
    @click.pass_context
    @wraps(func)
    def wrapper(ctx, *args, **kwargs):
        return func(ctx.obj['config'], *args, **kwargs)
    return wrapper


@stage('config')
def build_run_config(cfg, config_file=None, **overrides):
    file_values = {}
    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"Config file {config_file!r} does not exist")
        with open(config_file, encoding='utf-8') as handle:
            try:
                file_values = RunConfigSchema().load(json.load(handle))
            except (ValidationError, json.JSONDecodeError) as e:
                raise ConfigError(f"Invalid config file {config_file}: {e}") from e
    try:
        return resolve_run_config(cfg, file_values, overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_scenario(text):
    try:
        payload = json.loads(text) if text.lstrip().startswith('{') else _read_json(text)
        return ShiftScenarioSchema().load(payload)
    except ValidationError as e:
        raise ScenarioError(f"Invalid scenario: {e.messages}") from e


@stage('generate_scenario')
def _generate(text):
    return generate_scenario(parse_scenario(text))


def _read_json(path):
    if not os.path.exists(path):
        raise ScenarioError(f"Scenario file {path!r} does not exist")
    with open(path, encoding='utf-8') as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"Scenario file {path} is not valid JSON: {e}") from e


@stage('config')
def split_from_bounds(train_end, val_end, test_end):
    try:
        return TemporalSplitSchema().load({'train_end': train_end, 'val_end': val_end, 'test_end': test_end})
    except ValidationError as e:
        raise ConfigError(f"Invalid split bounds: {e.messages}") from e


@stage('load_table')
def _load(data_path, target, timestamp, numeric):
    return load_table(data_path, TableSchema(target=target, timestamp=timestamp, numeric=tuple(numeric)))


def load_inputs(data_path=None, scenario=None, target='label', timestamp='period', numeric=(),
                train_end=None, val_end=None, test_end=None):
    """Return (table, split) from exactly one of a CSV file or a scenario"""
    if (data_path is None) == (scenario is None):
        raise StageError('config', 'exactly one of --data or --scenario is required')
    if scenario is not None:
        table, split = _generate(scenario)
        if train_end is None and val_end is None and test_end is None:
            return table, split
        return table, split_from_bounds(
            train_end if train_end is not None else split.train_end,
            val_end if val_end is not None else split.val_end,
            test_end,
        )
    table = _load(data_path, target, timestamp, numeric)
    if train_end is None or val_end is None:
        raise StageError('config', '--train-end and --val-end are required with --data')
    return table, split_from_bounds(train_end, val_end, test_end)


def make_factory(model, run_config):
    if model == 'frequency':
        return frequency_factory()
    try:
        tree_config = TreeConfig(run_config.n_trees, run_config.max_depth, run_config.row_subsample)
    except ValueError as e:
        raise StageError('config', str(e)) from e
    return tree_factory(tree_config)


def emit(report, fmt='text', out_dir=None, primary_table=None):
    """Print the report in the requested format; optionally save every file"""
    if fmt == 'json':
        click.echo(records_as_json(report))
    elif fmt == 'csv':
        table = next((t for t in report.tables if t.name == primary_table), report.tables[0])
        click.echo(table_to_csv(table), nl=False)
    else:
        click.echo(render_report(report), nl=False)
    if out_dir:
        save_report(report, out_dir)


def task_name(data_path, scenario):
    if data_path:
        return os.path.splitext(os.path.basename(data_path))[0]
    return 'scenario'
