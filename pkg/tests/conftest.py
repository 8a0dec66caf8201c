"""Test configuration for shiftcp"""

import json
import logging

import pytest
from click.testing import CliRunner

from app import create_cli
from config import TestingConfig
from learner import TreeConfig
from tabular import ConcentrationMode, EntropyLevel, ShiftScenario, generate_scenario

FAST_TREES = TreeConfig(n_trees=5)


def scenario(**overrides):
    """Small scenario with sensible defaults; override any ShiftScenario field

    Eight classes over twenty ID values keep the training labels above 2.5 bits.
    """
    values = dict(
        n_features=4,
        n_classes=8,
        id_feature_turnover=0.0,
        concentration_mode=ConcentrationMode.SINGLE_DOMINANT,
        entropy_level=EntropyLevel.HIGH,
        n_train=600,
        n_val=400,
        n_test=400,
        seed=7,
    )
    values.update(overrides)
    return ShiftScenario(**values)


def scenario_json(**overrides):
    """The same scenario as inline JSON for --scenario"""
    spec = scenario(**overrides)
    payload = {name: getattr(spec, name) for name in spec.__dataclass_fields__}
    for name, value in payload.items():
        if hasattr(value, 'value'):
            payload[name] = value.value
    return json.dumps(payload)


@pytest.fixture
def app_config():
    return TestingConfig


@pytest.fixture
def cli():
    return create_cli('testing')


@pytest.fixture
def runner():
    """Create test runner with stderr kept apart from stdout"""
    return CliRunner(mix_stderr=False)


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop handlers bound to streams of a finished CliRunner invocation"""
    yield
    for handler in list(logging.root.handlers):
        logging.root.removeHandler(handler)


@pytest.fixture(scope='session')
def exchangeable_tables():
    """No turnover anywhere: train, validation and test are exchangeable"""
    return generate_scenario(scenario(id_feature_turnover=0.0))


@pytest.fixture(scope='session')
def severe_tables():
    """Every ID value in the test span is new; labels are a pure function of the ID"""
    return generate_scenario(scenario(id_feature_turnover=1.0, label_noise=0.0))


@pytest.fixture
def tmp_csv(tmp_path):
    """Factory writing rows (first row = header) to a CSV file and returning its path"""
    def write(rows, name='data.csv'):
        path = tmp_path / name
        path.write_text('\n'.join(','.join(str(cell) for cell in row) for row in rows) + '\n', encoding='utf-8')
        return str(path)
    return write
