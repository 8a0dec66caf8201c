"""Unit tests for marshmallow schemas"""

import math

import pytest
from marshmallow import ValidationError

from diagnostics import KnifeEdge
from harness import NOT_APPLICABLE, PlaceboResult, SeedEnsembleResult, SeedRow
from schemas import KnifeEdgeSchema, PlaceboSchema, RunConfigSchema, ShiftScenarioSchema, TemporalSplitSchema, \
    VerdictSchema
from tabular import ConcentrationMode, ShiftScenario, TemporalSplit
from verdict import Recommendation, TriggeredRule, Verdict, VerdictStatus

SCENARIO = {
    'n_features': 4,
    'n_classes': 8,
    'id_feature_turnover': 0.5,
    'concentration_mode': 'DISTRIBUTED',
    'entropy_level': 'HIGH',
    'n_train': 100,
    'n_val': 50,
    'n_test': 50,
    'seed': 1,
}


class TestRunConfigSchema:
    """Test --config file validation"""

    def test_seed_list_becomes_text(self):
        """Test a JSON list of seeds loads as a seed range string"""
        assert RunConfigSchema().load({'seeds': [3, 4]}) == {'seeds': '3,4'}

    def test_unknown_keys_dropped(self):
        """Test unknown keys are excluded rather than rejected"""
        assert RunConfigSchema().load({'alpha': 0.2, 'colour': 'red'}) == {'alpha': 0.2}

    @pytest.mark.parametrize('payload', [{'alpha': 0.0}, {'alpha': 1.5}, {'n_jobs': 0}, {'gammas': [-0.1]}])
    def test_out_of_range(self, payload):
        """Test out-of-range values raise ValidationError"""
        with pytest.raises(ValidationError):
            RunConfigSchema().load(payload)


class TestScenarioSchemas:
    """Test scenario and split loading"""

    def test_scenario_loads_dataclass(self):
        """Test a scenario payload becomes a ShiftScenario with defaults"""
        spec = ShiftScenarioSchema().load(SCENARIO)
        assert isinstance(spec, ShiftScenario)
        assert spec.concentration_mode is ConcentrationMode.DISTRIBUTED
        assert spec.train_periods == 6

    def test_scenario_rejects_bad_turnover(self):
        """Test turnover outside [0, 1] is rejected"""
        with pytest.raises(ValidationError):
            ShiftScenarioSchema().load(dict(SCENARIO, id_feature_turnover=1.5))

    def test_split(self):
        """Test ordered bounds load as a TemporalSplit"""
        assert TemporalSplitSchema().load({'train_end': 3, 'val_end': 5}) == TemporalSplit(3, 5, None)

    @pytest.mark.parametrize('payload', [{'train_end': 5, 'val_end': 5}, {'train_end': 3, 'val_end': 6, 'test_end': 6}])
    def test_split_order(self, payload):
        """Test unordered bounds raise ValidationError"""
        with pytest.raises(ValidationError):
            TemporalSplitSchema().load(payload)


class TestResultSchemas:
    """Test serialization of result records"""

    def test_infinite_cov(self):
        """Test infinite CoV serializes as a sentinel"""
        knife = KnifeEdge(cov=math.inf, flagged=True, mean=0.0, median=0.0, iqr=0.0, std=0.0)
        assert KnifeEdgeSchema().dump(knife)['cov'] == 'INF'

    def test_undefined_ratio(self):
        """Test an undefined placebo ratio serializes as NOT_APPLICABLE"""
        rows = [SeedRow(seed, 0.9, 0.9, 1.0, 1.0, 100, 0.9) for seed in (0, 1)]
        flat = SeedEnsembleResult(rows, 0.1)
        dumped = PlaceboSchema().dump(PlaceboResult(flat, flat))
        assert dumped['ratio'] == NOT_APPLICABLE
        assert dumped['placebo']['per_seed'][1]['seed'] == 1

    def test_verdict(self):
        """Test verdict enums serialize by name"""
        verdict = Verdict(VerdictStatus.VULNERABLE, [TriggeredRule('CONCENTRATED_IMPORTANCE', 0.48, 0.4, '>')],
                          Recommendation.QUARTERLY_RETRAIN, ['note'])
        dumped = VerdictSchema().dump(verdict)
        assert dumped['status'] == 'VULNERABLE'
        assert dumped['recommendation'] == 'QUARTERLY_RETRAIN'
        assert dumped['triggered_rules'][0]['observed'] == 0.48
