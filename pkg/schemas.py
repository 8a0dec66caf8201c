"""marshmallow schemas for run configuration, scenarios and every serialized result."""
import math

from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, pre_load, validate, validates_schema

from harness import Cadence
from importance import ImportanceMethod
from stats import CorrelationKind, PairedMethod
from tabular import ConcentrationMode, EntropyLevel, ShiftScenario, TaskKind, TemporalSplit
from verdict import Recommendation, VerdictStatus

UNIT = validate.Range(min=0.0, max=1.0)
OPEN_UNIT = validate.Range(min=0.0, max=1.0, min_inclusive=False, max_inclusive=False)


class FiniteOrSentinel(fields.Float):
    """Float that serializes infinities and None as readable sentinels"""

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return "NOT_APPLICABLE"
        if isinstance(value, float) and math.isinf(value):
            return "INF" if value > 0 else "-INF"
        return super()._serialize(value, attr, obj, **kwargs)


class RunConfigSchema(Schema):
    """Keys accepted in a --config JSON file; all optional"""

    class Meta:
        unknown = EXCLUDE

    alpha = fields.Float(validate=OPEN_UNIT)
    seeds = fields.String()
    n_jobs = fields.Integer(validate=validate.Range(min=1))
    n_trees = fields.Integer(validate=validate.Range(min=1))
    max_depth = fields.Integer(validate=validate.Range(min=1))
    row_subsample = fields.Float(validate=validate.Range(min=0.0, max=1.0, min_inclusive=False))
    background_size = fields.Integer(validate=validate.Range(min=1))
    permutation_repeats = fields.Integer(validate=validate.Range(min=1))
    n_boot = fields.Integer(validate=validate.Range(min=1))
    n_perm = fields.Integer(validate=validate.Range(min=1))
    gammas = fields.List(fields.Float(validate=validate.Range(min=0.0)))

    @pre_load
    def seeds_as_text(self, data, **kwargs):
        if isinstance(data.get("seeds"), list):
            data = dict(data, seeds=",".join(str(s) for s in data["seeds"]))
        return data


class ResolvedRunConfigSchema(RunConfigSchema):
    seeds = fields.List(fields.Integer())


class TemporalSplitSchema(Schema):
    train_end = fields.Integer(required=True)
    val_end = fields.Integer(required=True)
    test_end = fields.Integer(allow_none=True, load_default=None)

    @validates_schema
    def check_order(self, data, **kwargs):
        if data["train_end"] >= data["val_end"]:
            raise ValidationError("train_end must be < val_end")
        if data.get("test_end") is not None and data["val_end"] >= data["test_end"]:
            raise ValidationError("val_end must be < test_end")

    @post_load
    def make_split(self, data, **kwargs):
        return TemporalSplit(**data)


class ShiftScenarioSchema(Schema):
    n_features = fields.Integer(required=True, validate=validate.Range(min=1))
    n_classes = fields.Integer(required=True, validate=validate.Range(min=2))
    id_feature_turnover = fields.Float(required=True, validate=UNIT)
    concentration_mode = fields.Enum(ConcentrationMode, required=True)
    entropy_level = fields.Enum(EntropyLevel, required=True)
    n_train = fields.Integer(required=True, validate=validate.Range(min=1))
    n_val = fields.Integer(required=True, validate=validate.Range(min=1))
    n_test = fields.Integer(required=True, validate=validate.Range(min=1))
    seed = fields.Integer(required=True)
    train_periods = fields.Integer(validate=validate.Range(min=1))
    val_periods = fields.Integer(validate=validate.Range(min=1))
    test_periods = fields.Integer(validate=validate.Range(min=1))
    shift_period = fields.Integer(allow_none=True)
    n_id_values = fields.Integer(validate=validate.Range(min=1))
    label_noise = fields.Float(validate=UNIT)
    churn_features = fields.Integer(validate=validate.Range(min=0))
    task = fields.Enum(TaskKind)

    @post_load
    def make_scenario(self, data, **kwargs):
        return ShiftScenario(**data)


# ---------------------------------------------------------------------------
# Result records
# ---------------------------------------------------------------------------

class ColumnSummarySchema(Schema):
    mean = fields.Float()
    std = fields.Float()
    median = fields.Float()
    iqr = fields.Float()


class SeedRowSchema(Schema):
    seed = fields.Integer()
    val_coverage = fields.Float()
    test_coverage = fields.Float()
    mean_set_size_val = fields.Float()
    mean_set_size_test = fields.Float()
    n_cal = fields.Integer()
    threshold = fields.Float()


class SeedEnsembleSchema(Schema):
    alpha = fields.Float()
    per_seed = fields.List(fields.Nested(SeedRowSchema))
    summary = fields.Dict(keys=fields.String(), values=fields.Nested(ColumnSummarySchema))
    drop = fields.Float()
    raw_drop = fields.Float()


class CqrRowSchema(Schema):
    seed = fields.Integer()
    val_coverage = fields.Float()
    test_coverage = fields.Float()
    width_val = fields.Float()
    width_test = fields.Float()
    margin = fields.Float()


class CqrEnsembleSchema(Schema):
    alpha = fields.Float()
    group_feature = fields.String()
    group_jaccard = fields.Float()
    per_seed = fields.List(fields.Nested(CqrRowSchema))
    summary = fields.Dict(keys=fields.String(), values=fields.Nested(ColumnSummarySchema))
    drop = fields.Float()


class ProtectiveFeatureSchema(Schema):
    feature = fields.String()
    jaccard = fields.Float()
    share = fields.Float()


class KnifeEdgeSchema(Schema):
    cov = FiniteOrSentinel()
    flagged = fields.Boolean()
    mean = fields.Float()
    median = fields.Float()
    iqr = fields.Float()
    std = fields.Float()


class ShiftDiagnosticsSchema(Schema):
    per_feature_jaccard = fields.Dict(keys=fields.String(), values=FiniteOrSentinel(allow_none=True))
    mean_top5_jaccard = fields.Float()
    primary_jaccard = fields.Float()
    top_feature = fields.String()
    label_entropy_bits = fields.Float()
    top_class_share = fields.Float()
    n_classes = fields.Integer()
    concentration = fields.Float()
    importance_shares = fields.Dict(keys=fields.String(), values=fields.Float())
    protective_features = fields.List(fields.Nested(ProtectiveFeatureSchema))
    seed_cov = FiniteOrSentinel(allow_none=True)
    knife_edge = fields.Nested(KnifeEdgeSchema, allow_none=True)


class TriggeredRuleSchema(Schema):
    rule = fields.String()
    observed = FiniteOrSentinel()
    threshold = fields.Float()
    comparison = fields.String()


class VerdictSchema(Schema):
    status = fields.Enum(VerdictStatus)
    triggered_rules = fields.List(fields.Nested(TriggeredRuleSchema))
    recommendation = fields.Enum(Recommendation)
    notes = fields.List(fields.String())


class ImportanceProfileSchema(Schema):
    per_feature = fields.Dict(keys=fields.String(), values=fields.Float())
    method = fields.Enum(ImportanceMethod)
    split_tag = fields.String()
    n_samples = fields.Integer()
    raw = fields.Dict(keys=fields.String(), values=fields.Float())


class FeatureDynamicsSchema(Schema):
    feature = fields.String()
    before = fields.Float()
    after = fields.Float()
    ratio = FiniteOrSentinel()
    rank_before = fields.Integer()
    rank_after = fields.Integer()
    rank_change = fields.Integer()


class PairedTestSchema(Schema):
    statistic = fields.Float()
    p_value = fields.Float()
    n_effective = fields.Integer()
    method = fields.Enum(PairedMethod)


class PeriodCoverageSchema(Schema):
    period = fields.Integer()
    coverage = fields.Float()
    n_eval = fields.Integer()
    mean_set_size = fields.Float()
    retrained = fields.Boolean()
    within_tolerance = fields.Boolean()


class ScheduleResultSchema(Schema):
    cadence = fields.Enum(Cadence)
    alpha = fields.Float()
    retrain_count = fields.Integer()
    retrain_periods = fields.List(fields.Integer())
    mean = fields.Float()
    min = fields.Float()
    std = fields.Float()
    trace = fields.List(fields.Nested(PeriodCoverageSchema))
    paired = fields.Nested(PairedTestSchema, allow_none=True)


class PlaceboSchema(Schema):
    placebo_drop = fields.Float()
    shift_drop = fields.Float()
    ratio = FiniteOrSentinel(allow_none=True)
    placebo = fields.Nested(SeedEnsembleSchema)
    shift = fields.Nested(SeedEnsembleSchema)


class AciRowSchema(Schema):
    method = fields.String()
    gamma = fields.Float(allow_none=True)
    coverage = fields.Float()
    mean_set_size = fields.Float()
    final_alpha = fields.Float()


class CorrelationResultSchema(Schema):
    estimate = fields.Float()
    kind = fields.Enum(CorrelationKind)
    n = fields.Integer()
    ci_low = fields.Float(allow_none=True)
    ci_high = fields.Float(allow_none=True)
    p_value = fields.Float(allow_none=True)
    skipped_resamples = fields.Integer()


class StratumResultSchema(Schema):
    stratum = fields.String()
    n = fields.Integer()
    result = fields.Nested(CorrelationResultSchema, allow_none=True)
    skipped_reason = fields.String(allow_none=True)
