"""Decision framework turning ShiftDiagnostics into a deployment verdict.

Rules run in order and short-circuit:
  1. label entropy < 2.5 bits or top class > 50%      -> ROBUST_LOW_COMPLEXITY
  2. mean top-5 Jaccard < 0.1 / > 0.4                 -> context flags only
  3. concentration <= 0.40                             -> ROBUST_DISTRIBUTED
     concentration > 0.40 with a protective feature    -> ROBUST_PROTECTED
     concentration > 0.40 otherwise                    -> VULNERABLE, or
                                                          CATASTROPHIC_EXPECTED
                                                          under the < 0.1 flag
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List

from diagnostics import ShiftDiagnostics
from exceptions import DiagnosticsError

logger = logging.getLogger(__name__)

ENTROPY_BITS = 2.5
TOP_CLASS_SHARE = 0.5
CATASTROPHIC_JACCARD = 0.1
ROBUST_JACCARD = 0.4
CONCENTRATION = 0.40
KNIFE_EDGE_COV = 0.5


class VerdictStatus(Enum):
    ROBUST_LOW_COMPLEXITY = "ROBUST_LOW_COMPLEXITY"
    ROBUST_DISTRIBUTED = "ROBUST_DISTRIBUTED"
    ROBUST_PROTECTED = "ROBUST_PROTECTED"
    VULNERABLE = "VULNERABLE"
    CATASTROPHIC_EXPECTED = "CATASTROPHIC_EXPECTED"

    @property
    def is_robust(self) -> bool:
        return self.value.startswith("ROBUST")


class Recommendation(Enum):
    NO_RETRAIN = "NO_RETRAIN"
    MONITOR_ONLY = "MONITOR_ONLY"
    QUARTERLY_RETRAIN = "QUARTERLY_RETRAIN"


@dataclass(frozen=True)
class TriggeredRule:
    rule: str
    observed: float
    threshold: float
    comparison: str

    def __str__(self):
        return f"{self.rule}: {self.observed:.4g} {self.comparison} {self.threshold:g}"


@dataclass
class Verdict:
    status: VerdictStatus
    triggered_rules: List[TriggeredRule]
    recommendation: Recommendation
    notes: List[str] = field(default_factory=list)


def _require(diag: ShiftDiagnostics):
    for name in ("mean_top5_jaccard", "label_entropy_bits", "top_class_share", "concentration"):
        value = getattr(diag, name, None)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            raise DiagnosticsError(f"Diagnostics field {name!r} is missing")


def _knife_edge(diag: ShiftDiagnostics) -> bool:
    if diag.knife_edge is not None:
        return diag.knife_edge.flagged
    return diag.seed_cov is not None and diag.seed_cov > KNIFE_EDGE_COV


def decide(diag: ShiftDiagnostics) -> Verdict:
    _require(diag)
    rules, notes = [], []

    if diag.label_entropy_bits < ENTROPY_BITS or diag.top_class_share > TOP_CLASS_SHARE:
        if diag.label_entropy_bits < ENTROPY_BITS:
            rules.append(TriggeredRule("LOW_ENTROPY", diag.label_entropy_bits, ENTROPY_BITS, "<"))
        if diag.top_class_share > TOP_CLASS_SHARE:
            rules.append(TriggeredRule("DOMINANT_CLASS", diag.top_class_share, TOP_CLASS_SHARE, ">"))
        status = VerdictStatus.ROBUST_LOW_COMPLEXITY
    else:
        catastrophic_context = diag.mean_top5_jaccard < CATASTROPHIC_JACCARD
        if catastrophic_context:
            rules.append(TriggeredRule("SEVERE_INSTABILITY", diag.mean_top5_jaccard, CATASTROPHIC_JACCARD, "<"))
        elif diag.mean_top5_jaccard > ROBUST_JACCARD:
            rules.append(TriggeredRule("STABLE_FEATURES", diag.mean_top5_jaccard, ROBUST_JACCARD, ">"))
        else:
            notes.append("stability-indeterminate: mean top-5 Jaccard lies between 0.1 and 0.4")

        if diag.concentration <= CONCENTRATION:
            rules.append(TriggeredRule("DISTRIBUTED_IMPORTANCE", diag.concentration, CONCENTRATION, "<="))
            status = VerdictStatus.ROBUST_DISTRIBUTED
        else:
            rules.append(TriggeredRule("CONCENTRATED_IMPORTANCE", diag.concentration, CONCENTRATION, ">"))
            if diag.protective_features:
                best = diag.protective_features[0]
                rules.append(TriggeredRule(f"PROTECTIVE_FEATURE[{best.feature}]", best.share, 0.15, ">"))
                status = VerdictStatus.ROBUST_PROTECTED
            elif catastrophic_context:
                status = VerdictStatus.CATASTROPHIC_EXPECTED
            else:
                status = VerdictStatus.VULNERABLE
                notes.append(
                    f"moderate stability (mean top-5 Jaccard {diag.mean_top5_jaccard:.2f}) "
                    "weakens the concentration signal"
                )

    if status.is_robust:
        recommendation = Recommendation.NO_RETRAIN
        if _knife_edge(diag):
            cov = diag.knife_edge.cov if diag.knife_edge is not None else diag.seed_cov
            rules.append(TriggeredRule("KNIFE_EDGE", cov, KNIFE_EDGE_COV, ">"))
            notes.append("MONITOR: test coverage varies sharply across seeds")
            recommendation = Recommendation.MONITOR_ONLY
    else:
        recommendation = Recommendation.QUARTERLY_RETRAIN
        if _knife_edge(diag):
            notes.append("MONITOR: test coverage varies sharply across seeds")

    logger.info(f"Verdict {status.value} ({recommendation.value}) from {len(rules)} rule(s)")
    return Verdict(status, rules, recommendation, notes)
