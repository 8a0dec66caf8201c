"""Pre-deployment shift diagnostics."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from exceptions import DiagnosticsError
from tabular import MISSING, Column, FeatureTable

logger = logging.getLogger(__name__)

PROTECTIVE_MIN_JACCARD = 0.5
PROTECTIVE_MIN_SHARE = 0.15
KNIFE_EDGE_COV = 0.5
KNIFE_EDGE_STD = 0.30
TOP_K = 5


@dataclass(frozen=True)
class ProtectiveFeature:
    feature: str
    jaccard: float
    share: float


@dataclass(frozen=True)
class KnifeEdge:
    cov: float
    flagged: bool
    mean: float
    median: float
    iqr: float
    std: float


@dataclass
class ShiftDiagnostics:
    """Everything the verdict engine reads.

    per_feature_jaccard maps numeric features to None (not applicable).
    primary_jaccard is the Jaccard of the single most important feature,
    mean_top5_jaccard the mean over the most important categorical ones.
    """
    per_feature_jaccard: Dict[str, Optional[float]]
    mean_top5_jaccard: float
    primary_jaccard: float
    top_feature: str
    label_entropy_bits: float
    top_class_share: float
    n_classes: int
    concentration: float
    importance_shares: Dict[str, float]
    protective_features: List[ProtectiveFeature] = field(default_factory=list)
    seed_cov: Optional[float] = None
    knife_edge: Optional[KnifeEdge] = None


def jaccard_sets(a: set, b: set) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def jaccard_stability(train_col: Column, test_col: Column) -> float:
    if not (train_col.is_categorical and test_col.is_categorical):
        raise DiagnosticsError(f"Jaccard needs categorical columns; {train_col.name!r} is numeric")
    if train_col.vocabulary != test_col.vocabulary:
        # codes from different tables are not comparable, fall back to decoded values
        a = {v for v in train_col.decode() if v is not None}
        b = {v for v in test_col.decode() if v is not None}
        return jaccard_sets(a, b)
    return jaccard_sets(train_col.present_codes(), test_col.present_codes())


def _label_codes(labels: Union[Column, Sequence]) -> np.ndarray:
    values = labels.values if isinstance(labels, Column) else np.asarray(labels)
    if len(values) == 0:
        raise DiagnosticsError("Label column is empty")
    if values.dtype.kind in "iu":
        values = values[values != MISSING]
    _, counts = np.unique(values, return_counts=True)
    if len(counts) == 0:
        raise DiagnosticsError("Label column holds only missing values")
    return counts


def label_entropy(labels: Union[Column, Sequence]) -> float:
    counts = _label_codes(labels)
    p = counts / counts.sum()
    return float(max(0.0, -np.sum(p * np.log2(p))))


def top_class_share(labels: Union[Column, Sequence]) -> float:
    counts = _label_codes(labels)
    return float(counts.max() / counts.sum())


def _as_array(importances: Union[Mapping[str, float], Sequence[float]]) -> np.ndarray:
    values = list(importances.values()) if isinstance(importances, Mapping) else list(importances)
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DiagnosticsError("Importances must be non-negative")
    if values.size == 0 or not np.any(values > 0):
        raise DiagnosticsError("At least one importance must be positive")
    return values


def concentration_index(importances: Union[Mapping[str, float], Sequence[float]]) -> float:
    values = _as_array(importances)
    return float(values.max() / values.sum())


def importance_shares(importances: Mapping[str, float]) -> Dict[str, float]:
    total = _as_array(importances).sum()
    return {name: float(value) / total for name, value in importances.items()}


def top_features(importances: Mapping[str, float], k: Optional[int] = None) -> List[str]:
    """Names by descending importance, ties by name"""
    ordered = sorted(importances, key=lambda name: (-importances[name], name))
    return ordered if k is None else ordered[:k]


def find_protective_features(per_feature_jaccard: Mapping[str, Optional[float]],
                             importance_shares: Mapping[str, float]) -> List[ProtectiveFeature]:
    if set(per_feature_jaccard) != set(importance_shares):
        raise DiagnosticsError("Jaccard and importance maps cover different features")
    if not importance_shares:
        return []
    top = top_features(importance_shares, 1)[0]
    found = [
        ProtectiveFeature(name, float(jaccard), float(importance_shares[name]))
        for name, jaccard in per_feature_jaccard.items()
        if name != top and jaccard is not None
        and jaccard > PROTECTIVE_MIN_JACCARD and importance_shares[name] > PROTECTIVE_MIN_SHARE
    ]
    return sorted(found, key=lambda p: (-p.share, p.feature))


def knife_edge_cov(coverages: Sequence[float]) -> KnifeEdge:
    values = np.asarray(coverages, dtype=np.float64)
    if len(values) < 2:
        raise DiagnosticsError(f"Knife-edge check needs at least 2 seeds, got {len(values)}")
    mean = float(values.mean())
    std = float(values.std(ddof=0))
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    if mean == 0.0:
        return KnifeEdge(math.inf, True, mean, float(median), float(q3 - q1), std)
    cov = std / mean
    flagged = cov > KNIFE_EDGE_COV and std > KNIFE_EDGE_STD
    return KnifeEdge(cov, bool(flagged), mean, float(median), float(q3 - q1), std)


def per_feature_jaccard(train: FeatureTable, test: FeatureTable) -> Dict[str, Optional[float]]:
    result = {}
    for name in train.feature_names:
        column = train.column(name)
        result[name] = jaccard_stability(column, test.column(name)) if column.is_categorical else None
    return result


def build_diagnostics(train: FeatureTable, test: FeatureTable, importances: Mapping[str, float],
                      seed_coverages: Optional[Sequence[float]] = None, top_k: int = TOP_K) -> ShiftDiagnostics:
    """Assemble ShiftDiagnostics from the train/test spans and an importance map.

    Label entropy and class share describe the training labels.
    """
    jaccard = per_feature_jaccard(train, test)
    missing = set(jaccard) - set(importances)
    if missing:
        raise DiagnosticsError(f"Importance profile lacks features {sorted(missing)}")
    importances = {name: float(importances[name]) for name in jaccard}
    shares = importance_shares(importances)
    ranked = top_features(importances)
    categorical = [name for name in ranked if jaccard[name] is not None]
    if not categorical:
        raise DiagnosticsError("No categorical feature to measure stability on")
    top5 = categorical[:top_k]
    primary = categorical[0]
    knife = knife_edge_cov(seed_coverages) if seed_coverages is not None else None
    diagnostics = ShiftDiagnostics(
        per_feature_jaccard=jaccard,
        mean_top5_jaccard=float(np.mean([jaccard[name] for name in top5])),
        primary_jaccard=float(jaccard[primary]),
        top_feature=ranked[0],
        label_entropy_bits=label_entropy(train.target_column),
        top_class_share=top_class_share(train.target_column),
        n_classes=len(train.target_column.vocabulary),
        concentration=concentration_index(importances),
        importance_shares=shares,
        protective_features=find_protective_features(jaccard, shares),
        seed_cov=knife.cov if knife is not None else None,
        knife_edge=knife,
    )
    logger.info(
        f"Diagnostics: mean top-{top_k} Jaccard {diagnostics.mean_top5_jaccard:.3f}, "
        f"entropy {diagnostics.label_entropy_bits:.2f} bits, concentration {diagnostics.concentration:.3f}"
    )
    return diagnostics
