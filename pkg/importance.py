"""Feature importance: permutation log-loss deltas and an exact Shapley oracle."""
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from exceptions import ImportanceError, MissingColumn, MissingFile
from extensions import run_parallel
from learner import ClassifierModel
from tabular import MISSING, FeatureTable

logger = logging.getLogger(__name__)

LOG_LOSS_EPS = 1e-15
MAX_SHAPLEY_FEATURES = 12


class ImportanceMethod(Enum):
    PERMUTATION = "PERMUTATION"
    EXACT_SHAPLEY = "EXACT_SHAPLEY"
    EXTERNAL = "EXTERNAL"


@dataclass
class ImportanceProfile:
    """Non-negative importance per feature; `raw` keeps unclamped permutation deltas"""
    per_feature: Dict[str, float]
    method: ImportanceMethod
    split_tag: str
    n_samples: int
    raw: Dict[str, float] = field(default_factory=dict)

    def ranked(self) -> List[str]:
        return sorted(self.per_feature, key=lambda name: (-self.per_feature[name], name))


def log_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(picked, LOG_LOSS_EPS, 1.0))))


def _target_codes(data: FeatureTable) -> np.ndarray:
    labels = data.target_column.values
    if np.any(labels == MISSING):
        raise ImportanceError("Permutation importance needs a target on every row")
    return labels


def permutation_importance(model: ClassifierModel, data: FeatureTable, n_repeats: int = 5, seed: int = 0,
                           split_tag: str = "validation", n_jobs: int = 1) -> ImportanceProfile:
    if data.n_rows == 0:
        raise ImportanceError("Cannot compute importance on an empty table")
    if n_repeats < 1:
        raise ImportanceError(f"n_repeats must be >= 1, got {n_repeats}")
    features = data.feature_names
    if data.n_rows == 1:
        logger.warning("Single-row table: every permutation is the identity, importances are 0")
        zeros = {name: 0.0 for name in features}
        return ImportanceProfile(zeros, ImportanceMethod.PERMUTATION, split_tag, 1, dict(zeros))

    labels = _target_codes(data)
    baseline = log_loss(model.predict_proba(data), labels)

    def feature_delta(position: int) -> float:
        name = features[position]
        values = data.column(name).values
        deltas = []
        for repeat in range(n_repeats):
            rng = np.random.default_rng([seed, position, repeat])
            permuted = data.with_values(name, values[rng.permutation(data.n_rows)])
            deltas.append(log_loss(model.predict_proba(permuted), labels) - baseline)
        return float(np.mean(deltas))

    raw = dict(zip(features, run_parallel(feature_delta, range(len(features)), n_jobs=n_jobs)))
    clamped = {name: max(0.0, value) for name, value in raw.items()}
    logger.debug(f"Permutation importance on {data.n_rows} {split_tag} rows: baseline log-loss {baseline:.4f}")
    return ImportanceProfile(clamped, ImportanceMethod.PERMUTATION, split_tag, data.n_rows, raw)


@dataclass
class ShapleyResult:
    """phi[row, feature, class] with base = v(empty) and full = v(all features)"""
    phi: np.ndarray
    base: np.ndarray
    full: np.ndarray
    features: List[str]
    profile: ImportanceProfile


def _shapley_weights(d: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def _subset_values(model: ClassifierModel, row: FeatureTable, background: FeatureTable,
                   features: List[str], bits: np.ndarray) -> np.ndarray:
    """v(S) for every subset S, averaged over background rows: shape (2^d, n_classes)"""
    n_subsets, n_bg = len(bits), background.n_rows
    values = {}
    for j, name in enumerate(features):
        own = row.column(name).values[0]
        other = background.column(name).values
        values[name] = np.where(bits[:, j][:, None], own, other[None, :]).ravel()
    values[background.target] = np.tile(background.target_column.values, n_subsets)
    hybrid = background.with_columns(values)
    probs = model.predict_proba(hybrid)
    return probs.reshape(n_subsets, n_bg, -1).mean(axis=1)


def exact_shapley(model: ClassifierModel, data: FeatureTable, background: FeatureTable,
                  max_features: int = MAX_SHAPLEY_FEATURES, split_tag: str = "validation",
                  n_jobs: int = 1) -> ShapleyResult:
    """Exact interventional Shapley values by enumerating all 2^d subsets.

    The profile entry of a feature is the mean over rows of the mean over
    classes of |phi|.
    """
    features = data.feature_names
    d = len(features)
    if d > max_features:
        raise ImportanceError(f"{d} features exceed the exact Shapley limit of {max_features}")
    if background.n_rows == 0:
        raise ImportanceError("Shapley background is empty")
    if data.n_rows == 0:
        raise ImportanceError("Cannot compute importance on an empty table")
    masks = np.arange(2 ** d)
    bits = ((masks[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)
    sizes = bits.sum(axis=1)
    weights = _shapley_weights(d)

    def explain(i: int) -> np.ndarray:
        return _subset_values(model, data.take([i]), background, features, bits)

    subset_values = np.stack(run_parallel(explain, range(data.n_rows), n_jobs=n_jobs))
    phi = np.zeros((data.n_rows, d, subset_values.shape[2]))
    for j in range(d):
        without = masks[~bits[:, j]]
        w = weights[sizes[without]]
        gain = subset_values[:, without | (1 << j), :] - subset_values[:, without, :]
        phi[:, j, :] = np.einsum("s,nsc->nc", w, gain)
    aggregated = np.abs(phi).mean(axis=2).mean(axis=0)
    profile = ImportanceProfile(
        {name: float(value) for name, value in zip(features, aggregated)},
        ImportanceMethod.EXACT_SHAPLEY, split_tag, data.n_rows,
    )
    return ShapleyResult(phi, subset_values[:, 0, :], subset_values[:, -1, :], features, profile)


def sample_background(train: FeatureTable, size: int, seed: int) -> FeatureTable:
    """Seeded subsample of training rows (all rows when the table is smaller)"""
    if train.n_rows <= size:
        return train
    rng = np.random.default_rng(seed)
    return train.take(np.sort(rng.choice(train.n_rows, size=size, replace=False)))


@dataclass(frozen=True)
class FeatureDynamics:
    feature: str
    before: float
    after: float
    ratio: float
    rank_before: int
    rank_after: int
    rank_change: int


@dataclass
class DynamicsReport:
    features: List[FeatureDynamics]
    mean_top_rank_change: float
    top_k: int


def importance_dynamics(before: ImportanceProfile, after: ImportanceProfile, top_k: int = 5) -> DynamicsReport:
    if set(before.per_feature) != set(after.per_feature):
        raise ImportanceError("Profiles cover different feature sets")
    if before.method is not after.method:
        raise ImportanceError(f"Cannot compare {before.method.value} with {after.method.value} profiles")
    rank_before = {name: i + 1 for i, name in enumerate(before.ranked())}
    rank_after = {name: i + 1 for i, name in enumerate(after.ranked())}
    rows = []
    for name in before.ranked():
        b, a = before.per_feature[name], after.per_feature[name]
        ratio = math.inf if b == 0 else a / b
        rows.append(FeatureDynamics(name, b, a, ratio, rank_before[name], rank_after[name],
                                    abs(rank_after[name] - rank_before[name])))
    top = rows[:top_k]
    mean_change = float(np.mean([row.rank_change for row in top])) if top else 0.0
    return DynamicsReport(rows, mean_change, top_k)


def load_profile(path: str, split_tag: str = "external") -> ImportanceProfile:
    """Read a two-column (feature, importance) table"""
    if not os.path.exists(path):
        raise MissingFile(f"Importance file {path!r} does not exist")
    frame = pd.read_csv(path)
    for name in ("feature", "importance"):
        if name not in frame.columns:
            raise MissingColumn(f"Importance file {path} lacks a {name!r} column")
    values = {str(row.feature): float(row.importance) for row in frame.itertuples(index=False)}
    if any(v < 0 for v in values.values()):
        raise ImportanceError(f"Importance file {path} holds negative values")
    return ImportanceProfile(values, ImportanceMethod.EXTERNAL, split_tag, 0)


def profile_for(profile: Optional[ImportanceProfile], features: List[str]) -> Dict[str, float]:
    """Importance map restricted to `features`; absent features count as 0"""
    if profile is None:
        raise ImportanceError("No importance profile available")
    return {name: profile.per_feature.get(name, 0.0) for name in features}
