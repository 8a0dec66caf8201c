"""Probabilistic classifiers and quantile regressors behind small interfaces.

The conformal layer only needs a ProbabilityMatrix (n_rows x n_classes, rows
on the simplex) or a pair of quantile estimates per row, so any external model
can replace these reference learners (see load_probability_matrix).
"""
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exceptions import DataError, EmptyTable, MissingColumn, MissingFile, ModelError
from tabular import MISSING, FeatureTable

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9
N_THRESHOLD_CANDIDATES = 32
MIN_GROUP_ROWS = 5


def check_simplex(probs: np.ndarray, tolerance: float = SIMPLEX_TOLERANCE) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ModelError(f"Probability matrix must be 2-D, got shape {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > tolerance):
        raise ModelError("Probability rows must be non-negative and sum to 1")
    return probs


def _training_labels(train: FeatureTable) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if train.n_rows == 0:
        raise EmptyTable("Cannot fit a model on an empty table")
    target = train.target_column
    if not target.is_categorical:
        raise ModelError(f"Target {train.target!r} must be categorical for a classifier")
    labels = target.values
    if np.any(labels == MISSING):
        logger.warning(f"Dropping {int(np.sum(labels == MISSING))} rows with a missing target")
    return labels, target.vocabulary


class ClassifierModel(ABC):
    """Fitted probabilistic classifier.

    class_labels is the full target vocabulary of the fitting table; labels
    that never occur in the fitting rows get probability 0.
    """

    class_labels: Tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @abstractmethod
    def predict_proba(self, rows: FeatureTable) -> np.ndarray:
        ...

    def predict(self, rows: FeatureTable) -> np.ndarray:
        return np.argmax(self.predict_proba(rows), axis=1)


class FrequencyClassifier(ClassifierModel):
    def __init__(self, distribution: np.ndarray, class_labels: Sequence[str]):
        self.distribution = distribution
        self.class_labels = tuple(class_labels)

    def predict_proba(self, rows: FeatureTable) -> np.ndarray:
        return np.tile(self.distribution, (rows.n_rows, 1))


def _class_distribution(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = labels[labels != MISSING]
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def fit_frequency_classifier(train: FeatureTable, seed: int = 0) -> FrequencyClassifier:
    labels, vocabulary = _training_labels(train)
    if np.all(labels == MISSING):
        raise ModelError("Every training row has a missing target")
    return FrequencyClassifier(_class_distribution(labels, len(vocabulary)), vocabulary)


# ---------------------------------------------------------------------------
# Bagged categorical decision trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeConfig:
    n_trees: int = 10
    max_depth: int = 32
    row_subsample: float = 0.8

    def __post_init__(self):
        if self.n_trees < 1:
            raise ModelError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ModelError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.row_subsample <= 1.0:
            raise ModelError(f"row_subsample must lie in (0, 1], got {self.row_subsample}")


@dataclass
class _Node:
    distribution: np.ndarray
    feature: Optional[str] = None
    category: Optional[int] = None
    threshold: Optional[float] = None
    majority_left: bool = False
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def _gini(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return 1.0 - np.sum(shares ** 2, axis=-1)


def _split_impurity(left: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Weighted Gini of every candidate left/rest partition (rows of `left`)"""
    right = total[None, :] - left
    n_left = left.sum(axis=1)
    n_right = right.sum(axis=1)
    n = n_left + n_right
    return (n_left * _gini(left) + n_right * _gini(right)) / n


class _TreeBuilder:
    def __init__(self, features: Dict[str, np.ndarray], categorical: Dict[str, bool],
                 labels: np.ndarray, n_classes: int, max_depth: int, rng: np.random.Generator):
        self.features = features
        self.categorical = categorical
        self.labels = labels
        self.n_classes = n_classes
        self.max_depth = max_depth
        self.rng = rng

    def grow(self, idx: np.ndarray, depth: int = 0) -> _Node:
        counts = np.bincount(self.labels[idx], minlength=self.n_classes).astype(np.float64)
        node = _Node(distribution=counts / counts.sum())
        if depth >= self.max_depth or len(idx) < 2 or np.count_nonzero(counts) < 2:
            return node
        parent = _gini(counts)
        best_impurity, best = parent - 1e-12, None
        # seeded feature order decides ties between equally good splits
        for name in self.rng.permutation(list(self.features)):
            candidate = self._best_split(name, idx, counts)
            if candidate is not None and candidate[0] < best_impurity:
                best_impurity, best = candidate[0], (str(name), candidate[1])
        if best is None:
            return node
        name, rule = best
        goes_left, known = self._partition(name, rule, idx)
        majority_left = np.sum(goes_left & known) > np.sum(~goes_left & known)
        goes_left = np.where(known, goes_left, majority_left)
        if goes_left.all() or not goes_left.any():
            return node
        node.feature = name
        if self.categorical[name]:
            node.category = rule
        else:
            node.threshold = rule
        node.majority_left = bool(majority_left)
        node.left = self.grow(idx[goes_left], depth + 1)
        node.right = self.grow(idx[~goes_left], depth + 1)
        return node

    def _partition(self, name: str, rule, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values = self.features[name][idx]
        if self.categorical[name]:
            return values == rule, values != MISSING
        known = ~np.isnan(values)
        return np.where(known, values <= rule, False), known

    def _best_split(self, name: str, idx: np.ndarray, counts: np.ndarray):
        values = self.features[name][idx]
        labels = self.labels[idx]
        if self.categorical[name]:
            present = values != MISSING
            categories, inverse = np.unique(values[present], return_inverse=True)
            if len(categories) < 2:
                return None
            table = np.zeros((len(categories), self.n_classes))
            np.add.at(table, (inverse, labels[present]), 1.0)
            impurity = _split_impurity(table, counts)
            pick = int(np.argmin(impurity))
            return impurity[pick], int(categories[pick])
        known = ~np.isnan(values)
        distinct = np.unique(values[known])
        if len(distinct) < 2:
            return None
        if len(distinct) > N_THRESHOLD_CANDIDATES + 1:
            distinct = np.unique(np.quantile(values[known], np.linspace(0, 1, N_THRESHOLD_CANDIDATES + 1)))
        thresholds = (distinct[:-1] + distinct[1:]) / 2.0
        table = np.stack([
            np.bincount(labels[known & (values <= t)], minlength=self.n_classes) for t in thresholds
        ]).astype(np.float64)
        impurity = _split_impurity(table, counts)
        pick = int(np.argmin(impurity))
        return impurity[pick], float(thresholds[pick])


def _route(node: _Node, features: Dict[str, np.ndarray], idx: np.ndarray, out: np.ndarray):
    if node.is_leaf:
        out[idx] += node.distribution
        return
    values = features[node.feature][idx]
    if node.category is not None:
        known = values != MISSING
        goes_left = values == node.category
    else:
        known = ~np.isnan(values)
        goes_left = np.where(known, values <= node.threshold, False)
    goes_left = np.where(known, goes_left, node.majority_left)
    if goes_left.any():
        _route(node.left, features, idx[goes_left], out)
    if not goes_left.all():
        _route(node.right, features, idx[~goes_left], out)


class BaggedTreesClassifier(ClassifierModel):
    """Average of per-tree leaf class distributions.

    Categorical codes unseen while fitting are treated like MISSING at
    predict time and follow the training-majority branch of each split.
    """

    def __init__(self, trees: List[_Node], class_labels: Sequence[str], feature_names: List[str],
                 seen_codes: Dict[str, np.ndarray]):
        self.trees = trees
        self.class_labels = tuple(class_labels)
        self.feature_names = feature_names
        self.seen_codes = seen_codes

    def _features(self, rows: FeatureTable) -> Dict[str, np.ndarray]:
        features = {}
        for name in self.feature_names:
            values = rows.column(name).values
            if name in self.seen_codes:
                values = np.where(np.isin(values, self.seen_codes[name]), values, MISSING)
            features[name] = values
        return features

    def predict_proba(self, rows: FeatureTable) -> np.ndarray:
        features = self._features(rows)
        out = np.zeros((rows.n_rows, self.n_classes))
        idx = np.arange(rows.n_rows)
        for tree in self.trees:
            _route(tree, features, idx, out)
        return out / len(self.trees)


def fit_bagged_trees(train: FeatureTable, config: TreeConfig = TreeConfig(), seed: int = 0) -> BaggedTreesClassifier:
    labels, vocabulary = _training_labels(train)
    keep = np.flatnonzero(labels != MISSING)
    if len(keep) == 0:
        raise ModelError("Every training row has a missing target")
    features = {name: train.column(name).values for name in train.feature_names}
    categorical = {name: train.column(name).is_categorical for name in train.feature_names}
    seen = {
        name: np.unique(values[keep][values[keep] != MISSING])
        for name, values in features.items() if categorical[name]
    }
    n_sample = max(1, int(round(config.row_subsample * len(keep))))
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([seed, t])
        rows = np.sort(rng.choice(keep, size=n_sample, replace=False)) if n_sample < len(keep) else keep
        builder = _TreeBuilder(features, categorical, labels, len(vocabulary), config.max_depth, rng)
        trees.append(builder.grow(rows))
    logger.debug(f"Fitted {config.n_trees} trees on {len(keep)} rows (seed={seed})")
    return BaggedTreesClassifier(trees, vocabulary, train.feature_names, seen)


# ---------------------------------------------------------------------------
# Quantile regression
# ---------------------------------------------------------------------------

class QuantileModel(ABC):
    levels: Tuple[float, float]

    @abstractmethod
    def predict(self, rows: FeatureTable) -> Tuple[np.ndarray, np.ndarray]:
        ...


class GroupedQuantileModel(QuantileModel):
    """Per-group empirical quantiles with a global fallback"""

    def __init__(self, levels, group_feature: str, group_bounds: Dict[int, Tuple[float, float]],
                 global_bounds: Tuple[float, float]):
        self.levels = levels
        self.group_feature = group_feature
        self.group_bounds = group_bounds
        self.global_bounds = global_bounds

    def predict(self, rows: FeatureTable) -> Tuple[np.ndarray, np.ndarray]:
        codes = rows.column(self.group_feature).values
        bounds = np.array([self.group_bounds.get(int(code), self.global_bounds) for code in codes],
                          dtype=np.float64).reshape(-1, 2)
        lo, hi = bounds[:, 0], bounds[:, 1]
        return np.minimum(lo, hi), np.maximum(lo, hi)


def fit_grouped_quantiles(train: FeatureTable, levels: Tuple[float, float], group_feature: str,
                          seed: int = 0) -> GroupedQuantileModel:
    lo_level, hi_level = levels
    if not 0.0 < lo_level < hi_level < 1.0:
        raise ModelError(f"Quantile levels must satisfy 0 < lo < hi < 1, got {levels}")
    if train.n_rows == 0:
        raise EmptyTable("Cannot fit quantiles on an empty table")
    target = train.target_column
    if target.is_categorical:
        raise ModelError(f"Target {train.target!r} must be numeric for quantile regression")
    group = train.column(group_feature)
    if not group.is_categorical:
        raise ModelError(f"Group feature {group_feature!r} must be categorical")
    y = target.values
    usable = ~np.isnan(y)
    global_bounds = tuple(np.quantile(y[usable], [lo_level, hi_level], method="linear"))
    group_bounds = {}
    for code in np.unique(group.values[usable]):
        if code == MISSING:
            continue
        values = y[usable & (group.values == code)]
        if len(values) >= MIN_GROUP_ROWS:
            group_bounds[int(code)] = tuple(np.quantile(values, [lo_level, hi_level], method="linear"))
    logger.debug(f"Fitted quantiles for {len(group_bounds)} groups of {group_feature!r}")
    return GroupedQuantileModel((lo_level, hi_level), group_feature, group_bounds, global_bounds)


def load_probability_matrix(path: str, class_labels: Sequence[str]) -> np.ndarray:
    """Read externally computed class probabilities (header = class labels)"""
    if not os.path.exists(path):
        raise MissingFile(f"Score file {path!r} does not exist")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [label for label in class_labels if label not in frame.columns]
    if missing:
        raise MissingColumn(f"Score file {path} lacks columns for classes {missing}")
    try:
        probs = frame[list(class_labels)].astype(np.float64).to_numpy()
    except ValueError as e:
        raise DataError(f"Score file {path} holds non-numeric probabilities: {e}") from e
    if np.any(probs < 0):
        raise DataError(f"Score file {path} holds negative probabilities")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise DataError(f"Score file {path} has rows that do not sum to 1")
    return probs / sums[:, None]
