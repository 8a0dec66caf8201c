"""Tabular data model, CSV ingestion, temporal splits and synthetic shift scenarios.

NaN policy: categorical cells that are empty in the source become the MISSING
code (-1); numeric cells that are empty or unparseable become NaN. Splitting
and row selection never inspect feature values. Jaccard ignores MISSING, and
the learners route MISSING/NaN to the training-majority branch.
"""
import hashlib
import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exceptions import EmptyTable, MissingColumn, MissingFile, ScenarioError, UnparseableTimestamp

logger = logging.getLogger(__name__)

MISSING = -1


class ColumnKind(Enum):
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"


class ConcentrationMode(Enum):
    SINGLE_DOMINANT = "SINGLE_DOMINANT"
    DISTRIBUTED = "DISTRIBUTED"


class EntropyLevel(Enum):
    LOW = "LOW"
    HIGH = "HIGH"


class TaskKind(Enum):
    CLASSIFICATION = "CLASSIFICATION"
    REGRESSION = "REGRESSION"


def _readonly(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class Column:
    """One named column: int64 codes into `vocabulary`, or float64 values"""
    name: str
    kind: ColumnKind
    values: np.ndarray
    vocabulary: Tuple[str, ...] = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind is ColumnKind.CATEGORICAL

    def decode(self) -> List[Optional[str]]:
        if not self.is_categorical:
            return [None if np.isnan(v) else float(v) for v in self.values]
        return [None if code == MISSING else self.vocabulary[code] for code in self.values]

    def present_codes(self) -> set:
        """Unique non-missing codes"""
        if not self.is_categorical:
            raise TypeError(f"Column {self.name!r} is numeric")
        codes = np.unique(self.values)
        return set(int(c) for c in codes if c != MISSING)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Immutable columnar table with one target and one timestamp column.

    Row subsets produced by take() share vocabularies with their parent, so
    codes are comparable across the spans of a split.
    """
    columns: Dict[str, Column]
    timestamps: np.ndarray
    target: str
    timestamp_name: str = "period"

    def __post_init__(self):
        if self.target not in self.columns:
            raise MissingColumn(f"Target column {self.target!r} is not in the table")
        if self.timestamp_name in self.columns:
            raise MissingColumn(f"Timestamp {self.timestamp_name!r} must not also be a data column")
        n = len(self.timestamps)
        for column in self.columns.values():
            if len(column.values) != n:
                raise ValueError(f"Column {column.name!r} has {len(column.values)} rows, expected {n}")
        object.__setattr__(self, "timestamps", _readonly(np.asarray(self.timestamps, dtype=np.int64)))
        for column in self.columns.values():
            object.__setattr__(column, "values", _readonly(column.values))

    def __len__(self) -> int:
        return self.n_rows

    @property
    def n_rows(self) -> int:
        return int(len(self.timestamps))

    @property
    def feature_names(self) -> List[str]:
        return [name for name in self.columns if name != self.target]

    @property
    def target_column(self) -> Column:
        return self.columns[self.target]

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumn(f"Column {name!r} is not in the table") from None

    def take(self, indices) -> "FeatureTable":
        indices = np.asarray(indices, dtype=np.int64)
        columns = {
            name: Column(name, col.kind, col.values[indices], col.vocabulary)
            for name, col in self.columns.items()
        }
        return FeatureTable(columns, self.timestamps[indices], self.target, self.timestamp_name)

    def with_values(self, name: str, values) -> "FeatureTable":
        """Copy of the table with one column's values replaced (vocabulary kept)"""
        col = self.column(name)
        dtype = np.int64 if col.is_categorical else np.float64
        columns = dict(self.columns)
        columns[name] = Column(name, col.kind, np.asarray(values, dtype=dtype), col.vocabulary)
        return FeatureTable(columns, self.timestamps, self.target, self.timestamp_name)

    def with_columns(self, values: Dict[str, np.ndarray], timestamps=None) -> "FeatureTable":
        """Rebuild the table from new per-column arrays of a common length"""
        columns = {}
        for name, col in self.columns.items():
            dtype = np.int64 if col.is_categorical else np.float64
            columns[name] = Column(name, col.kind, np.asarray(values[name], dtype=dtype), col.vocabulary)
        n = len(next(iter(values.values())))
        stamps = np.zeros(n, dtype=np.int64) if timestamps is None else timestamps
        return FeatureTable(columns, stamps, self.target, self.timestamp_name)

    def to_frame(self) -> pd.DataFrame:
        data = {self.timestamp_name: self.timestamps}
        for name, col in self.columns.items():
            data[name] = col.decode()
        return pd.DataFrame(data)


@dataclass(frozen=True)
class TableSchema:
    """Column roles for load_table. Undeclared columns are categorical."""
    target: str
    timestamp: str
    numeric: Tuple[str, ...] = ()
    categorical: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TemporalSplit:
    """Exclusive bounds; rows at or beyond test_end (when set) belong to no span"""
    train_end: int
    val_end: int
    test_end: Optional[int] = None

    def __post_init__(self):
        if not self.train_end < self.val_end:
            raise ScenarioError(f"train_end ({self.train_end}) must be < val_end ({self.val_end})")
        if self.test_end is not None and not self.val_end < self.test_end:
            raise ScenarioError(f"val_end ({self.val_end}) must be < test_end ({self.test_end})")


def _intern(raw: Sequence[Optional[str]]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Dense codes in first-seen order; None becomes MISSING"""
    codes, uniques = pd.factorize(pd.Series(list(raw), dtype=object), sort=False, use_na_sentinel=True)
    return codes.astype(np.int64), tuple(str(u) for u in uniques)


def categorical_column(name: str, raw: Sequence[Optional[str]]) -> Column:
    codes, vocabulary = _intern(raw)
    return Column(name, ColumnKind.CATEGORICAL, codes, vocabulary)


def numeric_column(name: str, raw) -> Column:
    values = pd.to_numeric(pd.Series(list(raw), dtype=object), errors="coerce").to_numpy(dtype=np.float64)
    return Column(name, ColumnKind.NUMERIC, values)


def load_table(path: str, schema: TableSchema) -> FeatureTable:
    """Read a UTF-8 CSV with a header row into a FeatureTable"""
    if not os.path.exists(path):
        raise MissingFile(f"Data file {path!r} does not exist")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    for name in (schema.target, schema.timestamp, *schema.numeric, *schema.categorical):
        if name not in frame.columns:
            raise MissingColumn(f"Declared column {name!r} is missing from {path}")
    if len(frame) == 0:
        raise EmptyTable(f"{path} has no data rows")

    try:
        stamps = pd.to_numeric(frame[schema.timestamp], errors="raise")
    except (ValueError, TypeError) as e:
        raise UnparseableTimestamp(f"Timestamp column {schema.timestamp!r}: {e}") from e
    if not np.all(np.mod(stamps, 1) == 0):
        raise UnparseableTimestamp(f"Timestamp column {schema.timestamp!r} must hold integer periods")

    columns = {}
    for name in frame.columns:
        if name == schema.timestamp:
            continue
        cells = [cell if cell != "" else None for cell in frame[name]]
        if name in schema.numeric:
            columns[name] = numeric_column(name, cells)
        else:
            columns[name] = categorical_column(name, cells)
    table = FeatureTable(columns, stamps.to_numpy(dtype=np.int64), schema.target, schema.timestamp)
    logger.info(f"Loaded {table.n_rows} rows x {len(columns)} columns from {path}")
    return table


def apply_split(table: FeatureTable, split: TemporalSplit) -> Tuple[FeatureTable, FeatureTable, FeatureTable]:
    stamps = table.timestamps
    train_mask = stamps < split.train_end
    val_mask = (stamps >= split.train_end) & (stamps < split.val_end)
    test_mask = stamps >= split.val_end
    if split.test_end is not None:
        test_mask &= stamps < split.test_end
    parts = tuple(table.take(np.flatnonzero(mask)) for mask in (train_mask, val_mask, test_mask))
    for span, part in zip(("train", "validation", "test"), parts):
        if part.n_rows == 0:
            logger.warning(f"Split {split} leaves the {span} span empty")
    return parts


def quantile_split(table: FeatureTable, train_frac: float, val_frac: float) -> TemporalSplit:
    """Split bounds placed at timestamp quantiles (row order by time)"""
    ordered = np.sort(table.timestamps)
    n = len(ordered)
    train_end = int(ordered[min(int(round(train_frac * n)), n - 1)])
    val_end = int(ordered[min(int(round((train_frac + val_frac) * n)), n - 1)])
    return TemporalSplit(train_end, max(val_end, train_end + 1))


# ---------------------------------------------------------------------------
# Synthetic shift scenarios
# ---------------------------------------------------------------------------

ID_FEATURE = "entity_id"
LABEL = "label"
STABLE_CARDINALITY = 8
DOMINANT_SHARE = 0.9  # share of each ID pool mapped to class 0 under LOW entropy
LOW_ENTROPY_SHARE = 0.85  # rows forced to class 0 in LOW entropy DISTRIBUTED scenarios
EFFECT_SIZE = 1.5


@dataclass(frozen=True)
class ShiftScenario:
    n_features: int
    n_classes: int
    id_feature_turnover: float
    concentration_mode: ConcentrationMode
    entropy_level: EntropyLevel
    n_train: int
    n_val: int
    n_test: int
    seed: int
    train_periods: int = 6
    val_periods: int = 2
    test_periods: int = 4
    shift_period: Optional[int] = None
    n_id_values: int = 20
    label_noise: float = 0.05
    churn_features: int = 0
    task: TaskKind = TaskKind.CLASSIFICATION

    @property
    def split(self) -> TemporalSplit:
        return TemporalSplit(self.train_periods, self.train_periods + self.val_periods)

    @property
    def effective_shift_period(self) -> int:
        return self.split.val_end if self.shift_period is None else self.shift_period

    @property
    def n_stable(self) -> int:
        return self.n_features - 1 - self.churn_features

    def validate(self):
        counts = dict(n_features=self.n_features, n_train=self.n_train, n_val=self.n_val,
                      n_test=self.n_test, train_periods=self.train_periods,
                      val_periods=self.val_periods, test_periods=self.test_periods,
                      n_id_values=self.n_id_values)
        for name, value in counts.items():
            if value < 1:
                raise ScenarioError(f"{name} must be positive, got {value}")
        if self.n_classes < 2:
            raise ScenarioError(f"n_classes must be >= 2, got {self.n_classes}")
        for name in ("id_feature_turnover", "label_noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1], got {value}")
        if self.churn_features < 0 or self.n_stable < 0:
            raise ScenarioError("churn_features must fit within n_features - 1")
        if self.concentration_mode is ConcentrationMode.DISTRIBUTED and self.n_stable < 3:
            raise ScenarioError("DISTRIBUTED scenarios need at least 3 stable features")


def stable_hash(value: str) -> int:
    """Process-independent hash (Python's str hash is salted)"""
    return int.from_bytes(hashlib.md5(value.encode("utf-8")).digest()[:8], "big")


def _period_index(n_rows: int, first_period: int, n_periods: int) -> np.ndarray:
    sizes = [len(chunk) for chunk in np.array_split(np.arange(n_rows), n_periods)]
    return np.repeat(np.arange(first_period, first_period + n_periods), sizes)


def _new_pool_size(n_old: int, turnover: float) -> int:
    # Keeping every old value and adding N new ones gives an unseen share of
    # N/(n_old+N) = turnover and a Jaccard of n_old/(n_old+N) = 1 - turnover.
    if turnover >= 1.0:
        return n_old
    return int(round(n_old * turnover / (1.0 - turnover)))


def _draw_covering(rng: np.random.Generator, pool: List[str], n: int) -> List[str]:
    """n draws from pool where every value appears at least once when n allows"""
    if n == 0 or not pool:
        return []
    head = list(rng.permutation(pool))[:n]
    tail = list(rng.choice(pool, size=n - len(head))) if n > len(head) else []
    drawn = head + tail
    return [drawn[i] for i in rng.permutation(n)]


def _churning_values(rng, prefix: str, n_values: int, turnover: float,
                     pre_rows: int, post_rows: int) -> Tuple[List[str], List[str], List[str]]:
    """Values before the shift come from the old pool; afterwards a turnover
    share of rows draws from a disjoint new pool."""
    old_pool = [f"{prefix}{i:04d}" for i in range(n_values)]
    new_pool = [f"{prefix}N{i:04d}" for i in range(_new_pool_size(n_values, turnover))]
    pre = _draw_covering(rng, old_pool, pre_rows)
    n_new = int(round(turnover * post_rows))
    post = _draw_covering(rng, new_pool, n_new) + _draw_covering(rng, old_pool, post_rows - n_new)
    post = [post[i] for i in rng.permutation(len(post))]
    return pre + post, old_pool, new_pool


def _id_class_map(pools: Sequence[List[str]], n_classes: int, entropy_level: EntropyLevel) -> Dict[str, int]:
    if entropy_level is EntropyLevel.HIGH:
        return {value: stable_hash(value) % n_classes for pool in pools for value in pool}
    # LOW: within each pool the first DOMINANT_SHARE of values in hash order
    # map to class 0, so the share holds before and after the shift alike
    mapping = {}
    for pool in pools:
        ordered = sorted(pool, key=stable_hash)
        n_dominant = int(np.ceil(DOMINANT_SHARE * len(ordered)))
        for value in ordered[:n_dominant]:
            mapping[value] = 0
        for value in ordered[n_dominant:]:
            mapping[value] = 1 + stable_hash(value) % (n_classes - 1)
    return mapping


def generate_scenario(spec: ShiftScenario) -> Tuple[FeatureTable, TemporalSplit]:
    """Deterministic synthetic table reproducing a concentration / stability regime"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    split = spec.split
    periods = np.concatenate([
        _period_index(spec.n_train, 0, spec.train_periods),
        _period_index(spec.n_val, split.train_end, spec.val_periods),
        _period_index(spec.n_test, split.val_end, spec.test_periods),
    ])
    n_rows = len(periods)
    pre_rows = int(np.sum(periods < spec.effective_shift_period))
    post_rows = n_rows - pre_rows
    turnover = spec.id_feature_turnover

    ids, old_ids, new_ids = _churning_values(rng, "E", spec.n_id_values, turnover, pre_rows, post_rows)
    raw = {ID_FEATURE: ids}
    for k in range(spec.churn_features):
        raw[f"churn_{k + 1}"], _, _ = _churning_values(
            rng, f"C{k + 1}_", spec.n_id_values, turnover, pre_rows, post_rows)
    stable_codes = {}
    for j in range(spec.n_stable):
        codes = rng.integers(0, STABLE_CARDINALITY, size=n_rows)
        stable_codes[f"f{j + 1}"] = codes
        raw[f"f{j + 1}"] = [f"v{c}" for c in codes]

    if spec.task is TaskKind.REGRESSION:
        target = _regression_target(rng, spec, ids, stable_codes)
    else:
        target = _classification_target(rng, spec, ids, (old_ids, new_ids), stable_codes)

    columns = {name: categorical_column(name, values) for name, values in raw.items()}
    if spec.task is TaskKind.REGRESSION:
        columns[LABEL] = Column(LABEL, ColumnKind.NUMERIC, np.asarray(target, dtype=np.float64))
    else:
        columns[LABEL] = categorical_column(LABEL, [f"c{int(c)}" for c in target])
    table = FeatureTable(columns, periods, LABEL, "period")
    logger.info(
        f"Generated {spec.concentration_mode.value} scenario: {n_rows} rows, "
        f"{len(columns) - 1} features, turnover={turnover} from period {spec.effective_shift_period}"
    )
    return table, split


def _classification_target(rng, spec: ShiftScenario, ids, pools, stable_codes) -> np.ndarray:
    n_rows = len(ids)
    k = spec.n_classes
    if spec.concentration_mode is ConcentrationMode.SINGLE_DOMINANT:
        mapping = _id_class_map(pools, k, spec.entropy_level)
        labels = np.array([mapping[value] for value in ids], dtype=np.int64)
    else:
        # Each stable feature value votes for one class with an equal effect size.
        informative = list(stable_codes)[:max(3, min(4, len(stable_codes)))]
        scores = rng.gumbel(size=(n_rows, k))
        for j, name in enumerate(informative):
            preferred = (stable_codes[name] + 3 * j) % k
            scores[np.arange(n_rows), preferred] += EFFECT_SIZE
        labels = np.argmax(scores, axis=1)
    noisy = rng.random(n_rows) < spec.label_noise
    labels = np.where(noisy, rng.integers(0, k, size=n_rows), labels)
    if spec.concentration_mode is ConcentrationMode.DISTRIBUTED and spec.entropy_level is EntropyLevel.LOW:
        # after the noise, so class 0 keeps at least LOW_ENTROPY_SHARE of rows
        forced = rng.permutation(n_rows)[:int(np.ceil(LOW_ENTROPY_SHARE * n_rows))]
        labels[forced] = 0
    return labels


def _regression_target(rng, spec: ShiftScenario, ids, stable_codes) -> np.ndarray:
    n_rows = len(ids)
    if spec.concentration_mode is ConcentrationMode.SINGLE_DOMINANT:
        means = np.array([(stable_hash(value) % 1000) / 100.0 for value in ids])
    else:
        means = np.zeros(n_rows)
        for name in list(stable_codes)[:4]:
            effects = rng.normal(0.0, 2.0, size=STABLE_CARDINALITY)
            means += effects[stable_codes[name]]
    return means + rng.normal(0.0, 1.0, size=n_rows)
