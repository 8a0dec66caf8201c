"""Split-conformal prediction: APS sets, CQR intervals and ACI online updates.

APS is the deterministic variant: the class that crosses the threshold is
always included. Classes are ranked by descending probability with ties
broken by ascending class index, for both scores and sets.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from exceptions import CalibrationError

logger = logging.getLogger(__name__)

CUMULATIVE_TOLERANCE = 1e-12
ACI_ALPHA_BOUNDS = (0.001, 0.999)


class ConformalKind(Enum):
    APS = "APS"
    CQR = "CQR"


@dataclass(frozen=True, eq=False)
class ConformalCalibration:
    """Calibrated threshold.

    For APS, `q` is the quantile level min(ceil((n+1)(1-alpha))/n, 1) and
    `threshold` the matching calibration score (1.0 past the largest rank);
    a saturated q puts every class in the set.
    For CQR both hold the interval margin Q. `scores` are the sorted
    calibration scores, kept for online recalibration.
    """
    kind: ConformalKind
    alpha: float
    q: float
    n_cal: int
    threshold: float
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_cal < 1:
            raise CalibrationError("A calibration needs at least one row")

    @property
    def set_threshold(self) -> float:
        """Cumulative-mass cutoff for APS sets; infinite once q saturates at 1"""
        if self.kind is ConformalKind.APS and self.q >= 1.0:
            return math.inf
        return self.threshold


@dataclass(frozen=True)
class PredictionSet:
    members: Optional[Tuple[int, ...]] = None
    lo: Optional[float] = None
    hi: Optional[float] = None

    @property
    def is_interval(self) -> bool:
        return self.members is None

    @property
    def size(self) -> float:
        if self.is_interval:
            return self.hi - self.lo
        return float(len(self.members))

    def __contains__(self, truth) -> bool:
        if self.is_interval:
            return self.lo <= truth <= self.hi
        return int(truth) in self.members


@dataclass(frozen=True)
class CoverageReport:
    coverage: float
    mean_set_size: float
    n_eval: int
    n_covered: int


def _validate_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")


def conformal_rank(n: int, alpha: float) -> int:
    """ceil((n+1)(1-alpha)), guarded against float round-up"""
    return int(math.ceil((n + 1) * (1.0 - alpha) - 1e-9))


def _ranked(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative mass in ranked order and each class's position in that order"""
    order = np.argsort(-probs, axis=1, kind="stable")
    cumulative = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    positions = np.empty_like(order)
    np.put_along_axis(positions, order, np.arange(probs.shape[1])[None, :].repeat(len(probs), 0), axis=1)
    return cumulative, positions


def aps_scores(probs: np.ndarray, labels: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
    """Mass of the classes ranked at or above the true label, its own included.

    With per-row uniform draws `u` only the fraction u of the label's own mass
    counts (randomized APS), which breaks ties between calibration scores.
    """
    cumulative, positions = _ranked(probs)
    rows = np.arange(len(labels))
    scores = cumulative[rows, positions[rows, labels]]
    if u is None:
        return scores
    return scores - (1.0 - np.asarray(u, dtype=np.float64)) * probs[rows, labels]


def _set_sizes(cumulative: np.ndarray, threshold) -> np.ndarray:
    n_classes = cumulative.shape[1]
    threshold = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (len(cumulative),))
    sizes = np.sum(cumulative < threshold[:, None] - CUMULATIVE_TOLERANCE, axis=1) + 1
    return np.minimum(sizes, n_classes)


def aps_set_mask(probs: np.ndarray, threshold, u: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean membership matrix of the APS sets of every row.

    Without `u` the crossing class is always included. With `u` a class is a
    member when its randomized score is within the threshold, so the crossing
    class is dropped with the matching probability and sets may be empty.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    cumulative, positions = _ranked(probs)
    if u is None:
        return positions < _set_sizes(cumulative, threshold)[:, None]
    ranked_probs = np.diff(cumulative, axis=1, prepend=0.0)
    randomized = cumulative - (1.0 - np.asarray(u, dtype=np.float64))[:, None] * ranked_probs
    threshold = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (len(probs),))
    ranked_member = randomized <= threshold[:, None] + CUMULATIVE_TOLERANCE
    return np.take_along_axis(ranked_member, positions, axis=1)


def _check_labels(probs: np.ndarray, labels: np.ndarray):
    if len(probs) == 0:
        raise CalibrationError("Calibration set is empty")
    if len(probs) != len(labels):
        raise CalibrationError(f"{len(probs)} probability rows but {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise CalibrationError(f"Label index out of range for {probs.shape[1]} classes")


def calibrate_aps(probs: np.ndarray, labels: Sequence[int], alpha: float,
                  u: Optional[np.ndarray] = None) -> ConformalCalibration:
    _validate_alpha(alpha)
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(probs, labels)
    n = len(labels)
    if u is not None and len(u) != len(labels):
        raise CalibrationError(f"{len(u)} uniform draws for {len(labels)} calibration rows")
    scores = np.sort(aps_scores(probs, labels, u))
    k = conformal_rank(n, alpha)
    threshold = float(scores[k - 1]) if k <= n else 1.0
    return ConformalCalibration(ConformalKind.APS, alpha, min(k / n, 1.0), n, threshold, scores)


def predict_set_aps(probs_row: Sequence[float], calib: ConformalCalibration) -> PredictionSet:
    if calib.kind is not ConformalKind.APS:
        raise CalibrationError(f"Expected an APS calibration, got {calib.kind.value}")
    mask = aps_set_mask(np.asarray(probs_row, dtype=np.float64)[None, :], calib.set_threshold)[0]
    return PredictionSet(members=tuple(int(k) for k in np.flatnonzero(mask)))


def predict_sets_aps(probs: np.ndarray, calib: ConformalCalibration) -> List[PredictionSet]:
    mask = aps_set_mask(probs, calib.set_threshold)
    return [PredictionSet(members=tuple(int(k) for k in np.flatnonzero(row))) for row in mask]


def calibrate_cqr(predictions: Tuple[np.ndarray, np.ndarray], targets: Sequence[float],
                  alpha: float) -> ConformalCalibration:
    _validate_alpha(alpha)
    lo, hi = (np.asarray(p, dtype=np.float64) for p in predictions)
    y = np.asarray(targets, dtype=np.float64)
    if len(y) == 0:
        raise CalibrationError("Calibration set is empty")
    if not len(lo) == len(hi) == len(y):
        raise CalibrationError("Interval bounds and targets must align")
    if not np.all(np.isfinite(y)):
        raise CalibrationError("Calibration targets must be finite; drop unlabelled rows first")
    if np.any(lo > hi):
        raise CalibrationError("Every calibration interval must satisfy lo <= hi")
    n = len(y)
    scores = np.sort(np.maximum(lo - y, y - hi))
    k = min(conformal_rank(n, alpha), n)
    margin = float(scores[max(k, 1) - 1])
    return ConformalCalibration(ConformalKind.CQR, alpha, margin, n, margin, scores)


def predict_interval_cqr(pred: Tuple[float, float], calib: ConformalCalibration) -> PredictionSet:
    if calib.kind is not ConformalKind.CQR:
        raise CalibrationError(f"Expected a CQR calibration, got {calib.kind.value}")
    lo, hi = pred[0] - calib.q, pred[1] + calib.q
    if lo > hi:
        lo = hi = (lo + hi) / 2.0
    return PredictionSet(lo=float(lo), hi=float(hi))


def predict_intervals_cqr(lo: np.ndarray, hi: np.ndarray, calib: ConformalCalibration) -> Tuple[np.ndarray, np.ndarray]:
    new_lo, new_hi = np.asarray(lo) - calib.q, np.asarray(hi) + calib.q
    mid = (new_lo + new_hi) / 2.0
    crossed = new_lo > new_hi
    return np.where(crossed, mid, new_lo), np.where(crossed, mid, new_hi)


def evaluate_coverage(sets: Sequence[PredictionSet], truths: Sequence) -> CoverageReport:
    if len(sets) == 0:
        raise CalibrationError("Cannot evaluate coverage on an empty set list")
    if len(sets) != len(truths):
        raise CalibrationError(f"{len(sets)} sets but {len(truths)} truths")
    covered = sum(truth in prediction for prediction, truth in zip(sets, truths))
    size = float(np.mean([prediction.size for prediction in sets]))
    return CoverageReport(covered / len(sets), size, len(sets), int(covered))


def evaluate_mask_coverage(mask: np.ndarray, labels: Sequence[int]) -> CoverageReport:
    """evaluate_coverage for a boolean membership matrix"""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise CalibrationError("Cannot evaluate coverage on an empty set list")
    covered = int(np.sum(mask[np.arange(len(labels)), labels]))
    return CoverageReport(covered / len(labels), float(mask.sum(axis=1).mean()), len(labels), covered)


def evaluate_interval_coverage(lo: np.ndarray, hi: np.ndarray, targets: Sequence[float]) -> CoverageReport:
    y = np.asarray(targets, dtype=np.float64)
    if len(y) == 0:
        raise CalibrationError("Cannot evaluate coverage on an empty set list")
    if not np.all(np.isfinite(y)):
        raise CalibrationError("Evaluation targets must be finite; drop unlabelled rows first")
    covered = int(np.sum((lo <= y) & (y <= hi)))
    return CoverageReport(covered / len(y), float(np.mean(hi - lo)), len(y), covered)


def _aci_threshold(scores: np.ndarray, alpha_t: float) -> float:
    n = len(scores)
    k = conformal_rank(n, alpha_t)
    if k >= n:
        return math.inf
    if k < 1:
        return 0.0
    return float(scores[k - 1])


def aci_run(probs_stream: np.ndarray, labels_stream: Sequence[int], alpha: float, gamma: float,
            initial: ConformalCalibration) -> Tuple[CoverageReport, np.ndarray]:
    """Adaptive conformal inference over a time-ordered stream.

    alpha_t starts at alpha and moves by gamma * (alpha - err_t) after each
    step, clamped to ACI_ALPHA_BOUNDS; the set at step t uses the calibration
    score at rank ceil((n+1)(1-alpha_t)). Returns coverage and the alpha_t
    used at every step.
    """
    if gamma < 0:
        raise CalibrationError(f"gamma must be >= 0, got {gamma}")
    if initial.kind is not ConformalKind.APS or initial.scores is None:
        raise CalibrationError("ACI needs an APS calibration with stored scores")
    probs = np.asarray(probs_stream, dtype=np.float64)
    labels = np.asarray(labels_stream, dtype=np.int64)
    if len(labels) == 0:
        raise CalibrationError("ACI stream is empty")
    cumulative, positions = _ranked(probs)
    label_positions = positions[np.arange(len(labels)), labels]
    low, high = ACI_ALPHA_BOUNDS
    alpha_t = alpha
    trace = np.empty(len(labels))
    covered = np.zeros(len(labels), dtype=bool)
    sizes = np.empty(len(labels))
    for t in range(len(labels)):
        trace[t] = alpha_t
        size = _set_sizes(cumulative[t:t + 1], _aci_threshold(initial.scores, alpha_t))[0]
        covered[t] = label_positions[t] < size
        sizes[t] = size
        err = 0.0 if covered[t] else 1.0
        alpha_t = min(max(alpha_t + gamma * (alpha - err), low), high)
    n_covered = int(covered.sum())
    report = CoverageReport(n_covered / len(labels), float(sizes.mean()), len(labels), n_covered)
    logger.debug(f"ACI gamma={gamma}: coverage {report.coverage:.3f}, final alpha_t {alpha_t:.4f}")
    return report, trace


def split_calibration(n_rows: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded 50/50 partition of validation rows into calibration and evaluation"""
    if n_rows < 2:
        raise CalibrationError(f"Need at least 2 validation rows to split, got {n_rows}")
    permutation = np.random.default_rng(seed).permutation(n_rows)
    half = (n_rows + 1) // 2
    return np.sort(permutation[:half]), np.sort(permutation[half:])
