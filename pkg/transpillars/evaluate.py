import csv
import dataclasses
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


# Recall levels at which interpolated precision is averaged
RECALLS = np.linspace(0., 1., 101)[1:]


###############################################################################
# Evaluation types
###############################################################################


@dataclasses.dataclass
class EvaluationConfig:
    """Matching thresholds and breakdown settings"""

    # Center-distance thresholds in meters
    thresholds: Tuple[float, ...] = (.5, 1., 2.)

    # Distance bands from the sensor in meters
    bands: Tuple[Tuple[float, float], ...] = (
        (0., 10.), (10., 20.), (20., math.inf))
    moving_speed: float = .5
    min_points: int = 1

    def __post_init__(self):
        if not self.thresholds or min(self.thresholds) <= 0:
            raise transpillars.errors.ConfigurationError(
                f'Matching thresholds must be positive, got {self.thresholds}')


@dataclasses.dataclass
class EvaluationReport:
    """Mean average precision with breakdowns"""

    mAP: float
    ap: Dict[float, float]
    bands: Dict[str, float]
    moving: float
    static: float

    def rows(self) -> List[Tuple[str, str, float]]:
        """Retrieve (subset, metric, value) rows"""
        rows = [('all', 'mAP', self.mAP)]
        rows.extend(
            ('all', f'AP@{threshold:g}m', value)
            for threshold, value in self.ap.items())
        rows.extend((name, 'mAP', value) for name, value in self.bands.items())
        rows.append(('moving', 'mAP', self.moving))
        rows.append(('static', 'mAP', self.static))
        return rows

    def table(self) -> str:
        """Format the report for display"""
        lines = [f'{"subset":<10} {"metric":<10} {"value":>8}']
        lines.extend(
            f'{subset:<10} {metric:<10} {value:>8.4f}'
            for subset, metric, value in self.rows())
        return '\n'.join(lines)

    def write(self, file) -> None:
        """Save the report as CSV"""
        with open(file, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(('subset', 'metric', 'value'))
            for subset, metric, value in self.rows():
                writer.writerow((subset, metric, repr(float(value))))


###############################################################################
# Evaluation
###############################################################################


def evaluate_map(
    preds: List['transpillars.model.BoxPrediction'],
    gts: List['transpillars.synth.GroundTruthBox'],
    match_thresholds: Sequence[float] = (.5, 1., 2.),
    cfg: Optional[EvaluationConfig] = None) -> EvaluationReport:
    """Evaluate detections of a single frame

    Arguments
        preds
            Detections with scores
        gts
            Ground truth in the detections' coordinates
        match_thresholds
            Center-distance thresholds in meters
        cfg
            Breakdown settings; its thresholds are replaced by match_thresholds

    Returns
        The report
    """
    cfg = cfg or EvaluationConfig()
    cfg = dataclasses.replace(cfg, thresholds=tuple(match_thresholds))
    return evaluate_frames([(preds, gts)], cfg)


def evaluate_frames(
    frames: List[Tuple[list, list]],
    cfg: EvaluationConfig) -> EvaluationReport:
    """Evaluate detections over many frames

    Matching is greedy within each frame: detections in descending score
    (ties by input order) take the nearest unmatched ground truth within the
    threshold. Detections matched to ignored ground truth are discarded.

    Arguments
        frames
            (detections, ground truth) per frame, in sensor coordinates
        cfg
            Evaluation settings

    Returns
        The report
    """
    def counted(gt):
        return gt.num_points_in_box >= cfg.min_points

    def everywhere(_):
        return True

    ap = {
        threshold: _mean_ap(frames, [threshold], counted, everywhere)
        for threshold in cfg.thresholds}
    overall = _mean_ap(frames, cfg.thresholds, counted, everywhere)

    bands = {}
    for low, high in cfg.bands:
        def inside(item, low=low, high=high):
            return low <= np.hypot(*item.center) < high

        name = f'{low:g}-{high:g}m' if math.isfinite(high) else f'{low:g}m-inf'
        bands[name] = _mean_ap(
            frames,
            cfg.thresholds,
            lambda gt, inside=inside: counted(gt) and inside(gt),
            inside)

    moving = _mean_ap(
        frames,
        cfg.thresholds,
        lambda gt: counted(gt) and gt.speed > cfg.moving_speed,
        everywhere)
    static = _mean_ap(
        frames,
        cfg.thresholds,
        lambda gt: counted(gt) and gt.speed <= cfg.moving_speed,
        everywhere)
    report = EvaluationReport(overall, ap, bands, moving, static)
    logger.debug('mAP %.4f over %d frames', overall, len(frames))
    return report


def average_precision(
    scores: np.ndarray,
    positive: np.ndarray,
    num_gt: int) -> float:
    """Area under the interpolated precision-recall curve

    Arguments
        scores
            Scores of the kept detections
        positive
            Whether each detection is a true positive
        num_gt
            Number of counted ground-truth boxes

    Returns
        Mean over recall levels 0.01, ..., 1 of the highest precision at or
        above each level
    """
    if not num_gt or not len(scores):
        return 0.
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    positive = np.asarray(positive, dtype=np.float64)[order]
    true_positives = np.cumsum(positive)
    precision = true_positives / np.arange(1, len(positive) + 1)
    recall = true_positives / num_gt

    # Highest precision at or beyond each rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ranks = np.searchsorted(recall, RECALLS - 1e-12, side='left')
    reached = ranks < len(recall)
    return float(envelope[ranks[reached]].sum() / len(RECALLS))


###############################################################################
# Utilities
###############################################################################


def _match(
    preds: list,
    gts: list,
    class_id: int,
    threshold: float,
    counted: Callable,
    included: Callable) -> Tuple[List[float], List[bool], int]:
    """Greedily match one frame's detections of a class"""
    gts = [gt for gt in gts if gt.class_id == class_id]
    valid = [counted(gt) for gt in gts]
    centers = np.array([gt.center for gt in gts], dtype=np.float64).reshape(-1, 2)
    taken = np.zeros(len(gts), dtype=bool)

    candidates = [
        (pred.score, index) for index, pred in enumerate(preds)
        if pred.class_id == class_id]
    candidates.sort(key=lambda item: (-item[0], item[1]))

    scores, positive = [], []
    for score, index in candidates:
        pred = preds[index]
        distance = np.hypot(*(centers - np.asarray(pred.center)).T)
        distance[taken] = np.inf
        best = int(np.argmin(distance)) if len(distance) else -1
        if best >= 0 and distance[best] <= threshold:
            taken[best] = True
            if valid[best]:
                scores.append(score)
                positive.append(True)
        elif included(pred):
            scores.append(score)
            positive.append(False)
    return scores, positive, int(sum(valid))


def _mean_ap(frames, thresholds, counted, included) -> float:
    """Mean AP over thresholds and classes that have counted ground truth"""
    classes = sorted({gt.class_id for _, gts in frames for gt in gts})
    values = []
    for class_id in classes:
        for threshold in thresholds:
            scores, positive, num_gt = [], [], 0
            for preds, gts in frames:
                s, p, n = _match(preds, gts, class_id, threshold, counted, included)
                scores.extend(s)
                positive.extend(p)
                num_gt += n
            if num_gt:
                values.append(average_precision(
                    np.array(scores), np.array(positive), num_gt))
    return float(np.mean(values)) if values else 0.
