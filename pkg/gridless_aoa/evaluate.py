"""Detection scoring: TP/FP/FN matching, PR curves and condition sweeps"""
import itertools
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from gridless_aoa.simulate import make_scene
from gridless_aoa.simulate import scene_seed
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import log
from gridless_aoa.utils import parallel_map
from gridless_aoa.utils import write_json

# Slack on the inclusive angle tolerance, absorbs rounding of angle differences
TOLERANCE_SLACK_DEG = 1e-9


class SweepCondition(NamedTuple):
    snr_db: float
    n_targets: int
    dynamic_range_db: float


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one scene's detections to its targets

    `tp_pairs` holds (gt_index, detection_index, angle_error_deg,
    mag_error_db) tuples, errors measured against the matched target.
    """

    tp_pairs: tuple
    fp_indices: tuple
    fn_indices: tuple

    @property
    def matched_gt_indices(self):
        return tuple(sorted({pair[0] for pair in self.tp_pairs}))


def _target_arrays(targets):
    angles = np.array([t.angle for t in targets], dtype=float)
    magnitudes = np.array([t.magnitude_db for t in targets], dtype=float)
    return angles, magnitudes


def _distances(detections, gt_angles):
    return np.abs(detections.angles[:, None] - gt_angles[None, :])


def match_detections(detections, targets, angle_tol_deg=0.5, one_to_one=False):
    """Split detections into true and false positives and find missed targets

    By default a detection is a true positive when any target lies within
    `angle_tol_deg` (inclusive), so several detections may claim one target.
    With `one_to_one`, pairs are taken greedily by ascending angle error and
    each target is claimed at most once.

    Parameters
    ----------
    detections : DetectionSet
        Detections, already filtered at the operating threshold
    targets : list of Target
        Ground truth of the scene
    angle_tol_deg : float
        Angle tolerance in degrees
    one_to_one : bool
        Use the strict one-to-one rule

    Returns
    -------
    MatchResult
        True positives, false positive and missed target indices
    """
    if angle_tol_deg <= 0:
        msg = f'angle_tol_deg must be positive, got {angle_tol_deg}'
        raise ValueError(msg)
    gt_angles, gt_magnitudes = _target_arrays(targets)
    count = len(detections)
    if count == 0 or len(gt_angles) == 0:
        return MatchResult((), tuple(range(count)), tuple(range(len(gt_angles))))

    distances = _distances(detections, gt_angles)
    within = distances <= angle_tol_deg + TOLERANCE_SLACK_DEG

    pairs = []
    if one_to_one:
        candidates = sorted(
            (distances[d, g], d, g) for d, g in zip(*np.nonzero(within))
        )
        used_detections, used_targets = set(), set()
        for _, d, g in candidates:
            if d in used_detections or g in used_targets:
                continue
            used_detections.add(d)
            used_targets.add(g)
            pairs.append((int(g), int(d)))
        matched_targets = used_targets
    else:
        nearest = np.argmin(distances, axis=1)
        for d in np.nonzero(within.any(axis=1))[0]:
            pairs.append((int(nearest[d]), int(d)))
        matched_targets = set(np.nonzero(within.any(axis=0))[0].tolist())

    tp_pairs = tuple(
        (
            g,
            d,
            float(abs(detections.angles[d] - gt_angles[g])),
            float(abs(detections.magnitudes[d] - gt_magnitudes[g])),
        )
        for g, d in sorted(pairs, key=lambda pair: pair[1])
    )
    tp_detections = {d for _, d in pairs}
    return MatchResult(
        tp_pairs,
        tuple(d for d in range(count) if d not in tp_detections),
        tuple(g for g in range(len(gt_angles)) if g not in matched_targets),
    )


def threshold_grid(thresholds):
    """Ascending thresholds from a count (uniform in [0, 1]) or a sequence"""
    if np.isscalar(thresholds):
        if int(thresholds) < 2:
            msg = 'Need at least two confidence thresholds'
            raise ValueError(msg)
        return np.linspace(0.0, 1.0, int(thresholds))
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.ndim != 1 or thresholds.size == 0 or np.any(np.diff(thresholds) < 0):
        msg = 'Thresholds must be a non-empty ascending sequence'
        raise ValueError(msg)
    return thresholds


def _ratios(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=float) for v in (tp, fp, fn))
    precision = np.divide(tp, tp + fp, out=np.ones_like(tp), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.ones_like(tp), where=(tp + fn) > 0)
    return precision, recall


def _counts_many_to_one(detections, targets, thresholds, angle_tol_deg):
    confidences, positives, best = [], [], []
    for scene_detections, scene_targets in zip(detections, targets):
        gt_angles, _ = _target_arrays(scene_targets)
        conf = scene_detections.confidences
        if len(gt_angles) and len(conf):
            within = _distances(scene_detections, gt_angles) <= (
                angle_tol_deg + TOLERANCE_SLACK_DEG
            )
            positives.append(within.any(axis=1))
            # A target is found at threshold t when a detection within
            # tolerance survives t, i.e. its most confident one does
            best.append(np.where(within, conf[:, None], -np.inf).max(axis=0))
        else:
            positives.append(np.zeros(len(conf), dtype=bool))
            best.append(np.full(len(gt_angles), -np.inf))
        confidences.append(conf)

    confidences = np.concatenate([np.empty(0), *confidences])
    positives = np.concatenate([np.empty(0, dtype=bool), *positives])
    best = np.sort(np.concatenate([np.empty(0), *best]))
    tp_conf = np.sort(confidences[positives])
    fp_conf = np.sort(confidences[~positives])

    # Counts of values >= t on sorted arrays
    tp = len(tp_conf) - np.searchsorted(tp_conf, thresholds, side='left')
    fp = len(fp_conf) - np.searchsorted(fp_conf, thresholds, side='left')
    fn = np.searchsorted(best, thresholds, side='left')
    return tp, fp, fn


def _counts_per_threshold(detections, targets, thresholds, angle_tol_deg, one_to_one):
    tp, fp, fn = (np.zeros(len(thresholds), dtype=int) for _ in range(3))
    for i, threshold in enumerate(thresholds):
        for scene_detections, scene_targets in zip(detections, targets):
            result = match_detections(
                scene_detections.filter(threshold),
                scene_targets,
                angle_tol_deg,
                one_to_one,
            )
            tp[i] += len(result.tp_pairs)
            fp[i] += len(result.fp_indices)
            fn[i] += len(result.fn_indices)
    return tp, fp, fn


def pr_curve(detections, targets, thresholds=101, angle_tol_deg=0.5, one_to_one=False):
    """Precision and recall aggregated over scenes per confidence threshold

    A detection survives threshold t when its confidence is at least t.
    Precision is 1 when nothing survives and recall is 1 when a threshold
    sees neither true positives nor missed targets.

    Parameters
    ----------
    detections : list of DetectionSet
        Unfiltered detector output per scene
    targets : list of list of Target
        Ground truth per scene
    thresholds : int | array_like
        Number of uniform thresholds in [0, 1] or an ascending sequence
    angle_tol_deg : float
        Angle tolerance in degrees
    one_to_one : bool
        Use the strict one-to-one matching rule

    Returns
    -------
    list of tuple
        (threshold, precision, recall) per threshold
    """
    if len(detections) != len(targets):
        msg = 'Need one ground truth list per detection set'
        raise ValueError(msg)
    if angle_tol_deg <= 0:
        msg = f'angle_tol_deg must be positive, got {angle_tol_deg}'
        raise ValueError(msg)
    thresholds = threshold_grid(thresholds)
    if one_to_one:
        counts = _counts_per_threshold(
            detections, targets, thresholds, angle_tol_deg, one_to_one
        )
    else:
        counts = _counts_many_to_one(detections, targets, thresholds, angle_tol_deg)
    precision, recall = _ratios(*counts)
    return [
        (float(t), float(p), float(r))
        for t, p, r in zip(thresholds, precision, recall)
    ]


def f1_scores(pr_points):
    precision = np.array([p for _, p, _ in pr_points], dtype=float)
    recall = np.array([r for _, _, r in pr_points], dtype=float)
    total = precision + recall
    return np.divide(
        2 * precision * recall, total, out=np.zeros_like(total), where=total > 0
    )


def best_operating_point(pr_points):
    """(threshold, precision, recall, f1) of the max-F1 point, lowest threshold on ties"""
    if not pr_points:
        msg = 'Cannot take the maximum F1 of an empty PR curve'
        raise ValueError(msg)
    scores = f1_scores(pr_points)
    best = int(np.argmax(scores))
    threshold, precision, recall = pr_points[best]
    return threshold, precision, recall, float(scores[best])


def max_f1(pr_points):
    """Maximum of 2PR / (P + R) over the PR points, 0 where P + R = 0"""
    return best_operating_point(pr_points)[3]


def error_metrics(match_results):
    """Mean absolute angle (deg) and magnitude (dB) errors over all true positives

    Returns (None, None) when there are no true positives.
    """
    pairs = [pair for result in match_results for pair in result.tp_pairs]
    if not pairs:
        return None, None
    errors = np.array([(a, m) for _, _, a, m in pairs], dtype=float)
    return float(errors[:, 0].mean()), float(errors[:, 1].mean())


@dataclass(frozen=True)
class EvalReport:
    condition: SweepCondition
    pr_points: tuple
    max_f1: float
    best_threshold: float
    mean_angle_l1_deg: float
    mean_mag_l1_db: float
    sample_count: int
    detector: str
    angle_tol_deg: float

    def to_dict(self):
        """Summary without the PR points"""
        return {
            'detector': self.detector,
            'snr_db': self.condition.snr_db,
            'n_targets': self.condition.n_targets,
            'dynamic_range_db': self.condition.dynamic_range_db,
            'max_f1': self.max_f1,
            'best_threshold': self.best_threshold,
            'mean_angle_l1_deg': self.mean_angle_l1_deg,
            'mean_mag_l1_db': self.mean_mag_l1_db,
            'sample_count': self.sample_count,
            'angle_tol_deg': self.angle_tol_deg,
        }


def evaluate_detections(
    detections,
    targets,
    condition,
    detector='detector',
    thresholds=101,
    angle_tol_deg=0.5,
    one_to_one=False,
):
    """EvalReport of one condition from detector output and ground truth"""
    points = tuple(pr_curve(detections, targets, thresholds, angle_tol_deg, one_to_one))
    threshold, _, _, best = best_operating_point(points)
    results = [
        match_detections(d.filter(threshold), t, angle_tol_deg, one_to_one)
        for d, t in zip(detections, targets)
    ]
    angle_l1, mag_l1 = error_metrics(results)
    return EvalReport(
        condition=SweepCondition(*condition),
        pr_points=points,
        max_f1=best,
        best_threshold=threshold,
        mean_angle_l1_deg=angle_l1,
        mean_mag_l1_db=mag_l1,
        sample_count=len(detections),
        detector=detector,
        angle_tol_deg=float(angle_tol_deg),
    )


@dataclass(frozen=True)
class SweepGrid:
    """Evaluation conditions, the product SNR x target count x dynamic range"""

    snr_db: tuple
    n_targets: tuple
    dynamic_range_db: tuple = (13.0,)
    scenes_per_condition: int = 500

    def __post_init__(self):
        for name in ('snr_db', 'n_targets', 'dynamic_range_db'):
            values = tuple(getattr(self, name))
            if not values:
                msg = f'Sweep axis {name} is empty'
                raise ValueError(msg)
            object.__setattr__(self, name, values)
        if not all(np.isfinite(self.snr_db)) or min(self.snr_db) <= -1e4:
            msg = 'Sweep SNRs must be finite and above -10000 dB'
            raise ValueError(msg)
        if min(self.n_targets) < 0 or min(self.dynamic_range_db) < 0:
            msg = 'Target counts and dynamic ranges must be non-negative'
            raise ValueError(msg)
        if self.scenes_per_condition < 1:
            msg = 'scenes_per_condition must be positive'
            raise ValueError(msg)

    def conditions(self):
        return [
            SweepCondition(float(snr), int(n), float(dr))
            for snr, n, dr in itertools.product(
                self.snr_db, self.n_targets, self.dynamic_range_db
            )
        ]

    def replace(self, **changes):
        values = {
            'snr_db': self.snr_db,
            'n_targets': self.n_targets,
            'dynamic_range_db': self.dynamic_range_db,
            'scenes_per_condition': self.scenes_per_condition,
        }
        values.update({k: v for k, v in changes.items() if v is not None})
        return SweepGrid(**values)

    @classmethod
    def from_dict(cls, section):
        """Preset named by `eval.grid`, with any axis overridden by the section"""
        try:
            preset = GRID_PRESETS[section.get('grid', 'desk')]
            return preset.replace(
                **{
                    key: section.get(key)
                    for key in (
                        'snr_db',
                        'n_targets',
                        'dynamic_range_db',
                        'scenes_per_condition',
                    )
                }
            )
        except (KeyError, ValueError) as err:
            msg = f'Invalid config at "eval": {err}'
            raise ConfigError(msg) from None


DESK_GRID = SweepGrid(snr_db=(25.0, 35.0), n_targets=(2, 4), scenes_per_condition=500)
PAPER_GRID = SweepGrid(
    snr_db=(15.0, 20.0, 25.0, 30.0, 35.0),
    n_targets=tuple(range(2, 11)),
    scenes_per_condition=4000,
)
GRID_PRESETS = {'desk': DESK_GRID, 'paper': PAPER_GRID}


def condition_seed(seed, condition, index):
    """Scene seed of scene `index` of a condition, in the evaluation namespace"""
    return scene_seed(
        'eval',
        seed,
        round(condition.snr_db * 100) + 10**6,
        condition.n_targets,
        round(condition.dynamic_range_db * 100),
        index,
    )


def condition_scenes(scene_config, geometry, condition, count, seed=0, workers=1):
    """The fixed scene set of one evaluation condition

    Every detector evaluated with the same arguments sees bit-identical scenes.
    """
    condition = SweepCondition(*condition)
    config = scene_config.for_condition(*condition)
    return parallel_map(
        lambda i: make_scene(config, geometry, condition_seed(seed, condition, i)),
        range(count),
        workers,
    )


def detect_scenes(detector, scenes, workers=1):
    """Run `detector` on every scene, batched when the detector supports it"""
    batch = getattr(detector, 'batch', None)
    if batch is not None:
        return batch(scenes)
    return parallel_map(detector, scenes, workers)


def detector_name(detector):
    return getattr(detector, 'name', None) or type(detector).__name__


def run_sweep(
    detector,
    geometry,
    grid,
    scene_config,
    thresholds=101,
    angle_tol_deg=0.5,
    one_to_one=False,
    seed=0,
    workers=1,
    progress=True,
    timings=None,
):
    """Evaluate `detector` on every condition of `grid`

    Parameters
    ----------
    detector : callable
        Scene to DetectionSet, optionally with a `batch(scenes)` method
    geometry : ArrayGeometry
        Array the scenes are synthesized on
    grid : SweepGrid
        Evaluation conditions
    scene_config : SceneConfig
        Field of view and magnitude ceiling of the scenes
    thresholds : int | array_like
        Confidence thresholds of the PR curves
    angle_tol_deg : float
        Angle tolerance in degrees
    one_to_one : bool
        Use the strict one-to-one matching rule
    seed : int
        Evaluation seed, scenes are drawn from the `eval` namespace
    workers : int
        Threads for scene generation and unbatched detectors
    progress : bool
        Show a progress bar
    timings : list | None
        When given, one dict per condition with the detector wall time per
        scene is appended to it

    Returns
    -------
    list of EvalReport
        One report per condition, in grid order
    """
    name = detector_name(detector)
    reports = []
    conditions = grid.conditions()
    for condition in tqdm(
        conditions, desc=f'Evaluating {name}', unit=' condition', disable=not progress
    ):
        scenes = condition_scenes(
            scene_config, geometry, condition, grid.scenes_per_condition, seed, workers
        )
        start = time.perf_counter()
        detections = detect_scenes(detector, scenes, workers)
        elapsed = time.perf_counter() - start
        if timings is not None:
            timings.append(
                {
                    'detector': name,
                    'snr_db': condition.snr_db,
                    'n_targets': condition.n_targets,
                    'dynamic_range_db': condition.dynamic_range_db,
                    'seconds_per_scene': elapsed / len(scenes),
                }
            )
        report = evaluate_detections(
            detections,
            [scene.targets for scene in scenes],
            condition,
            name,
            thresholds,
            angle_tol_deg,
            one_to_one,
        )
        reports.append(report)
        log(
            f'{name} at SNR {condition.snr_db:g} dB, N = {condition.n_targets}, '
            f'DR {condition.dynamic_range_db:g} dB: max F1 {report.max_f1:.3f} '
            f'({1e3 * elapsed / len(scenes):.2f} ms per scene)'
        )
    return reports


def reports_to_frame(reports):
    """One row per report and threshold"""
    columns = [
        'detector',
        'snr_db',
        'n_targets',
        'dynamic_range_db',
        'threshold',
        'precision',
        'recall',
        'f1',
    ]
    rows = []
    for report in reports:
        scores = f1_scores(report.pr_points)
        for (threshold, precision, recall), f1 in zip(report.pr_points, scores):
            rows.append(
                [
                    report.detector,
                    report.condition.snr_db,
                    report.condition.n_targets,
                    report.condition.dynamic_range_db,
                    threshold,
                    precision,
                    recall,
                    float(f1),
                ]
            )
    return pd.DataFrame(rows, columns=columns)


def write_reports(out_dir, reports, timings=None, detectors=None):
    """Write report.csv, summary.json, pr_curves.svg and metrics.svg

    Parameters
    ----------
    out_dir : str | Path
        Output directory
    reports : list of EvalReport
        Reports of one or more detectors
    timings : list | None
        Per-condition timing records from `run_sweep`
    detectors : dict | None
        Settings of each detector, by name

    Returns
    -------
    dict
        Written paths by kind
    """
    from gridless_aoa.render import plot_condition_metrics
    from gridless_aoa.render import plot_pr_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'report': out_dir / 'report.csv',
        'summary': out_dir / 'summary.json',
        'pr_curves': out_dir / 'pr_curves.svg',
        'metrics': out_dir / 'metrics.svg',
    }
    reports_to_frame(reports).to_csv(paths['report'], index=False, float_format='%.6f')
    write_json(
        paths['summary'],
        {
            'reports': [report.to_dict() for report in reports],
            'detectors': detectors or {},
            'timing': timings or [],
        },
    )
    paths['pr_curves'].write_text(plot_pr_curves(reports), encoding='utf-8')
    paths['metrics'].write_text(plot_condition_metrics(reports), encoding='utf-8')
    return paths
