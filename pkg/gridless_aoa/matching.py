"""Bipartite matching between ground truth and predictions, and the set loss"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from scipy.optimize import linear_sum_assignment

from gridless_aoa.utils import ConfigError

LOSS_COMPONENTS = ('cls_pos', 'cls_neg', 'angle', 'magnitude')
LOSS_WEIGHT_KEYS = ('w_theta', 'w_alpha', 'w_noobj')

# Assignment totals this close, relative to the summed absolute costs, are ties
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Weights of the matching cost and loss terms

    Angle and magnitude errors are divided by `theta_span` and `mag_span`
    (the output ranges of the model) before weighting.
    """

    w_theta: float = 5.0
    w_alpha: float = 2.0
    w_noobj: float = 0.1
    theta_span: float = 120.0
    mag_span: float = 40.0

    def __post_init__(self):
        for name in LOSS_WEIGHT_KEYS:
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                msg = f'{name} must be finite and non-negative, got {value}'
                raise ValueError(msg)
        if not (self.theta_span > 0 and self.mag_span > 0):
            msg = 'Normalization spans must be positive'
            raise ValueError(msg)

    @classmethod
    def for_model(cls, model_config, section=None):
        """Weights from the `loss` config section, spans from the model ranges"""
        section = section or {}
        try:
            return cls(
                theta_span=model_config.theta_max - model_config.theta_min,
                mag_span=model_config.mag_max - model_config.mag_min,
                **{k: section[k] for k in LOSS_WEIGHT_KEYS if k in section},
            )
        except ValueError as err:
            msg = f'Invalid config at "loss": {err}'
            raise ConfigError(msg) from None


@dataclass(frozen=True)
class Assignment:
    """Ground truth to query pairs, sorted by ground truth index"""

    pairs: tuple
    unmatched_queries: tuple

    @property
    def gt_indices(self):
        return np.array([i for i, _ in self.pairs], dtype=int)

    @property
    def query_indices(self):
        return np.array([j for _, j in self.pairs], dtype=int)


def _target_arrays(gt):
    angles = np.array([t.angle for t in gt], dtype=float)
    magnitudes = np.array([t.magnitude_db for t in gt], dtype=float)
    return angles, magnitudes


def _costs(gt_angles, gt_magnitudes, angles, magnitudes, neg_log_conf, weights):
    angle_term = np.abs(gt_angles[:, None] - angles[None, :]) / weights.theta_span
    mag_term = np.abs(gt_magnitudes[:, None] - magnitudes[None, :]) / weights.mag_span
    return (
        neg_log_conf[None, :]
        + weights.w_theta * angle_term
        + weights.w_alpha * mag_term
    )


def _check_confidences(confidences):
    confidences = np.asarray(confidences, dtype=float)
    if np.any((confidences <= 0) | (confidences >= 1)):
        msg = 'Prediction confidences must lie strictly inside (0, 1)'
        raise ValueError(msg)
    return confidences


def match_cost(gt_target, prediction, weights):
    """Cost of matching one target with one prediction

    Parameters
    ----------
    gt_target : Target
        Ground truth target
    prediction : tuple
        (angle in degrees, magnitude in dB, confidence)
    weights : LossWeights
        Cost weights

    Returns
    -------
    float
        -log p + w_theta |dtheta| / theta_span + w_alpha |dalpha| / mag_span
    """
    angle, magnitude, confidence = prediction
    confidence = _check_confidences([confidence])[0]
    return float(
        -np.log(confidence)
        + weights.w_theta * abs(gt_target.angle - angle) / weights.theta_span
        + weights.w_alpha * abs(gt_target.magnitude_db - magnitude) / weights.mag_span
    )


def cost_matrix(gt, predictions, weights):
    """N x M matrix of `match_cost` between targets and a DetectionSet"""
    confidences = _check_confidences(predictions.confidences)
    gt_angles, gt_magnitudes = _target_arrays(gt)
    return _costs(
        gt_angles,
        gt_magnitudes,
        predictions.angles,
        predictions.magnitudes,
        -np.log(confidences),
        weights,
    )


def _optimum(costs):
    """Minimum total cost of an injective row to column map"""
    if costs.shape[0] == 0:
        return 0.0
    rows, columns = linear_sum_assignment(costs)
    return float(costs[rows, columns].sum())


def _is_tie(value, target, scale):
    return abs(value - target) <= TIE_RTOL * scale


def _has_other_optimum(costs, pairs, target, scale):
    """Whether an optimum exists that avoids one of `pairs`"""
    rows, columns = costs.shape
    if rows == columns == 1:
        return False
    for i, j in pairs:
        forbidden = costs.copy()
        forbidden[i, j] = np.inf
        if _is_tie(_optimum(forbidden), target, scale):
            return True
    return False


def _lexicographic_optimum(costs, pairs):
    """Lexicographically smallest optimal pairs, given any optimum `pairs`

    Rows are fixed in order, each to the smallest free column that still
    admits an optimal completion of the remaining rows.
    """
    rows, columns = costs.shape
    pairs = list(pairs)
    target = float(sum(costs[i, j] for i, j in pairs))
    scale = max(1.0, float(np.abs(costs).sum()))
    if not _has_other_optimum(costs, pairs, target, scale):
        return tuple(sorted(pairs))
    chosen, used, spent = [], set(), 0.0
    for i in range(rows):
        for j in range(columns):
            if j in used:
                continue
            free = [c for c in range(columns) if c not in used and c != j]
            total = spent + costs[i, j] + _optimum(costs[i + 1 :][:, free])
            if _is_tie(total, target, scale):
                chosen.append((i, j))
                used.add(j)
                spent += costs[i, j]
                break
    return tuple(chosen)


def solve_assignment(costs):
    """Exact minimum-cost injective map from rows to columns

    Among several optimal maps the lexicographically smallest sequence of
    (gt_index, query_index) pairs is returned. Totals within `TIE_RTOL` of
    the summed absolute costs count as ties.

    Parameters
    ----------
    costs : array_like
        N x M cost matrix with N <= M

    Returns
    -------
    Assignment
        Optimal pairs
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        msg = 'Cost matrix must be two dimensional'
        raise ValueError(msg)
    rows, columns = costs.shape
    if rows > columns:
        msg = f'Cannot assign {rows} targets to {columns} queries'
        raise ValueError(msg)
    if rows == 0:
        return Assignment((), tuple(range(columns)))
    gt_index, query_index = linear_sum_assignment(costs)
    pairs = _lexicographic_optimum(costs, zip(gt_index.tolist(), query_index.tolist()))
    return _assignment(pairs, columns)


def _assignment(pairs, columns):
    matched = {j for _, j in pairs}
    return Assignment(pairs, tuple(j for j in range(columns) if j not in matched))


def padded_assignment(costs):
    """Solve the square M x M problem with zero-cost padding rows

    Equivalent to `solve_assignment` on the unpadded rectangle, including
    the tie-break.
    """
    costs = np.asarray(costs, dtype=float)
    rows, columns = costs.shape
    if rows > columns:
        msg = f'Cannot assign {rows} targets to {columns} queries'
        raise ValueError(msg)
    if rows == 0:
        return Assignment((), tuple(range(columns)))
    square = np.zeros((columns, columns))
    square[:rows] = costs
    gt_index, query_index = linear_sum_assignment(square)
    pairs = [(i, j) for i, j in zip(gt_index.tolist(), query_index.tolist()) if i < rows]
    return _assignment(_lexicographic_optimum(costs, pairs), columns)


def assignment_cost(costs, assignment):
    """Total cost of the pairs of `assignment`"""
    costs = np.asarray(costs, dtype=float)
    return float(sum(costs[i, j] for i, j in assignment.pairs))


def optimal_assignment(gt, predictions, weights):
    """Optimal matching of N targets to the M slots of a DetectionSet

    Parameters
    ----------
    gt : list of Target
        Ground truth targets
    predictions : DetectionSet
        Predicted slots
    weights : LossWeights
        Cost weights

    Returns
    -------
    Assignment
        Pairs minimizing the total `match_cost`
    """
    if len(gt) > len(predictions):
        msg = f'Cannot assign {len(gt)} targets to {len(predictions)} queries'
        raise ValueError(msg)
    return solve_assignment(cost_matrix(gt, predictions, weights))


def _set_loss(predictions, batch_index, query_index, gt_angles, gt_magnitudes, weights):
    angles, magnitudes, logits = predictions
    dtype = angles.dtype
    batch_index = torch.as_tensor(batch_index, dtype=torch.long)
    query_index = torch.as_tensor(query_index, dtype=torch.long)
    gt_angles = torch.as_tensor(gt_angles, dtype=dtype)
    gt_magnitudes = torch.as_tensor(gt_magnitudes, dtype=dtype)

    matched = torch.zeros_like(logits, dtype=torch.bool)
    matched[batch_index, query_index] = True

    cls_pos = -F.logsigmoid(logits[batch_index, query_index]).sum()
    cls_neg = weights.w_noobj * -F.logsigmoid(-logits[~matched]).sum()
    angle = (
        weights.w_theta
        * (gt_angles - angles[batch_index, query_index]).abs().sum()
        / weights.theta_span
    )
    magnitude = (
        weights.w_alpha
        * (gt_magnitudes - magnitudes[batch_index, query_index]).abs().sum()
        / weights.mag_span
    )
    slots = logits.numel()
    components = {
        'cls_pos': cls_pos / slots,
        'cls_neg': cls_neg / slots,
        'angle': angle / slots,
        'magnitude': magnitude / slots,
    }
    total = components['cls_pos'] + components['cls_neg']
    total = total + components['angle'] + components['magnitude']
    return total, components


def training_loss(gt, predictions, assignment, weights):
    """Set loss of one item for a fixed assignment

    Matched queries pay -log p plus weighted normalized angle and magnitude
    errors, unmatched ones pay w_noobj * -log(1 - p). The sum is divided by
    the number of queries.

    Parameters
    ----------
    gt : list of Target
        Ground truth targets
    predictions : Predictions
        Head outputs shaped (M,)
    assignment : Assignment
        Matching of `gt` to the queries
    weights : LossWeights
        Loss weights

    Returns
    -------
    tuple
        Total loss tensor and a dict of the per-term tensors
    """
    if len(assignment.pairs) != len(gt):
        msg = 'Assignment does not cover every ground truth target'
        raise ValueError(msg)
    gt_angles, gt_magnitudes = _target_arrays(gt)
    order = assignment.gt_indices
    batched = tuple(t.unsqueeze(0) for t in predictions)
    return _set_loss(
        batched,
        np.zeros(len(order), dtype=int),
        assignment.query_indices,
        gt_angles[order],
        gt_magnitudes[order],
        weights,
    )


def batch_loss(gt_batch, predictions, weights):
    """Mean set loss over a batch, matching every item independently

    Parameters
    ----------
    gt_batch : list of list of Target
        Ground truth of each item
    predictions : Predictions
        Head outputs shaped (B, M)
    weights : LossWeights
        Loss weights

    Returns
    -------
    tuple
        Mean total loss tensor, dict of mean per-term tensors and the
        assignments
    """
    angles, magnitudes, logits = predictions.numpy()
    neg_log_conf = np.logaddexp(0.0, -logits)
    batch_index, query_index, gt_angles, gt_magnitudes = [], [], [], []
    assignments = []
    for item, gt in enumerate(gt_batch):
        item_angles, item_magnitudes = _target_arrays(gt)
        costs = _costs(
            item_angles,
            item_magnitudes,
            angles[item],
            magnitudes[item],
            neg_log_conf[item],
            weights,
        )
        assignment = solve_assignment(costs)
        assignments.append(assignment)
        order = assignment.gt_indices
        batch_index.extend([item] * len(order))
        query_index.extend(assignment.query_indices.tolist())
        gt_angles.extend(item_angles[order].tolist())
        gt_magnitudes.extend(item_magnitudes[order].tolist())
    total, components = _set_loss(
        predictions, batch_index, query_index, gt_angles, gt_magnitudes, weights
    )
    return total, components, assignments
