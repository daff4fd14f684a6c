"""Permutation-invariant polyline matching costs, optimal assignment, and the
training-loss computation.

All polyline costs operate on normalized [0,1]^2 coordinates with a fixed
point count per polyline. The matching cost of a (prediction, ground truth)
pair is

    lambda1 * line_cost + lambda2 * focal_cost

where line_cost minimizes a mean per-point smooth-L1 over the permutation
group of the ground-truth polyline: {identity, reversal} for open polylines,
all cyclic shifts in both directions (2n elements) for closed ones. Every
element of the group parameterizes the same geometric curve.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .map_model import CLASS_NAMES, CLOSED, OPEN, MapInstance, Polyline

_P_MIN = 1e-8  # probability floor/ceiling inside logs


@dataclass(frozen=True)
class CostWeights:
    """Weights and shape parameters shared by matching cost and training loss."""

    lambda1: float = 50.0
    lambda2: float = 5.0
    lambda3: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        fields = (self.lambda1, self.lambda2, self.lambda3, self.focal_alpha, self.focal_gamma)
        if any(v < 0 for v in fields):
            raise ValueError("cost weights must be non-negative")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")


@dataclass(frozen=True, eq=False)
class PermutationGroup:
    """Point reorderings describing the same curve as the identity ordering."""

    kind: str
    n: int
    elements: np.ndarray  # (n_elements, n) index rows

    def __len__(self) -> int:
        return len(self.elements)


@lru_cache(maxsize=64)
def permutation_group(kind: str, n: int) -> PermutationGroup:
    idx = np.arange(n)
    if kind == OPEN:
        elements = np.stack([idx, idx[::-1]])
    elif kind == CLOSED:
        forward = [(idx + s) % n for s in range(n)]
        backward = [(s - idx) % n for s in range(n)]
        elements = np.stack(forward + backward)
    else:
        raise ValueError(f"unknown polyline kind {kind!r}")
    elements.setflags(write=False)
    return PermutationGroup(kind, n, elements)


@dataclass(frozen=True, eq=False)
class Assignment:
    """One-to-one pred/gt pairing of size min(n_pred, n_gt)."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_preds: tuple[int, ...]


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss terms plus the weighted total."""

    line: float
    focal: float
    trans: float
    total: float

    def to_dict(self) -> dict:
        return {"line": self.line, "focal": self.focal, "trans": self.trans, "total": self.total}


def _huber(diff: np.ndarray, beta: float) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * diff * diff / beta, a - 0.5 * beta)


def smooth_l1(a: np.ndarray, b: np.ndarray, beta: float = 1.0) -> float:
    """Per-coordinate Huber distance between two points, summed over x and y."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(_huber(diff, beta).sum())


def line_cost(pred: Polyline, gt: Polyline, w: CostWeights = CostWeights()) -> tuple[float, np.ndarray]:
    """Minimal mean smooth-L1 between pred and all reparameterizations of gt.

    Returns (cost, permutation) where permutation indexes gt's points; the
    group is chosen by gt's kind. Cost is the mean over the N_p per-point
    smooth-L1 terms.
    """
    if len(pred) != len(gt):
        raise ValueError(f"point counts differ: {len(pred)} vs {len(gt)}")
    group = permutation_group(gt.kind, len(gt))
    diffs = pred.points[None, :, :] - gt.points[group.elements]
    costs = _huber(diffs, w.smooth_l1_beta).sum(axis=2).mean(axis=1)
    best = int(np.argmin(costs))
    return float(costs[best]), group.elements[best].copy()


def _class_index(gt_class: int | str) -> int:
    if isinstance(gt_class, str):
        return CLASS_NAMES.index(gt_class)
    return int(gt_class)


def focal_cost(pred_logits: np.ndarray, gt_class: int | str,
               alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Focal classification cost: -alpha * (1-p)^gamma * log(p) for the true class."""
    logits = np.asarray(pred_logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    p = float(expit(logits[_class_index(gt_class)]))
    p = max(p, _P_MIN)
    return float(-alpha * (1.0 - p) ** gamma * np.log(p))


def match_cost_matrix(preds: list[tuple[np.ndarray, Polyline]], gts: list[MapInstance],
                      w: CostWeights = CostWeights()) -> np.ndarray:
    """(n_pred, n_gt) matching-cost matrix; empty gts give a 0-column matrix."""
    costs = np.zeros((len(preds), len(gts)))
    for i, (logits, poly) in enumerate(preds):
        for j, gt in enumerate(gts):
            line, _ = line_cost(poly, gt.polyline, w)
            focal = focal_cost(logits, gt.class_id, w.focal_alpha, w.focal_gamma)
            costs[i, j] = w.lambda1 * line + w.lambda2 * focal
    return costs


def hungarian(costs: np.ndarray) -> Assignment:
    """Exact minimum-cost one-to-one assignment (rows = preds, cols = gts)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    if costs.size and not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix entries must be finite")
    if costs.shape[0] == 0 or costs.shape[1] == 0:
        return Assignment(pairs=(), unmatched_preds=tuple(range(costs.shape[0])))
    rows, cols = linear_sum_assignment(costs)
    order = np.argsort(rows)
    pairs = tuple((int(rows[i]), int(cols[i])) for i in order)
    matched = {r for r, _ in pairs}
    unmatched = tuple(i for i in range(costs.shape[0]) if i not in matched)
    return Assignment(pairs=pairs, unmatched_preds=unmatched)


def transform_loss(pred_points: Polyline, target_points: Polyline, beta: float = 1.0) -> float:
    """Sum (not mean) of per-point smooth-L1 terms between two equal-length polylines."""
    if len(pred_points) != len(target_points):
        raise ValueError(f"point counts differ: {len(pred_points)} vs {len(target_points)}")
    diff = pred_points.points - target_points.points
    return float(_huber(diff, beta).sum())


def _focal_terms(logits: np.ndarray, gt_index: int | None, alpha: float, gamma: float) -> float:
    """Full sigmoid focal loss over all classes for one prediction.

    gt_index None means background: every class is a negative. Otherwise the
    gt class contributes the positive term and the rest contribute negatives.
    """
    p = np.clip(expit(np.asarray(logits, dtype=np.float64)), _P_MIN, 1.0 - _P_MIN)
    total = 0.0
    for c in range(len(p)):
        if c == gt_index:
            total += -alpha * (1.0 - p[c]) ** gamma * np.log(p[c])
        else:
            total += -(1.0 - alpha) * p[c] ** gamma * np.log(1.0 - p[c])
    return float(total)


def training_loss(preds: list[tuple[np.ndarray, Polyline]], gts: list[MapInstance],
                  assignment: Assignment, w: CostWeights = CostWeights(),
                  trans_pairs: Sequence[tuple[Polyline, Polyline]] = ()) -> LossBreakdown:
    """Scene loss: weighted line + focal + transform terms.

    Matched predictions contribute the line cost against their ground truth and
    a full focal loss with the gt class as the positive; unmatched predictions
    are pushed toward all-zero class probabilities (every class negative).
    ``trans_pairs`` holds (predicted, target) polylines for propagated queries.
    """
    line = 0.0
    focal = 0.0
    for i, j in assignment.pairs:
        line += line_cost(preds[i][1], gts[j].polyline, w)[0]
        focal += _focal_terms(preds[i][0], gts[j].class_index, w.focal_alpha, w.focal_gamma)
    for i in assignment.unmatched_preds:
        focal += _focal_terms(preds[i][0], None, w.focal_alpha, w.focal_gamma)
    trans = sum(transform_loss(a, b, w.smooth_l1_beta) for a, b in trans_pairs)
    total = w.lambda1 * line + w.lambda2 * focal + w.lambda3 * trans
    return LossBreakdown(line=line, focal=focal, trans=float(trans), total=float(total))
