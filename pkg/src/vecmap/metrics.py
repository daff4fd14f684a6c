"""Chamfer-distance Average Precision evaluation over classes and thresholds.

Protocol: within each frame, predictions of a class are processed in
descending confidence order (ties broken by the prediction's smallest Chamfer
to any ground truth of that class, then by input order). Each prediction is
greedily matched to the unmatched ground truth with minimum Chamfer and counts
as a true positive iff that Chamfer is below the threshold; only true
positives consume their ground truth. Matching never crosses frames;
(confidence, tp) records accumulate over the whole dataset and the AP is the
all-points interpolated area under the precision-recall curve.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .map_model import CLASS_NAMES, LocalMap, MapInstance, PerceptionRange, Polyline

THRESHOLD_PRESETS = {30.0: (0.5, 1.0, 1.5), 50.0: (1.0, 1.5, 2.0)}


class FrameAlignmentError(ValueError):
    """Prediction and ground-truth sequences do not cover the same frames."""


@dataclass(frozen=True)
class EvalConfig:
    range: PerceptionRange
    thresholds: tuple[float, ...]
    sample_spacing: float = 0.1
    classes: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ValueError("thresholds must be positive")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if self.sample_spacing <= 0:
            raise ValueError("sample_spacing must be positive")

    @classmethod
    def preset(cls, x_half: float, sample_spacing: float = 0.1) -> "EvalConfig":
        """Canonical config for the 30 m or 50 m perception range."""
        try:
            thresholds = THRESHOLD_PRESETS[float(x_half)]
        except KeyError:
            raise ValueError(f"no threshold preset for x_half={x_half}") from None
        r = PerceptionRange(float(x_half), float(x_half) / 2.0)
        return cls(range=r, thresholds=thresholds, sample_spacing=sample_spacing)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Per-class AP at each threshold, threshold-averaged APs, and mAP.

    Classes with neither predictions nor ground truths anywhere carry NaN and
    are excluded from the averages.
    """

    classes: tuple[str, ...]
    thresholds: tuple[float, ...]
    ap: dict[str, dict[float, float]]
    ap_by_class: dict[str, float]
    mean_ap: float
    counts: dict[str, dict[float, dict[str, int]]]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "thresholds": list(self.thresholds),
            "ap": {c: {str(t): v for t, v in row.items()} for c, row in self.ap.items()},
            "ap_by_class": dict(self.ap_by_class),
            "mAP": self.mean_ap,
            "counts": {
                c: {str(t): dict(v) for t, v in row.items()} for c, row in self.counts.items()
            },
        }

    def format_table(self) -> str:
        """Aligned text table, columns AP_ped, AP_div, AP_bound, mAP."""
        headers = ["threshold", "AP_ped", "AP_div", "AP_bound", "mAP"]
        rows = []
        for t in self.thresholds:
            vals = [self.ap[c][t] for c in CLASS_NAMES]
            row_map = float(np.nanmean(vals)) if not all(math.isnan(v) for v in vals) else math.nan
            rows.append([f"{t:.1f}m"] + [_fmt_ap(v) for v in vals] + [_fmt_ap(row_map)])
        rows.append(["mean"] + [_fmt_ap(self.ap_by_class[c]) for c in CLASS_NAMES]
                    + [_fmt_ap(self.mean_ap)])
        widths = [max(len(h), max(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
        for r in rows:
            lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
        return "\n".join(lines)


def _fmt_ap(v: float) -> str:
    return "  n/a" if math.isnan(v) else f"{v:.3f}"


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

def densify_polyline(p: Polyline, spacing: float) -> np.ndarray:
    """Sample points along p at most ``spacing`` apart.

    Every segment is subdivided into equal pieces (endpoint exclusive); open
    polylines append the final vertex. The resulting point set is identical
    under reversal and, for closed polylines, under cyclic relabeling, which
    keeps the Chamfer distance exactly invariant to reparameterization.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    verts = p.vertices
    pieces = []
    for a, b in zip(verts[:-1], verts[1:]):
        length = float(np.hypot(*(b - a)))
        steps = max(1, math.ceil(length / spacing))
        ts = np.arange(steps) / steps
        pieces.append(a + ts[:, None] * (b - a))
    if not p.is_closed:
        pieces.append(verts[-1:])
    return np.vstack(pieces)


def chamfer(a: Polyline, b: Polyline, spacing: float = 0.1) -> float:
    """Symmetric Chamfer distance between two densified polylines (meters)."""
    if a.arc_length() <= 0.0 or b.arc_length() <= 0.0:
        raise ValueError("zero-length polyline")
    sa = densify_polyline(a, spacing)
    sb = densify_polyline(b, spacing)
    d_ab = cKDTree(sb).query(sa)[0].mean()
    d_ba = cKDTree(sa).query(sb)[0].mean()
    return 0.5 * (d_ab + d_ba)


# ---------------------------------------------------------------------------
# AP accumulation
# ---------------------------------------------------------------------------

def _class_chamfer_matrix(preds: Sequence[MapInstance], gts: Sequence[MapInstance],
                          spacing: float) -> np.ndarray:
    mat = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            mat[i, j] = chamfer(p.polyline, g.polyline, spacing)
    return mat


def _greedy_match(chamfer_mat: np.ndarray, confidences: Sequence[float],
                  threshold: float) -> list[tuple[float, bool]]:
    """Confidence-ordered greedy matching; returns (confidence, is_tp) per pred."""
    n_pred, n_gt = chamfer_mat.shape
    row_best = chamfer_mat.min(axis=1) if n_gt else np.full(n_pred, np.inf)
    order = sorted(range(n_pred), key=lambda i: (-confidences[i], row_best[i], i))
    taken = np.zeros(n_gt, dtype=bool)
    records = []
    for i in order:
        best_j, best_d = -1, np.inf
        for j in range(n_gt):
            if not taken[j] and chamfer_mat[i, j] < best_d:
                best_j, best_d = j, chamfer_mat[i, j]
        is_tp = best_d < threshold
        if is_tp:
            taken[best_j] = True
        records.append((float(confidences[i]), is_tp))
    return records


def _average_precision(records: list[tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated PR area; NaN when there is nothing to score."""
    if n_gt == 0:
        return 0.0 if records else math.nan
    if not records:
        return 0.0
    records = sorted(records, key=lambda r: -r[0])
    tps = np.cumsum([1.0 if tp else 0.0 for _, tp in records])
    fps = np.cumsum([0.0 if tp else 1.0 for _, tp in records])
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, 1e-12)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    deltas = np.diff(np.concatenate([[0.0], recall]))
    return float((deltas * envelope).sum())


def ap_single(preds: Sequence[MapInstance], gts: Sequence[MapInstance], class_id: str,
              threshold: float, cfg: EvalConfig) -> float:
    """AP of one class at one threshold over a single frame's instances."""
    cls_preds = [p for p in preds if p.class_id == class_id]
    cls_gts = [g for g in gts if g.class_id == class_id]
    mat = _class_chamfer_matrix(cls_preds, cls_gts, cfg.sample_spacing)
    records = _greedy_match(mat, [p.confidence for p in cls_preds], threshold)
    return _average_precision(records, len(cls_gts))


def _frame_partials(pred_map: LocalMap, gt_map: LocalMap, cfg: EvalConfig):
    """Per-class matches for one frame: {class: (records_by_threshold, n_gt, n_pred)}."""
    out = {}
    for class_id in cfg.classes:
        cls_preds = [p for p in pred_map.instances if p.class_id == class_id]
        cls_gts = [g for g in gt_map.instances if g.class_id == class_id]
        mat = _class_chamfer_matrix(cls_preds, cls_gts, cfg.sample_spacing)
        confs = [p.confidence for p in cls_preds]
        by_threshold = {t: _greedy_match(mat, confs, t) for t in cfg.thresholds}
        out[class_id] = (by_threshold, len(cls_gts), len(cls_preds))
    return out


def evaluate(pred_maps: Sequence[LocalMap], gt_maps: Sequence[LocalMap],
             cfg: EvalConfig, jobs: int | None = None) -> EvalReport:
    """Dataset evaluation; frames must align one-to-one by frame_id."""
    preds_by_frame = {m.frame_id: m for m in pred_maps}
    gts_by_frame = {m.frame_id: m for m in gt_maps}
    missing = sorted(set(gts_by_frame) - set(preds_by_frame))
    extra = sorted(set(preds_by_frame) - set(gts_by_frame))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"frames missing from predictions: {', '.join(missing)}")
        if extra:
            parts.append(f"frames missing from ground truth: {', '.join(extra)}")
        raise FrameAlignmentError("; ".join(parts))

    frame_ids = [m.frame_id for m in gt_maps]
    worker = lambda fid: _frame_partials(preds_by_frame[fid], gts_by_frame[fid], cfg)
    if jobs is not None and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(worker, frame_ids))
    else:
        partials = [worker(fid) for fid in frame_ids]

    ap: dict[str, dict[float, float]] = {}
    counts: dict[str, dict[float, dict[str, int]]] = {}
    ap_by_class: dict[str, float] = {}
    for class_id in cfg.classes:
        ap[class_id] = {}
        counts[class_id] = {}
        n_gt = sum(p[class_id][1] for p in partials)
        n_pred = sum(p[class_id][2] for p in partials)
        for t in cfg.thresholds:
            records = [rec for p in partials for rec in p[class_id][0][t]]
            ap[class_id][t] = _average_precision(records, n_gt)
            counts[class_id][t] = {
                "n_pred": n_pred,
                "n_gt": n_gt,
                "n_tp": sum(1 for _, tp in records if tp),
            }
        vals = list(ap[class_id].values())
        ap_by_class[class_id] = float(np.mean(vals)) if not any(math.isnan(v) for v in vals) else math.nan

    class_aps = [v for v in ap_by_class.values() if not math.isnan(v)]
    mean_ap = float(np.mean(class_aps)) if class_aps else math.nan
    return EvalReport(
        classes=tuple(cfg.classes),
        thresholds=cfg.thresholds,
        ap=ap,
        ap_by_class=ap_by_class,
        mean_ap=mean_ap,
        counts=counts,
    )
