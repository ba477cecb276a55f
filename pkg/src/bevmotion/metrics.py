"""Evaluation suite: speed-grouped displacement errors, classification
accuracy, the generalization index, per-instance stability, and
distance-bucketed errors.

Cell speed is the ground-truth final-step displacement norm divided by the
horizon.  Group and bucket boundaries are lower-inclusive half-open intervals
(static [0, 0.2), slow [0.2, 5), fast [5, inf) m/s; distances [0, 10), [10,
20), [20, inf) m).  Empty groups are reported as absent, never as zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .grid import NUM_CLASSES, STATIC_SPEED, CLASS_NAMES, GridSpec, SceneLabels

SLOW_SPEED = 5.0
GROUP_NAMES = ("static", "slow", "fast")
DISTANCE_EDGES = (0.0, 10.0, 20.0)
BUCKET_NAMES = ("0-10m", "10-20m", "20m+")


@dataclass
class GroupStat:
    mean: float
    median: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "count": self.count}


@dataclass
class MetricReport:
    groups: dict[str, GroupStat] = field(default_factory=dict)
    oa: float | None = None
    mca: float | None = None
    per_class: dict[str, float] = field(default_factory=dict)
    stability: float | None = None
    buckets: dict[str, dict[str, GroupStat]] = field(default_factory=dict)
    per_step_mean: list[float] = field(default_factory=list)
    n_sequences: int = 0
    n_cells: int = 0

    def to_dict(self) -> dict:
        return {
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
            "oa": self.oa,
            "mca": self.mca,
            "per_class": dict(self.per_class),
            "stability": self.stability,
            "buckets": {b: {g: s.to_dict() for g, s in gs.items()} for b, gs in self.buckets.items()},
            "per_step_mean": list(self.per_step_mean),
            "n_sequences": self.n_sequences,
            "n_cells": self.n_cells,
        }

    def to_text(self) -> str:
        lines = [f"sequences: {self.n_sequences}   valid cells: {self.n_cells}"]
        for name in GROUP_NAMES:
            if name in self.groups:
                s = self.groups[name]
                lines.append(
                    f"{name.capitalize():<8} Mean {s.mean:.4f}  Median {s.median:.4f}  (n={s.count})"
                )
        if self.oa is not None:
            lines.append(f"OA {self.oa:.4f}  MCA {self.mca:.4f}")
            for cls, acc in self.per_class.items():
                lines.append(f"  {cls:<12} {acc:.4f}")
        if self.stability is not None:
            lines.append(f"Stability {self.stability:.6f}")
        for bucket in BUCKET_NAMES:
            if bucket in self.buckets:
                for name, s in self.buckets[bucket].items():
                    lines.append(f"({bucket}) {name:<8} Mean {s.mean:.4f}  Median {s.median:.4f}")
        if self.per_step_mean:
            steps = "  ".join(f"{v:.4f}" for v in self.per_step_mean)
            lines.append(f"Per-step mean error: {steps}")
        return "\n".join(lines)


def cell_speeds(labels: SceneLabels, spec: GridSpec) -> np.ndarray:
    """(H, W) ground-truth speed in m/s from the final-step displacement."""
    return np.linalg.norm(labels.motion[-1], axis=-1) / spec.horizon_seconds


def speed_group_of(speeds: np.ndarray) -> np.ndarray:
    """0 static, 1 slow, 2 fast; lower-inclusive half-open boundaries."""
    groups = np.ones(speeds.shape, dtype=np.int64)
    groups[speeds < STATIC_SPEED] = 0
    groups[speeds >= SLOW_SPEED] = 2
    return groups


def _final_errors(pred_motion: np.ndarray, labels: SceneLabels) -> np.ndarray:
    return np.linalg.norm(pred_motion[-1] - labels.motion[-1], axis=-1)


def _valid_mask(labels: SceneLabels, category_filter: int | None) -> np.ndarray:
    mask = labels.valid == 1
    if category_filter is not None:
        mask &= labels.category == category_filter
    return mask


def _stat(values: np.ndarray) -> GroupStat:
    return GroupStat(mean=float(values.mean()), median=float(np.median(values)), count=int(values.size))


def group_errors(
    pred_motion: np.ndarray,
    labels: SceneLabels,
    spec: GridSpec,
    category_filter: int | None = None,
) -> dict[str, GroupStat]:
    """Final-step L2 error per valid cell, grouped by ground-truth speed."""
    if pred_motion.shape != labels.motion.shape:
        raise ContractError(
            f"prediction shape {pred_motion.shape} != labels {labels.motion.shape}"
        )
    mask = _valid_mask(labels, category_filter)
    errors = _final_errors(pred_motion, labels)
    groups = speed_group_of(cell_speeds(labels, spec))
    out: dict[str, GroupStat] = {}
    for g, name in enumerate(GROUP_NAMES):
        sel = mask & (groups == g)
        if sel.any():
            out[name] = _stat(errors[sel])
    return out


def per_step_errors(pred_motion: np.ndarray, labels: SceneLabels) -> list[float]:
    """Mean L2 error over valid cells at each step; diagnostics curve."""
    mask = labels.valid == 1
    if not mask.any():
        return []
    return [
        float(np.linalg.norm(pred_motion[t] - labels.motion[t], axis=-1)[mask].mean())
        for t in range(pred_motion.shape[0])
    ]


def classification_scores(
    cls_pred: np.ndarray, labels: SceneLabels
) -> tuple[float, float, dict[str, float]]:
    """(OA, MCA, per-class recall); classes absent from truth are excluded.

    ``cls_pred`` is either (H, W) class indices or (H, W, NUM_CLASSES) logits.
    """
    if cls_pred.ndim == 3:
        cls_pred = cls_pred.argmax(axis=-1)
    mask = labels.valid == 1
    if not mask.any():
        return float("nan"), float("nan"), {}
    pred = cls_pred[mask]
    true = labels.category[mask]
    oa = float((pred == true).mean())
    per_class: dict[str, float] = {}
    recalls = []
    for c in range(NUM_CLASSES):
        sel = true == c
        if sel.any():
            r = float((pred[sel] == c).mean())
            per_class[CLASS_NAMES[c]] = r
            recalls.append(r)
    mca = float(np.mean(recalls)) if recalls else float("nan")
    return oa, mca, per_class


def generalization_index(err_full: float, err_masked: float) -> float:
    """Ratio (percent) of the full-data model's error to the mask-trained
    model's error on the held-out category's cells."""
    if err_masked <= 0:
        raise ContractError("mask-trained error must be positive")
    return 100.0 * err_full / err_masked


def stability(pred_motion_final: np.ndarray, instance_id: np.ndarray) -> float | None:
    """Mean per-instance variance of predicted final-step displacements.

    Rigid objects should move coherently, so lower is better.  Instances are
    weighted equally regardless of size; returns None with no instances.
    """
    ids = np.unique(instance_id)
    ids = ids[ids > 0]
    if ids.size == 0:
        return None
    variances = []
    for inst in ids:
        d = pred_motion_final[instance_id == inst]  # (n, 2)
        centered = d - d.mean(axis=0, keepdims=True)
        variances.append(float((centered ** 2).sum(axis=1).mean()))
    return float(np.mean(variances))


def distance_buckets(
    pred_motion: np.ndarray,
    labels: SceneLabels,
    spec: GridSpec,
    category_filter: int | None = None,
) -> dict[str, dict[str, GroupStat]]:
    """Speed-grouped errors split by cell-center distance from the origin."""
    mask = _valid_mask(labels, category_filter)
    errors = _final_errors(pred_motion, labels)
    groups = speed_group_of(cell_speeds(labels, spec))
    dist = np.linalg.norm(spec.cell_centers(), axis=-1)
    edges = (*DISTANCE_EDGES, np.inf)
    out: dict[str, dict[str, GroupStat]] = {}
    for b, bucket in enumerate(BUCKET_NAMES):
        in_bucket = mask & (dist >= edges[b]) & (dist < edges[b + 1])
        if not in_bucket.any():
            continue
        stats: dict[str, GroupStat] = {}
        for g, name in enumerate(GROUP_NAMES):
            sel = in_bucket & (groups == g)
            if sel.any():
                stats[name] = _stat(errors[sel])
        out[bucket] = stats
    return out


def evaluate_predictions(
    predictions: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    labelled: list[SceneLabels],
    spec: GridSpec,
    category_filter: int | None = None,
) -> MetricReport:
    """Aggregate metrics over a dataset.

    Cells are pooled across sequences before means/medians so that medians are
    well defined; stability averages over every instance of every sequence.
    """
    if len(predictions) != len(labelled):
        raise ContractError("predictions and labels must align")
    all_errors, all_groups, all_dist = [], [], []
    all_pred_cls, all_true_cls = [], []
    step_sums = None
    step_count = 0
    variances = []
    n_cells = 0
    dist_map = np.linalg.norm(spec.cell_centers(), axis=-1)
    for (motion, cls_logits, _state), labels in zip(predictions, labelled):
        mask = _valid_mask(labels, category_filter)
        if mask.any():
            all_errors.append(_final_errors(motion, labels)[mask])
            all_groups.append(speed_group_of(cell_speeds(labels, spec))[mask])
            all_dist.append(dist_map[mask])
            pred_cls = cls_logits.argmax(axis=-1) if cls_logits.ndim == 3 else cls_logits
            all_pred_cls.append(pred_cls[mask])
            all_true_cls.append(labels.category[mask])
            n_cells += int(mask.sum())
        steps = per_step_errors(motion, labels)
        if steps:
            if step_sums is None:
                step_sums = np.zeros(len(steps))
            step_sums += np.asarray(steps)
            step_count += 1
        inst = labels.instance_id.copy()
        if category_filter is not None:
            inst = np.where(labels.category == category_filter, inst, 0)
        s = stability(motion[-1], inst)
        if s is not None:
            variances.append(s)

    report = MetricReport(n_sequences=len(predictions), n_cells=n_cells)
    if not all_errors:
        return report
    errors = np.concatenate(all_errors)
    groups = np.concatenate(all_groups)
    dist = np.concatenate(all_dist)
    for g, name in enumerate(GROUP_NAMES):
        sel = groups == g
        if sel.any():
            report.groups[name] = _stat(errors[sel])
    edges = (*DISTANCE_EDGES, np.inf)
    for b, bucket in enumerate(BUCKET_NAMES):
        in_bucket = (dist >= edges[b]) & (dist < edges[b + 1])
        if not in_bucket.any():
            continue
        stats = {}
        for g, name in enumerate(GROUP_NAMES):
            sel = in_bucket & (groups == g)
            if sel.any():
                stats[name] = _stat(errors[sel])
        report.buckets[bucket] = stats
    pred_cls = np.concatenate(all_pred_cls)
    true_cls = np.concatenate(all_true_cls)
    report.oa = float((pred_cls == true_cls).mean())
    recalls = []
    for c in range(NUM_CLASSES):
        sel = true_cls == c
        if sel.any():
            r = float((pred_cls[sel] == c).mean())
            report.per_class[CLASS_NAMES[c]] = r
            recalls.append(r)
    report.mca = float(np.mean(recalls)) if recalls else None
    if variances:
        report.stability = float(np.mean(variances))
    if step_sums is not None and step_count:
        report.per_step_mean = list(step_sums / step_count)
    return report
