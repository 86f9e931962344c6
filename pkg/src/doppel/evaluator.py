"""Pair-label IoU metrics and GT/predicted instance association.

IoU per class c over a pair universe: matched / (gt=c or pred=c). The
overall figure is the macro mean over the three real classes. When
evaluating on predicted instances, GT pairs whose members lack an
associated prediction fall into an unknown class that counts toward the
union of their GT class but never the intersection.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .types import DoppelError, PairLabel, canonical_pair

REPORTED_CLASSES = (PairLabel.IDENTICAL, PairLabel.SIMILAR, PairLabel.DIFFERENT)


class UniverseMismatchError(DoppelError):
    """GT and predicted labelings cover different pair sets."""


@dataclass
class PairConfusion:
    """Counts per ordered (gt_label, pred_label) cell."""

    counts: Counter = field(default_factory=Counter)

    def add(self, gt: PairLabel, pred: PairLabel, n: int = 1) -> None:
        self.counts[(gt, pred)] += n

    def total(self) -> int:
        return sum(self.counts.values())

    def cell(self, gt: PairLabel, pred: PairLabel) -> int:
        return self.counts.get((gt, pred), 0)


@dataclass(frozen=True)
class IoUReport:
    iou_id: float
    iou_sim: float
    iou_diff: float
    overall: float
    n_pairs: int = 0
    # Classes absent from both gt and pred; their IoU of 1 is a convention.
    empty_classes: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "iou_id": self.iou_id,
            "iou_sim": self.iou_sim,
            "iou_diff": self.iou_diff,
            "overall": self.overall,
            "n_pairs": self.n_pairs,
        }


def confusion_from_labels(
    gt: Mapping[tuple[str, str], PairLabel],
    pred: Mapping[tuple[str, str], PairLabel],
) -> PairConfusion:
    if set(gt) != set(pred):
        missing = sorted(set(gt) ^ set(pred))[:5]
        raise UniverseMismatchError(
            f"gt and pred cover different pairs (first differences: {missing})"
        )
    confusion = PairConfusion()
    for key, gt_label in gt.items():
        confusion.add(gt_label, pred[key])
    return confusion


def iou_from_confusion(confusion: PairConfusion) -> IoUReport:
    ious = {}
    empty = []
    for cls in REPORTED_CLASSES:
        intersection = confusion.cell(cls, cls)
        union = (
            sum(confusion.cell(cls, p) for p in PairLabel)
            + sum(confusion.cell(g, cls) for g in PairLabel)
            - intersection
        )
        if union == 0:
            ious[cls] = 1.0
            empty.append(cls.value)
        else:
            ious[cls] = intersection / union
    overall = sum(ious.values()) / len(REPORTED_CLASSES)
    return IoUReport(
        iou_id=ious[PairLabel.IDENTICAL],
        iou_sim=ious[PairLabel.SIMILAR],
        iou_diff=ious[PairLabel.DIFFERENT],
        overall=overall,
        n_pairs=confusion.total(),
        empty_classes=tuple(empty),
    )


def pair_iou(
    gt: Mapping[tuple[str, str], PairLabel],
    pred: Mapping[tuple[str, str], PairLabel],
) -> IoUReport:
    """Per-class and macro-mean IoU over a shared pair universe."""
    return iou_from_confusion(confusion_from_labels(gt, pred))


@dataclass(frozen=True)
class InstanceAssociation:
    """One-to-one pred/gt matching from overlap scores."""

    pred_to_gt: dict[int, int]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]

    @property
    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pred_to_gt.items()}


def associate_instances(
    overlaps: np.ndarray, threshold: float = 0.5, optimal: bool = False
) -> InstanceAssociation:
    """Match predicted to GT instances by overlap.

    Greedy by descending overlap (deterministic tie-break on indices);
    matches under the threshold are discarded. The optimal flag switches
    to a maximum-weight assignment instead of greedy order.
    """
    overlaps = np.asarray(overlaps, dtype=float)
    if overlaps.ndim != 2:
        raise ValueError(f"overlap matrix must be 2D, got {overlaps.shape}")
    if overlaps.size and (overlaps.min() < 0.0 or overlaps.max() > 1.0):
        raise ValueError("overlap entries must lie in [0, 1]")
    n_pred, n_gt = overlaps.shape
    mapping: dict[int, int] = {}
    if optimal and overlaps.size:
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(-overlaps)
        for p, g in zip(rows, cols):
            if overlaps[p, g] >= threshold:
                mapping[int(p)] = int(g)
    else:
        order = sorted(
            ((p, g) for p in range(n_pred) for g in range(n_gt)),
            key=lambda pg: (-overlaps[pg], pg[0], pg[1]),
        )
        used_pred: set[int] = set()
        used_gt: set[int] = set()
        for p, g in order:
            if overlaps[p, g] < threshold:
                break  # descending order: the rest are below threshold too
            if p in used_pred or g in used_gt:
                continue
            mapping[p] = g
            used_pred.add(p)
            used_gt.add(g)
    return InstanceAssociation(
        pred_to_gt=mapping,
        unmatched_gt=tuple(g for g in range(n_gt) if g not in mapping.values()),
        unmatched_pred=tuple(p for p in range(n_pred) if p not in mapping),
    )


def project_predictions(
    gt_pairs: Mapping[tuple[str, str], PairLabel],
    pred_pairs: Mapping[tuple[str, str], PairLabel],
    gt_to_pred: Mapping[str, str],
) -> dict[tuple[str, str], PairLabel]:
    """Predicted label for each GT pair under an instance association.

    A GT pair with an unmatched member, or whose mapped pair is absent
    from the predictions, is scored as predicted-unknown. Extra predicted
    pairs without a GT counterpart are ignored (the universe is GT pairs).
    """
    projected: dict[tuple[str, str], PairLabel] = {}
    for (a, b) in gt_pairs:
        if a in gt_to_pred and b in gt_to_pred:
            mapped = canonical_pair(gt_to_pred[a], gt_to_pred[b])
            projected[(a, b)] = pred_pairs.get(mapped, PairLabel.UNKNOWN)
        else:
            projected[(a, b)] = PairLabel.UNKNOWN
    return projected


def evaluate_predicted_instances(
    gt_pairs: Mapping[tuple[str, str], PairLabel],
    pred_pairs: Mapping[tuple[str, str], PairLabel],
    gt_to_pred: Mapping[str, str],
) -> IoUReport:
    """IoU over GT pairs with unknown-class accounting."""
    return pair_iou(
        gt_pairs, project_predictions(gt_pairs, pred_pairs, gt_to_pred)
    )


def aggregate_confusions(confusions: list[PairConfusion]) -> PairConfusion:
    """Pool pair counts across scenes before computing IoUs."""
    merged = PairConfusion()
    for c in confusions:
        for (g, p), n in c.counts.items():
            merged.add(g, p, n)
    return merged
