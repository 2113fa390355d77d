"""Recall@K for video scene graph predictions (detection-style protocol).

A prediction counts toward a ground-truth triplet only when all three classes
match and both boxes overlap their counterparts with IoU strictly above the
threshold. Under the "with constraint" regime only the highest-scoring
predicate survives per subject-object pair before top-K truncation; "no
constraint" keeps all of them. Ground truth is matched greedily by prediction
rank and each ground-truth triplet is consumable once. The dataset metric is
the mean of per-frame recalls over frames that have ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .core import Triplet, box_iou
from .errors import NoGtFrames

REGIMES = ("with_constraint", "no_constraint")


@dataclass
class EvalConfig:
    k_values: Tuple[int, ...] = (20, 50)
    iou_threshold: float = 0.5
    regime: str = "both"

    def __post_init__(self):
        if not self.k_values or any(k <= 0 for k in self.k_values):
            raise ValueError("k_values must be positive")
        if tuple(sorted(self.k_values)) != tuple(self.k_values):
            raise ValueError("k_values must be sorted ascending")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.regime not in REGIMES + ("both",):
            raise ValueError(f"unknown regime {self.regime!r}")

    def regimes(self) -> Tuple[str, ...]:
        return REGIMES if self.regime == "both" else (self.regime,)


@dataclass
class EvalInstance:
    """One frame's ground truth and scored predictions."""

    frame_index: int
    gt: List[Triplet] = field(default_factory=list)
    predictions: List[Triplet] = field(default_factory=list)


def match_triplet(pred: Triplet, gt: Triplet, iou_threshold: float) -> bool:
    """Class-exact match with both box IoUs strictly above the threshold."""
    if pred.classes() != gt.classes():
        return False
    return (
        box_iou(pred.subject_box, gt.subject_box) > iou_threshold
        and box_iou(pred.object_box, gt.object_box) > iou_threshold
    )


def apply_constraint(predictions: Sequence[Triplet], regime: str) -> List[Triplet]:
    """Reduce predictions per the regime.

    with_constraint keeps one predicate per (subject box, subject class,
    object box, object class) group: the highest-scoring one, first occurrence
    winning ties. no_constraint returns the predictions unchanged.
    """
    if regime == "no_constraint":
        return list(predictions)
    if regime != "with_constraint":
        raise ValueError(f"unknown regime {regime!r}")
    best: Dict[tuple, Tuple[float, int]] = {}
    for i, p in enumerate(predictions):
        key = (
            p.subject_box.as_tuple() if p.subject_box else None,
            p.subject_class,
            p.object_box.as_tuple() if p.object_box else None,
            p.object_class,
        )
        score = p.score if p.score is not None else 0.0
        if key not in best or score > best[key][0]:
            best[key] = (score, i)
    keep = {i for _, i in best.values()}
    return [p for i, p in enumerate(predictions) if i in keep]


def _ranked(predictions: Sequence[Triplet]) -> List[Triplet]:
    # Stable sort: equal scores keep input order.
    return sorted(
        predictions,
        key=lambda p: -(p.score if p.score is not None else 0.0),
    )


def frame_recall(instance: EvalInstance, regime: str, k: int, iou_threshold: float) -> float:
    """Fraction of this frame's ground truth hit by the top-K predictions."""
    if not instance.gt:
        raise ValueError("frame recall undefined without ground truth")
    top = _ranked(apply_constraint(instance.predictions, regime))[:k]
    consumed = [False] * len(instance.gt)
    for pred in top:
        for gi, gt in enumerate(instance.gt):
            if not consumed[gi] and match_triplet(pred, gt, iou_threshold):
                consumed[gi] = True
                break
    return sum(consumed) / len(instance.gt)


def recall_at_k(
    instances: Sequence[EvalInstance], config: EvalConfig
) -> Dict[Tuple[str, int], float]:
    """Mean per-frame recall for every (regime, K) pair.

    Frames with no ground truth are excluded from the mean; raises
    NoGtFrames when none remain.
    """
    scored = [inst for inst in instances if inst.gt]
    if not scored:
        raise NoGtFrames("no frames with ground-truth triplets")
    results: Dict[Tuple[str, int], float] = {}
    for regime in config.regimes():
        for k in config.k_values:
            total = 0.0
            for inst in scored:
                total += frame_recall(inst, regime, k, config.iou_threshold)
            results[(regime, k)] = total / len(scored)
    return results


def pseudo_label_quality(
    pseudo: Sequence[Triplet],
    gt: Sequence[Triplet],
    iou_threshold: float = 0.5,
) -> Dict[str, Dict[str, float]]:
    """Diagnostic per-predicate precision/recall of unscored pseudo-labels.

    Pseudo-labels carry no scores, so each is treated as score 1.0 and
    matched against ground truth of the same frame. Reported separately from
    Recall@K.
    """
    by_frame_gt: Dict[int, List[Triplet]] = {}
    for g in gt:
        by_frame_gt.setdefault(g.frame_index, []).append(g)

    classes = sorted({t.predicate_class for t in pseudo} | {t.predicate_class for t in gt})
    stats = {c: {"tp": 0, "fp": 0, "fn": 0} for c in classes}

    consumed: Dict[int, List[bool]] = {
        f: [False] * len(ts) for f, ts in by_frame_gt.items()
    }
    for p in pseudo:
        frame_gt = by_frame_gt.get(p.frame_index, [])
        hit = False
        for gi, g in enumerate(frame_gt):
            if not consumed[p.frame_index][gi] and match_triplet(p, g, iou_threshold):
                consumed[p.frame_index][gi] = True
                hit = True
                break
        if hit:
            stats[p.predicate_class]["tp"] += 1
        else:
            stats[p.predicate_class]["fp"] += 1
    for frame, flags in consumed.items():
        for gi, used in enumerate(flags):
            if not used:
                stats[by_frame_gt[frame][gi].predicate_class]["fn"] += 1

    report = {}
    for c in classes:
        tp, fp, fn = stats[c]["tp"], stats[c]["fp"], stats[c]["fn"]
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        report[c] = {"precision": precision, "recall": recall, "support": tp + fn}
    return report
