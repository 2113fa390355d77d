"""Negative-action pseudo-labels from motion cues on unaligned frames.

For every maximal run of frames no sentence aligned with, each
(person, object) pair whose object class appears in the video's pseudo scene
graph is grounded at the run's start and end frames. The generalized IoU at
those endpoints gives a motion score G_end - G_start: the smaller it is, the
more confidently the pair is moving apart. Candidates from the whole dataset
are sorted ascending by that score and the top alpha percent receive the
negative classes on strategy-selected endpoint frames.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .core import (
    BoundingBox,
    Detection,
    Provenance,
    SceneGraph,
    SegmentedSentence,
    Triplet,
    VideoManifest,
    box_iou,
)
from .parse import _best_detection

ENDPOINT_STRATEGIES = ("start", "end", "start_and_end")


@dataclass
class MotionLabelConfig:
    """Selection ratio and per-class endpoint strategies."""

    alpha_percent: float = 15.0
    strategy_not_looking: str = "start_and_end"
    strategy_not_contacting: str = "end"
    negative_class_names: Tuple[str, str] = ("not looking at", "not contacting")
    subject_class: str = "person"

    def __post_init__(self):
        if not 0.0 < self.alpha_percent <= 100.0:
            raise ValueError("alpha_percent must lie in (0, 100]")
        for strategy in (self.strategy_not_looking, self.strategy_not_contacting):
            if strategy not in ENDPOINT_STRATEGIES:
                raise ValueError(f"unknown endpoint strategy {strategy!r}")


@dataclass(frozen=True)
class GroundedPair:
    subject_box: BoundingBox
    object_box: BoundingBox


@dataclass(frozen=True)
class MotionCandidate:
    """One (subject, object, unaligned run) with endpoint GIoUs and boxes."""

    video_id: str
    subject_class: str
    object_class: str
    run: Tuple[int, int]
    g_start: float
    g_end: float
    start_pair: GroundedPair
    end_pair: GroundedPair

    @property
    def motion_score(self) -> float:
        return self.g_end - self.g_start


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus the normalized dead area of the hull.

    Equals IoU - (hull - union) / hull where hull is the smallest enclosing
    axis-aligned box. Ranges over (-1, 1]; 1 iff the boxes coincide.
    """
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, inter_w) * max(0.0, inter_h)
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (hull - union) / hull


def collect_unaligned_runs(
    video: VideoManifest, sentences: Sequence[SegmentedSentence]
) -> List[Tuple[int, int]]:
    """Maximal contiguous frame runs covered by no sentence's interval."""
    covered = [False] * (video.num_frames + 1)
    for s in sentences:
        if s.aligned_frames is None:
            continue
        lo, hi = s.aligned_frames
        for f in range(max(1, lo), min(video.num_frames, hi) + 1):
            covered[f] = True
    runs: List[Tuple[int, int]] = []
    start: Optional[int] = None
    for f in range(1, video.num_frames + 1):
        if not covered[f]:
            if start is None:
                start = f
        elif start is not None:
            runs.append((start, f - 1))
            start = None
    if start is not None:
        runs.append((start, video.num_frames))
    return runs


def _ground_pair(
    detections_by_frame: Dict[int, List[Detection]],
    frame: int,
    subject_class: str,
    object_class: str,
) -> Optional[GroundedPair]:
    frame_dets = detections_by_frame.get(frame, [])
    subject = _best_detection(frame_dets, subject_class)
    if subject is None:
        return None
    exclude = subject if object_class == subject_class else None
    obj = _best_detection(frame_dets, object_class, exclude=exclude)
    if obj is None:
        return None
    return GroundedPair(subject.box, obj.box)


def build_candidates(
    manifests: Sequence[VideoManifest],
    detections: Dict[str, Sequence[Detection]],
    graphs: Dict[str, SceneGraph],
    runs_by_video: Dict[str, Sequence[Tuple[int, int]]],
    config: MotionLabelConfig,
) -> List[MotionCandidate]:
    """Collect motion candidates across all videos.

    Only object classes appearing in the video's own pseudo scene graph are
    paired, and a candidate exists only when both roles ground at both the
    run's start and end frames.
    """
    candidates: List[MotionCandidate] = []
    for manifest in sorted(manifests, key=lambda m: m.video_id):
        video_id = manifest.video_id
        graph = graphs.get(video_id)
        if graph is None:
            continue
        object_classes = sorted(graph.object_classes())
        by_frame: Dict[int, List[Detection]] = {}
        for det in detections.get(video_id, []):
            by_frame.setdefault(det.frame_index, []).append(det)
        for lo, hi in runs_by_video.get(video_id, []):
            for object_class in object_classes:
                start_pair = _ground_pair(by_frame, lo, config.subject_class, object_class)
                if start_pair is None:
                    continue
                end_pair = _ground_pair(by_frame, hi, config.subject_class, object_class)
                if end_pair is None:
                    continue
                candidates.append(
                    MotionCandidate(
                        video_id=video_id,
                        subject_class=config.subject_class,
                        object_class=object_class,
                        run=(lo, hi),
                        g_start=giou(start_pair.subject_box, start_pair.object_box),
                        g_end=giou(end_pair.subject_box, end_pair.object_box),
                        start_pair=start_pair,
                        end_pair=end_pair,
                    )
                )
    return candidates


def selection_count(alpha_percent: float, pool_size: int) -> int:
    """ceil(alpha% of the pool); never silently zero on a non-empty pool."""
    return min(pool_size, math.ceil(alpha_percent * pool_size / 100.0))


def _strategy_frames(strategy: str, run: Tuple[int, int]) -> List[int]:
    lo, hi = run
    if strategy == "start":
        return [lo]
    if strategy == "end":
        return [hi]
    return [lo] if lo == hi else [lo, hi]


@dataclass
class NegativeAssignment:
    """Selected candidates (ascending by motion score) and their triplets."""

    selected: List[MotionCandidate]
    by_video: Dict[str, List[Triplet]]

    def all_triplets(self) -> List[Triplet]:
        out: List[Triplet] = []
        for video_id in sorted(self.by_video):
            out.extend(self.by_video[video_id])
        return out


def assign_negatives(
    candidates: Sequence[MotionCandidate], config: MotionLabelConfig
) -> NegativeAssignment:
    """Emit negative-class triplets for the top alpha percent of the pool.

    The pool must span the entire dataset. Candidates sort ascending by
    motion score (ties: video id, run start, subject, object); the first
    ceil(alpha% * pool) are selected.
    """
    if not candidates:
        warnings.warn("empty motion-candidate pool; no negatives assigned", RuntimeWarning)
        return NegativeAssignment(selected=[], by_video={})
    ordered = sorted(
        candidates,
        key=lambda c: (c.motion_score, c.video_id, c.run[0], c.subject_class, c.object_class),
    )
    selected = ordered[: selection_count(config.alpha_percent, len(ordered))]

    not_looking, not_contacting = config.negative_class_names
    by_video: Dict[str, List[Triplet]] = {}
    for candidate in selected:
        pairs = {candidate.run[0]: candidate.start_pair, candidate.run[1]: candidate.end_pair}
        for predicate, strategy in (
            (not_looking, config.strategy_not_looking),
            (not_contacting, config.strategy_not_contacting),
        ):
            for frame in _strategy_frames(strategy, candidate.run):
                pair = pairs[frame]
                by_video.setdefault(candidate.video_id, []).append(
                    Triplet(
                        subject_class=candidate.subject_class,
                        predicate_class=predicate,
                        object_class=candidate.object_class,
                        subject_box=pair.subject_box,
                        object_box=pair.object_box,
                        frame_index=frame,
                        provenance=Provenance.NEGATIVE_PSEUDO,
                    )
                )
    return NegativeAssignment(selected=selected, by_video=by_video)


__all__ = [
    "MotionLabelConfig",
    "MotionCandidate",
    "GroundedPair",
    "NegativeAssignment",
    "giou",
    "box_iou",
    "collect_unaligned_runs",
    "build_candidates",
    "selection_count",
    "assign_negatives",
]
