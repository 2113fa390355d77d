"""Core datatypes shared by every pipeline stage.

Frame indices are 1-based everywhere. Boxes are axis-aligned corner boxes
(x1, y1, x2, y2) in pixels. Embedding rows are L2-normalized at ingestion so
cosine similarity reduces to a dot product. All types here are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class Provenance(str, Enum):
    """Where a triplet came from."""

    CAPTION = "caption"
    NEGATIVE_PSEUDO = "negative_pseudo"
    GROUND_TRUTH = "ground_truth"
    PREDICTION = "prediction"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in xyxy pixel coordinates.

    Construction is permissive: degenerate or out-of-range boxes must remain
    representable so that validation can report them instead of crashing the
    loader. Use ``is_valid()`` / ``validate_manifest`` to check invariants.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def is_valid(self) -> bool:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            return False
        return self.x1 < self.x2 and self.y1 < self.y2 and min(coords) >= 0

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = values
        return cls(float(x1), float(y1), float(x2), float(y2))


def box_intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Plain intersection-over-union of two valid boxes."""
    inter = box_intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class Detection:
    """One detector output box for a single frame (1-based frame index)."""

    frame_index: int
    entity_class: str
    box: BoundingBox
    confidence: float

    def to_dict(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "entity_class": self.entity_class,
            "box": self.box.to_list(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(
            frame_index=int(d["frame_index"]),
            entity_class=str(d["entity_class"]),
            box=BoundingBox.from_list(d["box"]),
            confidence=float(d["confidence"]),
        )


@dataclass(frozen=True)
class VideoManifest:
    """A video: its id, ordered frame ids (length T), fps and caption."""

    video_id: str
    frame_ids: Tuple[str, ...]
    fps: float
    caption: str

    @property
    def num_frames(self) -> int:
        return len(self.frame_ids)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_ids": list(self.frame_ids),
            "fps": self.fps,
            "caption": self.caption,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoManifest":
        return cls(
            video_id=str(d["video_id"]),
            frame_ids=tuple(str(f) for f in d["frame_ids"]),
            fps=float(d["fps"]),
            caption=str(d["caption"]),
        )


_PARTITION_BUCKETS = ("attention", "spatial", "contacting")


@dataclass(frozen=True)
class Vocabulary:
    """Closed entity/action class sets with the action-type partition.

    ``action_partition`` must cover every action class exactly once and
    ``negative_classes`` must be a subset of the action classes.
    """

    entity_classes: frozenset
    action_classes: frozenset
    action_partition: Mapping[str, str]
    negative_classes: frozenset = frozenset()

    def __post_init__(self):
        if set(self.action_partition) != set(self.action_classes):
            raise ValueError("action_partition must cover every action class exactly once")
        bad = {b for b in self.action_partition.values() if b not in _PARTITION_BUCKETS}
        if bad:
            raise ValueError(f"unknown partition buckets: {sorted(bad)}")
        if not self.negative_classes <= self.action_classes:
            raise ValueError("negative_classes must be a subset of action_classes")

    def partition_counts(self) -> Dict[str, int]:
        counts = {b: 0 for b in _PARTITION_BUCKETS}
        for bucket in self.action_partition.values():
            counts[bucket] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "entity_classes": sorted(self.entity_classes),
            "action_partition": {a: self.action_partition[a] for a in sorted(self.action_classes)},
            "negative_classes": sorted(self.negative_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        partition = dict(d["action_partition"])
        return cls(
            entity_classes=frozenset(d["entity_classes"]),
            action_classes=frozenset(partition),
            action_partition=partition,
            negative_classes=frozenset(d.get("negative_classes", [])),
        )

    @classmethod
    def action_genome(cls) -> "Vocabulary":
        """The bundled Action Genome vocabulary (36 entities, 25 actions)."""
        text = resources.files("capgraph.assets").joinpath("ag_vocabulary.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SegmentedSentence:
    """One temporally ordered sentence with an optional aligned frame interval."""

    order_index: int
    text: str
    aligned_frames: Optional[Tuple[int, int]] = None

    def with_alignment(self, interval: Optional[Tuple[int, int]]) -> "SegmentedSentence":
        return SegmentedSentence(self.order_index, self.text, interval)

    def to_dict(self) -> dict:
        return {
            "order_index": self.order_index,
            "text": self.text,
            "aligned_frames": list(self.aligned_frames) if self.aligned_frames else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentedSentence":
        interval = d.get("aligned_frames")
        return cls(
            order_index=int(d["order_index"]),
            text=str(d["text"]),
            aligned_frames=(int(interval[0]), int(interval[1])) if interval else None,
        )


@dataclass(frozen=True)
class Triplet:
    """A subject/predicate/object with optional boxes, frame and score.

    A triplet is localized when both boxes are present, in which case
    ``frame_index`` is required.
    """

    subject_class: str
    predicate_class: str
    object_class: str
    subject_box: Optional[BoundingBox] = None
    object_box: Optional[BoundingBox] = None
    frame_index: Optional[int] = None
    score: Optional[float] = None
    provenance: Provenance = Provenance.CAPTION

    def __post_init__(self):
        if self.is_localized and self.frame_index is None:
            raise ValueError("localized triplets require frame_index")

    @property
    def is_localized(self) -> bool:
        return self.subject_box is not None and self.object_box is not None

    def classes(self) -> Tuple[str, str, str]:
        return (self.subject_class, self.predicate_class, self.object_class)

    def to_dict(self) -> dict:
        return {
            "subject_class": self.subject_class,
            "predicate_class": self.predicate_class,
            "object_class": self.object_class,
            "subject_box": self.subject_box.to_list() if self.subject_box else None,
            "object_box": self.object_box.to_list() if self.object_box else None,
            "frame_index": self.frame_index,
            "score": self.score,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Triplet":
        return cls(
            subject_class=str(d["subject_class"]),
            predicate_class=str(d["predicate_class"]),
            object_class=str(d["object_class"]),
            subject_box=BoundingBox.from_list(d["subject_box"]) if d.get("subject_box") else None,
            object_box=BoundingBox.from_list(d["object_box"]) if d.get("object_box") else None,
            frame_index=int(d["frame_index"]) if d.get("frame_index") is not None else None,
            score=float(d["score"]) if d.get("score") is not None else None,
            provenance=Provenance(d.get("provenance", "caption")),
        )


def triplet_sort_key(video_id: str, t: Triplet):
    """Stable total order used for deterministic serialization."""
    return (
        video_id,
        t.frame_index if t.frame_index is not None else 0,
        t.subject_class,
        t.predicate_class,
        t.object_class,
        t.subject_box.as_tuple() if t.subject_box else (),
        t.object_box.as_tuple() if t.object_box else (),
        t.score if t.score is not None else 0.0,
        t.provenance.value,
    )


@dataclass(frozen=True)
class SceneGraph:
    """Per-frame localized triplets for one video.

    The video-level graph is the union of the per-frame graphs; every
    triplet's ``frame_index`` must match its map key.
    """

    video_id: str
    per_frame: Mapping[int, Tuple[Triplet, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for frame, triplets in self.per_frame.items():
            for t in triplets:
                if t.frame_index != frame:
                    raise ValueError(
                        f"triplet frame_index {t.frame_index} does not match map key {frame}"
                    )

    def all_triplets(self) -> List[Triplet]:
        out: List[Triplet] = []
        for frame in sorted(self.per_frame):
            out.extend(self.per_frame[frame])
        return out

    def object_classes(self) -> frozenset:
        return frozenset(t.object_class for t in self.all_triplets())

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "frames": {
                str(frame): [t.to_dict() for t in self.per_frame[frame]]
                for frame in sorted(self.per_frame)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        per_frame = {
            int(frame): tuple(Triplet.from_dict(t) for t in triplets)
            for frame, triplets in d["frames"].items()
        }
        return cls(video_id=str(d["video_id"]), per_frame=per_frame)

    @classmethod
    def from_triplets(cls, video_id: str, triplets: Sequence[Triplet]) -> "SceneGraph":
        per_frame: Dict[int, List[Triplet]] = {}
        for t in sorted(triplets, key=lambda t: triplet_sort_key(video_id, t)):
            per_frame.setdefault(t.frame_index, []).append(t)
        return cls(video_id=video_id, per_frame={f: tuple(ts) for f, ts in per_frame.items()})


class EmbeddingMatrix:
    """A dense block of row vectors keyed by string row ids.

    Rows share one dimensionality. After ingestion rows are expected to be
    L2-normalized (within 1e-6); ``normalized()`` enforces that.
    """

    def __init__(self, row_ids: Sequence[str], rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D array")
        if len(row_ids) != rows.shape[0]:
            raise ValueError("row_ids and rows disagree on row count")
        self.row_ids: Tuple[str, ...] = tuple(str(r) for r in row_ids)
        self.rows = rows

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.row_ids == other.row_ids and np.array_equal(self.rows, other.rows)

    def normalized(self) -> "EmbeddingMatrix":
        norms = np.linalg.norm(self.rows, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        return EmbeddingMatrix(self.row_ids, self.rows / safe)

    def is_normalized(self, tol: float = 1e-6) -> bool:
        norms = np.linalg.norm(self.rows, axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= tol))


@dataclass(frozen=True)
class ValidationReport:
    """Every violated invariant found in one video bundle; never raises."""

    problems: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.problems


def validate_manifest(
    manifest: VideoManifest,
    frame_embeds: Optional[EmbeddingMatrix],
    detections: Sequence[Detection],
) -> ValidationReport:
    """Check one video's manifest, embeddings and detections for consistency.

    Returns a report listing every violated invariant; the report is empty
    iff the bundle is consistent. Validation never aborts.
    """
    problems: List[str] = []
    t = manifest.num_frames

    if t == 0:
        problems.append(f"video {manifest.video_id}: frame_ids is empty")
    if len(set(manifest.frame_ids)) != t:
        problems.append(f"video {manifest.video_id}: duplicate frame ids")
    if not manifest.caption.strip():
        problems.append(f"video {manifest.video_id}: caption is empty")
    if not (math.isfinite(manifest.fps) and manifest.fps > 0):
        problems.append(f"video {manifest.video_id}: fps must be positive")

    if frame_embeds is None:
        problems.append(f"video {manifest.video_id}: no embedding matrix")
    else:
        for i in range(len(frame_embeds), t):
            problems.append(f"video {manifest.video_id}: missing embedding for frame {i + 1}")
        if len(frame_embeds) > t:
            problems.append(
                f"video {manifest.video_id}: {len(frame_embeds) - t} extra embedding rows"
            )
        if not np.all(np.isfinite(frame_embeds.rows)):
            problems.append(f"video {manifest.video_id}: non-finite embedding values")
        elif not frame_embeds.is_normalized():
            problems.append(f"video {manifest.video_id}: embedding rows not L2-normalized")
        n = min(len(frame_embeds), t)
        for i in range(n):
            if frame_embeds.row_ids[i] != manifest.frame_ids[i]:
                problems.append(
                    f"video {manifest.video_id}: embedding row id mismatch at frame {i + 1}"
                )

    for d in detections:
        where = f"video {manifest.video_id} frame {d.frame_index}"
        if not 1 <= d.frame_index <= t:
            problems.append(f"{where}: detection frame index out of range 1..{t}")
        if not d.box.is_valid():
            problems.append(f"{where}: degenerate box {d.box.as_tuple()} for {d.entity_class}")
        if not (0.0 <= d.confidence <= 1.0):
            problems.append(f"{where}: confidence {d.confidence} outside [0, 1]")

    return ValidationReport(tuple(problems))
