"""Caption-frame alignment via frame clustering.

Frames are clustered with k-means (K = ceil(T / beta), clamped to [1, T]).
Each sentence scores every centroid by dot product (rows are unit vectors, so
this is cosine), the scores are sorted descending, and all clusters before
the steepest consecutive decline are selected; a fixed-gap variant cuts at
the first drop exceeding a threshold instead. Candidate frames are the union
of the selected clusters' members. Temporally impossible assignments are then
pruned with a watermark sweep, and each sentence keeps the maximal
consecutive run of surviving candidates around its strongest frame.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .core import EmbeddingMatrix, SegmentedSentence
from .errors import DimensionMismatch

SELECTION_MODES = ("steepest_decline", "fixed_gap")
CLUSTERING_BACKENDS = ("kmeans", "agglomerative", "gmm")


@dataclass
class AlignConfig:
    """Alignment hyperparameters. ``beta`` divides the frame count to pick K."""

    beta: int = 4
    clustering: str = "kmeans"
    selection: str = "steepest_decline"
    gap_tau: float = 0.2
    seed: int = 0
    kmeans_max_iters: int = 100
    kmeans_restarts: int = 5

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.selection == "fixed_gap" and not (0.0 < self.gap_tau < 1.0):
            raise ValueError("gap_tau must lie in (0, 1)")
        if self.clustering not in CLUSTERING_BACKENDS:
            raise ValueError(f"unknown clustering backend {self.clustering!r}")


@dataclass
class ClusteringResult:
    """K centroids plus a frame-index -> cluster-id assignment (no empties)."""

    k: int
    centroids: np.ndarray
    assignment: Dict[int, int]

    def members(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {c: [] for c in range(self.k)}
        for frame in sorted(self.assignment):
            out[self.assignment[frame]].append(frame)
        return out


@dataclass
class SentenceTrace:
    order_index: int
    similarities: List[float]
    sorted_clusters: List[int]
    selected_clusters: List[int]
    steepest_gap: float
    pre_pruning_frames: List[int]
    post_pruning_interval: Optional[Tuple[int, int]]

    def to_dict(self) -> dict:
        return {
            "order_index": self.order_index,
            "similarities": self.similarities,
            "sorted_clusters": self.sorted_clusters,
            "selected_clusters": self.selected_clusters,
            "steepest_gap": self.steepest_gap,
            "pre_pruning_frames": self.pre_pruning_frames,
            "post_pruning_interval": list(self.post_pruning_interval)
            if self.post_pruning_interval
            else None,
        }


@dataclass
class AlignmentTrace:
    video_id: str
    k: int
    sentences: List[SentenceTrace] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "k": self.k,
            "sentences": [s.to_dict() for s in self.sentences],
        }


def choose_k(t_frames: int, beta: int) -> int:
    """Number of clusters for a video of ``t_frames`` frames."""
    if t_frames < 1:
        raise ValueError("t_frames must be >= 1")
    if beta < 1:
        raise ValueError("beta must be >= 1")
    return min(max(math.ceil(t_frames / beta), 1), t_frames)


def _kmeans_plusplus_init(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    centroids = np.empty((k, rows.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = rows[first]
    closest = np.sum((rows - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            probs = closest / total
            idx = int(rng.choice(n, p=probs))
        centroids[i] = rows[idx]
        closest = np.minimum(closest, np.sum((rows - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(rows: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float = 1e-6):
    k = centroids.shape[0]
    labels = np.zeros(rows.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        distances = np.sum((rows[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(distances, axis=1)
        new_centroids = centroids.copy()
        per_point = distances[np.arange(rows.shape[0]), labels].copy()
        for c in range(k):
            mask = labels == c
            if np.any(mask):
                new_centroids[c] = rows[mask].mean(axis=0)
            else:
                # Reseed an empty cluster at the point farthest from its
                # current centroid; consume the point so two empty clusters
                # never grab the same row.
                farthest = int(np.argmax(per_point))
                new_centroids[c] = rows[farthest]
                labels[farthest] = c
                per_point[farthest] = -np.inf
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    distances = np.sum((rows[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(rows.shape[0]), labels].sum())
    return centroids, labels, inertia


def _compact_clusters(centroids: np.ndarray, labels: np.ndarray):
    """Drop clusters that ended empty (possible with duplicate rows) and
    renumber labels so the result never carries an empty cluster."""
    occupied = sorted(set(int(c) for c in labels))
    remap = {old: new for new, old in enumerate(occupied)}
    return centroids[occupied], np.array([remap[int(c)] for c in labels], dtype=np.int64)


def cluster_frames(frame_embeds: EmbeddingMatrix, config: AlignConfig) -> ClusteringResult:
    """Deterministically cluster frame embeddings.

    k-means++ seeding with a fixed seed, best of ``kmeans_restarts`` by
    inertia. If all rows are identical and K would exceed 1, the result
    degenerates to a single cluster with a warning.
    """
    if config.clustering != "kmeans":
        raise NotImplementedError(
            f"clustering backend {config.clustering!r} is a plug-in point; only"
            " 'kmeans' is built in"
        )
    rows = np.asarray(frame_embeds.rows, dtype=np.float64)
    t = rows.shape[0]
    k = choose_k(t, config.beta)
    frames = list(range(1, t + 1))

    if k > 1 and bool(np.all(rows == rows[0])):
        warnings.warn(
            "all frame embeddings are identical; degenerating to a single cluster",
            RuntimeWarning,
        )
        return ClusteringResult(
            k=1, centroids=rows[:1].copy(), assignment={f: 0 for f in frames}
        )

    best = None
    for restart in range(max(1, config.kmeans_restarts)):
        rng = np.random.default_rng([config.seed, restart])
        init = _kmeans_plusplus_init(rows, k, rng)
        centroids, labels, inertia = _lloyd(rows, init, config.kmeans_max_iters)
        if best is None or inertia < best[0]:
            best = (inertia, centroids, labels)

    _, centroids, labels = best
    centroids, labels = _compact_clusters(centroids, labels)
    assignment = {frame: int(labels[i]) for i, frame in enumerate(frames)}
    return ClusteringResult(k=centroids.shape[0], centroids=centroids, assignment=assignment)


def sort_clusters(similarities: Sequence[float]) -> List[int]:
    """Cluster ids ordered by descending similarity; ties keep the lower id."""
    sims = np.asarray(similarities, dtype=np.float64)
    return [int(i) for i in np.argsort(-sims, kind="stable")]


def steepest_gap(similarities: Sequence[float]) -> float:
    """Size of the largest consecutive drop in the descending-sorted scores."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size < 2:
        return 0.0
    ordered = np.sort(sims)[::-1]
    return float(np.max(ordered[:-1] - ordered[1:]))


def select_clusters(
    similarities: Sequence[float],
    selection: str = "steepest_decline",
    gap_tau: float = 0.2,
) -> List[int]:
    """Pick the cluster prefix a sentence aligns with.

    Scores sort descending. ``steepest_decline`` cuts before the largest
    consecutive drop (earliest wins ties); ``fixed_gap`` cuts before the first
    drop exceeding ``gap_tau``, keeping every cluster when no drop does.
    """
    order = sort_clusters(similarities)
    if len(order) == 1:
        return order
    sims = np.asarray(similarities, dtype=np.float64)
    ordered_scores = sims[order]
    drops = ordered_scores[:-1] - ordered_scores[1:]
    if selection == "steepest_decline":
        cut = int(np.argmax(drops))
        return order[: cut + 1]
    if selection == "fixed_gap":
        exceeding = np.nonzero(drops > gap_tau)[0]
        if exceeding.size == 0:
            return order
        return order[: int(exceeding[0]) + 1]
    raise ValueError(f"unknown selection mode {selection!r}")


def prune_temporal(
    assignments: Sequence[Tuple[SegmentedSentence, Set[int]]],
) -> List[Tuple[SegmentedSentence, Set[int]]]:
    """Drop candidate frames that would violate the sentence order.

    Sweeping sentences by order index, a watermark tracks the largest
    "earliest committed frame" so far; later sentences lose every candidate
    below it, and frames already committed to an earlier sentence are removed
    from later ones.
    """
    ordered = sorted(assignments, key=lambda pair: pair[0].order_index)
    watermark = 0
    committed: Set[int] = set()
    pruned: List[Tuple[SegmentedSentence, Set[int]]] = []
    for sentence, frames in ordered:
        keep = {f for f in frames if f >= watermark and f not in committed}
        pruned.append((sentence, keep))
        if keep:
            watermark = max(watermark, min(keep))
            committed |= keep
    return pruned


def _consecutive_run(frames: Set[int], anchor: int) -> Tuple[int, int]:
    lo = anchor
    while lo - 1 in frames:
        lo -= 1
    hi = anchor
    while hi + 1 in frames:
        hi += 1
    return (lo, hi)


def align_sentences(
    sentences: Sequence[SegmentedSentence],
    sentence_embeds: EmbeddingMatrix,
    clustering: ClusteringResult,
    config: AlignConfig,
    video_id: str = "",
) -> Tuple[List[SegmentedSentence], AlignmentTrace]:
    """Align each sentence with a consecutive frame interval (possibly none).

    Sentence embedding rows must be in sentence order and share the frame
    embedding dimensionality. The final interval is the maximal consecutive
    run of surviving candidate frames containing the candidate whose cluster
    centroid scored highest (ties: the earliest such frame).
    """
    if len(sentence_embeds) != len(sentences):
        raise DimensionMismatch(
            f"{len(sentences)} sentences but {len(sentence_embeds)} embedding rows"
        )
    if len(sentences) and sentence_embeds.dim != clustering.centroids.shape[1]:
        raise DimensionMismatch(
            f"sentence dim {sentence_embeds.dim} != centroid dim {clustering.centroids.shape[1]}"
        )

    members = clustering.members()
    ordered = sorted(range(len(sentences)), key=lambda i: sentences[i].order_index)

    sims_per_sentence: Dict[int, np.ndarray] = {}
    candidates: List[Tuple[SegmentedSentence, Set[int]]] = []
    selected_per_sentence: Dict[int, List[int]] = {}
    for i in ordered:
        sims = clustering.centroids @ np.asarray(sentence_embeds.rows[i], dtype=np.float64)
        selected = select_clusters(sims, config.selection, config.gap_tau)
        frames = set()
        for cluster in selected:
            frames.update(members[cluster])
        sims_per_sentence[i] = sims
        selected_per_sentence[i] = selected
        candidates.append((sentences[i], frames))

    pruned = prune_temporal(candidates)

    trace = AlignmentTrace(video_id=video_id, k=clustering.k)
    aligned: List[SegmentedSentence] = []
    for (sentence, pre_frames), (_, post_frames), i in zip(candidates, pruned, ordered):
        sims = sims_per_sentence[i]
        interval: Optional[Tuple[int, int]] = None
        if post_frames:
            anchor = min(
                post_frames,
                key=lambda f: (-sims[clustering.assignment[f]], f),
            )
            interval = _consecutive_run(post_frames, anchor)
        aligned.append(sentence.with_alignment(interval))
        trace.sentences.append(
            SentenceTrace(
                order_index=sentence.order_index,
                similarities=[float(s) for s in sims],
                sorted_clusters=sort_clusters(sims),
                selected_clusters=selected_per_sentence[i],
                steepest_gap=steepest_gap(sims),
                pre_pruning_frames=sorted(pre_frames),
                post_pruning_interval=interval,
            )
        )
    return aligned, trace
