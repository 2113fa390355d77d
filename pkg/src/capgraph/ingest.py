"""Bit-exact file formats and loaders.

Dataset layout under a root directory:

    manifest.ndjson                      one video manifest per line
    embeddings/<video_id>.frames.nlve    frame embeddings (binary, see below)
    embeddings/<video_id>.sentences.nlve sentence embeddings, produced after
                                         caption segmentation and re-ingested
    detections/<video_id>.ndjson         one detection per line
    gt/<video_id>.ndjson                 optional ground-truth graph records

NLVE binary layout: magic bytes ``NLVE``, little-endian u32 dim, u32 row
count, then each row id as u32 byte length + UTF-8 bytes, then all rows as
little-endian float32, row-major.

Scene graph NDJSON: one triplet per line with its video id and frame index,
sorted by (video_id, frame_index, subject, predicate, object) so equal inputs
always produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    Detection,
    EmbeddingMatrix,
    SceneGraph,
    SegmentedSentence,
    Triplet,
    VideoManifest,
    triplet_sort_key,
)
from .errors import (
    DimensionMismatch,
    DuplicateVideoId,
    IoFailure,
    MalformedRecord,
    MissingFile,
)

_NLVE_MAGIC = b"NLVE"


@dataclass
class IngestConfig:
    """Loader knobs; the confidence floor matches the detector's 0.2 default."""

    confidence_floor: float = 0.2


@dataclass
class DatasetBundle:
    """Everything loaded from one dataset root."""

    manifests: List[VideoManifest] = field(default_factory=list)
    embeddings: Dict[str, EmbeddingMatrix] = field(default_factory=dict)
    sentence_embeddings: Dict[str, EmbeddingMatrix] = field(default_factory=dict)
    detections: Dict[str, List[Detection]] = field(default_factory=dict)
    gt_graphs: Optional[Dict[str, SceneGraph]] = None

    def manifest_for(self, video_id: str) -> VideoManifest:
        for m in self.manifests:
            if m.video_id == video_id:
                return m
        raise KeyError(video_id)


# ---------------------------------------------------------------------------
# NLVE embedding files


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    buf.write(_NLVE_MAGIC)
    buf.write(struct.pack("<II", matrix.dim, len(matrix)))
    for row_id in matrix.row_ids:
        raw = row_id.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes())
    try:
        path.write_bytes(buf.getvalue())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    data = path.read_bytes()
    view = memoryview(data)
    if data[:4] != _NLVE_MAGIC:
        raise MalformedRecord(path, 0, "bad magic bytes, not an NLVE file")
    try:
        dim, count = struct.unpack_from("<II", view, 4)
        offset = 12
        row_ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, offset)
            offset += 4
            row_ids.append(bytes(view[offset : offset + n]).decode("utf-8"))
            offset += n
        expected = count * dim * 4
        if len(data) - offset != expected:
            raise DimensionMismatch(
                f"{path}: declared {count} rows of dim {dim} "
                f"({expected} bytes) but found {len(data) - offset} bytes"
            )
        rows = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    except struct.error as e:
        raise MalformedRecord(path, 0, f"truncated NLVE file: {e}") from e
    rows = rows.reshape(count, dim) if count else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingMatrix(row_ids, rows)


# ---------------------------------------------------------------------------
# NDJSON helpers


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _read_ndjson(path) -> List[Tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append((i, json.loads(line)))
            except json.JSONDecodeError as e:
                raise MalformedRecord(path, i, f"invalid JSON: {e.msg}") from e
    return out


def _write_ndjson(lines: Iterable[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_record_lines(records: Iterable[dict], path) -> None:
    """Write dict records as canonical NDJSON in the given order."""
    _write_ndjson((_dump_line(r) for r in records), path)


def read_record_lines(path) -> List[dict]:
    """Read NDJSON records, raising MalformedRecord with the line number."""
    return [record for _, record in _read_ndjson(path)]


# ---------------------------------------------------------------------------
# Manifests


def write_manifests(manifests: Sequence[VideoManifest], path) -> None:
    ordered = sorted(manifests, key=lambda m: m.video_id)
    _write_ndjson((_dump_line(m.to_dict()) for m in ordered), path)


def load_manifests(path) -> List[VideoManifest]:
    manifests = []
    seen = set()
    for line_no, record in _read_ndjson(path):
        try:
            manifest = VideoManifest.from_dict(record)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(path, line_no, f"bad manifest record: {e}") from e
        if manifest.video_id in seen:
            raise DuplicateVideoId(manifest.video_id)
        seen.add(manifest.video_id)
        manifests.append(manifest)
    manifests.sort(key=lambda m: m.video_id)
    return manifests


# ---------------------------------------------------------------------------
# Detections


def load_detections(path, confidence_floor: float) -> List[Detection]:
    detections = []
    for line_no, record in _read_ndjson(path):
        try:
            det = Detection.from_dict(record)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(path, line_no, f"bad detection record: {e}") from e
        if det.confidence >= confidence_floor:
            detections.append(det)
    detections.sort(
        key=lambda d: (d.frame_index, d.entity_class, d.box.as_tuple(), -d.confidence)
    )
    return detections


def write_detections(detections: Sequence[Detection], path) -> None:
    ordered = sorted(
        detections,
        key=lambda d: (d.frame_index, d.entity_class, d.box.as_tuple(), -d.confidence),
    )
    _write_ndjson((_dump_line(d.to_dict()) for d in ordered), path)


# ---------------------------------------------------------------------------
# Scene graphs (also used for pseudo-label and prediction files)


def graph_records(graph: SceneGraph) -> List[dict]:
    records = []
    for t in graph.all_triplets():
        record = t.to_dict()
        record["video_id"] = graph.video_id
        records.append(record)
    return records


def write_scene_graphs(graphs: Sequence[SceneGraph], path) -> None:
    """Write graphs as NDJSON, one triplet per line, in a stable total order.

    Equal input graphs produce byte-identical files.
    """
    rows: List[Tuple[tuple, str]] = []
    for graph in graphs:
        for t in graph.all_triplets():
            record = t.to_dict()
            record["video_id"] = graph.video_id
            rows.append((triplet_sort_key(graph.video_id, t), _dump_line(record)))
    rows.sort(key=lambda pair: pair[0])
    _write_ndjson((line for _, line in rows), path)


def load_scene_graphs(path) -> List[SceneGraph]:
    by_video: Dict[str, List[Triplet]] = {}
    for line_no, record in _read_ndjson(path):
        try:
            video_id = str(record["video_id"])
            triplet = Triplet.from_dict(record)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(path, line_no, f"bad graph record: {e}") from e
        by_video.setdefault(video_id, []).append(triplet)
    return [
        SceneGraph.from_triplets(video_id, triplets)
        for video_id, triplets in sorted(by_video.items())
    ]


# ---------------------------------------------------------------------------
# Segmented sentences (intermediate artifact between stages)


def write_sentences(sentences_by_video: Dict[str, List[SegmentedSentence]], path) -> None:
    lines = []
    for video_id in sorted(sentences_by_video):
        for s in sorted(sentences_by_video[video_id], key=lambda s: s.order_index):
            record = s.to_dict()
            record["video_id"] = video_id
            lines.append(_dump_line(record))
    _write_ndjson(lines, path)


def load_sentences(path) -> Dict[str, List[SegmentedSentence]]:
    out: Dict[str, List[SegmentedSentence]] = {}
    for line_no, record in _read_ndjson(path):
        try:
            video_id = str(record["video_id"])
            sentence = SegmentedSentence.from_dict(record)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(path, line_no, f"bad sentence record: {e}") from e
        out.setdefault(video_id, []).append(sentence)
    for sentences in out.values():
        sentences.sort(key=lambda s: s.order_index)
    return out


# ---------------------------------------------------------------------------
# Parsed (unlocalized) triplets keyed by sentence


def write_parsed_triplets(
    rows: Sequence[Tuple[str, int, Triplet]], path
) -> None:
    """Write (video_id, order_index, triplet) rows in a stable order."""
    keyed = []
    for video_id, order_index, triplet in rows:
        record = triplet.to_dict()
        record["video_id"] = video_id
        record["order_index"] = order_index
        keyed.append(((video_id, order_index) + triplet.classes(), _dump_line(record)))
    keyed.sort(key=lambda pair: pair[0])
    _write_ndjson((line for _, line in keyed), path)


def load_parsed_triplets(path) -> List[Tuple[str, int, Triplet]]:
    rows = []
    for line_no, record in _read_ndjson(path):
        try:
            rows.append(
                (
                    str(record["video_id"]),
                    int(record["order_index"]),
                    Triplet.from_dict(record),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(path, line_no, f"bad parsed-triplet record: {e}") from e
    rows.sort(key=lambda r: (r[0], r[1], r[2].classes()))
    return rows


# ---------------------------------------------------------------------------
# Bundle loading


def load_bundle(root, config: Optional[IngestConfig] = None) -> DatasetBundle:
    """Load a dataset root into memory.

    Detections below the confidence floor are dropped. Line order inside the
    input files never affects the result.
    """
    config = config or IngestConfig()
    root = Path(root)
    manifests = load_manifests(root / "manifest.ndjson")

    bundle = DatasetBundle(manifests=manifests)
    gt: Dict[str, SceneGraph] = {}
    for manifest in manifests:
        video_id = manifest.video_id
        frames_path = root / "embeddings" / f"{video_id}.frames.nlve"
        matrix = read_embeddings(frames_path).normalized()
        if matrix.dim <= 0:
            raise DimensionMismatch(f"{frames_path}: dimension must be positive")
        bundle.embeddings[video_id] = matrix

        sentences_path = root / "embeddings" / f"{video_id}.sentences.nlve"
        if sentences_path.exists():
            sent = read_embeddings(sentences_path).normalized()
            if sent.dim != matrix.dim:
                raise DimensionMismatch(
                    f"{sentences_path}: sentence dim {sent.dim} != frame dim {matrix.dim}"
                )
            bundle.sentence_embeddings[video_id] = sent

        bundle.detections[video_id] = load_detections(
            root / "detections" / f"{video_id}.ndjson", config.confidence_floor
        )

        gt_path = root / "gt" / f"{video_id}.ndjson"
        if gt_path.exists():
            graphs = load_scene_graphs(gt_path)
            for g in graphs:
                gt[g.video_id] = g
    if gt:
        bundle.gt_graphs = gt
    return bundle
