"""Pipeline orchestration and command-line interface.

Subcommands: segment, align, parse, ground, plm, eval, run-all, stats,
validate. Exit codes: 0 success, 1 fatal stage error, 2 validation failure.
The API key is read from the environment; ``--offline`` forbids network
access and requires recorded responses in the cache.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click

from . import align as align_mod
from . import evaluate as eval_mod
from . import ingest, motion, parse as parse_mod, segment as segment_mod
from .core import (
    SceneGraph,
    SegmentedSentence,
    Triplet,
    Vocabulary,
    validate_manifest,
)
from .errors import (
    CapgraphError,
    DimensionMismatch,
    MissingFile,
    MissingTrace,
    StageError,
)
from .llm import ChatClient, TokenUsage, estimate_cost


@dataclass
class PipelineConfig:
    """One declarative config for the whole pipeline; every default is the
    published hyperparameter (beta 4, alpha 15%, confidence floor 0.2,
    K in {20, 50}, IoU 0.5)."""

    data_root: str = "."
    out_dir: str = "out"
    cache_dir: Optional[str] = None
    seed: int = 0
    workers: int = 1
    offline: bool = False
    skip_negatives: bool = False
    ingest: ingest.IngestConfig = field(default_factory=ingest.IngestConfig)
    segmentation: segment_mod.SegmentConfig = field(default_factory=segment_mod.SegmentConfig)
    alignment: align_mod.AlignConfig = field(default_factory=align_mod.AlignConfig)
    parsing: parse_mod.ParseConfig = field(default_factory=parse_mod.ParseConfig)
    motion: motion.MotionLabelConfig = field(default_factory=motion.MotionLabelConfig)
    evaluation: eval_mod.EvalConfig = field(default_factory=eval_mod.EvalConfig)

    def __post_init__(self):
        self.alignment.seed = self.seed
        self.segmentation.cache_dir = self.cache_dir or self.segmentation.cache_dir
        self.segmentation.offline = self.offline

    def to_dict(self) -> dict:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return [plain(v) for v in obj]
            return obj

        return {
            "data_root": self.data_root,
            "out_dir": self.out_dir,
            "cache_dir": self.cache_dir,
            "seed": self.seed,
            "workers": self.workers,
            "offline": self.offline,
            "skip_negatives": self.skip_negatives,
            "ingest": plain(self.ingest),
            "segmentation": plain(self.segmentation),
            "alignment": plain(self.alignment),
            "parsing": plain(self.parsing),
            "motion": plain(self.motion),
            "evaluation": plain(self.evaluation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        def build(klass, key):
            payload = dict(d.get(key, {}))
            if klass is motion.MotionLabelConfig and "negative_class_names" in payload:
                payload["negative_class_names"] = tuple(payload["negative_class_names"])
            if klass is eval_mod.EvalConfig and "k_values" in payload:
                payload["k_values"] = tuple(payload["k_values"])
            return klass(**payload)

        return cls(
            data_root=d.get("data_root", "."),
            out_dir=d.get("out_dir", "out"),
            cache_dir=d.get("cache_dir"),
            seed=int(d.get("seed", 0)),
            workers=int(d.get("workers", 1)),
            offline=bool(d.get("offline", False)),
            skip_negatives=bool(d.get("skip_negatives", False)),
            ingest=build(ingest.IngestConfig, "ingest"),
            segmentation=build(segment_mod.SegmentConfig, "segmentation"),
            alignment=build(align_mod.AlignConfig, "alignment"),
            parsing=build(parse_mod.ParseConfig, "parsing"),
            motion=build(motion.MotionLabelConfig, "motion"),
            evaluation=build(eval_mod.EvalConfig, "evaluation"),
        )


@dataclass
class VideoResult:
    video_id: str
    sentences: List[SegmentedSentence]
    trace: Optional[align_mod.AlignmentTrace]
    extracted: List[Tuple[int, Triplet]]
    mapped: List[Tuple[int, Triplet]]
    usage: TokenUsage
    discards: parse_mod.DiscardCounters


@dataclass
class RunReport:
    """Per-stage counts for one pipeline run.

    ``wall_time_seconds`` is informational and intentionally left out of the
    serialized report so equal inputs always produce byte-identical outputs.
    """

    videos: int = 0
    sentences: int = 0
    triplets_extracted: int = 0
    triplets_mapped: int = 0
    triplets_discarded: int = 0
    grounded_triplets: int = 0
    motion_candidates: int = 0
    negatives: int = 0
    usage: TokenUsage = field(default_factory=TokenUsage)
    wall_time_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "videos": self.videos,
            "sentences": self.sentences,
            "triplets_extracted": self.triplets_extracted,
            "triplets_mapped": self.triplets_mapped,
            "triplets_discarded": self.triplets_discarded,
            "grounded_triplets": self.grounded_triplets,
            "motion_candidates": self.motion_candidates,
            "negatives": self.negatives,
            "token_usage": self.usage.to_dict(),
        }


def _make_client(config: PipelineConfig) -> ChatClient:
    seg = config.segmentation
    return ChatClient(
        model_name=seg.model_name,
        endpoint=seg.endpoint,
        temperature=seg.temperature,
        max_retries=seg.max_retries,
        cache_dir=config.cache_dir or seg.cache_dir,
        offline=config.offline or seg.offline,
        input_price_per_million=seg.input_price_per_million,
        output_price_per_million=seg.output_price_per_million,
    )


def _process_video(
    manifest,
    bundle: ingest.DatasetBundle,
    config: PipelineConfig,
    vocab: Vocabulary,
) -> VideoResult:
    """Segment, align and parse one video; grounding happens dataset-wide
    after the optional open-vocabulary restriction."""
    video_id = manifest.video_id
    client = _make_client(config)
    discards = parse_mod.DiscardCounters()

    sentences = segment_mod.segment_caption(
        manifest.caption,
        config.segmentation,
        client=client,
        max_sentences=max(1, manifest.num_frames - 1),
    )

    sentence_embeds = bundle.sentence_embeddings.get(video_id)
    if sentence_embeds is None:
        raise MissingFile(
            f"embeddings/{video_id}.sentences.nlve (produce sentence embeddings "
            "for the segmented captions, then re-run)"
        )
    if len(sentence_embeds) != len(sentences):
        raise DimensionMismatch(
            f"video {video_id}: {len(sentences)} sentences but "
            f"{len(sentence_embeds)} sentence embedding rows"
        )

    clustering = align_mod.cluster_frames(bundle.embeddings[video_id], config.alignment)
    aligned, trace = align_mod.align_sentences(
        sentences, sentence_embeds, clustering, config.alignment, video_id=video_id
    )

    extracted: List[Tuple[int, Triplet]] = []
    mapped: List[Tuple[int, Triplet]] = []
    for sentence in aligned:
        triplets = parse_mod.parse_triplets(
            sentence, config.parsing, client=client, counters=discards
        )
        for t in triplets:
            extracted.append((sentence.order_index, t))
            m = parse_mod.map_classes(
                t, vocab, config.parsing, client=client, counters=discards
            )
            if m is not None:
                mapped.append((sentence.order_index, m))

    return VideoResult(
        video_id=video_id,
        sentences=aligned,
        trace=trace,
        extracted=extracted,
        mapped=mapped,
        usage=client.usage,
        discards=discards,
    )


def _restrict_open_vocabulary(results: List[VideoResult], top_n: int) -> None:
    """Dataset-wide predicate frequency cut for open-vocabulary runs."""
    pool = [t for r in results for _, t in r.mapped]
    kept = {id(t) for t in parse_mod.restrict_open_vocabulary(pool, top_n)}
    for r in results:
        r.mapped = [(order, t) for order, t in r.mapped if id(t) in kept]


def _ground_video(result: VideoResult, bundle: ingest.DatasetBundle) -> List[Triplet]:
    by_order = {s.order_index: s for s in result.sentences}
    grounded: List[Triplet] = []
    for order_index, triplet in result.mapped:
        sentence = by_order[order_index]
        grounded.extend(
            parse_mod.ground_triplets(
                [triplet], sentence.aligned_frames, bundle.detections[result.video_id]
            )
        )
    return grounded


def _map_videos(fn, manifests, workers: int):
    if workers <= 1:
        return [fn(m) for m in manifests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, manifests))


def run_all(config: PipelineConfig, vocab: Optional[Vocabulary] = None) -> RunReport:
    """Run segment -> align -> parse -> ground -> negatives and write outputs.

    Equal config, seed and cached responses produce byte-identical output
    files. The first fatal stage error is re-raised with its stage name and
    any partially written outputs are removed.
    """
    started = time.monotonic()
    vocab = vocab or Vocabulary.action_genome()
    out_dir = Path(config.out_dir)
    written: List[Path] = []

    def emit(name: str, writer) -> Path:
        path = out_dir / name
        writer(path)
        written.append(path)
        return path

    stage = "load"
    try:
        bundle = ingest.load_bundle(config.data_root, config.ingest)
        manifests = sorted(bundle.manifests, key=lambda m: m.video_id)

        stage = "process"
        results = _map_videos(
            lambda m: _process_video(m, bundle, config, vocab),
            manifests,
            config.workers,
        )
        results.sort(key=lambda r: r.video_id)

        stage = "ground"
        if config.parsing.mapping == "none" and config.parsing.top_n_open_classes:
            _restrict_open_vocabulary(results, config.parsing.top_n_open_classes)
        grounded = {r.video_id: _ground_video(r, bundle) for r in results}

        stage = "negatives"
        graphs = {
            r.video_id: SceneGraph.from_triplets(r.video_id, grounded[r.video_id])
            for r in results
        }
        candidates: List[motion.MotionCandidate] = []
        assignment = motion.NegativeAssignment(selected=[], by_video={})
        if not config.skip_negatives and vocab.negative_classes:
            runs_by_video = {
                r.video_id: motion.collect_unaligned_runs(
                    bundle.manifest_for(r.video_id), r.sentences
                )
                for r in results
            }
            candidates = motion.build_candidates(
                manifests, bundle.detections, graphs, runs_by_video, config.motion
            )
            if candidates:
                assignment = motion.assign_negatives(candidates, config.motion)

        stage = "write"
        report = RunReport(
            videos=len(results),
            sentences=sum(len(r.sentences) for r in results),
            triplets_extracted=sum(len(r.extracted) for r in results),
            triplets_mapped=sum(len(r.mapped) for r in results),
            triplets_discarded=sum(r.discards.total() for r in results),
            grounded_triplets=sum(len(g) for g in grounded.values()),
            motion_candidates=len(candidates),
            negatives=sum(len(ts) for ts in assignment.by_video.values()),
        )
        for r in results:
            report.usage = report.usage + r.usage

        out_dir.mkdir(parents=True, exist_ok=True)
        emit(
            "sentences.ndjson",
            lambda p: ingest.write_sentences({r.video_id: r.sentences for r in results}, p),
        )
        emit(
            "scene_graphs.ndjson",
            lambda p: ingest.write_scene_graphs(
                [graphs[r.video_id] for r in results], p
            ),
        )
        negative_graphs = [
            SceneGraph.from_triplets(video_id, triplets)
            for video_id, triplets in sorted(assignment.by_video.items())
        ]
        emit(
            "negatives.ndjson",
            lambda p: ingest.write_scene_graphs(negative_graphs, p),
        )
        trace_records = []
        for r in results:
            record = r.trace.to_dict()
            record["usage"] = r.usage.to_dict()
            record["discards"] = r.discards.to_dict()
            trace_records.append(record)
        emit("trace.ndjson", lambda p: ingest.write_record_lines(trace_records, p))
        emit(
            "report.json",
            lambda p: p.write_text(
                json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
                encoding="utf-8",
            ),
        )
        report.wall_time_seconds = time.monotonic() - started
        return report
    except Exception as e:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        if isinstance(e, StageError):
            raise
        raise StageError(stage, e) from e


# ---------------------------------------------------------------------------
# Statistics


def aggregate_stats(
    trace_paths: Sequence[str],
    input_price: float = 0.5,
    output_price: float = 1.5,
) -> dict:
    """Aggregate trace files into usage, cost and histogram statistics."""
    records = []
    for raw in trace_paths:
        path = Path(raw)
        if not path.exists():
            raise MissingTrace(str(path))
        records.extend(ingest.read_record_lines(path))

    per_video_cost = {}
    usage = TokenUsage()
    sentences_hist: Dict[str, int] = {}
    interval_hist: Dict[str, int] = {}
    gap_hist: Dict[str, int] = {}
    discards: Dict[str, int] = {}
    for record in records:
        u = TokenUsage.from_dict(record.get("usage", {}))
        cost = estimate_cost(u.input_tokens, u.output_tokens, input_price, output_price)
        per_video_cost[record.get("video_id", "?")] = {
            "input_tokens": u.input_tokens,
            "output_tokens": u.output_tokens,
            "cost": cost,
        }
        usage = usage + TokenUsage(u.input_tokens, u.output_tokens, cost)

        sentence_records = record.get("sentences", [])
        key = str(len(sentence_records))
        sentences_hist[key] = sentences_hist.get(key, 0) + 1
        for s in sentence_records:
            interval = s.get("post_pruning_interval")
            if interval:
                length = str(interval[1] - interval[0] + 1)
                interval_hist[length] = interval_hist.get(length, 0) + 1
            gap = s.get("steepest_gap")
            if gap is not None:
                bucket = f"{round(float(gap), 1):.1f}"
                gap_hist[bucket] = gap_hist.get(bucket, 0) + 1
        for reason, count in record.get("discards", {}).items():
            discards[reason] = discards.get(reason, 0) + int(count)

    return {
        "videos": len(records),
        "token_usage": usage.to_dict(),
        "per_video": {k: per_video_cost[k] for k in sorted(per_video_cost)},
        "histograms": {
            "sentences_per_caption": dict(sorted(sentences_hist.items())),
            "aligned_interval_lengths": dict(sorted(interval_hist.items())),
            "steepest_decline_gaps": dict(sorted(gap_hist.items())),
        },
        "discards": dict(sorted(discards.items())),
    }


# ---------------------------------------------------------------------------
# CLI


@click.group()
def main():
    """Turn video captions plus frame embeddings and detections into
    pseudo-localized scene graphs, and evaluate predictions with Recall@K."""


def _fail(e: Exception) -> None:
    click.echo(f"error: {e}", err=True)
    sys.exit(1)


def _load_pipeline_config(config_path: Optional[str]) -> PipelineConfig:
    if config_path:
        return PipelineConfig.from_dict(
            json.loads(Path(config_path).read_text(encoding="utf-8"))
        )
    return PipelineConfig()


@main.command()
@click.option("--data-root", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--tcs-mode", "mode", type=click.Choice(["llm", "rule_fallback"]), default="llm")
@click.option("--model", default="gpt-3.5-turbo")
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--offline", is_flag=True, default=False)
def segment(data_root, out_path, mode, model, cache_dir, offline):
    """Split each video caption into chronologically ordered sentences."""
    try:
        bundle = ingest.load_bundle(data_root)
        config = segment_mod.SegmentConfig(
            model_name=model, mode=mode, cache_dir=cache_dir, offline=offline
        )
        client = segment_mod.make_client(config)
        sentences = {}
        for manifest in sorted(bundle.manifests, key=lambda m: m.video_id):
            sentences[manifest.video_id] = segment_mod.segment_caption(
                manifest.caption,
                config,
                client=client,
                max_sentences=max(1, manifest.num_frames - 1),
            )
        ingest.write_sentences(sentences, out_path)
        click.echo(f"wrote {sum(map(len, sentences.values()))} sentences to {out_path}")
    except CapgraphError as e:
        _fail(e)


def _parse_selection(value: str) -> Tuple[str, float]:
    if value in ("steepest", "steepest_decline"):
        return "steepest_decline", 0.2
    if value.startswith("gap:"):
        return "fixed_gap", float(value.split(":", 1)[1])
    raise click.BadParameter("selection must be 'steepest' or 'gap:<tau>'")


@main.command(name="align")
@click.option("--data-root", required=True, type=click.Path())
@click.option("--sentences", "sentences_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--beta", default=4, show_default=True)
@click.option("--selection", default="steepest", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trace-out", default=None, type=click.Path())
def align_cmd(data_root, sentences_path, out_path, beta, selection, seed, trace_out):
    """Align segmented sentences with consecutive frame intervals."""
    try:
        mode, tau = _parse_selection(selection)
        config = align_mod.AlignConfig(beta=beta, selection=mode, gap_tau=tau, seed=seed)
        bundle = ingest.load_bundle(data_root)
        sentences = ingest.load_sentences(sentences_path)
        aligned = {}
        traces = []
        for video_id in sorted(sentences):
            embeds = bundle.sentence_embeddings.get(video_id)
            if embeds is None:
                raise MissingFile(f"embeddings/{video_id}.sentences.nlve")
            clustering = align_mod.cluster_frames(bundle.embeddings[video_id], config)
            aligned[video_id], trace = align_mod.align_sentences(
                sentences[video_id], embeds, clustering, config, video_id=video_id
            )
            traces.append(trace)
        ingest.write_sentences(aligned, out_path)
        if trace_out:
            ingest.write_record_lines([t.to_dict() for t in traces], trace_out)
        click.echo(f"aligned {len(aligned)} videos")
    except CapgraphError as e:
        _fail(e)


@main.command(name="parse")
@click.option("--sentences", "sentences_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--parser", type=click.Choice(["llm", "rule"]), default="llm", show_default=True)
@click.option(
    "--mapping", type=click.Choice(["llm", "lexicon", "none"]), default="lexicon",
    show_default=True,
)
@click.option("--top-n", "top_n", default=500, show_default=True)
@click.option("--lexicon-path", default=None, type=click.Path())
@click.option("--model", default="gpt-3.5-turbo")
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--offline", is_flag=True, default=False)
def parse_cmd(sentences_path, out_path, parser, mapping, top_n, lexicon_path, model, cache_dir, offline):
    """Extract triplets from sentences and map them into the vocabulary."""
    try:
        config = parse_mod.ParseConfig(
            parser=parser, mapping=mapping, lexicon_path=lexicon_path,
            top_n_open_classes=top_n,
        )
        vocab = Vocabulary.action_genome()
        client = None
        if parser == "llm" or mapping == "llm":
            client = ChatClient(
                model_name=model, cache_dir=cache_dir, offline=offline,
                endpoint=segment_mod.SegmentConfig().endpoint,
            )
        counters = parse_mod.DiscardCounters()
        sentences = ingest.load_sentences(sentences_path)
        rows = []
        for video_id in sorted(sentences):
            for sentence in sentences[video_id]:
                for t in parse_mod.parse_triplets(sentence, config, client, counters):
                    mapped = parse_mod.map_classes(t, vocab, config, client, counters)
                    if mapped is not None:
                        rows.append((video_id, sentence.order_index, mapped))
        if mapping == "none" and top_n:
            kept = parse_mod.restrict_open_vocabulary([t for _, _, t in rows], top_n)
            kept_ids = {id(t) for t in kept}
            rows = [r for r in rows if id(r[2]) in kept_ids]
        ingest.write_parsed_triplets(rows, out_path)
        click.echo(
            f"wrote {len(rows)} triplets ({counters.total()} discarded) to {out_path}"
        )
    except CapgraphError as e:
        _fail(e)


@main.command()
@click.option("--data-root", required=True, type=click.Path())
@click.option("--sentences", "sentences_path", required=True, type=click.Path())
@click.option("--triplets", "triplets_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def ground(data_root, sentences_path, triplets_path, out_path):
    """Ground parsed triplets to detections across their aligned frames."""
    try:
        bundle = ingest.load_bundle(data_root)
        sentences = ingest.load_sentences(sentences_path)
        rows = ingest.load_parsed_triplets(triplets_path)
        grounded: Dict[str, List[Triplet]] = {}
        for video_id, order_index, triplet in rows:
            by_order = {s.order_index: s for s in sentences.get(video_id, [])}
            sentence = by_order.get(order_index)
            if sentence is None:
                continue
            grounded.setdefault(video_id, []).extend(
                parse_mod.ground_triplets(
                    [triplet], sentence.aligned_frames, bundle.detections[video_id]
                )
            )
        graphs = [
            SceneGraph.from_triplets(video_id, triplets)
            for video_id, triplets in sorted(grounded.items())
        ]
        ingest.write_scene_graphs(graphs, out_path)
        click.echo(f"grounded {sum(len(g.all_triplets()) for g in graphs)} triplets")
    except CapgraphError as e:
        _fail(e)


@main.command()
@click.option("--data-root", required=True, type=click.Path())
@click.option("--sentences", "sentences_path", required=True, type=click.Path())
@click.option("--graphs", "graphs_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--alpha", default=15.0, show_default=True)
@click.option(
    "--not-looking", type=click.Choice(list(motion.ENDPOINT_STRATEGIES)),
    default="start_and_end", show_default=True,
)
@click.option(
    "--not-contacting", type=click.Choice(list(motion.ENDPOINT_STRATEGIES)),
    default="end", show_default=True,
)
def plm(data_root, sentences_path, graphs_path, out_path, alpha, not_looking, not_contacting):
    """Assign negative-action pseudo-labels on unaligned frames."""
    try:
        config = motion.MotionLabelConfig(
            alpha_percent=alpha,
            strategy_not_looking=not_looking,
            strategy_not_contacting=not_contacting,
        )
        bundle = ingest.load_bundle(data_root)
        sentences = ingest.load_sentences(sentences_path)
        graphs = {g.video_id: g for g in ingest.load_scene_graphs(graphs_path)}
        runs = {
            m.video_id: motion.collect_unaligned_runs(m, sentences.get(m.video_id, []))
            for m in bundle.manifests
        }
        candidates = motion.build_candidates(
            bundle.manifests, bundle.detections, graphs, runs, config
        )
        assignment = motion.assign_negatives(candidates, config) if candidates else \
            motion.NegativeAssignment(selected=[], by_video={})
        negative_graphs = [
            SceneGraph.from_triplets(video_id, triplets)
            for video_id, triplets in sorted(assignment.by_video.items())
        ]
        ingest.write_scene_graphs(negative_graphs, out_path)
        click.echo(
            f"selected {len(assignment.selected)} of {len(candidates)} candidates; "
            f"wrote {sum(len(t) for t in assignment.by_video.values())} negatives"
        )
    except CapgraphError as e:
        _fail(e)


@main.command(name="eval")
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--pred", "pred_path", required=True, type=click.Path())
@click.option("--k", "k_values", default="20,50", show_default=True)
@click.option(
    "--regime", type=click.Choice(["with_constraint", "no_constraint", "both"]),
    default="both", show_default=True,
)
@click.option("--iou", "iou_threshold", default=0.5, show_default=True)
@click.option("--json-out", default=None, type=click.Path())
def eval_cmd(gt_path, pred_path, k_values, regime, iou_threshold, json_out):
    """Score predictions against ground truth with Recall@K."""
    try:
        ks = tuple(sorted(int(k) for k in k_values.split(",")))
        config = eval_mod.EvalConfig(k_values=ks, iou_threshold=iou_threshold, regime=regime)
        instances = build_eval_instances(
            ingest.load_scene_graphs(gt_path), ingest.load_scene_graphs(pred_path)
        )
        results = eval_mod.recall_at_k(instances, config)
        payload = {
            f"{regime_name}/R@{k}": value for (regime_name, k), value in sorted(results.items())
        }
        if json_out:
            Path(json_out).write_text(
                json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
            )
        click.echo(json.dumps(payload, sort_keys=True, indent=1))
        click.echo(format_recall_table(results, ks, config.regimes()))
    except CapgraphError as e:
        _fail(e)


def build_eval_instances(
    gt_graphs: Sequence[SceneGraph], pred_graphs: Sequence[SceneGraph]
) -> List[eval_mod.EvalInstance]:
    preds_by_key: Dict[Tuple[str, int], List[Triplet]] = {}
    for graph in pred_graphs:
        for frame, triplets in graph.per_frame.items():
            preds_by_key.setdefault((graph.video_id, frame), []).extend(triplets)
    instances = []
    for graph in sorted(gt_graphs, key=lambda g: g.video_id):
        for frame in sorted(graph.per_frame):
            instances.append(
                eval_mod.EvalInstance(
                    frame_index=frame,
                    gt=list(graph.per_frame[frame]),
                    predictions=preds_by_key.get((graph.video_id, frame), []),
                )
            )
    return instances


def format_recall_table(results, k_values, regimes) -> str:
    headers = {"with_constraint": "With Constraint", "no_constraint": "No Constraint"}
    column_labels = []
    values = []
    for regime in regimes:
        for k in k_values:
            column_labels.append(f"{headers[regime]} R@{k}")
            values.append(results[(regime, k)])
    width = max(len(label) for label in column_labels) + 2
    header_line = "".join(label.rjust(width) for label in column_labels)
    value_line = "".join(f"{v * 100:.2f}".rjust(width) for v in values)
    return header_line + "\n" + value_line


@main.command(name="run-all")
@click.option("--data-root", default=None, type=click.Path())
@click.option("--out-dir", default=None, type=click.Path())
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--workers", default=None, type=int)
@click.option("--offline", is_flag=True, default=False)
@click.option("--skip-plm", is_flag=True, default=False)
@click.option("--parser", default=None, type=click.Choice(["llm", "rule"]))
@click.option("--mapping", default=None, type=click.Choice(["llm", "lexicon", "none"]))
@click.option("--tcs-mode", default=None, type=click.Choice(["llm", "rule_fallback"]))
@click.option("--dump-config", is_flag=True, default=False,
              help="Print the effective configuration as JSON and exit.")
def run_all_cmd(data_root, out_dir, cache_dir, config_path, seed, workers, offline,
                skip_plm, parser, mapping, tcs_mode, dump_config):
    """Run the whole pipeline end to end and write all outputs."""
    try:
        config = _load_pipeline_config(config_path)
        if data_root is not None:
            config.data_root = data_root
        if out_dir is not None:
            config.out_dir = out_dir
        if cache_dir is not None:
            config.cache_dir = cache_dir
            config.segmentation.cache_dir = cache_dir
        if seed is not None:
            config.seed = seed
            config.alignment.seed = seed
        if workers is not None:
            config.workers = workers
        if offline:
            config.offline = True
            config.segmentation.offline = True
        if skip_plm:
            config.skip_negatives = True
        if parser is not None:
            config.parsing.parser = parser
        if mapping is not None:
            config.parsing.mapping = mapping
        if tcs_mode is not None:
            config.segmentation.mode = tcs_mode
        if dump_config:
            click.echo(json.dumps(config.to_dict(), sort_keys=True, indent=1))
            return
        report = run_all(config)
        click.echo(json.dumps(report.to_dict(), sort_keys=True, indent=1))
        click.echo(f"wall time: {report.wall_time_seconds:.2f}s", err=True)
    except CapgraphError as e:
        _fail(e)


@main.command()
@click.argument("traces", nargs=-1, type=click.Path())
@click.option("--input-price", default=0.5, show_default=True,
              help="Dollars per million input tokens.")
@click.option("--output-price", default=1.5, show_default=True,
              help="Dollars per million output tokens.")
def stats(traces, input_price, output_price):
    """Aggregate trace files: token usage, cost per video, histograms."""
    try:
        report = aggregate_stats(list(traces), input_price, output_price)
        click.echo(json.dumps(report, sort_keys=True, indent=1))
    except CapgraphError as e:
        _fail(e)


@main.command()
@click.option("--data-root", required=True, type=click.Path())
def validate(data_root):
    """Check a dataset root; exit 2 when any invariant is violated."""
    try:
        bundle = ingest.load_bundle(data_root)
    except CapgraphError as e:
        click.echo(f"validation failure: {e}", err=True)
        sys.exit(2)
    problems = []
    for manifest in bundle.manifests:
        report = validate_manifest(
            manifest,
            bundle.embeddings.get(manifest.video_id),
            bundle.detections.get(manifest.video_id, []),
        )
        problems.extend(report.problems)
    if problems:
        for problem in problems:
            click.echo(problem, err=True)
        sys.exit(2)
    click.echo(f"ok: {len(bundle.manifests)} videos")


if __name__ == "__main__":
    main()
