import json

import pytest
from click.testing import CliRunner

from capgraph.cli import PipelineConfig, aggregate_stats, main, run_all
from capgraph.core import BoundingBox, Detection, VideoManifest
from capgraph.errors import MissingTrace, StageError
from capgraph.ingest import (
    load_scene_graphs,
    write_detections,
    write_embeddings,
    write_manifests,
)


def _config(data_root, cassette_dir, out_dir, seed=7):
    return PipelineConfig(
        data_root=str(data_root),
        out_dir=str(out_dir),
        cache_dir=str(cassette_dir),
        seed=seed,
        offline=True,
    )


class TestRunAll:
    def test_fixture_counts(self, data_root, cassette_dir, tmp_path):
        report = run_all(_config(data_root, cassette_dir, tmp_path / "out"))
        assert report.videos == 2
        assert report.sentences == 4
        assert report.triplets_extracted == 6
        assert report.triplets_mapped == 5
        assert report.triplets_discarded == 1
        assert report.grounded_triplets == 22
        assert report.motion_candidates == 1
        assert report.negatives == 3
        assert report.usage.input_tokens == 2 * (680 + 150 + 150)

    def test_rerun_same_counts(self, data_root, cassette_dir, tmp_path):
        a = run_all(_config(data_root, cassette_dir, tmp_path / "a"))
        b = run_all(_config(data_root, cassette_dir, tmp_path / "b"))
        assert a.to_dict() == b.to_dict()

    def test_outputs_byte_identical(self, data_root, cassette_dir, tmp_path):
        run_all(_config(data_root, cassette_dir, tmp_path / "a"))
        run_all(_config(data_root, cassette_dir, tmp_path / "b"))
        for name in (
            "sentences.ndjson", "scene_graphs.ndjson", "negatives.ndjson",
            "trace.ndjson", "report.json",
        ):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_skip_negatives(self, data_root, cassette_dir, tmp_path):
        config = _config(data_root, cassette_dir, tmp_path / "out")
        config.skip_negatives = True
        report = run_all(config)
        assert report.negatives == 0
        assert (tmp_path / "out" / "negatives.ndjson").read_bytes() == b""

    def test_negatives_only_on_unaligned_frames(self, data_root, cassette_dir, tmp_path):
        from capgraph.ingest import load_sentences

        out = tmp_path / "out"
        run_all(_config(data_root, cassette_dir, out))
        sentences = load_sentences(out / "sentences.ndjson")
        covered = {}
        for video_id, items in sentences.items():
            covered[video_id] = set()
            for s in items:
                if s.aligned_frames:
                    covered[video_id].update(range(s.aligned_frames[0], s.aligned_frames[1] + 1))
        for graph in load_scene_graphs(out / "negatives.ndjson"):
            for t in graph.all_triplets():
                assert t.frame_index not in covered[graph.video_id]

    def test_worker_pool_output_identical(self, data_root, cassette_dir, tmp_path):
        serial = _config(data_root, cassette_dir, tmp_path / "serial")
        run_all(serial)
        parallel = _config(data_root, cassette_dir, tmp_path / "parallel")
        parallel.workers = 4
        run_all(parallel)
        for name in ("sentences.ndjson", "scene_graphs.ndjson", "negatives.ndjson",
                     "trace.ndjson", "report.json"):
            assert (tmp_path / "serial" / name).read_bytes() == (
                tmp_path / "parallel" / name
            ).read_bytes()

    def test_open_vocabulary_run_keeps_unmapped_predicates(
        self, data_root, cassette_dir, tmp_path
    ):
        config = _config(data_root, cassette_dir, tmp_path / "out")
        config.parsing.mapping = "none"
        report = run_all(config)
        # Nothing discarded in mapping; the walking-to triplet grounds on the
        # window detections that the closed vocabulary run drops.
        assert report.triplets_discarded == 0
        assert report.triplets_mapped == 6
        predicates = set()
        for graph in load_scene_graphs(tmp_path / "out" / "scene_graphs.ndjson"):
            predicates.update(t.predicate_class for t in graph.all_triplets())
        assert "walking to" in predicates

    def test_open_vocabulary_top_n_restriction(self, data_root, cassette_dir, tmp_path):
        config = _config(data_root, cassette_dir, tmp_path / "out")
        config.parsing.mapping = "none"
        config.parsing.top_n_open_classes = 2
        run_all(config)
        predicates = set()
        for graph in load_scene_graphs(tmp_path / "out" / "scene_graphs.ndjson"):
            predicates.update(t.predicate_class for t in graph.all_triplets())
        assert len(predicates) <= 2

    def test_fatal_stage_error_removes_outputs(self, data_root, tmp_path):
        # No cassettes recorded: offline segmentation must fail and leave
        # nothing behind.
        config = _config(data_root, tmp_path / "empty-cassettes", tmp_path / "out")
        with pytest.raises(StageError) as err:
            run_all(config)
        assert err.value.stage == "process"
        assert not (tmp_path / "out").exists() or not list((tmp_path / "out").iterdir())


class TestPipelineConfig:
    def test_defaults_match_published_hyperparameters(self):
        dumped = PipelineConfig().to_dict()
        assert dumped["alignment"]["beta"] == 4
        assert dumped["motion"]["alpha_percent"] == 15.0
        assert dumped["ingest"]["confidence_floor"] == 0.2
        assert dumped["evaluation"]["k_values"] == [20, 50]
        assert dumped["evaluation"]["iou_threshold"] == 0.5

    def test_round_trip(self):
        config = PipelineConfig(seed=9, workers=3)
        config.alignment.beta = 6
        clone = PipelineConfig.from_dict(config.to_dict())
        assert clone.to_dict() == config.to_dict()


class TestRunAllCli:
    def test_dump_config(self):
        runner = CliRunner()
        result = runner.invoke(main, ["run-all", "--dump-config"])
        assert result.exit_code == 0
        dumped = json.loads(result.output)
        assert dumped["alignment"]["beta"] == 4
        assert dumped["motion"]["alpha_percent"] == 15.0

    def test_cli_run(self, data_root, cassette_dir, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main,
            [
                "run-all",
                "--data-root", str(data_root),
                "--out-dir", str(tmp_path / "out"),
                "--cache-dir", str(cassette_dir),
                "--seed", "7",
                "--offline",
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "out" / "scene_graphs.ndjson").exists()

    def test_cli_failure_exit_code(self, data_root, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main,
            [
                "run-all",
                "--data-root", str(data_root),
                "--out-dir", str(tmp_path / "out"),
                "--cache-dir", str(tmp_path / "no-cassettes"),
                "--offline",
            ],
        )
        assert result.exit_code == 1


class TestStageCommands:
    def test_staged_pipeline_matches_run_all(self, data_root, cassette_dir, tmp_path):
        runner = CliRunner()
        out = tmp_path / "staged"
        out.mkdir()
        steps = [
            ["segment", "--data-root", str(data_root), "--out", str(out / "raw.ndjson"),
             "--cache-dir", str(cassette_dir), "--offline"],
            ["align", "--data-root", str(data_root), "--sentences", str(out / "raw.ndjson"),
             "--out", str(out / "sentences.ndjson"), "--seed", "7",
             "--trace-out", str(out / "trace.ndjson")],
            ["parse", "--sentences", str(out / "sentences.ndjson"),
             "--out", str(out / "triplets.ndjson"), "--cache-dir", str(cassette_dir),
             "--offline"],
            ["ground", "--data-root", str(data_root),
             "--sentences", str(out / "sentences.ndjson"),
             "--triplets", str(out / "triplets.ndjson"),
             "--out", str(out / "scene_graphs.ndjson")],
            ["plm", "--data-root", str(data_root),
             "--sentences", str(out / "sentences.ndjson"),
             "--graphs", str(out / "scene_graphs.ndjson"),
             "--out", str(out / "negatives.ndjson")],
        ]
        for step in steps:
            result = runner.invoke(main, step)
            assert result.exit_code == 0, (step[0], result.output)

        reference = tmp_path / "reference"
        run_all(_config(data_root, cassette_dir, reference))
        for name in ("sentences.ndjson", "scene_graphs.ndjson", "negatives.ndjson"):
            assert (out / name).read_bytes() == (reference / name).read_bytes(), name


class TestConfigFile:
    def test_run_all_reads_config_file_and_flags_override(
        self, data_root, cassette_dir, tmp_path
    ):
        config = PipelineConfig(
            data_root=str(data_root), out_dir=str(tmp_path / "from-file"),
            cache_dir=str(cassette_dir), seed=3, offline=True,
        )
        config_path = tmp_path / "pipeline.json"
        config_path.write_text(json.dumps(config.to_dict()))
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["run-all", "--config", str(config_path), "--seed", "7",
             "--out-dir", str(tmp_path / "out")],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "out" / "report.json").exists()
        assert not (tmp_path / "from-file").exists()
        # Flag-overridden seed 7 reproduces the golden fixture alignment.
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["grounded_triplets"] == 22


class TestSelectionFlag:
    def test_gap_selection(self, data_root, cassette_dir, tmp_path):
        runner = CliRunner()
        raw = tmp_path / "raw.ndjson"
        aligned = tmp_path / "aligned.ndjson"
        assert runner.invoke(
            main,
            ["segment", "--data-root", str(data_root), "--out", str(raw),
             "--cache-dir", str(cassette_dir), "--offline"],
        ).exit_code == 0
        result = runner.invoke(
            main,
            ["align", "--data-root", str(data_root), "--sentences", str(raw),
             "--out", str(aligned), "--selection", "gap:0.3", "--seed", "7"],
        )
        assert result.exit_code == 0, result.output
        from capgraph.ingest import load_sentences

        out = load_sentences(aligned)
        # Fixture clusters are near-orthogonal, so every inter-cluster drop
        # exceeds 0.3 and the gap variant matches the steepest-decline result.
        assert out["kitchen01"][0].aligned_frames == (1, 2)
        assert out["kitchen01"][1].aligned_frames == (3, 8)

    def test_bad_selection_value(self, data_root, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["align", "--data-root", str(data_root),
             "--sentences", str(tmp_path / "x.ndjson"),
             "--out", str(tmp_path / "y.ndjson"), "--selection", "median"],
        )
        assert result.exit_code != 0


class TestSegmentCommand:
    def test_rule_fallback_mode_is_offline(self, data_root, tmp_path):
        runner = CliRunner()
        out = tmp_path / "sentences.ndjson"
        result = runner.invoke(
            main,
            ["segment", "--data-root", str(data_root), "--out", str(out),
             "--tcs-mode", "rule_fallback"],
        )
        assert result.exit_code == 0, result.output
        from capgraph.ingest import load_sentences

        sentences = load_sentences(out)
        # The first fixture caption splits at its "before" marker.
        assert len(sentences["kitchen01"]) == 2


class TestStats:
    def test_cost_formula_per_video(self, data_root, cassette_dir, tmp_path):
        out = tmp_path / "out"
        run_all(_config(data_root, cassette_dir, out))
        report = aggregate_stats([str(out / "trace.ndjson")])
        video = report["per_video"]["kitchen01"]
        assert video["input_tokens"] == 980
        assert video["output_tokens"] == 85
        expected = (980 / 1_000_000) * 0.5 + (85 / 1_000_000) * 1.5
        assert video["cost"] == pytest.approx(expected, abs=1e-12)

    def test_zero_traces_empty_report(self):
        runner = CliRunner()
        result = runner.invoke(main, ["stats"])
        assert result.exit_code == 0
        report = json.loads(result.output)
        assert report["videos"] == 0

    def test_additivity_across_shards(self, data_root, cassette_dir, tmp_path):
        out = tmp_path / "out"
        run_all(_config(data_root, cassette_dir, out))
        trace = out / "trace.ndjson"
        single = aggregate_stats([str(trace)])
        lines = trace.read_text().splitlines()
        shard_a, shard_b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        shard_a.write_text(lines[0] + "\n")
        shard_b.write_text(lines[1] + "\n")
        combined = aggregate_stats([str(shard_a), str(shard_b)])
        assert combined["token_usage"] == single["token_usage"]
        assert combined["videos"] == single["videos"]

    def test_missing_trace(self, tmp_path):
        with pytest.raises(MissingTrace):
            aggregate_stats([str(tmp_path / "absent.ndjson")])

    def test_histograms(self, data_root, cassette_dir, tmp_path):
        out = tmp_path / "out"
        run_all(_config(data_root, cassette_dir, out))
        report = aggregate_stats([str(out / "trace.ndjson")])
        assert report["histograms"]["sentences_per_caption"] == {"2": 2}
        lengths = report["histograms"]["aligned_interval_lengths"]
        assert sum(lengths.values()) == 4
        assert report["discards"]["unmapped_predicate"] == 1


class TestValidateCommand:
    def test_ok(self, data_root):
        runner = CliRunner()
        result = runner.invoke(main, ["validate", "--data-root", str(data_root)])
        assert result.exit_code == 0
        assert "ok: 2 videos" in result.output

    def test_validation_failure_exit_two(self, tmp_path):
        import numpy as np

        from capgraph.core import EmbeddingMatrix

        root = tmp_path / "broken"
        manifest = VideoManifest("v", ("f1", "f2"), 3.0, "A person sits.")
        write_manifests([manifest], root / "manifest.ndjson")
        rows = np.ones((2, 4), dtype=np.float32)
        write_embeddings(
            EmbeddingMatrix(["f1", "f2"], rows / 2.0), root / "embeddings" / "v.frames.nlve"
        )
        write_detections(
            [Detection(1, "person", BoundingBox(5, 0, 5, 5), 0.9)],
            root / "detections" / "v.ndjson",
        )
        runner = CliRunner()
        result = runner.invoke(main, ["validate", "--data-root", str(root)])
        assert result.exit_code == 2


class TestEvalCommand:
    def test_table_and_json(self, tmp_path):
        from capgraph.core import Provenance, SceneGraph, Triplet
        from capgraph.ingest import write_scene_graphs

        box_a = BoundingBox(0, 0, 10, 10)
        box_b = BoundingBox(20, 0, 30, 10)
        gt = SceneGraph.from_triplets(
            "v",
            [
                Triplet("person", "sitting on", "sofa/couch", box_a, box_b, 1,
                        provenance=Provenance.GROUND_TRUTH),
                Triplet("person", "looking at", "television", box_a, box_b, 1,
                        provenance=Provenance.GROUND_TRUTH),
            ],
        )
        pred = SceneGraph.from_triplets(
            "v",
            [
                Triplet("person", "sitting on", "sofa/couch", box_a, box_b, 1,
                        score=0.9, provenance=Provenance.PREDICTION),
            ],
        )
        write_scene_graphs([gt], tmp_path / "gt.ndjson")
        write_scene_graphs([pred], tmp_path / "pred.ndjson")
        runner = CliRunner()
        result = runner.invoke(
            main,
            [
                "eval",
                "--gt", str(tmp_path / "gt.ndjson"),
                "--pred", str(tmp_path / "pred.ndjson"),
                "--k", "20,50",
                "--regime", "both",
                "--json-out", str(tmp_path / "report.json"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "With Constraint R@20" in result.output
        assert "No Constraint R@50" in result.output
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["with_constraint/R@20"] == 0.5
        assert report["no_constraint/R@50"] == 0.5
