"""Command-line behavior: outputs, logging, config-file precedence, and the
exit-code contract (0 ok, 1 internal, 2 bad input)."""

import json
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from querydet.cli import main
from querydet.evaluation import GroundTruth
from querydet.formats import (
    atomic_write_text,
    emit_config,
    emit_detections,
    emit_ground_truth,
    parse_benchmark_csv,
    parse_descriptors,
    parse_detections,
)
from querydet.synthetic import detection_corpus

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def ws(tmp_path_factory, color_weights_file):
    """One on-disk workspace: weights, a planted scene, and its ground truth."""
    from querydet.formats import save_image_png

    root = tmp_path_factory.mktemp("cliws")
    scene = detection_corpus(count=1)[0]
    save_image_png(str(root / "q.png"), scene.query)
    save_image_png(str(root / "t.png"), scene.scene)
    atomic_write_text(
        str(root / "gt.json"),
        emit_ground_truth([GroundTruth(image_id="q", boxes=(scene.box,))]),
    )
    return SimpleNamespace(root=root, weights=color_weights_file, scene=scene)


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestDetectCommand:
    def test_writes_detections_and_reports(self, ws, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--target", str(ws.root / "t.png"), "--out", str(tmp_path),
        )
        assert code == 0
        assert "detection(s) written to" in out
        dets = parse_detections((tmp_path / "detections.json").read_text())
        assert len(dets) >= 1
        assert dets[0].query_id == "q"
        assert dets[0].stage == 2
        assert f"box [{dets[0].box[0]}, {dets[0].box[1]}," in out

    def test_byte_identical_across_runs(self, ws, capsys, tmp_path):
        for sub in ("one", "two"):
            code, _, _ = run_cli(
                capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
                "--target", str(ws.root / "t.png"), "--out", str(tmp_path / sub),
            )
            assert code == 0
        assert (tmp_path / "one" / "detections.json").read_bytes() == (
            tmp_path / "two" / "detections.json"
        ).read_bytes()

    def test_optional_rasters(self, ws, capsys, tmp_path):
        code, _, _ = run_cli(
            capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--target", str(ws.root / "t.png"), "--out", str(tmp_path),
            "--emit-scoremap", "--emit-overlay",
        )
        assert code == 0
        assert (tmp_path / "scoremap.png").read_bytes()[:8] == PNG_MAGIC
        assert (tmp_path / "overlay.png").read_bytes()[:8] == PNG_MAGIC
        assert Image.open(tmp_path / "scoremap.png").mode in ("I;16", "I")
        assert Image.open(tmp_path / "overlay.png").mode == "RGB"

    def test_missing_weights_file(self, ws, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "detect", "--weights", str(tmp_path / "absent.qdw"),
            "--query", str(ws.root / "q.png"), "--target", str(ws.root / "t.png"),
            "--out", str(tmp_path),
        )
        assert code == 2
        assert "error:" in err
        assert "weights" in err

    def test_missing_query_image(self, ws, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "detect", "--weights", ws.weights,
            "--query", str(tmp_path / "absent.png"), "--target", str(ws.root / "t.png"),
            "--out", str(tmp_path),
        )
        assert code == 2
        assert "image file not found" in err

    def test_missing_required_option(self, ws, capsys, tmp_path):
        code, _, err = run_cli(capsys, "detect", "--weights", ws.weights, "--out", str(tmp_path))
        assert code == 2
        assert "missing required option --query" in err

    def test_verbose_single_block_setting(self, ws, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "--verbose", "detect", "--weights", ws.weights,
            "--query", str(ws.root / "q.png"), "--target", str(ws.root / "t.png"),
            "--setting", "b", "--out", str(tmp_path),
        )
        assert code == 0
        assert "setting b scored blocks 5" in err
        assert "stage 1 kept" in err

    def test_no_stage2_keeps_candidates(self, ws, capsys, tmp_path):
        code, _, _ = run_cli(
            capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--target", str(ws.root / "t.png"), "--out", str(tmp_path), "--no-stage2",
        )
        assert code == 0
        dets = parse_detections((tmp_path / "detections.json").read_text())
        assert dets and all(d.stage == 1 for d in dets)

    def test_strict_second_threshold_empties_output(self, ws, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--target", str(ws.root / "t.png"), "--out", str(tmp_path),
            "--second-threshold", "0.9999",
        )
        assert code == 0
        assert out.startswith("0 detection(s)")
        assert parse_detections((tmp_path / "detections.json").read_text()) == []

    def test_invalid_setting_rejected_by_parser(self, ws, capsys, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main([
                "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
                "--target", str(ws.root / "t.png"), "--setting", "z", "--out", str(tmp_path),
            ])
        assert exc.value.code == 2


class TestConfigFile:
    def test_config_supplies_options(self, ws, capsys, tmp_path):
        out_dir = tmp_path / "from_config"
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(emit_config({
            "weights": ws.weights,
            "query": str(ws.root / "q.png"),
            "target": str(ws.root / "t.png"),
            "out": str(out_dir),
            "emit_scoremap": "true",
            "setting": "c",
        }))
        code, _, err = run_cli(capsys, "--verbose", "detect", "--config", str(cfg_path))
        assert code == 0
        assert (out_dir / "detections.json").exists()
        assert (out_dir / "scoremap.png").exists()
        assert "setting c scored blocks" in err

    def test_flag_overrides_config(self, ws, capsys, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(emit_config({
            "weights": ws.weights,
            "query": str(ws.root / "q.png"),
            "target": str(ws.root / "t.png"),
            "out": str(tmp_path / "config_out"),
            "setting": "c",
        }))
        flag_out = tmp_path / "flag_out"
        code, _, err = run_cli(
            capsys, "--verbose", "detect", "--config", str(cfg_path),
            "--setting", "b", "--out", str(flag_out),
        )
        assert code == 0
        assert (flag_out / "detections.json").exists()
        assert not (tmp_path / "config_out").exists()
        assert "setting b scored blocks 5" in err

    def test_malformed_config_line(self, ws, capsys, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("weights\n")
        code, _, err = run_cli(capsys, "detect", "--config", str(cfg_path))
        assert code == 2
        assert "line 1" in err


class TestExtractCommand:
    def test_writes_descriptor_document(self, ws, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "extract", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--setting", "a", "--out", str(tmp_path),
        )
        assert code == 0
        assert "descriptors" in out
        qid, setting, blocks = parse_descriptors((tmp_path / "descriptors.json").read_text())
        assert (qid, setting) == ("q", "a")
        assert [b for b, _, _ in blocks] == [1, 2, 3, 4, 5]
        for _, _, vec in blocks:
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)


class TestEvalCommand:
    def detect_then_eval(self, ws, capsys, tmp_path, gt_name="gt.json"):
        run_cli(
            capsys, "detect", "--weights", ws.weights, "--query", str(ws.root / "q.png"),
            "--target", str(ws.root / "t.png"), "--out", str(tmp_path),
        )
        return run_cli(
            capsys, "eval", str(tmp_path / "detections.json"), str(ws.root / gt_name),
            "--out", str(tmp_path),
        )

    def test_perfect_match_reports_ones(self, ws, capsys, tmp_path):
        code, out, _ = self.detect_then_eval(ws, capsys, tmp_path)
        assert code == 0
        assert "precision 1.000 recall 1.000" in out
        assert (tmp_path / "eval_report.csv").exists()
        assert (tmp_path / "eval_report.png").read_bytes()[:8] == PNG_MAGIC

    def test_empty_detections_score_zero(self, ws, capsys, tmp_path):
        atomic_write_text(str(tmp_path / "detections.json"), emit_detections([]))
        code, out, _ = run_cli(
            capsys, "eval", str(tmp_path / "detections.json"), str(ws.root / "gt.json"),
            "--out", str(tmp_path),
        )
        assert code == 0
        assert "precision 0.000 recall 0.000" in out

    def test_malformed_ground_truth(self, ws, capsys, tmp_path):
        atomic_write_text(str(tmp_path / "detections.json"), emit_detections([]))
        bad = [{"image_id": "q", "boxes": [[0, 0, -5, 5]], "category": "object"}]
        atomic_write_text(str(tmp_path / "bad_gt.json"), json.dumps(bad))
        code, _, err = run_cli(
            capsys, "eval", str(tmp_path / "detections.json"), str(tmp_path / "bad_gt.json"),
            "--out", str(tmp_path),
        )
        assert code == 2
        assert "boxes[0]" in err

    def test_detection_without_ground_truth(self, ws, capsys, tmp_path):
        from querydet.detection import Detection

        stray = Detection(box=(0, 0, 10, 10), score=0.95, stage=2, query_id="nobody")
        atomic_write_text(str(tmp_path / "detections.json"), emit_detections([stray]))
        code, _, err = run_cli(
            capsys, "eval", str(tmp_path / "detections.json"), str(ws.root / "gt.json"),
            "--out", str(tmp_path),
        )
        assert code == 2
        assert "nobody" in err


class TestBenchCommand:
    def test_config_corpus_two_settings(self, ws, capsys, tmp_path):
        cfg_path = tmp_path / "corpus.cfg"
        cfg_path.write_text(emit_config({
            "query.s0": str(ws.root / "q.png"),
            "target.s0": str(ws.root / "t.png"),
            "gt": str(ws.root / "gt_s0.json"),
        }))
        atomic_write_text(
            str(ws.root / "gt_s0.json"),
            emit_ground_truth([GroundTruth(image_id="s0", boxes=(ws.scene.box,))]),
        )
        code, out, _ = run_cli(
            capsys, "bench", "--weights", ws.weights, "--config", str(cfg_path),
            "--settings", "a,c", "--out", str(tmp_path),
        )
        assert code == 0
        assert "tables written to" in out
        report = parse_benchmark_csv(
            (tmp_path / "bench_settings.csv").read_text(),
            (tmp_path / "bench_stages.csv").read_text(),
        )
        assert [label for label, _ in report.settings] == ["a", "c"]
        assert [label for label, _ in report.stage_compare] == ["1-stage", "2-stage"]
        assert report.query_ids == ("s0",)
        assert (tmp_path / "bench_settings.png").read_bytes()[:8] == PNG_MAGIC
        assert (tmp_path / "bench_stages.png").read_bytes()[:8] == PNG_MAGIC

    def test_requires_corpus_or_synthetic(self, ws, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "bench", "--weights", ws.weights, "--out", str(tmp_path),
        )
        assert code == 2
        assert "--synthetic" in err

    def test_mismatched_corpus_ids(self, ws, capsys, tmp_path):
        cfg_path = tmp_path / "corpus.cfg"
        cfg_path.write_text(emit_config({
            "query.s0": str(ws.root / "q.png"),
            "target.s1": str(ws.root / "t.png"),
            "gt": str(ws.root / "gt.json"),
        }))
        code, _, err = run_cli(
            capsys, "bench", "--weights", ws.weights, "--config", str(cfg_path),
            "--out", str(tmp_path),
        )
        assert code == 2
        assert "corpus ids differ" in err

    def test_unknown_setting_label(self, ws, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "bench", "--weights", ws.weights, "--synthetic",
            "--settings", "a,z", "--out", str(tmp_path),
        )
        assert code == 2
        assert "unknown setting" in err


class TestWeightsCheckCommand:
    def test_valid_bundle(self, ws, capsys):
        code, out, _ = run_cli(capsys, "convert-weights-check", "--weights", ws.weights)
        assert code == 0
        assert "weights bundle OK" in out
        assert "26 tensors" in out
        assert "input side 128" in out

    def test_truncated_bundle(self, ws, capsys, tmp_path):
        data = open(ws.weights, "rb").read()
        broken = tmp_path / "broken.qdw"
        broken.write_bytes(data[: len(data) // 2])
        code, _, err = run_cli(capsys, "convert-weights-check", "--weights", str(broken))
        assert code == 2
        assert "error:" in err

    def test_corrupted_magic(self, ws, capsys, tmp_path):
        data = bytearray(open(ws.weights, "rb").read())
        data[0] ^= 0xFF
        broken = tmp_path / "magic.qdw"
        broken.write_bytes(bytes(data))
        code, _, err = run_cli(capsys, "convert-weights-check", "--weights", str(broken))
        assert code == 2


class TestParserBasics:
    def test_no_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["detect", "--nope"])
        assert exc.value.code == 2
