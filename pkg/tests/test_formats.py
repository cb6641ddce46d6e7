"""Serialization and file IO: JSON documents, delimited report tables,
key=value config files, raster loading, and atomic writes."""

import json
import os

import numpy as np
import pytest
from PIL import Image

from querydet.detection import Detection
from querydet.errors import ImageFormatError, SchemaError, UserInputError
from querydet.evaluation import BenchmarkReport, EvalResult, GroundTruth
from querydet.formats import (
    atomic_write_bytes,
    atomic_write_text,
    emit_benchmark_settings_csv,
    emit_benchmark_stages_csv,
    emit_config,
    emit_descriptors,
    emit_detections,
    emit_eval_csv,
    emit_ground_truth,
    load_image,
    parse_benchmark_csv,
    parse_config,
    parse_descriptors,
    parse_detections,
    parse_eval_csv,
    parse_ground_truth,
    read_text,
    save_image_png,
    save_scoremap_png,
)


def eval_result(qids=("q1", "q2"), iou=0.5) -> EvalResult:
    # Deliberately awkward floats so repr round-tripping is actually tested.
    return EvalResult(
        query_ids=tuple(qids),
        precision=tuple(1.0 / (i + 3.0) for i in range(len(qids))),
        recall=tuple(1.0 - 1.0 / (i + 7.0) for i in range(len(qids))),
        mean_precision=0.2857142857142857,
        mean_recall=0.1 + 0.2,
        iou_min=iou,
    )


class TestDetectionsDocument:
    def test_round_trip(self):
        dets = [
            Detection(box=(3, 4, 10, 12), score=1 / 3, stage=1, query_id="q1"),
            Detection(box=(0, 0, 1, 1), score=0.9999999999999999, stage=2, query_id="q2"),
        ]
        assert parse_detections(emit_detections(dets)) == dets

    def test_empty_list_round_trip(self):
        assert parse_detections(emit_detections([])) == []

    def test_not_json_rejected(self):
        with pytest.raises(SchemaError, match="not valid JSON"):
            parse_detections("{nope")

    def test_root_must_be_list(self):
        with pytest.raises(SchemaError, match=r"\(root\)"):
            parse_detections('{"query_id": "q"}')

    def test_missing_key_named(self):
        rec = {"query_id": "q", "box": [0, 0, 5, 5], "stage": 1}
        with pytest.raises(SchemaError, match=r"\[0\].score"):
            parse_detections(json.dumps([rec]))

    @pytest.mark.parametrize(
        "box",
        [[0, 0, 5], [0, 0, 5, 5.5], [0, 0, 5, True], "0,0,5,5", [0, 0, 0, 5], [-1, 0, 5, 5]],
    )
    def test_bad_boxes_rejected(self, box):
        rec = {"query_id": "q", "box": box, "score": 0.5, "stage": 1}
        with pytest.raises(SchemaError, match=r"\[0\].box"):
            parse_detections(json.dumps([rec]))

    @pytest.mark.parametrize("score", [-0.1, 1.1, True, "high"])
    def test_bad_scores_rejected(self, score):
        rec = {"query_id": "q", "box": [0, 0, 5, 5], "score": score, "stage": 1}
        with pytest.raises(SchemaError, match=r"\[0\].score"):
            parse_detections(json.dumps([rec]))

    @pytest.mark.parametrize("stage", [0, 3, 1.0, True])
    def test_bad_stage_rejected(self, stage):
        rec = {"query_id": "q", "box": [0, 0, 5, 5], "score": 0.5, "stage": stage}
        with pytest.raises(SchemaError, match=r"\[0\].stage"):
            parse_detections(json.dumps([rec]))


class TestGroundTruthDocument:
    def test_round_trip(self):
        gts = [
            GroundTruth(image_id="t1", boxes=((0, 0, 5, 5), (9, 9, 3, 3))),
            GroundTruth(image_id="t2", boxes=(), category="vehicle"),
        ]
        assert parse_ground_truth(emit_ground_truth(gts)) == gts

    def test_negative_width_names_entry(self):
        doc = [{"image_id": "t", "boxes": [[0, 0, 5, 5], [1, 1, -4, 2]], "category": "object"}]
        with pytest.raises(SchemaError, match=r"boxes\[1\]"):
            parse_ground_truth(json.dumps(doc))

    def test_duplicate_image_id_rejected(self):
        doc = [
            {"image_id": "t", "boxes": [], "category": "object"},
            {"image_id": "t", "boxes": [], "category": "object"},
        ]
        with pytest.raises(SchemaError, match="duplicate image_id 't'"):
            parse_ground_truth(json.dumps(doc))

    def test_boxes_must_be_list(self):
        doc = [{"image_id": "t", "boxes": "none", "category": "object"}]
        with pytest.raises(SchemaError, match=r"\[0\].boxes"):
            parse_ground_truth(json.dumps(doc))


class TestDescriptorDocument:
    def make_descs(self, bundle64):
        from querydet.aggregation import SETTINGS, query_descriptors
        from querydet.backbone import forward, preprocess
        from querydet.synthetic import gradient_card

        pyr = forward(bundle64, preprocess(gradient_card(64), 64, bundle64.metadata))
        return query_descriptors(pyr, SETTINGS["a"])

    def test_round_trip_exact(self, bundle64):
        descs = self.make_descs(bundle64)
        qid, setting, blocks = parse_descriptors(emit_descriptors("q7", "a", descs))
        assert (qid, setting) == ("q7", "a")
        present = [d for d in descs if d is not None]
        assert [b for b, _, _ in blocks] == [d.block_index for d in present]
        assert [k for _, k, _ in blocks] == [d.kind for d in present]
        for (_, _, vec), d in zip(blocks, present):
            assert vec.dtype == np.float64
            assert np.array_equal(vec, d.vector)

    def test_none_blocks_skipped(self, bundle64):
        descs = list(self.make_descs(bundle64))
        descs[0] = None
        _, _, blocks = parse_descriptors(emit_descriptors("q", "a", descs))
        assert [b for b, _, _ in blocks] == [d.block_index for d in descs if d is not None]

    def test_dim_mismatch_rejected(self):
        doc = {"query_id": "q", "setting": "a", "blocks": [{"block": 1, "kind": "GAP", "dim": 3, "vector": [1.0, 0.0]}]}
        with pytest.raises(SchemaError, match=r"blocks\[0\].vector"):
            parse_descriptors(json.dumps(doc))

    def test_missing_top_level_key(self):
        with pytest.raises(SchemaError, match="setting"):
            parse_descriptors(json.dumps({"query_id": "q", "blocks": []}))


class TestEvalCsv:
    def test_round_trip_exact(self):
        res = eval_result()
        assert parse_eval_csv(emit_eval_csv(res)) == res

    def test_layout(self):
        lines = emit_eval_csv(eval_result()).splitlines()
        assert lines[0] == "# iou_min=0.5"
        assert lines[1] == "query_id,precision,recall"
        assert lines[2].startswith("q1,")
        assert lines[-1].startswith("mean,")

    def test_missing_metadata_rejected(self):
        text = emit_eval_csv(eval_result())
        body = "\n".join(text.splitlines()[1:])
        with pytest.raises(SchemaError, match="metadata"):
            parse_eval_csv(body)

    def test_bad_header_rejected(self):
        text = emit_eval_csv(eval_result()).replace("query_id,precision,recall", "a,b,c")
        with pytest.raises(SchemaError, match="header"):
            parse_eval_csv(text)

    def test_missing_mean_row_rejected(self):
        text = emit_eval_csv(eval_result())
        trimmed = "\n".join(text.splitlines()[:-1]) + "\n"
        with pytest.raises(SchemaError, match="mean row"):
            parse_eval_csv(trimmed)

    def test_non_numeric_metadata_rejected(self):
        text = emit_eval_csv(eval_result()).replace("iou_min=0.5", "iou_min=half")
        with pytest.raises(SchemaError, match="iou_min"):
            parse_eval_csv(text)


class TestBenchmarkCsv:
    def make_report(self) -> BenchmarkReport:
        return BenchmarkReport(
            query_ids=("q1", "q2"),
            settings=(("a", eval_result()), ("b", eval_result())),
            stage_compare=(("1-stage", eval_result()), ("2-stage", eval_result())),
            compare_label="a",
            iou_min=0.5,
        )

    def test_round_trip_exact(self):
        report = self.make_report()
        parsed = parse_benchmark_csv(
            emit_benchmark_settings_csv(report), emit_benchmark_stages_csv(report)
        )
        assert parsed == report

    def test_settings_layout(self):
        lines = emit_benchmark_settings_csv(self.make_report()).splitlines()
        assert lines[0] == "# iou_min=0.5"
        assert lines[1] == "setting,q1_precision,q1_recall,q2_precision,q2_recall,mean_precision,mean_recall"
        assert [row.split(",")[0] for row in lines[2:]] == ["a", "b"]

    def test_stages_metadata_names_compare_setting(self):
        lines = emit_benchmark_stages_csv(self.make_report()).splitlines()
        assert lines[0] == "# iou_min=0.5 compare_setting=a"
        assert [row.split(",")[0] for row in lines[2:]] == ["1-stage", "2-stage"]

    def test_mismatched_query_ids_rejected(self):
        report = self.make_report()
        other = BenchmarkReport(
            query_ids=("q1", "qX"),
            settings=report.settings and (("a", eval_result(("q1", "qX"))),),
            stage_compare=(("1-stage", eval_result(("q1", "qX"))), ("2-stage", eval_result(("q1", "qX")))),
            compare_label="a",
            iou_min=0.5,
        )
        with pytest.raises(SchemaError, match="covers"):
            parse_benchmark_csv(emit_benchmark_settings_csv(report), emit_benchmark_stages_csv(other))

    def test_missing_compare_setting_rejected(self):
        report = self.make_report()
        stages = emit_benchmark_stages_csv(report).replace(" compare_setting=a", "")
        with pytest.raises(SchemaError, match="compare_setting"):
            parse_benchmark_csv(emit_benchmark_settings_csv(report), stages)


class TestConfigFormat:
    def test_parse_basics(self):
        text = "# comment\n\nsetting = a\nfirst_threshold = 0.7\nout = results/run1\n"
        assert parse_config(text) == {"setting": "a", "first_threshold": "0.7", "out": "results/run1"}

    def test_last_key_wins(self):
        assert parse_config("k = 1\nk = 2\n") == {"k": "2"}

    def test_values_may_contain_equals(self):
        assert parse_config("k = a=b\n") == {"k": "a=b"}

    def test_bad_line_reports_number(self):
        with pytest.raises(SchemaError, match="line 3"):
            parse_config("a = 1\n# fine\nnot a pair\n")

    def test_round_trip(self):
        values = {"setting": "a", "iou": "0.5"}
        assert parse_config(emit_config(values)) == values


class TestAtomicWrites:
    def test_writes_bytes(self, tmp_path):
        path = tmp_path / "x.bin"
        atomic_write_bytes(str(path), b"\x00\x01")
        assert path.read_bytes() == b"\x00\x01"

    def test_replaces_existing(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("old")
        atomic_write_text(str(path), "new")
        assert path.read_text() == "new"

    def test_no_temp_files_left(self, tmp_path):
        atomic_write_text(str(tmp_path / "x.txt"), "data")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x.txt"]

    def test_read_text_missing_file(self, tmp_path):
        with pytest.raises(UserInputError, match="missing"):
            read_text(str(tmp_path / "absent.json"))


class TestImageIO:
    def rgb(self, w=20, h=12):
        rng = np.random.default_rng(3)
        return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)

    def test_png_round_trip_exact(self, tmp_path):
        img = self.rgb()
        path = str(tmp_path / "img.png")
        save_image_png(path, img)
        assert np.array_equal(load_image(path), img)

    def test_jpeg_accepted(self, tmp_path):
        path = str(tmp_path / "img.jpg")
        Image.fromarray(self.rgb(), mode="RGB").save(path, format="JPEG")
        out = load_image(path)
        assert out.shape == (12, 20, 3)
        assert out.dtype == np.uint8

    def test_missing_file(self, tmp_path):
        with pytest.raises(UserInputError, match="not found"):
            load_image(str(tmp_path / "absent.png"))

    def test_grayscale_rejected(self, tmp_path):
        path = str(tmp_path / "gray.png")
        Image.fromarray(self.rgb()[:, :, 0], mode="L").save(path, format="PNG")
        with pytest.raises(ImageFormatError, match="mode L"):
            load_image(path)

    def test_rgba_rejected(self, tmp_path):
        path = str(tmp_path / "rgba.png")
        rgba = np.dstack([self.rgb(), np.full((12, 20), 255, np.uint8)])
        Image.fromarray(rgba, mode="RGBA").save(path, format="PNG")
        with pytest.raises(ImageFormatError, match="mode RGBA"):
            load_image(path)

    def test_unsupported_container_rejected(self, tmp_path):
        path = str(tmp_path / "img.bmp")
        Image.fromarray(self.rgb(), mode="RGB").save(path, format="BMP")
        with pytest.raises(ImageFormatError, match="BMP"):
            load_image(path)

    def test_not_an_image_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not a raster")
        with pytest.raises(ImageFormatError, match="cannot decode"):
            load_image(str(path))

    def test_save_image_validates_shape(self, tmp_path):
        with pytest.raises(ImageFormatError):
            save_image_png(str(tmp_path / "x.png"), np.zeros((5, 5), np.uint8))
        with pytest.raises(ImageFormatError):
            save_image_png(str(tmp_path / "x.png"), np.zeros((5, 5, 3), np.float32))


class TestScoremapPng:
    def test_sixteen_bit_grayscale(self, tmp_path):
        path = str(tmp_path / "map.png")
        save_scoremap_png(path, np.linspace(0, 1, 30).reshape(5, 6).astype(np.float32))
        img = Image.open(path)
        assert img.format == "PNG"
        assert img.mode in ("I;16", "I")

    def test_value_mapping_and_clipping(self, tmp_path):
        path = str(tmp_path / "map.png")
        values = np.array([[0.0, 1.0], [-0.5, 1.5], [0.5, 0.25]], dtype=np.float32)
        save_scoremap_png(path, values)
        raw = np.asarray(Image.open(path), dtype=np.int64)
        assert raw[0, 0] == 0
        assert raw[0, 1] == 65535
        assert raw[1, 0] == 0  # clipped up
        assert raw[1, 1] == 65535  # clipped down
        assert raw[2, 0] == round(0.5 * 65535)

    def test_requires_2d(self, tmp_path):
        with pytest.raises(ImageFormatError, match="2-D"):
            save_scoremap_png(str(tmp_path / "x.png"), np.zeros((4, 4, 3), np.float32))
