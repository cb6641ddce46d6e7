"""Command-line front end: detect, extract, eval, bench, convert-weights-check.

Every option can also come from a flat ``key = value`` config file passed as
``--config``; explicit command-line flags override file values. Exit codes:
0 success, 1 internal error, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Callable, Mapping

import numpy as np

from .aggregation import SETTINGS, query_descriptors
from .backbone import WeightsBundle, expected_tensor_shapes, forward, load_weights, preprocess
from .detection import DetectionConfig, detect_full
from .errors import ConfigError, QuerydetError, SchemaError, UserInputError
from .evaluation import GroundTruth, evaluate, run_benchmark
from .formats import (
    atomic_write_text,
    emit_benchmark_settings_csv,
    emit_benchmark_stages_csv,
    emit_descriptors,
    emit_detections,
    emit_eval_csv,
    load_image,
    parse_config,
    parse_detections,
    parse_ground_truth,
    read_text,
    save_image_png,
    save_scoremap_png,
)
from .report import (
    draw_overlay,
    render_benchmark_text,
    render_eval_text,
    save_benchmark_figures,
    save_eval_figure,
)
from .synthetic import distractor_corpus

log = logging.getLogger(__name__)

_ALL_SETTINGS = "a,b,c,d,e,f,g"


def _as_bool(raw: str, key: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key '{key}' must be boolean, got {raw!r}")


class _Options:
    """One view over parsed flags and the optional config file."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        path = getattr(args, "config", None)
        self.file_values: dict[str, str] = parse_config(read_text(path)) if path else {}

    def get(self, key: str, cast: Callable = str, default=None):
        cli = getattr(self.args, key, None)
        if isinstance(cli, bool):
            # store_true flags: an explicit flag wins, otherwise the file.
            if cli:
                return True
            raw = self.file_values.get(key)
            return _as_bool(raw, key) if raw is not None else default
        if cli is not None:
            return cli
        raw = self.file_values.get(key)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' has invalid value {raw!r}") from exc

    def require(self, key: str, cast: Callable = str, flag: str | None = None):
        value = self.get(key, cast)
        if value is None:
            raise UserInputError(f"missing required option --{flag or key.replace('_', '-')}")
        return value


def _load_bundle(path: str) -> WeightsBundle:
    if not os.path.isfile(path):
        raise UserInputError(f"weights file not found: {path}")
    return load_weights(path)


def _setting_label(opts: _Options) -> str:
    label = opts.get("setting", str, "a")
    if label not in SETTINGS:
        raise ConfigError(f"unknown setting '{label}'; choose from {_ALL_SETTINGS}")
    return label


def _detection_config(opts: _Options) -> DetectionConfig:
    kwargs = {}
    for key in ("first_threshold", "second_threshold"):
        value = opts.get(key, float)
        if value is not None:
            kwargs[key] = value
    return DetectionConfig(stage2_enabled=not opts.get("no_stage2", default=False), **kwargs)


def _out_dir(opts: _Options) -> str:
    out = opts.get("out", str, ".")
    os.makedirs(out, exist_ok=True)
    return out


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_detect(args: argparse.Namespace) -> int:
    opts = _Options(args)
    bundle = _load_bundle(opts.require("weights"))
    query_path = opts.require("query")
    target_path = opts.require("target")
    label = _setting_label(opts)
    cfg = _detection_config(opts)
    out = _out_dir(opts)
    query = load_image(query_path)
    target = load_image(target_path)
    result = detect_full(query, target, bundle, SETTINGS[label], cfg, query_id=_stem(query_path))
    log.info("setting %s scored blocks %s", label, ",".join(str(b) for b in result.fused.blocks_used))
    log.info("stage 1 kept %d candidate(s), final detections: %d", len(result.candidates), len(result.detections))
    det_path = os.path.join(out, "detections.json")
    atomic_write_text(det_path, emit_detections(result.detections))
    if opts.get("emit_scoremap", default=False):
        save_scoremap_png(os.path.join(out, "scoremap.png"), result.score_map.values)
        log.info("score map written to %s", os.path.join(out, "scoremap.png"))
    if opts.get("emit_overlay", default=False):
        save_image_png(os.path.join(out, "overlay.png"), draw_overlay(target, list(result.detections)))
        log.info("overlay written to %s", os.path.join(out, "overlay.png"))
    print(f"{len(result.detections)} detection(s) written to {det_path}")
    for det in result.detections:
        x, y, w, h = det.box
        print(f"  box [{x}, {y}, {w}, {h}] score {det.score:.3f} stage {det.stage}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    opts = _Options(args)
    bundle = _load_bundle(opts.require("weights"))
    query_path = opts.require("query")
    label = _setting_label(opts)
    out = _out_dir(opts)
    query = load_image(query_path)
    query_id = _stem(query_path)
    pyr = forward(bundle, preprocess(query, bundle.metadata.input_side, bundle.metadata), source=query_id)
    descs = query_descriptors(pyr, SETTINGS[label])
    doc_path = os.path.join(out, "descriptors.json")
    atomic_write_text(doc_path, emit_descriptors(query_id, label, descs))
    present = [d for d in descs if d is not None]
    print(f"{len(present)} block descriptor(s) written to {doc_path}")
    for d in present:
        print(f"  block {d.block_index} {d.kind} dim {d.vector.size}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _Options(args)
    dets = parse_detections(read_text(args.detections))
    gt_list = parse_ground_truth(read_text(args.gt))
    out = _out_dir(opts)
    iou_min = opts.get("iou", float, 0.5)
    gts = {g.image_id: g for g in gt_list}
    runs: dict[str, list] = {g.image_id: [] for g in gt_list}
    for det in dets:
        if det.query_id not in runs:
            raise SchemaError(f"no ground truth for query '{det.query_id}'")
        runs[det.query_id].append(det)
    result = evaluate(runs, gts, iou_min)
    sys.stdout.write(render_eval_text(result))
    csv_path = os.path.join(out, "eval_report.csv")
    atomic_write_text(csv_path, emit_eval_csv(result))
    save_eval_figure(result, os.path.join(out, "eval_report.png"))
    log.info("report written to %s and eval_report.png", csv_path)
    return 0


def _bench_corpus(opts: _Options) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, GroundTruth]]:
    if opts.get("synthetic", default=False):
        # Decoy-bearing scenes: the stage comparison actually moves, and the
        # settings grid separates pooling families.
        scenes = distractor_corpus(count=5)
        queries = {sc.query_id: sc.query for sc in scenes}
        targets = {sc.query_id: sc.scene for sc in scenes}
        gts = {
            sc.query_id: GroundTruth(image_id=sc.query_id, boxes=(sc.box,), category="planted")
            for sc in scenes
        }
        return queries, targets, gts
    query_paths = {k[len("query."):]: v for k, v in opts.file_values.items() if k.startswith("query.")}
    target_paths = {k[len("target."):]: v for k, v in opts.file_values.items() if k.startswith("target.")}
    gt_path = opts.file_values.get("gt")
    if not query_paths or not target_paths or not gt_path:
        raise UserInputError(
            "bench needs --synthetic or a --config corpus with 'query.<id>', 'target.<id>', and 'gt' keys"
        )
    if set(query_paths) != set(target_paths):
        raise ConfigError(
            f"corpus ids differ between queries {sorted(query_paths)} and targets {sorted(target_paths)}"
        )
    ids = sorted(query_paths)
    queries = {qid: load_image(query_paths[qid]) for qid in ids}
    targets = {qid: load_image(target_paths[qid]) for qid in ids}
    gts = {g.image_id: g for g in parse_ground_truth(read_text(gt_path))}
    return queries, targets, gts


def cmd_bench(args: argparse.Namespace) -> int:
    opts = _Options(args)
    bundle = _load_bundle(opts.require("weights"))
    labels = [token.strip() for token in opts.get("settings", str, _ALL_SETTINGS).split(",") if token.strip()]
    cfg = _detection_config(opts)
    iou_min = opts.get("iou", float, 0.5)
    out = _out_dir(opts)
    queries, targets, gts = _bench_corpus(opts)
    report = run_benchmark(labels, queries, targets, gts, bundle, cfg, iou_min)
    sys.stdout.write(render_benchmark_text(report))
    settings_csv = os.path.join(out, "bench_settings.csv")
    stages_csv = os.path.join(out, "bench_stages.csv")
    atomic_write_text(settings_csv, emit_benchmark_settings_csv(report))
    atomic_write_text(stages_csv, emit_benchmark_stages_csv(report))
    save_benchmark_figures(report, os.path.join(out, "bench_settings.png"), os.path.join(out, "bench_stages.png"))
    print(f"tables written to {settings_csv} and {stages_csv}")
    return 0


def cmd_convert_weights_check(args: argparse.Namespace) -> int:
    opts = _Options(args)
    path = opts.require("weights")
    bundle = _load_bundle(path)
    expected = expected_tensor_shapes()
    problems = []
    for name, shape in expected.items():
        if name not in bundle.tensors:
            problems.append(f"missing tensor {name}")
        elif bundle.tensors[name].shape != shape:
            problems.append(f"tensor {name} has shape {bundle.tensors[name].shape}, expected {shape}")
    for name in bundle.tensors:
        if name not in expected:
            problems.append(f"unexpected tensor {name}")
    if problems:
        raise UserInputError(f"weights bundle {path} failed validation: " + "; ".join(problems))
    params = sum(int(t.size) for t in bundle.tensors.values())
    print(
        f"weights bundle OK: {len(bundle.tensors)} tensors, {params} float32 parameters, "
        f"input side {bundle.metadata.input_side}"
    )
    return 0


def _add_common(sub: argparse.ArgumentParser, *names: str) -> None:
    spec: Mapping[str, dict] = {
        "weights": dict(flags=["--weights"], help="weights bundle file"),
        "query": dict(flags=["--query"], help="query image (8-bit RGB PNG/JPEG)"),
        "target": dict(flags=["--target"], help="target image (8-bit RGB PNG/JPEG)"),
        "setting": dict(flags=["--setting"], choices=sorted(SETTINGS), help="descriptor setting"),
        "settings": dict(flags=["--settings"], help=f"comma-separated settings (default {_ALL_SETTINGS})"),
        "first_threshold": dict(flags=["--first-threshold"], type=float, help="stage-1 score threshold"),
        "second_threshold": dict(flags=["--second-threshold"], type=float, help="stage-2 score threshold"),
        "no_stage2": dict(flags=["--no-stage2"], action="store_true", help="skip crop re-scoring"),
        "iou": dict(flags=["--iou"], type=float, help="IoU threshold for matching (default 0.5)"),
        "out": dict(flags=["--out"], help="output directory (default .)"),
        "emit_scoremap": dict(flags=["--emit-scoremap"], action="store_true", help="write scoremap.png (16-bit gray)"),
        "emit_overlay": dict(flags=["--emit-overlay"], action="store_true", help="write overlay.png with boxes"),
        "synthetic": dict(flags=["--synthetic"], action="store_true", help="use the built-in 5-query corpus"),
        "config": dict(flags=["--config"], help="flat key = value config file; flags override it"),
    }
    for name in names:
        entry = dict(spec[name])
        flags = entry.pop("flags")
        sub.add_argument(*flags, dest=name, default=False if entry.get("action") == "store_true" else None, **entry)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="querydet", description="One-shot object detection in large images.")
    parser.add_argument("--verbose", action="store_true", help="log progress details to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("detect", help="find the query object inside a target image")
    _add_common(
        p, "weights", "query", "target", "setting", "first_threshold", "second_threshold",
        "no_stage2", "out", "emit_scoremap", "emit_overlay", "config",
    )
    p.set_defaults(func=cmd_detect)

    p = commands.add_parser("extract", help="write the query's block descriptors")
    _add_common(p, "weights", "query", "setting", "out", "config")
    p.set_defaults(func=cmd_extract)

    p = commands.add_parser("eval", help="score a detections document against ground truth")
    p.add_argument("detections", help="detections document (JSON)")
    p.add_argument("gt", help="ground-truth document (JSON)")
    _add_common(p, "iou", "out", "config")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("bench", help="run every setting over a corpus and tabulate")
    _add_common(
        p, "weights", "settings", "first_threshold", "second_threshold",
        "no_stage2", "iou", "out", "synthetic", "config",
    )
    p.set_defaults(func=cmd_bench)

    p = commands.add_parser("convert-weights-check", help="validate a weights bundle file")
    _add_common(p, "weights", "config")
    p.set_defaults(func=cmd_convert_weights_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    # force=True rebinds the handler to the *current* sys.stderr, so repeated
    # in-process calls (tests, embedding) do not log into a stale stream.
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QuerydetError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
