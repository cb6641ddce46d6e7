"""Precision/recall against ground-truth boxes, and the settings benchmark.

Matching is greedy by descending detection score with each ground-truth box
claimable once; a detection counts as correct at IoU >= ``iou_min``. The
benchmark runs the detector over every (setting, query) pair and adds a
1-stage vs 2-stage comparison for one chosen setting.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .aggregation import SETTINGS
from .backbone import WeightsBundle
from .detection import Detection, DetectionConfig, DetectionResult, detect_full
from .errors import ConfigError, SchemaError

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class GroundTruth:
    """True boxes for one target image."""

    image_id: str
    boxes: tuple[Box, ...]
    category: str = "object"

    def __post_init__(self) -> None:
        if not self.image_id:
            raise SchemaError("ground truth field 'image_id' must be a non-empty string")
        for i, box in enumerate(self.boxes):
            if len(box) != 4 or not all(isinstance(v, int) for v in box):
                raise SchemaError(f"ground truth field 'boxes[{i}]' must be four integers, got {box!r}")
            x, y, w, h = box
            if x < 0 or y < 0 or w < 1 or h < 1:
                raise SchemaError(f"ground truth field 'boxes[{i}]' has non-positive size or negative origin: {box!r}")


@dataclass(frozen=True)
class EvalResult:
    """Per-query precision/recall plus their means, at one IoU threshold."""

    query_ids: tuple[str, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    mean_precision: float
    mean_recall: float
    iou_min: float

    def __post_init__(self) -> None:
        n = len(self.query_ids)
        if len(self.precision) != n or len(self.recall) != n:
            raise SchemaError(f"per-query lists must all have length {n}")
        for v in (*self.precision, *self.recall, self.mean_precision, self.mean_recall):
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"precision/recall value {v} outside [0, 1]")


def box_iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / float(aw * ah + bw * bh - inter)


def match_detections(dets: Sequence[Detection], gt: GroundTruth, iou_min: float = 0.5) -> tuple[int, int, int]:
    """Count (TP, FP, FN) by greedy score-descending matching.

    Each ground-truth box is matched at most once, so duplicate detections
    on one object count as false positives. Ties in score keep input order,
    which keeps the counts deterministic.
    """
    if not 0.0 < iou_min <= 1.0:
        raise ConfigError(f"iou_min must be in (0, 1], got {iou_min}")
    remaining = list(gt.boxes)
    tp = fp = 0
    for det in sorted(dets, key=lambda d: -d.score):
        best, best_iou = -1, 0.0
        for i, box in enumerate(remaining):
            v = box_iou(det.box, box)
            if v > best_iou:
                best, best_iou = i, v
        if best >= 0 and best_iou >= iou_min:
            tp += 1
            remaining.pop(best)
        else:
            fp += 1
    return tp, fp, len(remaining)


def evaluate(
    runs: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, GroundTruth],
    iou_min: float = 0.5,
) -> EvalResult:
    """Score per-query detection lists against their ground truths.

    Conventions for empty sets: precision is 0 when there are no detections;
    recall is 1 when there is nothing to find (no ground-truth boxes) and 0
    when ground truth exists but nothing matched.
    """
    if not runs:
        raise ConfigError("evaluate needs at least one query run")
    precisions: list[float] = []
    recalls: list[float] = []
    for qid, dets in runs.items():
        if qid not in gts:
            raise SchemaError(f"no ground truth for query '{qid}'")
        tp, fp, fn = match_detections(dets, gts[qid], iou_min)
        precisions.append(tp / (tp + fp) if tp + fp else 0.0)
        recalls.append(tp / (tp + fn) if tp + fn else 1.0)
    return EvalResult(
        query_ids=tuple(runs),
        precision=tuple(precisions),
        recall=tuple(recalls),
        mean_precision=float(np.mean(precisions)),
        mean_recall=float(np.mean(recalls)),
        iou_min=iou_min,
    )


@dataclass(frozen=True)
class BenchmarkReport:
    """One EvalResult per setting, plus the stage comparison for one setting."""

    query_ids: tuple[str, ...]
    settings: tuple[tuple[str, EvalResult], ...]
    stage_compare: tuple[tuple[str, EvalResult], ...]
    compare_label: str
    iou_min: float


def run_benchmark(
    setting_labels: Sequence[str],
    queries: Mapping[str, np.ndarray],
    targets: Mapping[str, np.ndarray],
    gts: Mapping[str, GroundTruth],
    bundle: WeightsBundle,
    cfg: DetectionConfig | None = None,
    iou_min: float = 0.5,
    compare_label: str | None = None,
) -> BenchmarkReport:
    """Detect with every setting on every query, then score each grid row.

    The stage comparison reuses the compare setting's two-stage runs: its
    stage-1 candidates are scored as the "1-stage" row and its surviving
    detections as the "2-stage" row, so both rows describe the same run.
    """
    cfg = cfg if cfg is not None else DetectionConfig()
    labels = tuple(setting_labels)
    if not labels:
        raise ConfigError("benchmark needs at least one setting label")
    for label in labels:
        if label not in SETTINGS:
            raise ConfigError(f"unknown setting '{label}'; choose from {sorted(SETTINGS)}")
    if set(queries) != set(targets):
        raise ConfigError("queries and targets must cover the same ids")
    compare_label = compare_label if compare_label is not None else labels[0]
    if compare_label not in SETTINGS:
        raise ConfigError(f"unknown setting '{compare_label}'; choose from {sorted(SETTINGS)}")

    def run_setting(label: str, run_cfg: DetectionConfig) -> dict[str, DetectionResult]:
        return {
            qid: detect_full(queries[qid], targets[qid], bundle, SETTINGS[label], run_cfg, query_id=qid)
            for qid in queries
        }

    rows: list[tuple[str, EvalResult]] = []
    compare_runs: dict[str, DetectionResult] | None = None
    for label in labels:
        results = run_setting(label, cfg)
        if label == compare_label and cfg.stage2_enabled:
            compare_runs = results
        rows.append((label, evaluate({q: list(r.detections) for q, r in results.items()}, gts, iou_min)))
    if compare_runs is None:
        compare_runs = run_setting(compare_label, replace(cfg, stage2_enabled=True))
    one_stage = evaluate({q: list(r.candidates) for q, r in compare_runs.items()}, gts, iou_min)
    two_stage = evaluate({q: list(r.detections) for q, r in compare_runs.items()}, gts, iou_min)
    return BenchmarkReport(
        query_ids=tuple(queries),
        settings=tuple(rows),
        stage_compare=(("1-stage", one_stage), ("2-stage", two_stage)),
        compare_label=compare_label,
        iou_min=iou_min,
    )
