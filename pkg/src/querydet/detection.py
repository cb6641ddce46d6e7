"""Boxes out of score maps: adaptive threshold, candidate extraction, crop re-scoring.

Stage 1 binarizes the fused map at (mean + max) / 2, takes connected
components as candidate boxes, and keeps those whose peak exceeds the first
threshold. Stage 2 crops each candidate from the raw target, runs it through
the backbone like a query, and keeps crops whose mean per-block cosine
against the query exceeds the second threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .aggregation import AggregationSetting, QueryDescriptor, SETTINGS, global_descriptor, query_descriptors
from .backbone import FeaturePyramid, WeightsBundle, forward, preprocess, preprocess_padded
from .errors import ConfigError, ShapeMismatchError
from .similarity import FusedScore, fused_score_map
from .tensor_ops import MapGeometry, ScoreMap, connected_components, round_half_up

log = logging.getLogger(__name__)

# Global descriptor kind whose length matches each query descriptor kind,
# used when re-scoring crops.
_GLOBAL_EQUIVALENT = {
    "GAP": "GAP",
    "R-AAC": "GAP",
    "GMP": "GMP",
    "R-MAC": "GMP",
    "GA&MP": "GA&MP",
    "R-AMAC": "GA&MP",
}

MIN_CROP_SIDE = 8


@dataclass(frozen=True)
class Detection:
    """One scored box in target-image pixel coordinates."""

    box: tuple[int, int, int, int]  # (x, y, w, h)
    score: float
    stage: int
    query_id: str = ""

    def __post_init__(self) -> None:
        x, y, w, h = self.box
        if w < 1 or h < 1 or x < 0 or y < 0:
            raise ShapeMismatchError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ShapeMismatchError(f"detection score {self.score} outside [0, 1]")
        if self.stage not in (1, 2):
            raise ShapeMismatchError(f"stage must be 1 or 2, got {self.stage}")


@dataclass(frozen=True)
class DetectionConfig:
    """Thresholds and geometry knobs for the two-stage pipeline."""

    first_threshold: float = 0.7
    second_threshold: float = 0.9
    crop_expand: float = 1.2
    min_region_px: int = 16
    stage2_enabled: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.first_threshold <= self.second_threshold <= 1.0:
            raise ConfigError(
                "thresholds must satisfy 0 <= first <= second <= 1, got "
                f"first={self.first_threshold}, second={self.second_threshold}"
            )
        if self.crop_expand < 1.0:
            raise ConfigError(f"crop_expand must be >= 1, got {self.crop_expand}")
        if self.min_region_px < 1:
            raise ConfigError(f"min_region_px must be >= 1, got {self.min_region_px}")


@dataclass(frozen=True)
class DetectionResult:
    """Everything one query/target run produces, both stages included."""

    detections: tuple[Detection, ...]  # final output (stage 2 when enabled)
    candidates: tuple[Detection, ...]  # stage-1 candidates
    score_map: ScoreMap  # fused map cropped to the unpadded target
    fused: FusedScore
    target_size: tuple[int, int]  # original (width, height)
    query_id: str


def adaptive_threshold(final_map: ScoreMap) -> float:
    """(mean + max) / 2 over the whole map."""
    values = final_map.values
    return (float(values.mean(dtype=np.float64)) + float(values.max())) / 2.0


def extract_candidates(final_map: ScoreMap, cfg: DetectionConfig, query_id: str = "") -> list[Detection]:
    """Stage 1: threshold, label, box, peak-score, filter."""
    thr = adaptive_threshold(final_map)
    mask = final_map.values >= thr
    out = []
    for x, y, w, h in connected_components(mask):
        if w * h < cfg.min_region_px:
            continue
        score = float(final_map.values[y : y + h, x : x + w].max())
        if score > cfg.first_threshold:
            out.append(Detection(box=(x, y, w, h), score=score, stage=1, query_id=query_id))
    out.sort(key=lambda d: -d.score)
    return out


def rescore_crop(
    target_image: np.ndarray,
    candidate: Detection,
    query_descs: tuple[QueryDescriptor | None, ...],
    bundle: WeightsBundle,
    cfg: DetectionConfig,
) -> float:
    """Stage 2 score: mean per-block cosine between query descriptors and the
    matching global descriptors of the expanded, re-fed crop."""
    img_h, img_w = target_image.shape[:2]
    x, y, w, h = candidate.box
    cx, cy = x + w / 2.0, y + h / 2.0
    half_w, half_h = w * cfg.crop_expand / 2.0, h * cfg.crop_expand / 2.0
    x0 = max(0, round_half_up(cx - half_w))
    y0 = max(0, round_half_up(cy - half_h))
    x1 = min(img_w, round_half_up(cx + half_w))
    y1 = min(img_h, round_half_up(cy + half_h))
    if x1 - x0 < MIN_CROP_SIDE or y1 - y0 < MIN_CROP_SIDE:
        log.warning("degenerate crop %dx%d at (%d, %d); scoring 0", x1 - x0, y1 - y0, x0, y0)
        return 0.0
    crop = np.ascontiguousarray(target_image[y0:y1, x0:x1])
    pyr = forward(bundle, preprocess(crop, bundle.metadata.input_side, bundle.metadata))
    sims = []
    for q in query_descs:
        if q is None:
            continue
        d = global_descriptor(pyr.blocks[q.block_index - 1], _GLOBAL_EQUIVALENT[q.kind])
        sims.append(float(np.clip(q.vector @ d.vector, 0.0, 1.0)))
    if not sims:
        raise ConfigError("no configured blocks to re-score against")
    return float(np.mean(sims))


def second_stage(
    target_image: np.ndarray,
    candidates: list[Detection],
    query_descs: tuple[QueryDescriptor | None, ...],
    bundle: WeightsBundle,
    cfg: DetectionConfig,
) -> list[Detection]:
    """Re-score every candidate; keep strictly above the second threshold."""
    out = []
    for cand in candidates:
        score = rescore_crop(target_image, cand, query_descs, bundle, cfg)
        if score > cfg.second_threshold:
            out.append(replace(cand, score=score, stage=2))
    out.sort(key=lambda d: -d.score)
    return out


def detect_full(
    query_image: np.ndarray,
    target_image: np.ndarray,
    bundle: WeightsBundle,
    setting: AggregationSetting | None = None,
    cfg: DetectionConfig | None = None,
    query_id: str = "query",
) -> DetectionResult:
    """Run the whole pipeline once, keeping both stages for inspection."""
    setting = setting if setting is not None else SETTINGS["a"]
    cfg = cfg if cfg is not None else DetectionConfig()

    q_chw = preprocess(query_image, bundle.metadata.input_side, bundle.metadata)
    q_pyr = forward(bundle, q_chw, source=query_id)
    t_chw, (tw, th) = preprocess_padded(target_image, bundle.metadata)
    t_pyr = forward(bundle, t_chw, source="target")

    fused = fused_score_map(q_pyr, t_pyr, setting)
    # Statistics and boxes are computed on real pixels only; the padded margin
    # carries no image content.
    cropped = ScoreMap(
        np.ascontiguousarray(fused.final_map.values[:th, :tw]), MapGeometry()
    )
    candidates = extract_candidates(cropped, cfg, query_id=query_id)
    if cfg.stage2_enabled:
        descs = query_descriptors(q_pyr, setting)
        finals = second_stage(target_image, candidates, descs, bundle, cfg)
    else:
        finals = list(candidates)
    return DetectionResult(
        detections=tuple(finals),
        candidates=tuple(candidates),
        score_map=cropped,
        fused=fused,
        target_size=(tw, th),
        query_id=query_id,
    )


def detect(
    query_image: np.ndarray,
    target_image: np.ndarray,
    bundle: WeightsBundle,
    setting: AggregationSetting | None = None,
    cfg: DetectionConfig | None = None,
    query_id: str = "query",
) -> list[Detection]:
    """Final detections, sorted by descending score."""
    return list(
        detect_full(query_image, target_image, bundle, setting, cfg, query_id).detections
    )
