"""Per-block cosine score maps and their fusion into one pixel-level map.

Each configured block turns the target into a grid of unit descriptors over
query-sized windows; the dot product with the unit query descriptor is then
cosine similarity at every window position. Per-block maps are resampled to
pixel coordinates through their window geometry and averaged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationSetting, QueryDescriptor, TargetFeatures, query_descriptors, target_feature_map
from .backbone import FeaturePyramid
from .errors import ConfigError, ShapeMismatchError
from .tensor_ops import MapGeometry, ScoreMap, bilinear_gather

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusedScore:
    """Final pixel-resolution score map plus the per-block maps behind it."""

    final_map: ScoreMap
    per_block: tuple[ScoreMap, ...]
    blocks_used: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.per_block) != len(self.blocks_used):
            raise ShapeMismatchError(
                f"{len(self.per_block)} block maps for {len(self.blocks_used)} block labels"
            )
        for bi, sm in zip(self.blocks_used, self.per_block):
            if sm.values.shape != self.final_map.values.shape:
                raise ShapeMismatchError(
                    f"block {bi} map {sm.values.shape} does not match final {self.final_map.values.shape}"
                )


def choose_window(query_pyr: FeaturePyramid, block: int, target_pyr: FeaturePyramid | None = None) -> tuple[int, int]:
    """Pooling window for a block: the query's own feature-map size there.

    With this window every target position summarizes a query-sized patch,
    so the score map is a dense sliding-window comparison against the query.
    """
    if not 1 <= block <= 5:
        raise ConfigError(f"block must be 1..5, got {block}")
    qfm = query_pyr.blocks[block - 1]
    if target_pyr is not None:
        tfm = target_pyr.blocks[block - 1]
        if qfm.width > tfm.width or qfm.height > tfm.height:
            raise ShapeMismatchError(
                f"query exceeds target at block {block}: "
                f"window {qfm.width}x{qfm.height} vs map {tfm.width}x{tfm.height}"
            )
    return (qfm.width, qfm.height)


def block_score_map(q: QueryDescriptor, t: TargetFeatures) -> ScoreMap:
    """Cosine similarity of the query descriptor at every window position."""
    if len(q.vector) != t.channels:
        raise ConfigError(
            "incompatible query/target kinds: "
            f"descriptor length {len(q.vector)} vs target channels {t.channels}"
        )
    vec = q.vector.astype(np.float32)
    flat = t.data.reshape(-1, t.channels) @ vec
    values = np.clip(flat.reshape(t.height, t.width), 0.0, 1.0).astype(np.float32)
    return ScoreMap(values=values, geometry=t.geometry)


def upsample_to_pixels(sm: ScoreMap, out_w: int, out_h: int) -> ScoreMap:
    """Resample onto the pixel grid: cell (i, j) sits at its window center,
    pixels beyond the first/last centers replicate the edge value."""
    step_x, step_y = sm.geometry.step
    origin_x, origin_y = sm.geometry.origin
    uu = (np.arange(out_w, dtype=np.float64) - origin_x) / step_x
    vv = (np.arange(out_h, dtype=np.float64) - origin_y) / step_y
    values = bilinear_gather(
        sm.values,
        np.broadcast_to(uu[None, :], (out_h, out_w)),
        np.broadcast_to(vv[:, None], (out_h, out_w)),
    )
    return ScoreMap(values=values, geometry=MapGeometry())


def fuse(per_block: list[ScoreMap], target_px: tuple[int, int], blocks: tuple[int, ...] | None = None) -> FusedScore:
    """Upsample every block map to target pixels and average them."""
    if not per_block:
        raise ConfigError("cannot fuse an empty score-map list")
    w, h = target_px
    if w < 1 or h < 1:
        raise ShapeMismatchError(f"target pixel size must be positive, got {w}x{h}")
    used = tuple(blocks) if blocks is not None else tuple(range(1, len(per_block) + 1))
    ups = tuple(upsample_to_pixels(sm, w, h) for sm in per_block)
    acc = np.zeros((h, w), dtype=np.float64)
    for sm in ups:
        acc += sm.values
    final = ScoreMap((acc / len(ups)).astype(np.float32), MapGeometry())
    return FusedScore(final_map=final, per_block=ups, blocks_used=used)


def fused_score_map(
    query_pyr: FeaturePyramid, target_pyr: FeaturePyramid, setting: AggregationSetting
) -> FusedScore:
    """Full map pipeline for one query/target pair under one setting.

    Blocks whose query window no longer fits the target map are dropped with
    a warning; if none fit at all the size mismatch is a hard error.
    """
    descs = query_descriptors(query_pyr, setting)
    maps: list[ScoreMap] = []
    used: list[int] = []
    dropped: list[int] = []
    for block in setting.active_blocks:
        qfm = query_pyr.blocks[block - 1]
        tfm = target_pyr.blocks[block - 1]
        if qfm.width > tfm.width or qfm.height > tfm.height:
            dropped.append(block)
            log.warning(
                "dropping block %d: query window %dx%d exceeds target map %dx%d",
                block, qfm.width, qfm.height, tfm.width, tfm.height,
            )
            continue
        tf = target_feature_map(tfm, setting.target_kinds[block - 1], qfm.width, qfm.height)
        maps.append(block_score_map(descs[block - 1], tf))
        used.append(block)
    if not maps:
        raise ShapeMismatchError(f"query exceeds target at block {dropped[0]}")
    return fuse(maps, target_pyr.input_size, blocks=tuple(used))
