"""Query descriptors and windowed target descriptor maps.

Query side: a feature map collapses to one unit vector per block, either
globally (GAP / GMP / GA&MP) or through a multi-scale region grid
(R-AAC / R-MAC / R-AMAC). Target side: sliding-window average / max maps
whose per-position vectors are built with the same normalization chain, so
a window's vector equals the global descriptor of that window's crop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor_ops import (
    FeatureMap,
    MapGeometry,
    l2_normalize,
    round_half_up,
    unit_rows,
    window_average_map,
    window_max_map,
)

QUERY_KINDS = ("GAP", "GMP", "GA&MP", "R-AAC", "R-MAC", "R-AMAC")
TARGET_KINDS = ("AP", "MP", "A&MP")

# Which target map each query descriptor can be scored against (equal length
# and matching branch semantics).
COMPATIBLE_TARGET = {
    "GAP": "AP",
    "R-AAC": "AP",
    "GMP": "MP",
    "R-MAC": "MP",
    "GA&MP": "A&MP",
    "R-AMAC": "A&MP",
}

OVERLAP_TARGET = 0.4
AUTO_M_RANGE = range(1, 9)


@dataclass(frozen=True)
class RegionGrid:
    """Square sampling regions in feature-cell coordinates, all scales pooled."""

    scales: int
    m: int
    regions: tuple[tuple[int, int, int], ...]  # (x, y, side)
    width: int
    height: int

    def __post_init__(self) -> None:
        for x, y, side in self.regions:
            if side < 1 or x < 0 or y < 0 or x + side > self.width or y + side > self.height:
                raise ShapeMismatchError(
                    f"region ({x}, {y}, side {side}) exceeds {self.width}x{self.height} map"
                )


@dataclass(frozen=True)
class QueryDescriptor:
    """One unit-norm vector describing a query block."""

    block_index: int
    kind: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in QUERY_KINDS:
            raise ConfigError(f"unknown query descriptor kind {self.kind!r}")
        if not 1 <= self.block_index <= 5:
            raise ShapeMismatchError(f"block index must be 1..5, got {self.block_index}")
        v = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", v)
        norm = float(np.linalg.norm(v))
        if norm > 0 and abs(norm - 1.0) > 1e-6:
            raise ShapeMismatchError(f"descriptor norm {norm} is not unit")
        v.flags.writeable = False


@dataclass(frozen=True)
class TargetFeatures:
    """Per-position unit vectors over sliding windows of one target block."""

    data: np.ndarray  # (H', W', C or 2C) float32, rows unit or zero
    geometry: MapGeometry
    kind: str
    block_index: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _anchors(extent: int, side: int, count: int) -> list[int]:
    """Uniformly spaced region starts; a single region is centered."""
    if count == 1:
        return [round_half_up((extent - side) / 2.0)]
    step = (extent - side) / (count - 1)
    return [round_half_up(k * step) for k in range(count)]


def _scale_side(width: int, height: int, scale: int) -> int:
    if scale == 1:
        return min(width, height)
    side = max(1, round_half_up(2.0 * min(width, height) / (scale + 1)))
    return min(side, width, height)


def _long_axis_overlap(width: int, height: int, m: int) -> float:
    """Overlap ratio between neighboring scale-2 regions along the long axis."""
    side = _scale_side(width, height, 2)
    long = max(width, height)
    count = m + 1  # scale 2: short axis 2, long axis 2 + m - 1
    step = (long - side) / (count - 1)
    return max(0.0, (side - step) / side)


def choose_m(width: int, height: int) -> int:
    """Smallest m whose scale-2 neighbor overlap is closest to the 40% target."""
    best, best_dev = 1, float("inf")
    for m in AUTO_M_RANGE:
        dev = abs(_long_axis_overlap(width, height, m) - OVERLAP_TARGET)
        if dev < best_dev - 1e-12:
            best, best_dev = m, dev
    return best


def build_region_grid(width: int, height: int, scales: int = 3, m: int | None = None) -> RegionGrid:
    """Multi-scale square region grid in the R-MAC layout.

    The short axis carries l regions at scale l, the long axis l + m - 1.
    Duplicate rectangles from clamping on tiny maps are dropped.
    """
    if width < 1 or height < 1:
        raise ConfigError(f"map must be at least 1x1, got {width}x{height}")
    if scales < 1:
        raise ConfigError(f"scales must be >= 1, got {scales}")
    if m is None:
        m = choose_m(width, height)
    elif m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")

    regions: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for scale in range(1, scales + 1):
        side = _scale_side(width, height, scale)
        n_long = scale + m - 1
        nx, ny = (n_long, scale) if width >= height else (scale, n_long)
        for y in _anchors(height, side, ny):
            for x in _anchors(width, side, nx):
                box = (x, y, side)
                if box not in seen:
                    seen.add(box)
                    regions.append(box)
    return RegionGrid(scales=scales, m=m, regions=tuple(regions), width=width, height=height)


def regional_descriptor(fm: FeatureMap, grid: RegionGrid, branch: str) -> QueryDescriptor:
    """R-AAC (avg), R-MAC (max), or R-AMAC (both): normalize per region, sum,
    normalize the sum, and for both branches normalize their concatenation."""
    if branch not in ("avg", "max", "both"):
        raise ConfigError(f"branch must be avg, max, or both, got {branch!r}")
    if not grid.regions:
        raise ShapeMismatchError("no regions in grid")
    if grid.width > fm.width or grid.height > fm.height:
        raise ShapeMismatchError(
            f"grid built for {grid.width}x{grid.height} exceeds {fm.width}x{fm.height} map"
        )
    avg_sum = np.zeros(fm.channels, dtype=np.float64)
    max_sum = np.zeros(fm.channels, dtype=np.float64)
    for x, y, side in grid.regions:
        crop = fm.data[y : y + side, x : x + side].astype(np.float64)
        if branch in ("avg", "both"):
            avg_sum += l2_normalize(crop.mean(axis=(0, 1)))
        if branch in ("max", "both"):
            max_sum += l2_normalize(crop.max(axis=(0, 1)))
    if branch == "avg":
        return QueryDescriptor(_block_of(fm), "R-AAC", l2_normalize(avg_sum))
    if branch == "max":
        return QueryDescriptor(_block_of(fm), "R-MAC", l2_normalize(max_sum))
    vec = l2_normalize(np.concatenate([l2_normalize(avg_sum), l2_normalize(max_sum)]))
    return QueryDescriptor(_block_of(fm), "R-AMAC", vec)


def global_descriptor(fm: FeatureMap, kind: str) -> QueryDescriptor:
    """GAP / GMP / GA&MP over the whole feature map."""
    data = fm.data.astype(np.float64)
    if kind == "GAP":
        return QueryDescriptor(_block_of(fm), kind, l2_normalize(data.mean(axis=(0, 1))))
    if kind == "GMP":
        return QueryDescriptor(_block_of(fm), kind, l2_normalize(data.max(axis=(0, 1))))
    if kind == "GA&MP":
        vec = np.concatenate(
            [l2_normalize(data.mean(axis=(0, 1))), l2_normalize(data.max(axis=(0, 1)))]
        )
        return QueryDescriptor(_block_of(fm), kind, l2_normalize(vec))
    raise ConfigError(f"unknown global descriptor kind {kind!r}")


def _block_of(fm: FeatureMap) -> int:
    # Stride 2^i identifies the block; non-power strides land in block 1..5 anyway
    # because FeaturePyramid enforces them upstream.
    return max(1, min(5, int(np.log2(max(2, fm.stride)))))


@dataclass(frozen=True)
class AggregationSetting:
    """Per-block query/target descriptor plan, labeled a-g for the presets."""

    name: str
    query_kinds: tuple[str | None, ...]
    target_kinds: tuple[str | None, ...]
    scales: int = 3
    m: int | None = None

    def __post_init__(self) -> None:
        if len(self.query_kinds) != 5 or len(self.target_kinds) != 5:
            raise ConfigError("a setting must configure exactly 5 blocks")
        for i, (q, t) in enumerate(zip(self.query_kinds, self.target_kinds), start=1):
            if (q is None) != (t is None):
                raise ConfigError(
                    f"block {i} of setting {self.name!r} must be fully configured or fully disabled"
                )
            if q is None:
                continue
            if q not in QUERY_KINDS:
                raise ConfigError(f"unknown query kind {q!r} at block {i}")
            if t not in TARGET_KINDS:
                raise ConfigError(f"unknown target kind {t!r} at block {i}")
            if COMPATIBLE_TARGET[q] != t:
                raise ConfigError(
                    f"incompatible query/target kinds at block {i}: "
                    f"{q} scores against {COMPATIBLE_TARGET[q]}, not {t}"
                )
        if not any(q for q in self.query_kinds):
            raise ConfigError(f"setting {self.name!r} disables every block")

    @property
    def active_blocks(self) -> tuple[int, ...]:
        return tuple(i for i, q in enumerate(self.query_kinds, start=1) if q is not None)


SETTINGS: dict[str, AggregationSetting] = {
    "a": AggregationSetting("a", ("GA&MP",) * 3 + ("R-AMAC",) * 2, ("A&MP",) * 5),
    "b": AggregationSetting("b", (None,) * 4 + ("R-AMAC",), (None,) * 4 + ("A&MP",)),
    "c": AggregationSetting("c", ("GA&MP",) * 5, ("A&MP",) * 5),
    "d": AggregationSetting("d", ("GAP",) * 5, ("AP",) * 5),
    "e": AggregationSetting("e", ("GMP",) * 5, ("MP",) * 5),
    "f": AggregationSetting("f", ("GAP",) * 3 + ("R-AAC",) * 2, ("AP",) * 5),
    "g": AggregationSetting("g", ("GMP",) * 3 + ("R-MAC",) * 2, ("MP",) * 5),
}

_REGIONAL_BRANCH = {"R-AAC": "avg", "R-MAC": "max", "R-AMAC": "both"}


def query_descriptors(pyr, setting: AggregationSetting) -> tuple[QueryDescriptor | None, ...]:
    """One descriptor per configured block of the query pyramid."""
    out: list[QueryDescriptor | None] = []
    for fm, kind in zip(pyr.blocks, setting.query_kinds):
        if kind is None:
            out.append(None)
        elif kind in _REGIONAL_BRANCH:
            grid = build_region_grid(fm.width, fm.height, setting.scales, setting.m)
            out.append(regional_descriptor(fm, grid, _REGIONAL_BRANCH[kind]))
        else:
            out.append(global_descriptor(fm, kind))
    return tuple(out)


def target_feature_map(fm: FeatureMap, kind: str, win_w: int, win_h: int) -> TargetFeatures:
    """Sliding-window descriptor map; position (i, j) equals the global
    descriptor of the window crop at (i, j) with the matching kind."""
    if kind not in TARGET_KINDS:
        raise ConfigError(f"unknown target map kind {kind!r}")
    if kind == "AP":
        vecs = unit_rows(window_average_map(fm, win_w, win_h).data)
    elif kind == "MP":
        vecs = unit_rows(window_max_map(fm, win_w, win_h).data)
    else:
        avg = unit_rows(window_average_map(fm, win_w, win_h).data)
        mx = unit_rows(window_max_map(fm, win_w, win_h).data)
        vecs = unit_rows(np.concatenate([avg, mx], axis=2))
    stride = float(fm.stride)
    geometry = MapGeometry(
        step=(stride, stride),
        origin=((win_w * stride - 1) / 2.0, (win_h * stride - 1) / 2.0),
        window=(win_w * stride, win_h * stride),
    )
    return TargetFeatures(data=vecs, geometry=geometry, kind=kind, block_index=_block_of(fm))
