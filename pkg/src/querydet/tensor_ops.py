"""Dense array primitives: pooling, normalization, resampling, labeling.

Everything downstream (feature aggregation, score maps, detection) is built
on the operations here. All functions are pure and all container types are
immutable after construction, so callers are free to parallelize over
channels or pyramid blocks.

Feature maps are stored height-major as ``(height, width, channels)``
float32 arrays. Score maps are ``(height, width)`` float32 plus a geometry
record that places every cell in target-image pixel space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

#: Norms at or below this are treated as zero by l2_normalize.
NORM_EPS = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """One block's activations: ``data[y, x, c]``, plus the input-pixel stride.

    ``stride`` is the number of input-image pixels covered by one feature
    cell along each axis (2**i for backbone block i).
    """

    data: np.ndarray
    stride: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatchError(f"feature map must be HxWxC, got shape {data.shape}")
        if self.stride < 1:
            raise ShapeMismatchError(f"stride must be >= 1, got {self.stride}")
        if not np.isfinite(data).all():
            raise ShapeMismatchError("feature map contains NaN or Inf")
        if data is not self.data:
            object.__setattr__(self, "data", data)
        self.data.flags.writeable = False

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MapGeometry:
    """Maps score-map cells to target-image pixel space.

    Cell (row, col) is centered at ``origin + (col*step_x, row*step_y)``
    and summarizes a window of ``window`` pixels around that center.
    """

    step: tuple[float, float] = (1.0, 1.0)
    origin: tuple[float, float] = (0.0, 0.0)
    window: tuple[float, float] = (1.0, 1.0)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + col * self.step[0], self.origin[1] + row * self.step[1])


@dataclass(frozen=True)
class ScoreMap:
    """2D similarity surface with pixel-space placement of every cell."""

    values: np.ndarray
    geometry: MapGeometry = field(default_factory=MapGeometry)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ShapeMismatchError(f"score map must be HxW, got shape {values.shape}")
        if values is not self.values:
            object.__setattr__(self, "values", values)
        self.values.flags.writeable = False

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||, or v unchanged when ||v|| <= NORM_EPS.

    The zero-vector guard means degenerate inputs (e.g. an all-zero window
    of post-ReLU activations) flow through as zeros instead of NaNs.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        return v.copy()
    return v / norm


def unit_rows(arr: np.ndarray, axis: int = -1) -> np.ndarray:
    """L2-normalize ``arr`` along ``axis``; zero vectors stay zero."""
    arr = np.asarray(arr)
    norms = np.sqrt(np.sum(arr.astype(np.float64) ** 2, axis=axis, keepdims=True))
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    return (arr / safe).astype(np.float32)


def _check_window(fm: FeatureMap, win_w: int, win_h: int) -> None:
    if win_w < 1 or win_h < 1 or win_w > fm.width or win_h > fm.height:
        raise ShapeMismatchError(
            f"window exceeds feature map: window {win_w}x{win_h}, map {fm.width}x{fm.height}"
        )


def window_average_map(fm: FeatureMap, win_w: int, win_h: int) -> FeatureMap:
    """Mean over every win_w x win_h window (valid positions only).

    Uses a per-channel integral image accumulated in float64: windows can
    span the whole map, and single-precision prefix sums would cancel badly
    at that size.
    """
    _check_window(fm, win_w, win_h)
    h, w, c = fm.data.shape
    ii = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    np.cumsum(fm.data, axis=0, dtype=np.float64, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    sums = (
        ii[win_h:, win_w:]
        - ii[:-win_h or None, win_w:]
        - ii[win_h:, :-win_w or None]
        + ii[:-win_h or None, :-win_w or None]
    )
    out = (sums / float(win_w * win_h)).astype(np.float32)
    return FeatureMap(out, stride=fm.stride)


def _sliding_max_last_axis(a: np.ndarray, k: int) -> np.ndarray:
    """Sliding maximum with window k along the last axis, valid positions.

    Block prefix/suffix max scan: O(n) per axis like the classic deque
    formulation, but expressed as vectorized cumulative maxima.
    """
    n = a.shape[-1]
    if k == 1:
        return a.copy()
    nblocks = -(-n // k)
    pad = nblocks * k - n
    if pad:
        fill = np.full(a.shape[:-1] + (pad,), -np.inf, dtype=a.dtype)
        a = np.concatenate([a, fill], axis=-1)
    blocks = a.reshape(a.shape[:-1] + (nblocks, k))
    prefix = np.maximum.accumulate(blocks, axis=-1).reshape(a.shape)
    suffix = np.maximum.accumulate(blocks[..., ::-1], axis=-1)[..., ::-1].reshape(a.shape)
    return np.maximum(suffix[..., : n - k + 1], prefix[..., k - 1 : n])


def window_max_map(fm: FeatureMap, win_w: int, win_h: int) -> FeatureMap:
    """Maximum over every win_w x win_h window (valid positions only).

    Separable: a row pass then a column pass, each an O(n) sliding maximum.
    """
    _check_window(fm, win_w, win_h)
    # (H, W, C) -> (H, C, W'): max along rows.
    rows = _sliding_max_last_axis(np.ascontiguousarray(fm.data.transpose(0, 2, 1)), win_w)
    # (H, C, W') -> (W', C, H'): max along columns.
    cols = _sliding_max_last_axis(np.ascontiguousarray(rows.transpose(2, 1, 0)), win_h)
    out = np.ascontiguousarray(cols.transpose(2, 0, 1))
    return FeatureMap(out, stride=fm.stride)


def bilinear_gather(values: np.ndarray, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    """Sample ``values[v, u]`` at fractional coordinates with clamping.

    ``uu``/``vv`` are broadcastable arrays of column/row coordinates; points
    outside [0, W-1] x [0, H-1] replicate the nearest edge value.
    """
    h, w = values.shape
    uu = np.clip(uu, 0.0, w - 1.0)
    vv = np.clip(vv, 0.0, h - 1.0)
    u0 = np.minimum(uu.astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(vv.astype(np.int64), max(h - 2, 0))
    fu = (uu - u0).astype(np.float32)
    fv = (vv - v0).astype(np.float32)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    top = values[v0, u0] * (1.0 - fu) + values[v0, u1] * fu
    bot = values[v1, u0] * (1.0 - fu) + values[v1, u1] * fu
    return (top * (1.0 - fv) + bot * fv).astype(np.float32)


def bilinear_upsample(sm: ScoreMap, out_w: int, out_h: int) -> ScoreMap:
    """Corner-aligned bilinear resample to out_w x out_h.

    Input corners map to output corners, so interpolated values are convex
    combinations of the input and peaks at corners keep their positions.
    """
    if out_w < 1 or out_h < 1:
        raise ShapeMismatchError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = sm.values.shape
    scale_x = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    scale_y = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    uu = (np.arange(out_w, dtype=np.float64) * scale_x)[None, :]
    vv = (np.arange(out_h, dtype=np.float64) * scale_y)[:, None]
    out = bilinear_gather(sm.values, np.broadcast_to(uu, (out_h, out_w)), np.broadcast_to(vv, (out_h, out_w)))
    g = sm.geometry
    geometry = MapGeometry(
        step=(g.step[0] * scale_x, g.step[1] * scale_y),
        origin=g.origin,
        window=g.window,
    )
    return ScoreMap(out, geometry)


def connected_components(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Bounding boxes (x, y, w, h) of 8-connected true regions.

    Boxes come back sorted by descending area (ties by position). Uses
    run-length encoding per row plus union-find over runs, so cost scales
    with the number of runs rather than pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape

    # Per-row runs as (row, start, end) with end exclusive.
    runs: list[tuple[int, int, int]] = []
    row_spans: list[tuple[int, int]] = []  # run-index range per row
    padded = np.zeros(w + 2, dtype=np.int8)
    for y in range(h):
        lo = len(runs)
        padded[1:-1] = mask[y]
        edges = np.flatnonzero(np.diff(padded))
        for s, e in zip(edges[::2], edges[1::2]):
            runs.append((y, int(s), int(e)))
        row_spans.append((lo, len(runs)))

    parent = list(range(len(runs)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri

    for y in range(1, h):
        a0, a1 = row_spans[y - 1]
        b0, b1 = row_spans[y]
        i, j = a0, b0
        while i < a1 and j < b1:
            _, sa, ea = runs[i]
            _, sb, eb = runs[j]
            # 8-connectivity: ranges touch even diagonally.
            if sa <= eb and sb <= ea:
                union(i, j)
            if ea < eb:
                i += 1
            else:
                j += 1

    boxes: dict[int, list[int]] = {}
    for idx, (y, s, e) in enumerate(runs):
        root = find(idx)
        box = boxes.get(root)
        if box is None:
            boxes[root] = [s, y, e, y + 1]
        else:
            box[0] = min(box[0], s)
            box[1] = min(box[1], y)
            box[2] = max(box[2], e)
            box[3] = max(box[3], y + 1)

    out = [(x0, y0, x1 - x0, y1 - y0) for x0, y0, x1, y1 in boxes.values()]
    out.sort(key=lambda b: (-(b[2] * b[3]), b[1], b[0]))
    return out


def round_half_up(x: float) -> int:
    """Round with .5 going up, unlike banker's rounding."""
    return int(math.floor(x + 0.5))
