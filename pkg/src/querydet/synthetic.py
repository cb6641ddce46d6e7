"""Deterministic synthetic rasters for tests, demos, and golden fixtures.

Everything here is a pure function of its seed and size arguments, so
fixtures can be regenerated instead of committed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (
    VGG16_BLOCKS,
    PreprocessSpec,
    WeightsBundle,
    _conv3x3_relu,
    _maxpool2,
    _normalize,
)
from .errors import ConfigError


def gradient_card(side: int = 224) -> np.ndarray:
    """Smooth two-axis ramp with a bright diagonal stripe."""
    yy, xx = np.mgrid[0:side, 0:side]
    r = (255 * xx / max(1, side - 1)).astype(np.uint8)
    g = (255 * yy / max(1, side - 1)).astype(np.uint8)
    b = np.where(np.abs(xx - yy) < side // 8, 230, 40).astype(np.uint8)
    return np.stack([r, g, b], axis=2)


def checker_card(side: int = 224, cell: int = 16) -> np.ndarray:
    """Checkerboard with a filled disc in the lower-right quadrant."""
    yy, xx = np.mgrid[0:side, 0:side]
    board = (((xx // cell) + (yy // cell)) % 2 * 200 + 30).astype(np.uint8)
    img = np.stack([board, 255 - board, np.full_like(board, 128)], axis=2)
    cy, cx, rad = 3 * side // 4, 3 * side // 4, side // 8
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
    img[disc] = (250, 60, 60)
    return img


def noise_card(side: int = 224, seed: int = 11) -> np.ndarray:
    """Full-range uniform pixel noise from a fixed seed."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)


def reference_cards(side: int = 224) -> list[np.ndarray]:
    """The three fixed rasters the forward-pass fixtures are built from."""
    return [gradient_card(side), checker_card(side), noise_card(side)]


def _smooth_field(rng: np.random.Generator, width: int, height: int, cell: int, lo: float, hi: float) -> np.ndarray:
    """Bilinear upsample of a coarse uniform grid; shape (height, width, k)."""
    coarse = rng.uniform(lo, hi, size=(height // cell + 2, width // cell + 2, 3))
    yy = np.linspace(0, coarse.shape[0] - 1.001, height)
    xx = np.linspace(0, coarse.shape[1] - 1.001, width)
    y0 = yy.astype(int)
    x0 = xx.astype(int)
    fy = (yy - y0)[:, None, None]
    fx = (xx - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx


# Saturated object palette: red, green, blue, yellow, magenta, cyan. Six
# hues keep every pair close to orthogonal once the ground gray is
# subtracted; intermediate hues (orange, violet) project onto their
# neighbors and blur the distinction between different objects.
PALETTE = np.array(
    [
        [225, 45, 45],
        [45, 215, 65],
        [60, 70, 220],
        [230, 220, 60],
        [210, 60, 210],
        [70, 215, 215],
    ],
    dtype=np.float64,
)

# Anchor gray of the muted ground; color is measured as deviation from here.
GROUND_GRAY = np.array([128.0, 128.0, 120.0])


def muted_ground(width: int, height: int, seed: int) -> np.ndarray:
    """Low-contrast near-gray ground: slow blotches plus mild pixel noise.

    The band is deliberately narrow (about +/-13 around the anchor) so that
    ground windows project weakly onto every palette direction and pooled
    ground descriptors stay far below planted-object scores.
    """
    rng = np.random.default_rng(seed)
    t = _smooth_field(rng, width, height, 12, 0.0, 1.0)[..., 0]
    lo = np.array([116.0, 118.0, 108.0])
    hi = np.array([142.0, 140.0, 132.0])
    img = lo + (hi - lo) * t[..., None]
    img += rng.normal(0, 3, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def default_hues(seed: int, count: int = 4) -> np.ndarray:
    """Seeded choice of ``count`` distinct palette indices."""
    return np.random.default_rng(seed).permutation(len(PALETTE))[:count]


def _quad_core(side: int, seed: int, hue_idx: np.ndarray) -> np.ndarray:
    """2x2 grid of flat palette quadrants: an object's color signature."""
    rng = np.random.default_rng(seed)
    half = side // 2
    img = np.zeros((side, side, 3))
    for k, (oy, ox) in enumerate([(0, 0), (0, half), (half, 0), (half, half)]):
        img[oy : oy + half, ox : ox + half] = PALETTE[hue_idx[k]]
    img += rng.normal(0, 3, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _tiled_core(side: int, seed: int, hue_idx: np.ndarray, tile: int) -> np.ndarray:
    """Same hues as a quad core, scrambled into a fine cyclic tiling.

    The cyclic offset guarantees no two neighboring tiles repeat a hue, so
    the pattern contains no flat color region larger than one tile.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((side, side, 3))
    n = (side + tile - 1) // tile
    for r in range(n):
        for c in range(n):
            h = hue_idx[(c + r * 2 + (r % 2)) % len(hue_idx)]
            img[r * tile : min((r + 1) * tile, side), c * tile : min((c + 1) * tile, side)] = PALETTE[h]
    img += rng.normal(0, 3, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def query_canvas(seed: int, side: int = 128, core: int = 32, hue_idx: np.ndarray | None = None) -> np.ndarray:
    """Query image: muted ground with a centered flat-quadrant color core.

    Corpus scenes plant this exact raster, so ground truth is the paste
    footprint with no annotation ambiguity.
    """
    if hue_idx is None:
        hue_idx = default_hues(seed)
    canvas = muted_ground(side, side, seed + 500)
    m = (side - core) // 2
    canvas[m : m + core, m : m + core] = _quad_core(core, seed, hue_idx)
    return canvas


def decoy_canvas(seed: int, hue_idx: np.ndarray, side: int = 128, core: int = 32, tile: int = 3) -> np.ndarray:
    """Decoy built from a query's own hues, scrambled into fine tiles.

    Seen whole, pooling mixes the tiles into nearly the same color mass as
    the real object, so the full-image score map ranks the decoy high. But
    re-scoring resizes the candidate crop to the backbone's input side, and
    the shrink pushes the tiles under the first convolution's footprint,
    averaging them back toward gray — the decoy's re-score collapses while
    the real object's flat quadrants survive the same resize unchanged.
    One raster, and it is the second stage's whole reason to exist.
    """
    canvas = muted_ground(side, side, seed + 500)
    m = (side - core) // 2
    canvas[m : m + core, m : m + core] = _tiled_core(core, seed, hue_idx, tile)
    return canvas


def plant(scene: np.ndarray, patch: np.ndarray, x: int, y: int) -> tuple[int, int, int, int]:
    """Paste patch into scene at (x, y); returns the ground-truth box (x, y, w, h)."""
    h, w = patch.shape[:2]
    if y + h > scene.shape[0] or x + w > scene.shape[1] or x < 0 or y < 0:
        raise ValueError(f"patch {w}x{h} at ({x}, {y}) falls outside scene")
    scene[y : y + h, x : x + w] = patch
    return (x, y, w, h)


def blank_scene(width: int, height: int, value: int = 128) -> np.ndarray:
    """Uniform gray raster; the no-object control input."""
    return np.full((height, width, 3), value, dtype=np.uint8)


@dataclass(frozen=True)
class PlantedScene:
    """One evaluation scene: a query, a target, and the true box."""

    query: np.ndarray
    scene: np.ndarray
    box: tuple[int, int, int, int]
    query_id: str
    decoy_box: tuple[int, int, int, int] | None = None


def _pinned_origin(idx: int, rng: np.random.Generator, max_pos: int) -> tuple[int, int]:
    """Corner placement for the first four indices, border-edge after that."""
    # The free coordinate is drawn before the corner branch so every scene
    # advances its generator identically.
    j = int(rng.integers(0, max_pos + 1))
    if idx < 4:
        return (0 if idx % 2 == 0 else max_pos, 0 if idx // 2 == 0 else max_pos)
    return [(0, j), (max_pos, j), (j, 0), (j, max_pos)][idx % 4]


def detection_corpus(count: int = 10, scene_side: int = 384, query_side: int = 128, core: int = 32) -> list[PlantedScene]:
    """Fixed-seed scenes with one planted object each.

    Objects are pinned to scene corners and borders: a border-flush box
    caps how far the thresholded score component can swell past the object,
    which keeps the candidate crop centered on it.
    """
    out = []
    max_pos = scene_side - query_side
    for s in range(count):
        scene = muted_ground(scene_side, scene_side, s)
        rng = np.random.default_rng(s + 7919)
        gx, gy = _pinned_origin(s, rng, max_pos)
        query = query_canvas(s, query_side, core)
        box = plant(scene, query, gx, gy)
        out.append(PlantedScene(query=query, scene=scene, box=box, query_id=f"q{s:02d}"))
    return out


def distractor_corpus(count: int = 10, scene_side: int = 512, query_side: int = 128, core: int = 32) -> list[PlantedScene]:
    """Fixed-seed scenes with one planted object and one scrambled decoy.

    The decoy reuses the query's hue set (see decoy_canvas) and sits inset
    from the border region diagonally opposite the object, far enough away
    that the two never merge into one thresholded component.
    """
    out = []
    max_pos = scene_side - query_side
    for s in range(count):
        scene = muted_ground(scene_side, scene_side, s)
        rng = np.random.default_rng(s + 7919)
        gx, gy = _pinned_origin(s, rng, max_pos)
        hue_idx = default_hues(s)
        query = query_canvas(s, query_side, core, hue_idx=hue_idx)
        decoy = decoy_canvas(s + 400, hue_idx, query_side, core)
        box = plant(scene, query, gx, gy)
        dx = max_pos - 64 if gx < max_pos / 2 else 64
        dy = max_pos - 64 if gy < max_pos / 2 else 64
        decoy_box = plant(scene, decoy, dx, dy)
        out.append(PlantedScene(query=query, scene=scene, box=box, query_id=f"q{s:02d}", decoy_box=decoy_box))
    return out


# Fraction of non-color pre-activations silenced per block.
DEFAULT_SPARSITY = (0.9, 0.88, 0.8, 0.5, 0.0)

# Share of activation energy granted to the color channels per block.
DEFAULT_COLOR_FRACTION = (0.30, 0.35, 0.50, 0.65, 0.70)

_BLUR = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


def _smooth_taps(w: np.ndarray) -> np.ndarray:
    """3x3 blur over each kernel's tap grid, truncated at the kernel edge."""
    out = np.zeros_like(w)
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            coef = _BLUR[du + 1, dv + 1]
            src = w[..., max(0, -du) : 3 - max(0, du) or 3, max(0, -dv) : 3 - max(0, dv) or 3]
            out[..., max(0, du) : 3 - max(0, -du) or 3, max(0, dv) : 3 - max(0, -dv) or 3] += coef * src
    return out


def calibrated_weights(
    seed: int = 5,
    input_side: int = 128,
    sparsity: tuple[float, ...] = DEFAULT_SPARSITY,
    color_fraction: tuple[float, ...] = DEFAULT_COLOR_FRACTION,
    color_cut: float = 0.995,
    color_gain: float = 4.0,
) -> WeightsBundle:
    """Smoothed random trunk with reserved color channels, tuned on a canvas.

    A plain He-initialized trunk is useless for matching: dense nonnegative
    codes put every window pair's cosine near 1, so score maps carry no
    contrast. Trained trunks escape that in two ways — most channels stay
    silent away from their preferred structure, and the channels that do
    fire track image content rather than statistics every window shares.
    This builder reproduces both properties directly.

    Selectivity: each conv layer's bias is the negative ``sparsity``
    quantile of that layer's pre-activations on a calibration canvas
    (muted ground with planted objects), so weakly driven channels go
    fully silent. The quantile is highest in early blocks, whose smoothed
    random kernels are the least selective.

    Content: the first ``2 * len(PALETTE)`` channels of every layer are
    reserved for color. In the first layer they are blur kernels pointed
    along the signed palette directions (hue minus ground gray), thresholded
    at the ``color_cut`` quantile of their own calibration response so the
    near-gray ground goes silent. In deeper layers each reserved channel
    carries only its own blurred self downward — mixing in anything else
    would leak the response every window shares into the color code, and
    cutting again would compound across layers until single surviving
    channels dominate. After each layer the reserved channels are rescaled
    to hold a ``color_fraction`` share of activation energy, rising with
    depth so pooled deep descriptors cannot ignore them.

    Smoothness: all random taps are blurred so their responses survive the
    backbone's resizes and poolings; white-noise taps decorrelate under
    either and leave nothing stable to match.

    Weights and biases are rescaled after each layer so surviving
    activations keep unit spread and the signal neither dies nor explodes
    through depth. The property that matters downstream: on this trunk,
    descriptors of unlike flat-color objects score far apart while the same
    object re-observed through a crop and resize scores near 1, so the
    two-stage pipeline has real contrast to work with.
    """
    levels = tuple(sparsity)
    fracs = tuple(color_fraction)
    if len(levels) != 5 or not all(0.0 <= q < 1.0 for q in levels):
        raise ConfigError(f"sparsity must be five values in [0, 1), got {sparsity!r}")
    if len(fracs) != 5 or not all(0.0 < f < 1.0 for f in fracs):
        raise ConfigError(f"color_fraction must be five values in (0, 1), got {color_fraction!r}")
    n_lane = 2 * len(PALETTE)
    calib_side = input_side + 96
    rng = np.random.default_rng(seed)
    spec = PreprocessSpec(input_side=input_side)
    # The canvas mixes muted ground with planted objects; without the
    # objects the cuts sit where ground alone puts them and object-grade
    # color saturates the reserved channels.
    canvas = muted_ground(calib_side, calib_side, seed + 41)
    for k in range(3):
        px = int(rng.integers(0, calib_side - input_side + 1))
        py = int(rng.integers(0, calib_side - input_side + 1))
        plant(canvas, query_canvas(seed + 9000 + k, input_side, core=32), px, py)
    x = np.ascontiguousarray(_normalize(canvas, spec).transpose(1, 2, 0))
    dirs = np.concatenate([PALETTE - GROUND_GRAY, GROUND_GRAY - PALETTE], axis=0)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tensors: dict[str, np.ndarray] = {}
    layer = 0
    for level, frac, block in zip(levels, fracs, VGG16_BLOCKS):
        for name, cin, cout in block:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            w = _smooth_taps(w)
            if layer > 0:
                # The first layer keeps its DC component: color against gray
                # is a DC signal.
                w -= w.mean(axis=(2, 3), keepdims=True)
            w /= np.linalg.norm(w.reshape(cout, -1), axis=1).reshape(cout, 1, 1, 1) + 1e-12
            w *= np.sqrt(2.0)
            if layer == 0:
                for c in range(n_lane):
                    w[c] = _BLUR[None, :, :] * dirs[c][:, None, None] * color_gain
            else:
                w[:n_lane] = 0.0
                for c in range(n_lane):
                    w[c, c] = _BLUR
            w = w.astype(np.float32)
            mats = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
            lin = _conv3x3_relu(x, mats, np.zeros(cout, dtype=np.float32), relu=False)
            cut = float(np.quantile(lin[..., n_lane:].astype(np.float64), level)) if level > 0 else 0.0
            color_level = float(np.quantile(lin[..., :n_lane].astype(np.float64), color_cut)) if layer == 0 else 0.0
            b = np.full(cout, -cut)
            b[:n_lane] = -max(color_level, 0.0)
            act = np.maximum(lin + b.astype(np.float32)[None, None, :], 0.0)
            e_color = float((act[..., :n_lane] ** 2).sum())
            e_rest = float((act[..., n_lane:] ** 2).sum())
            if e_color > 1e-12 and e_rest > 1e-12:
                s = np.sqrt(frac * e_rest / ((1.0 - frac) * e_color))
                w[:n_lane] *= s
                b[:n_lane] *= s
                act[..., :n_lane] *= s
            live = act[..., n_lane:][act[..., n_lane:] > 0]
            scale = float(live.std()) if live.size else 1.0
            if scale < 1e-8:
                scale = 1.0
            tensors[name + ".weight"] = w / np.float32(scale)
            tensors[name + ".bias"] = (b / scale).astype(np.float32)
            x = (act / np.float32(scale)).astype(np.float32)
            layer += 1
        x = _maxpool2(x)
    return WeightsBundle(tensors=tensors, metadata=spec)
