"""VGG16 weight loading, image preprocessing, and the convolutional forward pass.

The forward pass is pure numpy. Each 3x3 convolution is evaluated as nine
shifted matrix products against a zero-padded copy of the input, banded over
rows so temporaries stay small at large image sizes.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ImageFormatError, ShapeMismatchError, WeightsFormatError
from .tensor_ops import FeatureMap

MAGIC = b"QDWB0001"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# The 13-layer convolutional trunk, grouped into the five pooled blocks.
# Entries are (canonical layer name, input channels, output channels).
VGG16_BLOCKS = (
    (("conv1_1", 3, 64), ("conv1_2", 64, 64)),
    (("conv2_1", 64, 128), ("conv2_2", 128, 128)),
    (("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256)),
    (("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512)),
    (("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512)),
)
BLOCK_CHANNELS = (64, 128, 256, 512, 512)
MIN_INPUT_SIDE = 32


def expected_tensor_shapes() -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape for all 26 trunk tensors."""
    shapes: dict[str, tuple[int, ...]] = {}
    for block in VGG16_BLOCKS:
        for name, cin, cout in block:
            shapes[name + ".weight"] = (cout, cin, 3, 3)
            shapes[name + ".bias"] = (cout,)
    return shapes


@dataclass(frozen=True)
class PreprocessSpec:
    """Normalization constants and the square side queries are resized to."""

    input_side: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.input_side < MIN_INPUT_SIDE:
            raise ConfigError(f"input side must be at least {MIN_INPUT_SIDE}, got {self.input_side}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("mean and std must each hold three channel values")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std values must be positive")


@dataclass(frozen=True)
class WeightsBundle:
    """Validated, immutable set of trunk tensors plus preprocessing metadata."""

    tensors: dict[str, np.ndarray]
    metadata: PreprocessSpec = field(default_factory=PreprocessSpec)

    def __post_init__(self) -> None:
        expected = expected_tensor_shapes()
        for name in expected:
            if name not in self.tensors:
                raise WeightsFormatError(f"incomplete weights: {name} not found")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise WeightsFormatError(
                    f"architecture mismatch: {name} has shape {list(t.shape)}, expected {list(shape)}"
                )
        for name, t in self.tensors.items():
            if t.dtype != np.float32:
                self.tensors[name] = t = t.astype(np.float32)
            t.flags.writeable = False
        # Per-layer (3, 3, cin, cout) matrices for the shifted-product forward,
        # built on first use and reused across calls.
        object.__setattr__(self, "_mats", {})

    def conv_mats(self, layer: str) -> np.ndarray:
        mats: dict[str, np.ndarray] = self._mats
        if layer not in mats:
            w = self.tensors[layer + ".weight"]
            mats[layer] = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        return mats[layer]


@dataclass(frozen=True)
class FeaturePyramid:
    """Five post-pool feature maps with strides 2, 4, 8, 16, 32."""

    blocks: tuple[FeatureMap, ...]
    source: str = ""
    input_size: tuple[int, int] = (0, 0)  # (width, height) of the array fed forward

    def __post_init__(self) -> None:
        if len(self.blocks) != 5:
            raise ShapeMismatchError(f"expected 5 blocks, got {len(self.blocks)}")
        w, h = self.input_size
        for i, fm in enumerate(self.blocks, start=1):
            stride = 2 ** i
            if fm.stride != stride:
                raise ShapeMismatchError(f"block {i} must have stride {stride}, got {fm.stride}")
            if fm.channels != BLOCK_CHANNELS[i - 1]:
                raise ShapeMismatchError(
                    f"block {i} must have {BLOCK_CHANNELS[i - 1]} channels, got {fm.channels}"
                )
            if fm.height != h // stride or fm.width != w // stride:
                raise ShapeMismatchError(
                    f"block {i} is {fm.width}x{fm.height}, expected "
                    f"{w // stride}x{h // stride} for input {w}x{h}"
                )


def save_weights(bundle: WeightsBundle, path: str) -> None:
    """Write the container: magic, manifest length, manifest, float32 blob."""
    entries = []
    chunks = []
    offset = 0
    for name in expected_tensor_shapes():
        t = np.ascontiguousarray(bundle.tensors[name], dtype="<f4")
        raw = t.tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "querydet-weights",
        "version": 1,
        "metadata": {
            "input_side": bundle.metadata.input_side,
            "mean": list(bundle.metadata.mean),
            "std": list(bundle.metadata.std),
        },
        "tensors": entries,
    }
    doc = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    payload = MAGIC + len(doc).to_bytes(8, "little") + doc + b"".join(chunks)
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path: str) -> WeightsBundle:
    """Read and validate a weights container from disk."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise WeightsFormatError(f"cannot read weights file {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise WeightsFormatError("corrupt weights file: bad magic header")
    manifest_len = int.from_bytes(raw[8:16], "little")
    if 16 + manifest_len > len(raw):
        raise WeightsFormatError("corrupt weights file: manifest extends past end of file")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"corrupt weights file: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise WeightsFormatError("corrupt weights file: manifest has no tensor list")

    blob = memoryview(raw)[16 + manifest_len :]
    tensors: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for ent in manifest["tensors"]:
        try:
            name = ent["name"]
            shape = tuple(int(s) for s in ent["shape"])
            offset = int(ent["offset"])
            nbytes = int(ent["nbytes"])
        except (TypeError, KeyError, ValueError) as exc:
            raise WeightsFormatError(f"corrupt weights file: malformed tensor entry ({ent!r})") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != count * 4 or offset < 0:
            raise WeightsFormatError(f"corrupt weights file: tensor {name} has inconsistent byte length")
        if offset + nbytes > len(blob):
            raise WeightsFormatError(f"corrupt weights file: tensor {name} extends past end of blob")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise WeightsFormatError(f"corrupt weights file: tensors {name_a} and {name_b} overlap")

    meta = manifest.get("metadata", {})
    if not isinstance(meta, dict):
        raise WeightsFormatError("corrupt weights file: malformed metadata record")
    try:
        spec = PreprocessSpec(
            input_side=int(meta.get("input_side", 224)),
            mean=tuple(float(v) for v in meta.get("mean", IMAGENET_MEAN)),
            std=tuple(float(v) for v in meta.get("std", IMAGENET_STD)),
        )
    except (TypeError, ValueError, ConfigError) as exc:
        raise WeightsFormatError(f"corrupt weights file: malformed metadata record ({exc})") from exc
    return WeightsBundle(tensors=tensors, metadata=spec)


def make_random_weights(
    seed: int = 0, input_side: int = 224, bias_scale: float = 0.0
) -> WeightsBundle:
    """Deterministic He-scaled random trunk for tests and demos.

    Every 3x3 slice is shifted to zero mean so flat image regions produce
    near-zero interior activations instead of a structured response.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for block in VGG16_BLOCKS:
        for name, cin, cout in block:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            w -= w.mean(axis=(2, 3), keepdims=True)
            tensors[name + ".weight"] = w.astype(np.float32)
            b = bias_scale * rng.normal(size=cout) if bias_scale else np.zeros(cout)
            tensors[name + ".bias"] = b.astype(np.float32)
    return WeightsBundle(tensors=tensors, metadata=PreprocessSpec(input_side=input_side))


def _check_rgb(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ImageFormatError(
            f"unsupported image: expected 8-bit RGB pixels, got dtype={arr.dtype} shape={arr.shape}"
        )
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageFormatError("unsupported image: empty raster")
    return arr


def _normalize(arr: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    x = arr.astype(np.float32) / np.float32(255.0)
    x -= np.asarray(spec.mean, dtype=np.float32)
    x /= np.asarray(spec.std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def preprocess(image: np.ndarray, target_side: int, spec: PreprocessSpec | None = None) -> np.ndarray:
    """8-bit RGB raster -> normalized 3 x side x side float array."""
    spec = spec if spec is not None else PreprocessSpec()
    arr = _check_rgb(image)
    if target_side < MIN_INPUT_SIDE:
        raise ConfigError(f"target side must be at least {MIN_INPUT_SIDE}, got {target_side}")
    if arr.shape[0] != target_side or arr.shape[1] != target_side:
        resized = Image.fromarray(arr).resize((target_side, target_side), Image.Resampling.BILINEAR)
        arr = np.asarray(resized)
    return _normalize(arr, spec)


def preprocess_padded(
    image: np.ndarray, spec: PreprocessSpec | None = None, multiple: int = 32
) -> tuple[np.ndarray, tuple[int, int]]:
    """Normalize at native resolution, then zero-pad right/bottom to a multiple.

    Returns the padded 3xHxW array and the original (width, height) so boxes
    can later be clipped back to real pixels.
    """
    spec = spec if spec is not None else PreprocessSpec()
    arr = _check_rgb(image)
    h, w = arr.shape[:2]
    x = _normalize(arr, spec)
    ph = max(MIN_INPUT_SIDE, -(-h // multiple) * multiple)
    pw = max(MIN_INPUT_SIDE, -(-w // multiple) * multiple)
    if (ph, pw) != (h, w):
        padded = np.zeros((3, ph, pw), dtype=np.float32)
        padded[:, :h, :w] = x
        x = padded
    return x, (w, h)


def _band_rows(width: int, cin: int) -> int:
    # Keep each contiguous band copy near 8 MB.
    return max(1, (8 << 20) // max(1, width * cin * 4))


def _conv3x3_relu(x: np.ndarray, mats: np.ndarray, bias: np.ndarray, relu: bool = True) -> np.ndarray:
    h, w, cin = x.shape
    cout = mats.shape[3]
    pad = np.zeros((h + 2, w + 2, cin), dtype=np.float32)
    pad[1 : h + 1, 1 : w + 1] = x
    out = np.empty((h, w, cout), dtype=np.float32)
    band = _band_rows(w, cin)
    for r0 in range(0, h, band):
        bh = min(band, h - r0)
        acc = np.empty((bh * w, cout), dtype=np.float32)
        acc[:] = bias
        tmp = np.empty_like(acc)
        for di in range(3):
            for dj in range(3):
                sl = np.ascontiguousarray(pad[r0 + di : r0 + di + bh, dj : dj + w, :])
                np.matmul(sl.reshape(bh * w, cin), mats[di, dj], out=tmp)
                acc += tmp
        if relu:
            np.maximum(acc, 0.0, out=acc)
        out[r0 : r0 + bh] = acc.reshape(bh, w, cout)
    return out


def _maxpool2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    a = x[: 2 * h2, : 2 * w2]
    return np.maximum(
        np.maximum(a[0::2, 0::2], a[0::2, 1::2]),
        np.maximum(a[1::2, 0::2], a[1::2, 1::2]),
    )


def forward(bundle: WeightsBundle, x: np.ndarray, source: str = "") -> FeaturePyramid:
    """Run the trunk on a normalized 3xHxW array; pure function of its inputs."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeMismatchError(f"forward expects a 3xHxW array, got shape {x.shape}")
    h, w = x.shape[1], x.shape[2]
    if min(h, w) < MIN_INPUT_SIDE:
        raise ShapeMismatchError(f"forward needs sides of at least {MIN_INPUT_SIDE} pixels, got {w}x{h}")
    act = np.ascontiguousarray(x.transpose(1, 2, 0))
    blocks = []
    for i, block in enumerate(VGG16_BLOCKS, start=1):
        for name, _, _ in block:
            act = _conv3x3_relu(act, bundle.conv_mats(name), bundle.tensors[name + ".bias"])
        act = _maxpool2(act)
        blocks.append(FeatureMap(act, stride=2 ** i))
    return FeaturePyramid(blocks=tuple(blocks), source=source, input_size=(w, h))
