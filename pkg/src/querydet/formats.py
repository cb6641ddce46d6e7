"""On-disk formats: detection/ground-truth documents, report tables, config
files, and raster I/O.

Structured documents are JSON; report tables are comma-delimited with one
``#``-prefixed metadata line; config files are flat ``key = value`` text.
Every emitter here has a parser and ``parse(emit(x)) == x`` holds exactly:
floats are written with ``repr``, which round-trips. All writers go through
``atomic_write_bytes`` (temp file + rename), so readers never observe a
half-written file.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections.abc import Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .aggregation import QueryDescriptor
from .detection import Detection
from .errors import ImageFormatError, SchemaError, UserInputError
from .evaluation import BenchmarkReport, EvalResult, GroundTruth


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UserInputError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Detections document: JSON list of {query_id, box, score, stage}.


def emit_detections(dets: Sequence[Detection]) -> str:
    records = [
        {"query_id": d.query_id, "box": list(d.box), "score": float(d.score), "stage": d.stage}
        for d in dets
    ]
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def _require(cond: bool, field: str, why: str) -> None:
    if not cond:
        raise SchemaError(f"field '{field}': {why}")


def _is_int(v: object) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_detections(text: str) -> list[Detection]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"detections document is not valid JSON: {exc}") from exc
    _require(isinstance(doc, list), "(root)", "detections document must be a JSON list")
    out = []
    for i, rec in enumerate(doc):
        where = f"[{i}]"
        _require(isinstance(rec, dict), where, "each detection must be an object")
        missing = {"query_id", "box", "score", "stage"} - set(rec)
        _require(not missing, f"{where}.{sorted(missing)[0] if missing else ''}", "required key missing")
        box = rec["box"]
        _require(
            isinstance(box, list) and len(box) == 4 and all(_is_int(v) for v in box),
            f"{where}.box", "must be four integers [x, y, w, h]",
        )
        x, y, w, h = box
        _require(x >= 0 and y >= 0 and w >= 1 and h >= 1, f"{where}.box", f"degenerate box {box}")
        score = rec["score"]
        _require(
            isinstance(score, (int, float)) and not isinstance(score, bool) and 0.0 <= score <= 1.0,
            f"{where}.score", "must be in [0, 1]",
        )
        _require(_is_int(rec["stage"]) and rec["stage"] in (1, 2), f"{where}.stage", "must be 1 or 2")
        _require(isinstance(rec["query_id"], str), f"{where}.query_id", "must be a string")
        out.append(Detection(box=(x, y, w, h), score=float(score), stage=rec["stage"], query_id=rec["query_id"]))
    return out


# ---------------------------------------------------------------------------
# Ground-truth document: JSON list of {image_id, boxes, category}.


def emit_ground_truth(gts: Sequence[GroundTruth]) -> str:
    records = [
        {"image_id": g.image_id, "boxes": [list(b) for b in g.boxes], "category": g.category}
        for g in gts
    ]
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def parse_ground_truth(text: str) -> list[GroundTruth]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"ground-truth document is not valid JSON: {exc}") from exc
    _require(isinstance(doc, list), "(root)", "ground-truth document must be a JSON list")
    out = []
    seen: set[str] = set()
    for i, rec in enumerate(doc):
        where = f"[{i}]"
        _require(isinstance(rec, dict), where, "each entry must be an object")
        missing = {"image_id", "boxes", "category"} - set(rec)
        _require(not missing, f"{where}.{sorted(missing)[0] if missing else ''}", "required key missing")
        _require(isinstance(rec["image_id"], str) and rec["image_id"], f"{where}.image_id", "must be a non-empty string")
        _require(rec["image_id"] not in seen, f"{where}.image_id", f"duplicate image_id '{rec['image_id']}'")
        seen.add(rec["image_id"])
        _require(isinstance(rec["category"], str), f"{where}.category", "must be a string")
        boxes = rec["boxes"]
        _require(isinstance(boxes, list), f"{where}.boxes", "must be a list of [x, y, w, h]")
        parsed: list[tuple[int, int, int, int]] = []
        for j, box in enumerate(boxes):
            _require(
                isinstance(box, list) and len(box) == 4 and all(_is_int(v) for v in box),
                f"{where}.boxes[{j}]", "must be four integers [x, y, w, h]",
            )
            x, y, w, h = box
            _require(x >= 0 and y >= 0, f"{where}.boxes[{j}]", f"negative origin in {box}")
            _require(w >= 1 and h >= 1, f"{where}.boxes[{j}]", f"non-positive width/height in {box}")
            parsed.append((x, y, w, h))
        out.append(GroundTruth(image_id=rec["image_id"], boxes=tuple(parsed), category=rec["category"]))
    return out


# ---------------------------------------------------------------------------
# Descriptor document: JSON with per-block vectors.


def emit_descriptors(query_id: str, setting_label: str, descs: Sequence[QueryDescriptor | None]) -> str:
    blocks = [
        {"block": d.block_index, "kind": d.kind, "dim": int(d.vector.size), "vector": [float(v) for v in d.vector]}
        for d in descs
        if d is not None
    ]
    return json.dumps({"query_id": query_id, "setting": setting_label, "blocks": blocks}, indent=2, sort_keys=True) + "\n"


def parse_descriptors(text: str) -> tuple[str, str, list[tuple[int, str, np.ndarray]]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"descriptor document is not valid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "(root)", "descriptor document must be a JSON object")
    for key in ("query_id", "setting", "blocks"):
        _require(key in doc, key, "required key missing")
    out = []
    for i, rec in enumerate(doc["blocks"]):
        where = f"blocks[{i}]"
        _require(isinstance(rec, dict), where, "each block must be an object")
        for key in ("block", "kind", "dim", "vector"):
            _require(key in rec, f"{where}.{key}", "required key missing")
        vec = np.asarray(rec["vector"], dtype=np.float64)
        _require(vec.ndim == 1 and vec.size == rec["dim"], f"{where}.vector", "length must equal 'dim'")
        out.append((int(rec["block"]), str(rec["kind"]), vec))
    return str(doc["query_id"]), str(doc["setting"]), out


# ---------------------------------------------------------------------------
# Report tables: comma-delimited, one '#' metadata line, repr'd floats.


def emit_eval_csv(result: EvalResult) -> str:
    buf = io.StringIO()
    buf.write(f"# iou_min={result.iou_min!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query_id", "precision", "recall"])
    for qid, p, r in zip(result.query_ids, result.precision, result.recall):
        writer.writerow([qid, repr(p), repr(r)])
    writer.writerow(["mean", repr(result.mean_precision), repr(result.mean_recall)])
    return buf.getvalue()


def _split_metadata(text: str, kind: str) -> tuple[dict[str, str], list[list[str]]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise SchemaError(f"{kind} table is missing its '#' metadata line")
    meta = {}
    for part in lines[0][2:].split():
        key, _, value = part.partition("=")
        meta[key] = value
    rows = list(csv.reader(lines[1:]))
    if not rows:
        raise SchemaError(f"{kind} table has no header row")
    return meta, rows


def _meta_float(meta: dict[str, str], key: str, kind: str) -> float:
    if key not in meta:
        raise SchemaError(f"field '{key}': missing from {kind} table metadata")
    try:
        return float(meta[key])
    except ValueError as exc:
        raise SchemaError(f"field '{key}': not a number in {kind} table metadata") from exc


def parse_eval_csv(text: str) -> EvalResult:
    meta, rows = _split_metadata(text, "evaluation")
    iou_min = _meta_float(meta, "iou_min", "evaluation")
    if rows[0] != ["query_id", "precision", "recall"]:
        raise SchemaError(f"field '(header)': unexpected columns {rows[0]}")
    body, mean_row = rows[1:-1], rows[-1]
    if not mean_row or mean_row[0] != "mean":
        raise SchemaError("field '(last row)': evaluation table must end with the mean row")
    try:
        return EvalResult(
            query_ids=tuple(r[0] for r in body),
            precision=tuple(float(r[1]) for r in body),
            recall=tuple(float(r[2]) for r in body),
            mean_precision=float(mean_row[1]),
            mean_recall=float(mean_row[2]),
            iou_min=iou_min,
        )
    except (IndexError, ValueError) as exc:
        raise SchemaError(f"evaluation table row malformed: {exc}") from exc


def _emit_grid_csv(rows: Sequence[tuple[str, EvalResult]], query_ids: Sequence[str], iou_min: float, key: str, extra_meta: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# iou_min={iou_min!r}{extra_meta}\n")
    writer = csv.writer(buf, lineterminator="\n")
    header = [key]
    for qid in query_ids:
        header += [f"{qid}_precision", f"{qid}_recall"]
    header += ["mean_precision", "mean_recall"]
    writer.writerow(header)
    for label, res in rows:
        if res.query_ids != tuple(query_ids):
            raise SchemaError(f"row '{label}' covers queries {res.query_ids}, table covers {tuple(query_ids)}")
        cells = [label]
        for p, r in zip(res.precision, res.recall):
            cells += [repr(p), repr(r)]
        cells += [repr(res.mean_precision), repr(res.mean_recall)]
        writer.writerow(cells)
    return buf.getvalue()


def _parse_grid_csv(text: str, kind: str, key: str) -> tuple[dict[str, str], tuple[str, ...], list[tuple[str, EvalResult]]]:
    meta, rows = _split_metadata(text, kind)
    iou_min = _meta_float(meta, "iou_min", kind)
    header = rows[0]
    if not header or header[0] != key or header[-2:] != ["mean_precision", "mean_recall"]:
        raise SchemaError(f"field '(header)': unexpected columns {header}")
    qcols = header[1:-2]
    if len(qcols) % 2 != 0:
        raise SchemaError(f"field '(header)': query columns must pair precision/recall, got {qcols}")
    query_ids = tuple(c.removesuffix("_precision") for c in qcols[0::2])
    out = []
    for row in rows[1:]:
        try:
            label = row[0]
            values = [float(v) for v in row[1:]]
            out.append(
                (
                    label,
                    EvalResult(
                        query_ids=query_ids,
                        precision=tuple(values[0:-2:2]),
                        recall=tuple(values[1:-2:2]),
                        mean_precision=values[-2],
                        mean_recall=values[-1],
                        iou_min=iou_min,
                    ),
                )
            )
        except (IndexError, ValueError) as exc:
            raise SchemaError(f"{kind} table row malformed: {exc}") from exc
    return meta, query_ids, out


def emit_benchmark_settings_csv(report: BenchmarkReport) -> str:
    return _emit_grid_csv(report.settings, report.query_ids, report.iou_min, "setting")


def emit_benchmark_stages_csv(report: BenchmarkReport) -> str:
    return _emit_grid_csv(
        report.stage_compare, report.query_ids, report.iou_min, "stage",
        extra_meta=f" compare_setting={report.compare_label}",
    )


def parse_benchmark_csv(settings_text: str, stages_text: str) -> BenchmarkReport:
    meta_a, qids_a, settings = _parse_grid_csv(settings_text, "benchmark settings", "setting")
    meta_b, qids_b, stages = _parse_grid_csv(stages_text, "benchmark stages", "stage")
    if qids_a != qids_b:
        raise SchemaError(f"settings table covers {qids_a} but stages table covers {qids_b}")
    if "compare_setting" not in meta_b:
        raise SchemaError("field 'compare_setting': missing from stages table metadata")
    return BenchmarkReport(
        query_ids=qids_a,
        settings=tuple(settings),
        stage_compare=tuple(stages),
        compare_label=meta_b["compare_setting"],
        iou_min=float(meta_a["iou_min"]),
    )


# ---------------------------------------------------------------------------
# Config files: flat "key = value" lines, '#' comments, last key wins.


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise SchemaError(f"config line {lineno} is not 'key = value': {raw!r}")
        out[key.strip()] = value.strip()
    return out


def emit_config(values: Mapping[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# ---------------------------------------------------------------------------
# Rasters: 8-bit RGB PNG/JPEG in, PNG out; 16-bit grayscale score maps.


def load_image(path: str) -> np.ndarray:
    """Read an 8-bit RGB PNG or JPEG as an (H, W, 3) uint8 array."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as exc:
        raise UserInputError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    if img.format not in ("PNG", "JPEG"):
        raise ImageFormatError(f"image {path} is {img.format or 'unknown'}, expected PNG or JPEG")
    if img.mode != "RGB":
        raise ImageFormatError(f"image {path} has mode {img.mode}, expected 8-bit RGB")
    return np.asarray(img, dtype=np.uint8)


def save_image_png(path: str, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a PNG, atomically."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def save_scoremap_png(path: str, values: np.ndarray) -> None:
    """Write a score map as 16-bit grayscale PNG: [0, 1] maps to [0, 65535].

    Values outside [0, 1] (cosines can dip below zero) are clipped.
    """
    if values.ndim != 2:
        raise ImageFormatError(f"score map must be 2-D, got shape {values.shape}")
    scaled = np.round(np.clip(values.astype(np.float64), 0.0, 1.0) * 65535.0).astype("<u2")
    buf = io.BytesIO()
    Image.fromarray(scaled).save(buf, format="PNG")  # uint16 -> mode I;16
    atomic_write_bytes(path, buf.getvalue())
