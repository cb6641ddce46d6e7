"""Human-facing output: text tables, box overlays, and report figures.

Figures are rendered with the Agg backend straight to PNG bytes and written
atomically; nothing here requires a display.
"""

from __future__ import annotations

import io
from collections.abc import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .detection import Detection
from .evaluation import BenchmarkReport, EvalResult
from .formats import atomic_write_bytes

# Box strokes: the highest-scoring detection gets the distinct color.
TOP_COLOR = (230, 40, 40)
BOX_COLOR = (255, 214, 64)


def render_eval_text(result: EvalResult) -> str:
    """Per-query lines plus the mean, e.g. ``q00: precision 1.000 recall 1.000``."""
    lines = [f"matching at IoU >= {result.iou_min:g}"]
    for qid, p, r in zip(result.query_ids, result.precision, result.recall):
        lines.append(f"{qid}: precision {p:.3f} recall {r:.3f}")
    lines.append(f"mean: precision {result.mean_precision:.3f} recall {result.mean_recall:.3f}")
    return "\n".join(lines) + "\n"


def _grid_text(title: str, key_width: int, rows: Sequence[tuple[str, EvalResult]], query_ids: Sequence[str]) -> str:
    cells = ["  ".join([f"{'':<{key_width}}"] + [f"{q:>8}" for q in query_ids] + [f"{'mean':>8}"])]
    for label, res in rows:
        p = "  ".join([f"{label:<{key_width}}"] + [f"{v:>8.3f}" for v in res.precision] + [f"{res.mean_precision:>8.3f}"])
        r = "  ".join([f"{'':<{key_width}}"] + [f"{v:>8.3f}" for v in res.recall] + [f"{res.mean_recall:>8.3f}"])
        cells.append(p + "  precision")
        cells.append(r + "  recall")
    return title + "\n" + "\n".join(cells) + "\n"


def render_benchmark_text(report: BenchmarkReport) -> str:
    """Both benchmark tables: the settings grid and the stage comparison."""
    width = max(7, *(len(label) for label, _ in report.settings))
    parts = [
        _grid_text(f"detection by setting (IoU >= {report.iou_min:g})", width, report.settings, report.query_ids),
        _grid_text(
            f"stage comparison, setting {report.compare_label}", width, report.stage_compare, report.query_ids
        ),
    ]
    return "\n".join(parts)


def draw_overlay(target: np.ndarray, detections: Sequence[Detection], stroke: int = 3) -> np.ndarray:
    """Copy of the target with solid 3-px detection rectangles and score labels.

    The highest-scoring box is drawn in the distinct stroke color so it can
    be picked out when several detections land near each other.
    """
    if target.ndim != 3 or target.shape[2] != 3:
        raise ValueError(f"overlay needs an (H, W, 3) image, got {target.shape}")
    out = target.astype(np.uint8).copy()
    height, width = out.shape[:2]
    if not detections:
        return out
    top = max(range(len(detections)), key=lambda i: detections[i].score)
    # Paint plain boxes first so the top box is never painted over.
    order = [i for i in range(len(detections)) if i != top] + [top]
    for i in order:
        x, y, w, h = detections[i].box
        color = TOP_COLOR if i == top else BOX_COLOR
        x0, y0 = max(0, x), max(0, y)
        x1, y1 = min(width, x + w), min(height, y + h)
        if x0 >= x1 or y0 >= y1:
            continue
        t = stroke
        out[y0:min(y1, y0 + t), x0:x1] = color
        out[max(y0, y1 - t):y1, x0:x1] = color
        out[y0:y1, x0:min(x1, x0 + t)] = color
        out[y0:y1, max(x0, x1 - t):x1] = color
    img = Image.fromarray(out, mode="RGB")
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    for i in order:
        x, y, w, h = detections[i].box
        color = TOP_COLOR if i == top else BOX_COLOR
        tx = min(max(0, x + stroke + 1), max(0, width - 40))
        ty = min(max(0, y + stroke + 1), max(0, height - 12))
        draw.text((tx, ty), f"{detections[i].score:.3f}", fill=color, font=font)
    return np.asarray(img, dtype=np.uint8)


def _save_figure(fig, path: str) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def save_eval_figure(result: EvalResult, path: str) -> None:
    """Per-query precision/recall bars with the means as horizontal lines."""
    n = len(result.query_ids)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * n + 2.0), 3.2))
    pos = np.arange(n)
    ax.bar(pos - 0.18, result.precision, width=0.36, label="precision", color="#3465a4")
    ax.bar(pos + 0.18, result.recall, width=0.36, label="recall", color="#e9b44c")
    ax.axhline(result.mean_precision, color="#3465a4", linestyle=":", linewidth=1)
    ax.axhline(result.mean_recall, color="#e9b44c", linestyle=":", linewidth=1)
    ax.set_xticks(pos, result.query_ids)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"detection quality at IoU >= {result.iou_min:g}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save_figure(fig, path)


def _grid_figure(rows: Sequence[tuple[str, EvalResult]], title: str, path: str) -> None:
    labels = [label for label, _ in rows]
    pos = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2.0), 3.2))
    ax.bar(pos - 0.18, [r.mean_precision for _, r in rows], width=0.36, label="mean precision", color="#3465a4")
    ax.bar(pos + 0.18, [r.mean_recall for _, r in rows], width=0.36, label="mean recall", color="#e9b44c")
    ax.set_xticks(pos, labels)
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save_figure(fig, path)


def save_benchmark_figures(report: BenchmarkReport, settings_path: str, stages_path: str) -> None:
    """One bar chart per benchmark table, mean precision/recall per row."""
    _grid_figure(report.settings, f"settings, IoU >= {report.iou_min:g}", settings_path)
    _grid_figure(
        report.stage_compare,
        f"stage comparison, setting {report.compare_label}",
        stages_path,
    )
