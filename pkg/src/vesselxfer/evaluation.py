"""Pixel metrics, per-method reports and qualitative comparison grids."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from PIL import Image

METRICS = ("accuracy", "precision", "recall", "dice")
FIGURE_METHOD_ORDER = ("frangi", "classic_unet", "add_unet", "scgan")


def _as_bool(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0/1)")
    return m.astype(bool)


def confusion(pred, truth) -> tuple[int, int, int, int]:
    """Pixel counts (tp, fp, fn, tn)."""
    p = _as_bool(pred)
    t = _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, dice).

    An undefined ratio scores 1.0 when prediction and truth are both empty and
    0.0 otherwise.
    """
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("confusion counts must be non-negative")
    total = tp + fp + fn + tn
    both_empty = tp + fp + fn == 0

    def ratio(num, den):
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    accuracy = ratio(tp + tn, total)
    return accuracy, ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(2 * tp, 2 * tp + fp + fn)


def binarize_prediction(logits, threshold: float = 0.5) -> np.ndarray:
    """Mask of pixels whose sigmoid probability exceeds ``threshold``."""
    z = np.asarray(logits, dtype=float)
    if threshold == 0.5:
        return (z > 0).astype(np.uint8)
    # sigmoid(z) > t  <=>  z > logit(t)
    if threshold <= 0:
        return np.ones(z.shape, dtype=np.uint8)
    if threshold >= 1:
        return np.zeros(z.shape, dtype=np.uint8)
    return (z > math.log(threshold / (1 - threshold))).astype(np.uint8)


@dataclass
class MetricsReport:
    method: str
    per_image: list[tuple[str, float, float, float, float]] = field(default_factory=list)
    config_hash: str = ""

    def column(self, metric: str) -> np.ndarray:
        i = METRICS.index(metric) + 1
        return np.array([row[i] for row in self.per_image], dtype=float)

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and population standard deviation of every metric."""
        out = {}
        for m in METRICS:
            col = self.column(m)
            out[m] = (float(col.mean()), float(col.std())) if col.size else (math.nan, math.nan)
        return out

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "id", *METRICS])
        for row in self.per_image:
            w.writerow([self.method, row[0], *(repr(float(v)) for v in row[1:])])
        buf.write("\n")
        w.writerow(["method", "statistic", *METRICS])
        agg = self.aggregate
        w.writerow([self.method, "mean", *(repr(agg[m][0]) for m in METRICS)])
        w.writerow([self.method, "std", *(repr(agg[m][1]) for m in METRICS)])
        if self.config_hash:
            w.writerow(["# config_hash", self.config_hash])
        return buf.getvalue()

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        lines = text.splitlines()
        rows = list(csv.reader(lines))
        report = None
        for row in rows[1:]:
            if not row:
                break
            if report is None:
                report = cls(method=row[0])
            report.per_image.append((row[1], *(float(v) for v in row[2:6])))
        for row in rows:
            if row and row[0] == "# config_hash":
                if report is not None:
                    report.config_hash = row[1]
        return report if report is not None else cls(method="")


def evaluate_method(
    method: str,
    segment: Callable[[np.ndarray], np.ndarray],
    test_set: Iterable[tuple[str, np.ndarray, np.ndarray | None]],
    config_hash: str = "",
) -> MetricsReport:
    """Run ``segment`` (image -> binary mask) over ``(id, image, truth)`` items."""
    report = MetricsReport(method=method, config_hash=config_hash)
    for item_id, image, truth in test_set:
        if truth is None:
            raise ValueError(f"test item {item_id!r} has no ground-truth mask")
        pred = segment(image)
        report.per_image.append((str(item_id), *metrics_from_confusion(*confusion(pred, truth))))
    return report


def summary_table(reports: list[MetricsReport]) -> str:
    """Methods as rows, ``mean+-std`` for each metric as columns."""
    lines = ["method," + ",".join(METRICS)]
    for rep in reports:
        agg = rep.aggregate
        cells = [f"{agg[m][0]:.3f}+-{agg[m][1]:.3f}" for m in METRICS]
        lines.append(rep.method + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def _tile(img: np.ndarray, tile: int, nearest: bool) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if a.max() > 1.0:
        a = a / 255.0
    pil = Image.fromarray(np.rint(np.clip(a, 0, 1) * 255).astype(np.uint8))
    return np.asarray(pil.resize((tile, tile), Image.NEAREST if nearest else Image.BILINEAR))


def emit_comparison_figure(
    items: list[tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]],
    out: Path | str,
    tile: int = 128,
    pad: int = 0,
) -> Path:
    """Grid with one row per image: original, each method's mask, ground truth.

    Method columns follow ``FIGURE_METHOD_ORDER`` where names match, then any
    others alphabetically. The image is ``rows * tile`` by ``cols * tile``
    pixels when ``pad`` is 0.
    """
    if not items:
        raise ValueError("emit_comparison_figure needs at least one item")
    names = list(items[0][1])
    ordered = [m for m in FIGURE_METHOD_ORDER if m in names]
    ordered += sorted(m for m in names if m not in ordered)
    cols = len(ordered) + 2
    rows = len(items)
    h = rows * tile + (rows - 1) * pad
    w = cols * tile + (cols - 1) * pad
    canvas = np.full((h, w), 255, dtype=np.uint8)
    for r, (orig, masks, truth) in enumerate(items):
        tiles = [orig] + [np.asarray(masks[m], dtype=float) for m in ordered] + [np.asarray(truth, dtype=float)]
        for c, t in enumerate(tiles):
            y, x = r * (tile + pad), c * (tile + pad)
            canvas[y : y + tile, x : x + tile] = _tile(t, tile, nearest=c > 0)
    out = Path(out)
    try:
        Image.fromarray(canvas).save(out, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write figure {out}: {exc}") from exc
    return out
