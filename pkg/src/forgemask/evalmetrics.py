"""Pixel-level forged-class metrics and the JPEG/crop robustness sweep harness."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .imagecore import ForgemaskError, ImageBuffer, ParameterError, Rect, crop, jpeg_reencode
from .semanticmask import EditMask, resize_mask

_CROP_ATTEMPTS = 32


class PerturbationError(ForgemaskError):
    """A perturbation could not produce a usable (image, mask) pair."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel confusion counts with forged as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError(f"counts must be nonnegative, got {self}")

    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    f1: float
    iou: float
    precision: float
    recall: float
    counts: ConfusionCounts
    mode: str = "single"


def _from_counts(c: ConfusionCounts, mode: str) -> MetricReport:
    # Zero denominators yield 0 so aggregation never sees NaN.
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = c.tp / (c.tp + c.fp + c.fn) if c.tp + c.fp + c.fn else 0.0
    return MetricReport(f1=f1, iou=iou, precision=precision, recall=recall, counts=c, mode=mode)


def score_masks(pred: EditMask, truth: EditMask) -> MetricReport:
    """Exact confusion counts and derived metrics for one predicted/truth pair."""
    if (pred.width, pred.height) != (truth.width, truth.height):
        raise ParameterError(
            f"mask dims differ: pred {pred.width}x{pred.height} vs truth {truth.width}x{truth.height}"
        )
    pb = pred.bits.astype(bool)
    tb = truth.bits.astype(bool)
    counts = ConfusionCounts(
        tp=int((pb & tb).sum()),
        fp=int((pb & ~tb).sum()),
        fn=int((~pb & tb).sum()),
        tn=int((~pb & ~tb).sum()),
    )
    return _from_counts(counts, "single")


def aggregate(reports: Sequence[MetricReport], mode: str) -> MetricReport:
    """macro: unweighted mean of each metric. micro: metrics recomputed from summed counts."""
    if not reports:
        raise ParameterError("cannot aggregate an empty report list")
    summed = ConfusionCounts(
        tp=sum(r.counts.tp for r in reports),
        fp=sum(r.counts.fp for r in reports),
        fn=sum(r.counts.fn for r in reports),
        tn=sum(r.counts.tn for r in reports),
    )
    if mode == "micro":
        return _from_counts(summed, "micro")
    if mode == "macro":
        n = len(reports)
        return MetricReport(
            f1=sum(r.f1 for r in reports) / n,
            iou=sum(r.iou for r in reports) / n,
            precision=sum(r.precision for r in reports) / n,
            recall=sum(r.recall for r in reports) / n,
            counts=summed,
            mode="macro",
        )
    raise ParameterError(f"mode must be 'macro' or 'micro', got {mode!r}")


def perturb_jpeg(img: ImageBuffer, quality: int) -> ImageBuffer:
    return jpeg_reencode(img, quality)


def perturb_crop(
    img: ImageBuffer, mask: EditMask, fraction: float, seed: int
) -> tuple[ImageBuffer, EditMask]:
    """Remove `fraction` of the area via a uniformly placed aspect-preserving window.

    The mask is cropped with the geometrically corresponding window. Windows
    that would drop either mask class entirely are resampled; after 32 failed
    attempts the perturbation is reported as infeasible.
    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction must lie in (0, 1), got {fraction}")
    scale = math.sqrt(1.0 - fraction)
    win_w = int(math.floor(scale * img.width + 1e-9))
    win_h = int(math.floor(scale * img.height + 1e-9))
    if win_w < 1 or win_h < 1:
        raise PerturbationError(
            f"crop window collapses to {win_w}x{win_h} at fraction {fraction}"
        )
    mw = max(1, int(round(win_w * mask.width / img.width)))
    mh = max(1, int(round(win_h * mask.height / img.height)))
    rng = np.random.default_rng(seed)
    for _ in range(_CROP_ATTEMPTS):
        x0 = int(rng.integers(0, img.width - win_w + 1))
        y0 = int(rng.integers(0, img.height - win_h + 1))
        mx0 = min(int(round(x0 * mask.width / img.width)), mask.width - mw)
        my0 = min(int(round(y0 * mask.height / img.height)), mask.height - mh)
        sub = mask.bits[my0 : my0 + mh, mx0 : mx0 + mw]
        if sub.any() and not sub.all():
            return crop(img, Rect(x0, y0, win_w, win_h)), EditMask.from_array(sub)
    raise PerturbationError(
        f"no window of fraction {fraction} kept both mask classes in {_CROP_ATTEMPTS} attempts"
    )


@dataclass(frozen=True, eq=False)
class EvalItem:
    """One dataset entry handed to the sweep: edited image plus its truth mask."""

    pair_id: str
    image: ImageBuffer
    truth: EditMask


@dataclass(frozen=True, eq=False)
class PerturbedItem:
    pair_id: str
    setting: str
    image: ImageBuffer
    truth: EditMask


@dataclass(frozen=True)
class PerturbSetting:
    label: str
    jpeg_quality: int | None = None
    crop_fraction: float | None = None


DEFAULT_GRID: tuple[PerturbSetting, ...] = (
    PerturbSetting("jpeg90", jpeg_quality=90),
    PerturbSetting("jpeg80", jpeg_quality=80),
    PerturbSetting("jpeg70", jpeg_quality=70),
    PerturbSetting("jpeg60", jpeg_quality=60),
    PerturbSetting("crop10", crop_fraction=0.10),
    PerturbSetting("crop20", crop_fraction=0.20),
    PerturbSetting("crop30", crop_fraction=0.30),
    PerturbSetting("crop40", crop_fraction=0.40),
    PerturbSetting("jpeg80+crop20", jpeg_quality=80, crop_fraction=0.20),
)


@dataclass(frozen=True)
class SweepRow:
    setting: str
    report: MetricReport
    n_items: int
    complete: bool


def _cell_seed(seed: int, label: str, pair_id: str) -> int:
    digest = hashlib.blake2s(f"{seed}|{label}|{pair_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _apply_setting(
    item: EvalItem, setting: PerturbSetting, cell_seed: int
) -> tuple[ImageBuffer, EditMask]:
    img, mask = item.image, item.truth
    if setting.jpeg_quality is not None:
        img = perturb_jpeg(img, setting.jpeg_quality)
    if setting.crop_fraction is not None:
        img, mask = perturb_crop(img, mask, setting.crop_fraction, cell_seed)
    return img, mask


def robustness_sweep(
    items: Sequence[EvalItem],
    predictor: Callable[[PerturbedItem], EditMask],
    grid: Sequence[PerturbSetting] | None = None,
    seed: int = 0,
) -> list[SweepRow]:
    """One micro-aggregated row per perturbation setting.

    Items where the perturbation or the predictor fails are skipped; the row
    stays in the output with complete=False and a reduced n_items.
    """
    if not items:
        raise ParameterError("sweep needs at least one item")
    grid = DEFAULT_GRID if grid is None else tuple(grid)
    rows: list[SweepRow] = []
    for setting in grid:
        reports: list[MetricReport] = []
        failures = 0
        for item in items:
            try:
                pimg, ptruth = _apply_setting(item, setting, _cell_seed(seed, setting.label, item.pair_id))
                pred = predictor(PerturbedItem(item.pair_id, setting.label, pimg, ptruth))
                if (pred.width, pred.height) != (ptruth.width, ptruth.height):
                    pred = resize_mask(pred, ptruth.width, ptruth.height)
                reports.append(score_masks(pred, ptruth))
            except Exception:
                # External predictors may raise anything; one bad cell must not
                # sink the run.
                failures += 1
        if reports:
            agg = aggregate(reports, "micro")
        else:
            agg = _from_counts(ConfusionCounts(0, 0, 0, 0), "micro")
        rows.append(
            SweepRow(setting=setting.label, report=agg, n_items=len(reports), complete=failures == 0)
        )
    return rows


SWEEP_CSV_COLUMNS = ("setting", "f1", "iou", "precision", "recall", "tp", "fp", "fn", "tn", "n_items")


def write_sweep_csv(rows: Iterable[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for row in rows:
            r = row.report
            writer.writerow(
                [
                    row.setting,
                    f"{r.f1:.6f}",
                    f"{r.iou:.6f}",
                    f"{r.precision:.6f}",
                    f"{r.recall:.6f}",
                    r.counts.tp,
                    r.counts.fp,
                    r.counts.fn,
                    r.counts.tn,
                    row.n_items,
                ]
            )
