"""End-to-end dataset construction: alignment, gating, mask annotation, manifest, split.

The manifest is JSON-lines with one record per pair; records are appended as
pairs finish (checkpoint for resume) and the file is rewritten sorted by
pair_id once the run completes. Timestamps and stage timings are the only
fields excluded from determinism comparisons.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .alignment import AlignmentConfig, AlignmentError, AlignmentStats, align_pair
from .imagecore import (
    DecodeError,
    ForgemaskError,
    ImageBuffer,
    ParameterError,
    decode_image,
    encode_image,
)
from .semanticmask import (
    MASK_SIZE,
    BuiltinFeatureSource,
    DegenerateHistogramError,
    EditMask,
    FeatureFormatError,
    MaskStats,
    binarize,
    cosine_similarity_map,
    otsu_threshold,
    resize_mask,
)

DEFAULT_SPLIT_RATIO = 0.95
_STAGES = ("alignment", "features", "similarity_threshold", "io")


class PipelineError(ForgemaskError):
    """A whole-run problem (unreadable listing, malformed manifest)."""


@dataclass(frozen=True)
class QualityGateConfig:
    """Rejection thresholds: fewer than min keypoints/matches, or ratio below the floor."""

    min_keypoints: int = 10
    min_matches: int = 10
    min_inlier_ratio: float = 0.60

    def __post_init__(self) -> None:
        if self.min_keypoints < 1 or self.min_matches < 1:
            raise ParameterError("gate thresholds must be positive")
        if not 0.0 < self.min_inlier_ratio <= 1.0:
            raise ParameterError(
                f"min_inlier_ratio must lie in (0, 1], got {self.min_inlier_ratio}"
            )


@dataclass(frozen=True)
class GateVerdict:
    accepted: bool
    reason: str | None = None


def quality_gate(stats: AlignmentStats, cfg: QualityGateConfig) -> GateVerdict:
    """First violated criterion wins, checked in order: keypoints, matches, inlier ratio.

    A ratio exactly at the floor is accepted ("below 60%" rejects only strictly
    smaller values).
    """
    if (
        stats.keypoints_original < cfg.min_keypoints
        or stats.keypoints_edited < cfg.min_keypoints
    ):
        return GateVerdict(False, "keypoints")
    if stats.match_count < cfg.min_matches:
        return GateVerdict(False, "matches")
    if stats.inlier_ratio < cfg.min_inlier_ratio:
        return GateVerdict(False, "inlier_ratio")
    return GateVerdict(True)


@dataclass(frozen=True)
class PipelineConfig:
    gate: QualityGateConfig = field(default_factory=QualityGateConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    bins: int = 256
    mask_size: int = MASK_SIZE
    workers: int = 1
    # Maps pair_id -> feature source; lets precomputed feature files vary per pair.
    feature_factory: Callable[[str], object] = field(
        default_factory=lambda: (lambda pair_id: BuiltinFeatureSource())
    )

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ParameterError(f"workers must be positive, got {self.workers}")


@dataclass(frozen=True)
class AnnotationRecord:
    pair_id: str
    original_path: str
    edited_path: str
    editing_task: str
    verdict: str  # accepted | rejected(<gate reason>) | failed(<stage>)
    split: str = "none"
    alignment: dict | None = None
    mask: dict | None = None
    tool_version: str = __version__
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "original_path": self.original_path,
            "edited_path": self.edited_path,
            "editing_task": self.editing_task,
            "verdict": self.verdict,
            "split": self.split,
            "alignment": self.alignment,
            "mask": self.mask,
            "tool_version": self.tool_version,
            "seeds": self.seeds,
            "timings": self.timings,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AnnotationRecord:
        try:
            return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})
        except TypeError as exc:
            raise PipelineError(f"malformed manifest record: {exc}") from exc

    def accepted(self) -> bool:
        return self.verdict == "accepted"


@dataclass(frozen=True)
class DatasetManifest:
    records: list[AnnotationRecord]
    config: dict
    summary: dict


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def annotate_pair(
    original_path: str | Path,
    edited_path: str | Path,
    cfg: PipelineConfig | None = None,
    *,
    pair_id: str | None = None,
    editing_task: str = "unknown",
    mask_dir: str | Path | None = None,
) -> AnnotationRecord:
    """Run one pair through alignment, the quality gate, and mask annotation.

    Failures never abort: the verdict records the first failing stage. The mask
    PNG (0/255 grayscale) is written only for accepted pairs and only when a
    mask_dir is supplied.
    """
    cfg = cfg or PipelineConfig()
    pid = pair_id if pair_id is not None else Path(original_path).stem
    timings = {s: 0.0 for s in _STAGES}
    base = dict(
        pair_id=pid,
        original_path=str(original_path),
        edited_path=str(edited_path),
        editing_task=editing_task,
        seeds={"alignment": cfg.alignment.seed},
        timings=timings,
        timestamp=_now(),
    )

    t0 = time.perf_counter()
    try:
        original = decode_image(Path(original_path).read_bytes())
        edited = decode_image(Path(edited_path).read_bytes())
    except (DecodeError, OSError):
        timings["io"] += time.perf_counter() - t0
        return AnnotationRecord(verdict="failed(io)", **base)
    timings["io"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        aligned_orig, aligned_edit, stats = align_pair(original, edited, cfg.alignment)
    except AlignmentError as exc:
        timings["alignment"] += time.perf_counter() - t0
        return AnnotationRecord(verdict=f"failed(alignment: {exc.stage})", **base)
    timings["alignment"] += time.perf_counter() - t0
    base["alignment"] = stats.to_dict()

    gate = quality_gate(stats, cfg.gate)
    if not gate.accepted:
        return AnnotationRecord(verdict=f"rejected({gate.reason})", **base)

    source = cfg.feature_factory(pid)
    t0 = time.perf_counter()
    try:
        fa = source.features_for(aligned_orig, "original")
        fb = source.features_for(aligned_edit, "edited")
    except (ParameterError, FeatureFormatError, OSError):
        timings["features"] += time.perf_counter() - t0
        return AnnotationRecord(verdict="failed(annotation: features)", **base)
    timings["features"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        sim = cosine_similarity_map(fa, fb)
        threshold = otsu_threshold(sim, cfg.bins)
    except DegenerateHistogramError:
        timings["similarity_threshold"] += time.perf_counter() - t0
        return AnnotationRecord(verdict="failed(annotation: degenerate histogram)", **base)
    except ParameterError:
        timings["similarity_threshold"] += time.perf_counter() - t0
        return AnnotationRecord(verdict="failed(annotation: similarity)", **base)
    mask = resize_mask(binarize(sim, threshold), cfg.mask_size, cfg.mask_size)
    timings["similarity_threshold"] += time.perf_counter() - t0

    base["mask"] = MaskStats(
        threshold=threshold,
        edited_fraction=mask.edited_fraction(),
        feature_source=source.describe(),
    ).to_dict()

    if mask_dir is not None:
        t0 = time.perf_counter()
        out = Path(mask_dir)
        out.mkdir(parents=True, exist_ok=True)
        png = encode_image(ImageBuffer.from_array(mask.bits * np.uint8(255)))
        (out / f"{pid}.png").write_bytes(png)
        timings["io"] += time.perf_counter() - t0

    return AnnotationRecord(verdict="accepted", **base)


@dataclass(frozen=True)
class _ListingRow:
    pair_id: str
    original_path: str
    edited_path: str
    editing_task: str


_LISTING_COLUMNS = ("pair_id", "original_path", "edited_path", "editing_task")


def _read_listing(path: str | Path) -> list[_ListingRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in _LISTING_COLUMNS if c not in header]
            if missing:
                raise PipelineError(f"listing {path} lacks columns: {', '.join(missing)}")
            rows = [
                _ListingRow(
                    pair_id=r["pair_id"].strip(),
                    original_path=r["original_path"].strip(),
                    edited_path=r["edited_path"].strip(),
                    editing_task=r["editing_task"].strip(),
                )
                for r in reader
            ]
    except OSError as exc:
        raise PipelineError(f"cannot read listing {path}: {exc}") from exc
    seen: set[str] = set()
    for row in rows:
        if not row.pair_id:
            raise PipelineError("listing contains an empty pair_id")
        if row.pair_id in seen:
            raise PipelineError(f"duplicate pair_id {row.pair_id!r} in listing")
        seen.add(row.pair_id)
    return rows


def load_manifest(path: str | Path) -> list[AnnotationRecord]:
    """Parse a manifest.jsonl back into records."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(AnnotationRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise PipelineError(f"manifest {path} line {i} is not valid JSON: {exc}") from exc
    return records


def _append_record(path: Path, record: AnnotationRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record.to_dict()) + "\n")


def _assign_splits(
    records: list[AnnotationRecord], split_ratio: float, seed: int
) -> list[AnnotationRecord]:
    accepted = [r for r in records if r.accepted()]  # records arrive sorted by pair_id
    perm = np.random.default_rng(seed).permutation(len(accepted))
    n_train = round(len(accepted) * split_ratio)
    train_ids = {accepted[int(i)].pair_id for i in perm[:n_train]}
    out = []
    for r in records:
        if not r.accepted():
            out.append(replace(r, split="none"))
        else:
            out.append(replace(r, split="train" if r.pair_id in train_ids else "test"))
    return out


def _summarize(records: list[AnnotationRecord], split_ratio: float, seed: int) -> dict:
    verdicts = {"accepted": 0, "rejected": 0, "failed": 0}
    reasons: dict[str, int] = {}
    tasks: dict[str, dict[str, int]] = {}
    splits = {"train": 0, "test": 0, "none": 0}
    for r in records:
        kind = r.verdict.split("(")[0]
        verdicts[kind] += 1
        if kind != "accepted":
            detail = r.verdict[len(kind) + 1 : -1]
            reasons[detail] = reasons.get(detail, 0) + 1
        task = tasks.setdefault(r.editing_task, {"accepted": 0, "rejected": 0, "failed": 0})
        task[kind] += 1
        splits[r.split] += 1
    return {
        "pairs": len(records),
        "verdicts": verdicts,
        "reasons": dict(sorted(reasons.items())),
        "editing_tasks": dict(sorted(tasks.items())),
        "splits": splits,
        "split_ratio": split_ratio,
        "split_seed": seed,
        "tool_version": __version__,
    }


def _format_summary(summary: dict) -> str:
    v = summary["verdicts"]
    lines = [
        f"pairs processed: {summary['pairs']}",
        f"accepted {v['accepted']} / rejected {v['rejected']} / failed {v['failed']}",
    ]
    for reason, count in summary["reasons"].items():
        lines.append(f"  {reason}: {count}")
    s = summary["splits"]
    lines.append(f"split: {s['train']} train / {s['test']} test (ratio {summary['split_ratio']})")
    for task, counts in summary["editing_tasks"].items():
        lines.append(
            f"  task {task}: {counts['accepted']} accepted, "
            f"{counts['rejected']} rejected, {counts['failed']} failed"
        )
    return "\n".join(lines)


def build_dataset(
    listing_path: str | Path,
    out_dir: str | Path,
    cfg: PipelineConfig | None = None,
    split_ratio: float = DEFAULT_SPLIT_RATIO,
    seed: int = 0,
) -> DatasetManifest:
    """Process every listed pair, persist masks + manifest.jsonl + summary.json.

    Pairs already present in an existing manifest are not re-processed (resume
    by pair_id). Splits are recomputed over the full record set every run, so a
    resumed run ends with the same assignment a fresh one would.
    """
    cfg = cfg or PipelineConfig()
    if not 0.0 < split_ratio <= 1.0:
        raise ParameterError(f"split_ratio must lie in (0, 1], got {split_ratio}")
    rows = _read_listing(listing_path)
    out = Path(out_dir)
    mask_dir = out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"

    listed_ids = {row.pair_id for row in rows}
    records: dict[str, AnnotationRecord] = {}
    if manifest_path.exists():
        for rec in load_manifest(manifest_path):
            if rec.pair_id in listed_ids:
                records[rec.pair_id] = rec
    pending = [row for row in rows if row.pair_id not in records]

    def work(row: _ListingRow) -> AnnotationRecord:
        return annotate_pair(
            row.original_path,
            row.edited_path,
            cfg,
            pair_id=row.pair_id,
            editing_task=row.editing_task,
            mask_dir=mask_dir,
        )

    if cfg.workers == 1:
        for row in pending:
            rec = work(row)
            records[rec.pair_id] = rec
            _append_record(manifest_path, rec)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(work, row) for row in pending]
            for fut in as_completed(futures):
                rec = fut.result()
                records[rec.pair_id] = rec
                _append_record(manifest_path, rec)

    ordered = _assign_splits([records[pid] for pid in sorted(records)], split_ratio, seed)
    with open(manifest_path, "w") as fh:
        for rec in ordered:
            fh.write(json.dumps(rec.to_dict()) + "\n")

    summary = _summarize(ordered, split_ratio, seed)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(_format_summary(summary))

    config_snapshot = {
        "gate": {
            "min_keypoints": cfg.gate.min_keypoints,
            "min_matches": cfg.gate.min_matches,
            "min_inlier_ratio": cfg.gate.min_inlier_ratio,
        },
        "alignment_seed": cfg.alignment.seed,
        "bins": cfg.bins,
        "mask_size": cfg.mask_size,
        "workers": cfg.workers,
        "split_ratio": split_ratio,
        "split_seed": seed,
    }
    return DatasetManifest(records=ordered, config=config_snapshot, summary=summary)


def manifest_fingerprint(path: str | Path) -> str:
    """SHA-256 over the manifest with timestamps and timings stripped.

    Two runs over the same inputs and seeds must agree on this value even
    though wall-clock fields differ.
    """
    digest = hashlib.sha256()
    for rec in load_manifest(Path(path)):
        d = rec.to_dict()
        d.pop("timestamp", None)
        d.pop("timings", None)
        digest.update(json.dumps(d, sort_keys=True).encode())
        digest.update(b"\n")
    return digest.hexdigest()


@dataclass(frozen=True)
class ProfileReport:
    percentages: dict[str, float]
    total_seconds: float
    partial: bool


def profile_run(manifest: DatasetManifest | list[AnnotationRecord]) -> ProfileReport:
    """Share of total wall time per stage across all records."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    totals = {s: 0.0 for s in _STAGES}
    partial = False
    for rec in records:
        timings = rec.timings or {}
        for stage in _STAGES:
            if stage in timings:
                totals[stage] += float(timings[stage])
            else:
                partial = True
    grand = sum(totals.values())
    if grand <= 0.0:
        return ProfileReport(percentages={s: 0.0 for s in _STAGES}, total_seconds=0.0, partial=True)
    pct = {s: 100.0 * t / grand for s, t in totals.items()}
    return ProfileReport(percentages=pct, total_seconds=grand, partial=partial)
