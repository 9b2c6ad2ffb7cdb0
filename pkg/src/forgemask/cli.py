"""Command-line front end: align, annotate, loss, eval, sweep, build."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AlignmentConfig, align_pair
from .evalmetrics import DEFAULT_GRID, EvalItem, aggregate, robustness_sweep, score_masks, write_sweep_csv
from .imagecore import ForgemaskError, ImageBuffer, ParameterError, decode_image, encode_image
from .losses import (
    DEFAULT_CAP,
    DEFAULT_TAU,
    MaskPair,
    contrastive_loss,
    dice_loss,
    focal_loss,
    sample_pixels,
    total_loss,
)
from .pipeline import PipelineConfig, QualityGateConfig, build_dataset, load_manifest
from .semanticmask import (
    BuiltinFeatureSource,
    EditMask,
    FileFeatureSource,
    MaskConfig,
    annotate_masks,
    load_feature_file,
    resize_mask,
)


def _read_image(path: str | Path) -> ImageBuffer:
    return decode_image(Path(path).read_bytes())


def _read_mask(path: str | Path) -> EditMask:
    img = _read_image(path)
    return EditMask.from_array(img.plane() != 0)


def _write_mask_png(mask: EditMask, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    png = encode_image(ImageBuffer.from_array(mask.bits * np.uint8(255)))
    Path(path).write_bytes(png)


def _cmd_align(args: argparse.Namespace) -> int:
    original = _read_image(args.original)
    edited = _read_image(args.edited)
    cfg = AlignmentConfig(
        ratio=args.ratio,
        ransac_iterations=args.ransac_iters,
        reproj_threshold=args.reproj_px,
        seed=args.seed,
    )
    aligned_orig, aligned_edit, stats = align_pair(original, edited, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aligned_original.png").write_bytes(encode_image(aligned_orig))
    (out / "aligned_edited.png").write_bytes(encode_image(aligned_edit))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


def _cmd_annotate(args: argparse.Namespace) -> int:
    if (args.features_a is None) != (args.features_b is None):
        raise ParameterError("--features-a and --features-b must be given together")
    if args.features_a is None and not args.builtin_features:
        raise ParameterError("choose --builtin-features or --features-a/--features-b")
    original = _read_image(args.original)
    edited = _read_image(args.edited)
    aligned_orig, aligned_edit, stats = align_pair(original, edited, AlignmentConfig())
    if args.features_a is not None:
        source = FileFeatureSource(args.features_a, args.features_b)
    else:
        source = BuiltinFeatureSource(args.patch)
    mask, mask_stats = annotate_masks(aligned_orig, aligned_edit, source, MaskConfig())
    _write_mask_png(mask, args.mask_out)
    print(json.dumps({"alignment": stats.to_dict(), "mask": mask_stats.to_dict()}, indent=2))
    return 0


def _cmd_loss(args: argparse.Namespace) -> int:
    features = load_feature_file(args.features)
    truth = _read_mask(args.mask)
    grid_mask = truth
    if (truth.width, truth.height) != (features.grid_w, features.grid_h):
        grid_mask = resize_mask(truth, features.grid_w, features.grid_h)
    pixels = sample_pixels(features, grid_mask, cap=args.cap, seed=args.seed, tau=args.tau)
    lc = contrastive_loss(pixels)

    if args.pred is None:
        pred = truth.bits.astype(np.float64)
    elif args.pred.endswith(".npy"):
        pred = np.load(args.pred).astype(np.float64)
        if pred.shape != (truth.height, truth.width):
            raise ParameterError(
                f"prediction shape {pred.shape} does not match mask {truth.height}x{truth.width}"
            )
    else:
        pred_mask = _read_mask(args.pred)
        if (pred_mask.width, pred_mask.height) != (truth.width, truth.height):
            pred_mask = resize_mask(pred_mask, truth.width, truth.height)
        pred = pred_mask.bits.astype(np.float64)

    pair = MaskPair(predicted=pred, truth=truth.bits)
    ld = dice_loss(pair)
    lf = focal_loss(pair)
    print(
        json.dumps(
            {
                "contrastive": lc,
                "dice": ld,
                "focal": lf,
                "total": total_loss(lc, ld, lf),
            }
        )
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    truth_dir = Path(args.truth_dir)
    pred_dir = Path(args.pred_dir)
    truth_files = sorted(truth_dir.glob("*.png"))
    if not truth_files:
        raise ParameterError(f"no .png masks found in {truth_dir}")
    reports = []
    for tf in truth_files:
        pf = pred_dir / tf.name
        if not pf.exists():
            raise ParameterError(f"prediction missing for {tf.name} in {pred_dir}")
        truth = _read_mask(tf)
        pred = _read_mask(pf)
        if (pred.width, pred.height) != (truth.width, truth.height):
            pred = resize_mask(pred, truth.width, truth.height)
        reports.append(score_masks(pred, truth))
    agg = aggregate(reports, args.aggregate)
    print(
        json.dumps(
            {
                "mode": agg.mode,
                "n_pairs": len(reports),
                "f1": agg.f1,
                "iou": agg.iou,
                "precision": agg.precision,
                "recall": agg.recall,
                "counts": {
                    "tp": agg.counts.tp,
                    "fp": agg.counts.fp,
                    "fn": agg.counts.fn,
                    "tn": agg.counts.tn,
                },
            },
            indent=2,
        )
    )
    return 0


def _external_predictor(template: str):
    def predict(item):
        with tempfile.TemporaryDirectory(prefix="forgemask-sweep-") as td:
            img_path = Path(td) / "input.png"
            out_path = Path(td) / "pred.png"
            img_path.write_bytes(encode_image(item.image))
            cmd = template.replace("{image}", str(img_path)).replace("{out}", str(out_path))
            subprocess.run(cmd, shell=True, check=True, capture_output=True)
            return _read_mask(out_path)

    return predict


def _cmd_sweep(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    records = load_manifest(manifest_path)
    mask_dir = manifest_path.parent / "masks"
    items = []
    for rec in records:
        if not rec.accepted():
            continue
        mask_file = mask_dir / f"{rec.pair_id}.png"
        items.append(
            EvalItem(
                pair_id=rec.pair_id,
                image=_read_image(rec.edited_path),
                truth=_read_mask(mask_file),
            )
        )
    if not items:
        raise ParameterError(f"manifest {manifest_path} has no accepted records")
    if args.pred_cmd == "oracle":
        predictor = lambda it: it.truth  # noqa: E731 - one-line oracle
    else:
        predictor = _external_predictor(args.pred_cmd)
    rows = robustness_sweep(items, predictor, grid=DEFAULT_GRID, seed=args.seed)
    write_sweep_csv(rows, args.out)
    for row in rows:
        flag = "" if row.complete else "  (incomplete)"
        print(f"{row.setting}: f1={row.report.f1:.4f} iou={row.report.iou:.4f} n={row.n_items}{flag}")
    print(f"wrote {args.out}")
    return 0


def _feature_factory(spec: str, patch: int):
    if spec == "builtin":
        return lambda pair_id: BuiltinFeatureSource(patch)
    if spec.startswith("fmap-dir:"):
        root = Path(spec.split(":", 1)[1])
        return lambda pair_id: FileFeatureSource(
            root / f"{pair_id}_original.fmap", root / f"{pair_id}_edited.fmap"
        )
    raise ParameterError(f"--features must be 'builtin' or 'fmap-dir:PATH', got {spec!r}")


def _cmd_build(args: argparse.Namespace) -> int:
    cfg = PipelineConfig(
        gate=QualityGateConfig(
            min_keypoints=args.gate_keypoints,
            min_matches=args.gate_matches,
            min_inlier_ratio=args.gate_inliers,
        ),
        workers=args.workers,
        feature_factory=_feature_factory(args.features, args.patch),
    )
    build_dataset(args.listing, args.out, cfg, split_ratio=args.split, seed=args.seed)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgemask",
        description="Automated edited-region mask annotation for image pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="align an edited image to its original and crop both")
    p.add_argument("--original", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--ransac-iters", type=int, default=2000)
    p.add_argument("--reproj-px", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0x5EED)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("annotate", help="produce the edited-region mask for one pair")
    p.add_argument("--original", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--features-a", default=None, help="precomputed FMAP for the original")
    p.add_argument("--features-b", default=None, help="precomputed FMAP for the edited image")
    p.add_argument("--builtin-features", action="store_true")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--mask-out", required=True)
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("loss", help="print reference loss values as JSON")
    p.add_argument("--features", required=True, help="FMAP feature file")
    p.add_argument("--mask", required=True, help="ground-truth mask PNG")
    p.add_argument("--pred", default=None, help="predicted mask (PNG or .npy float map)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--aggregate", choices=("macro", "micro"), default="macro")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="JPEG/crop robustness table for an external predictor")
    p.add_argument("--manifest", required=True, help="manifest.jsonl from a build run")
    p.add_argument(
        "--pred-cmd",
        required=True,
        help="command template with {image} and {out}; the literal 'oracle' replays ground truth",
    )
    p.add_argument("--grid", choices=("default",), default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("build", help="construct a dataset from a pair listing")
    p.add_argument("--listing", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gate-keypoints", type=int, default=10)
    p.add_argument("--gate-matches", type=int, default=10)
    p.add_argument("--gate-inliers", type=float, default=0.60)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--features", default="builtin", help="builtin | fmap-dir:PATH")
    p.add_argument("--patch", type=int, default=16, help="patch size for builtin features")
    p.set_defaults(func=_cmd_build)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ForgemaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
