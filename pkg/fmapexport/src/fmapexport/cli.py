"""Command-line entry point: export one image to a FMAP feature file."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .export import DEFAULT_MODEL, DEFAULT_SHORT_SIDE, ExportConfig, ExportError, export_features


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmap-export",
        description="Run a ViT backbone over an image and write its patch-feature grid.",
    )
    parser.add_argument("--image", required=True, help="input image path")
    parser.add_argument("--out", required=True, help="output .fmap path")
    parser.add_argument(
        "--model",
        default=DEFAULT_MODEL,
        help=f"hub model id, or random:tiny for an untrained stand-in (default: {DEFAULT_MODEL})",
    )
    parser.add_argument(
        "--short-side",
        type=int,
        default=DEFAULT_SHORT_SIDE,
        help=f"resize the shorter image side to this before cropping (default: {DEFAULT_SHORT_SIDE})",
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExportConfig(model=args.model, short_side=args.short_side)
        result = export_features(args.image, args.out, cfg)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"{result.path}: grid {result.grid_h}x{result.grid_w}, dim {result.dim}, "
        f"patch {result.patch_size}, input {result.input_size[0]}x{result.input_size[1]}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
