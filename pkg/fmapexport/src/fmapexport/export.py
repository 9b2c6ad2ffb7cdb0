"""Run a pretrained ViT backbone over images and write per-patch features.

Output is the FMAP v1 container: a 24-byte header (magic "FMAP", u16 version,
u16 reserved, u32 grid_h, grid_w, dim, patch_size) followed by the
grid_h x grid_w x dim float32 payload, little-endian, row-major. The format is
a byte-level contract shared with downstream mask-annotation tooling; nothing
here imports that tooling.
"""

from __future__ import annotations

import inspect
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sHHIIII")

DEFAULT_MODEL = "facebook/dinov3-vitl16-pretrain-lvd1689m"
DEFAULT_SHORT_SIDE = 512
RANDOM_SCHEME = "random:"

# Pixel normalization applied before the forward pass; recorded in the sidecar
# so a reader can reproduce the exact input.
_NORM_MEAN = 0.5
_NORM_STD = 0.5


class ExportError(RuntimeError):
    """An export failed; no output file was written."""


class WeightsUnavailableError(ExportError):
    """Backbone weights could not be loaded (usually: no network and no cache)."""


@dataclass(frozen=True)
class ExportConfig:
    """Backbone choice and input resize policy.

    The shorter image side is scaled to ``short_side``, then both dims are
    center-cropped down to multiples of the model's patch size.
    """

    model: str = DEFAULT_MODEL
    short_side: int = DEFAULT_SHORT_SIDE

    def __post_init__(self) -> None:
        if self.short_side < 1:
            raise ExportError(f"short_side must be positive, got {self.short_side}")


@dataclass(frozen=True)
class ExportResult:
    path: Path
    grid_h: int
    grid_w: int
    dim: int
    patch_size: int
    input_size: tuple[int, int]  # (w, h) after resize+crop


_MODEL_CACHE: dict[str, tuple[object, int]] = {}


def _load_backbone(model_id: str):
    """Return (model in eval mode, patch_size); cached per process."""
    if model_id in _MODEL_CACHE:
        return _MODEL_CACHE[model_id]
    import torch

    if model_id.startswith(RANDOM_SCHEME):
        name = model_id[len(RANDOM_SCHEME) :]
        if name != "tiny":
            raise ExportError(
                f"unknown built-in backbone {model_id!r}; the only one is 'random:tiny'"
            )
        from transformers import ViTConfig, ViTModel

        # Untrained stand-in for offline use. Seeded so every process builds
        # the same weights and exports stay reproducible.
        torch.manual_seed(0)
        cfg = ViTConfig(
            hidden_size=32,
            num_hidden_layers=2,
            num_attention_heads=2,
            intermediate_size=64,
            image_size=224,
            patch_size=16,
        )
        model = ViTModel(cfg, add_pooling_layer=False)
    else:
        from transformers import AutoModel

        try:
            model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise WeightsUnavailableError(
                f"could not load weights for {model_id!r}: {exc}\n"
                f"Fetch them once on a machine with network access:\n"
                f"    hf download {model_id}\n"
                f"then re-run with HF_HOME pointing at that cache, or use "
                f"--model random:tiny for an untrained stand-in."
            ) from exc

    model.eval()
    patch = int(model.config.patch_size)
    _MODEL_CACHE[model_id] = (model, patch)
    return model, patch


def _prepare(img: Image.Image, short_side: int, patch: int) -> tuple[Image.Image, dict]:
    w, h = img.size
    scale = short_side / min(w, h)
    rw = max(patch, round(w * scale))
    rh = max(patch, round(h * scale))
    resized = img.resize((rw, rh), Image.BILINEAR)
    cw, ch = rw - rw % patch, rh - rh % patch
    ox, oy = (rw - cw) // 2, (rh - ch) // 2
    cropped = resized.crop((ox, oy, ox + cw, oy + ch))
    meta = {
        "original_size": [w, h],
        "resized_size": [rw, rh],
        "cropped_size": [cw, ch],
        "crop_offset": [ox, oy],
        "normalization": {"mean": _NORM_MEAN, "std": _NORM_STD},
    }
    return cropped, meta


def _token_grid(model, patch: int, img: Image.Image) -> np.ndarray:
    """Forward pass returning the final-layer patch tokens as (gh, gw, dim)."""
    import torch

    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    arr = (arr - _NORM_MEAN) / _NORM_STD
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)

    kwargs = {}
    if "interpolate_pos_encoding" in inspect.signature(model.forward).parameters:
        kwargs["interpolate_pos_encoding"] = True
    with torch.no_grad():
        out = model(pixel_values=x, **kwargs)

    tokens = out.last_hidden_state[0]
    gh, gw = img.height // patch, img.width // patch
    n = gh * gw
    if tokens.shape[0] < n:
        raise ExportError(
            f"backbone returned {tokens.shape[0]} tokens for a {gh}x{gw} patch grid"
        )
    # The trailing n tokens are the patch tokens; anything before them is
    # CLS and/or register tokens, which are not spatial and get dropped.
    grid = tokens[tokens.shape[0] - n :].reshape(gh, gw, -1)
    return np.ascontiguousarray(grid.numpy(), dtype=np.float32)


def _write_fmap(path: Path, grid: np.ndarray, patch: int) -> None:
    gh, gw, dim = grid.shape
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    if len(payload) != gh * gw * dim * 4:
        raise ExportError(
            f"payload is {len(payload)} bytes but the header promises {gh * gw * dim * 4}"
        )
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, 0, gh, gw, dim, patch)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _compute(image_path: str | Path, cfg: ExportConfig):
    image_path = Path(image_path)
    try:
        with Image.open(image_path) as img:
            img.load()
            model, patch = _load_backbone(cfg.model)
            prepared, meta = _prepare(img, cfg.short_side, patch)
    except ExportError:
        raise
    except OSError as exc:
        raise ExportError(f"cannot read image {image_path}: {exc}") from exc
    grid = _token_grid(model, patch, prepared)
    return grid, patch, prepared.size, meta


def _finish(
    image_path: str | Path,
    out_path: str | Path,
    cfg: ExportConfig,
    grid: np.ndarray,
    patch: int,
    size: tuple[int, int],
    meta: dict,
) -> ExportResult:
    out_path = Path(out_path)
    _write_fmap(out_path, grid, patch)
    meta.update({"model": cfg.model, "patch_size": patch, "image": str(image_path)})
    sidecar = out_path.with_name(out_path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return ExportResult(
        path=out_path,
        grid_h=grid.shape[0],
        grid_w=grid.shape[1],
        dim=grid.shape[2],
        patch_size=patch,
        input_size=size,
    )


def export_features(
    image_path: str | Path, out_path: str | Path, cfg: ExportConfig | None = None
) -> ExportResult:
    """Export one image's patch-feature grid to ``out_path`` plus a sidecar JSON.

    The sidecar (``<out_path>.json``) records the resize/crop geometry and the
    model id, so grid cells can be mapped back to source pixels.
    """
    cfg = cfg or ExportConfig()
    grid, patch, size, meta = _compute(image_path, cfg)
    return _finish(image_path, out_path, cfg, grid, patch, size, meta)


def export_pair(
    original_path: str | Path,
    edited_path: str | Path,
    out_original: str | Path,
    out_edited: str | Path,
    cfg: ExportConfig | None = None,
) -> tuple[ExportResult, ExportResult]:
    """Export an already-aligned pair; both grids must agree or nothing is written."""
    cfg = cfg or ExportConfig()
    grid_o, patch, size_o, meta_o = _compute(original_path, cfg)
    grid_e, _, size_e, meta_e = _compute(edited_path, cfg)
    if grid_o.shape[:2] != grid_e.shape[:2]:
        raise ExportError(
            f"pair produces mismatched grids: original {grid_o.shape[0]}x{grid_o.shape[1]} "
            f"(input {size_o[0]}x{size_o[1]}) vs edited {grid_e.shape[0]}x{grid_e.shape[1]} "
            f"(input {size_e[0]}x{size_e[1]}); align the images first"
        )
    ro = _finish(original_path, out_original, cfg, grid_o, patch, size_o, meta_o)
    re_ = _finish(edited_path, out_edited, cfg, grid_e, patch, size_e, meta_e)
    return ro, re_


def export_batch(
    pairs: list[tuple[str, str | Path, str | Path]],
    out_dir: str | Path,
    cfg: ExportConfig | None = None,
) -> Path:
    """Export (pair_id, original, edited) triples into ``out_dir``.

    Writes ``<pair_id>_original.fmap`` / ``<pair_id>_edited.fmap`` per pair
    (the layout dataset builders expect for precomputed features) and a
    manifest.jsonl with one line per pair. Returns the manifest path.
    """
    cfg = cfg or ExportConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for pair_id, orig, edited in pairs:
            ro, re_ = export_pair(
                orig,
                edited,
                out_dir / f"{pair_id}_original.fmap",
                out_dir / f"{pair_id}_edited.fmap",
                cfg,
            )
            fh.write(
                json.dumps(
                    {
                        "pair_id": pair_id,
                        "original_fmap": ro.path.name,
                        "edited_fmap": re_.path.name,
                        "grid": [ro.grid_h, ro.grid_w],
                        "dim": ro.dim,
                        "patch_size": ro.patch_size,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return manifest
