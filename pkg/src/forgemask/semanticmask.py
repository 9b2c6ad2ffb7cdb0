"""Dense features on aligned pairs, cosine similarity, Otsu binarization, and mask standardization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import ForgemaskError, ImageBuffer, ParameterError, to_grayscale

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sHHIIII")

DEFAULT_BINS = 256
DEFAULT_PATCH = 16
MASK_SIZE = 128
_NORM_EPS = 1e-12
_HIST_BINS_ORIENT = 8
_NOISE_FLOOR = 1.0 / 255.0  # one 8-bit quantization step
_VAR_SCALE = 0.02  # reference contrast for the scalar variance channel


class FeatureFormatError(ForgemaskError):
    """A feature file violates the FMAP container format."""


class DegenerateHistogramError(ForgemaskError):
    """All similarity scores fall into one histogram bin; no threshold exists."""


class AnnotationError(ForgemaskError):
    """A stage of annotate_masks failed; ``stage`` names the culprit."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True, eq=False)
class DenseFeatureMap:
    """Grid of feature vectors: values has shape (grid_h, grid_w, dim), float32."""

    grid_h: int
    grid_w: int
    dim: int
    patch_size: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.dim < 1:
            raise ParameterError(
                f"grid dims and channel count must be positive, got "
                f"{self.grid_h}x{self.grid_w}x{self.dim}"
            )
        if self.patch_size < 1:
            raise ParameterError(f"patch_size must be positive, got {self.patch_size}")
        expected = (self.grid_h, self.grid_w, self.dim)
        if self.values.shape != expected:
            raise ParameterError(f"values shape must be {expected}, got {self.values.shape}")
        if self.values.dtype != np.float32:
            raise ParameterError(f"values dtype must be float32, got {self.values.dtype}")
        if not np.isfinite(self.values).all():
            raise ParameterError("feature values must be finite")
        self.values.setflags(write=False)


@dataclass(frozen=True, eq=False)
class SimilarityMap:
    grid_h: int
    grid_w: int
    scores: np.ndarray

    def __post_init__(self) -> None:
        if self.scores.shape != (self.grid_h, self.grid_w):
            raise ParameterError(
                f"scores shape must be {(self.grid_h, self.grid_w)}, got {self.scores.shape}"
            )
        if self.scores.size and (self.scores.min() < -1 - 1e-6 or self.scores.max() > 1 + 1e-6):
            raise ParameterError("similarity scores must lie in [-1, 1]")
        self.scores.setflags(write=False)


@dataclass(frozen=True, eq=False)
class EditMask:
    """Binary per-pixel map; 1 marks edited pixels."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.bits.shape != (self.height, self.width):
            raise ParameterError(
                f"bits shape must be {(self.height, self.width)}, got {self.bits.shape}"
            )
        if self.bits.dtype != np.uint8:
            raise ParameterError(f"bits dtype must be uint8, got {self.bits.dtype}")
        invalid = (self.bits > 1).any()
        if invalid:
            raise ParameterError("mask bits must be 0 or 1")
        self.bits.setflags(write=False)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> EditMask:
        a = np.ascontiguousarray(np.asarray(arr) != 0).astype(np.uint8)
        if a.ndim != 2:
            raise ParameterError(f"mask must be 2-D, got ndim={a.ndim}")
        return cls(width=a.shape[1], height=a.shape[0], bits=a)

    def edited_fraction(self) -> float:
        return float(self.bits.mean())


@dataclass(frozen=True)
class MaskStats:
    """Provenance for one annotated mask."""

    threshold: float
    edited_fraction: float
    feature_source: str

    def to_dict(self) -> dict:
        return {
            "otsu_threshold": self.threshold,
            "edited_fraction": self.edited_fraction,
            "feature_source": self.feature_source,
        }


def _standardize_block(block: np.ndarray) -> np.ndarray:
    """Per-cell variance normalization: zero mean, unit variance across the block.

    The noise floor keeps near-constant blocks at ~zero instead of amplifying
    quantization noise into a random unit vector, so two flat cells still agree.
    """
    mean = block.mean(axis=-1, keepdims=True)
    var = block.var(axis=-1, keepdims=True)
    return (block - mean) / np.sqrt(var + _NOISE_FLOOR**2)


def extract_features_builtin(img: ImageBuffer, patch_size: int = DEFAULT_PATCH) -> DenseFeatureMap:
    """Hand-rolled dense patch features so the pipeline runs without ML assets.

    Per patch: mean RGB (3), an 8-bin gradient-orientation histogram weighted
    by magnitude (8), and intensity variance (1). The RGB and histogram blocks
    are variance-normalized per cell; the scalar variance channel is divided
    by a fixed reference contrast instead, since a single value has no
    within-block variance. Deterministic and purely local to each patch.
    """
    if patch_size < 1:
        raise ParameterError(f"patch_size must be positive, got {patch_size}")
    if img.width < patch_size or img.height < patch_size:
        raise ParameterError(
            f"image {img.width}x{img.height} smaller than patch_size {patch_size}"
        )
    gh, gw = img.height // patch_size, img.width // patch_size
    hh, ww = gh * patch_size, gw * patch_size

    if img.channels == 3:
        rgb = img.data[:hh, :ww].astype(np.float64) / 255.0
    else:
        rgb = np.repeat(img.data[:hh, :ww].astype(np.float64) / 255.0, 3, axis=2)
    gray = to_grayscale(img).plane()[:hh, :ww].astype(np.float64) / 255.0

    mean_rgb = rgb.reshape(gh, patch_size, gw, patch_size, 3).mean(axis=(1, 3))

    # Gradients are taken inside each patch (edges replicated at patch borders)
    # so a descriptor depends only on its own patch's pixels.
    pat = gray.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3)
    deriv, smooth = [-1.0, 0.0, 1.0], [1.0, 2.0, 1.0]
    gx = correlate1d(correlate1d(pat, deriv, axis=3, mode="nearest"), smooth, axis=2, mode="nearest")
    gy = correlate1d(correlate1d(pat, deriv, axis=2, mode="nearest"), smooth, axis=3, mode="nearest")
    mag = np.hypot(gx, gy)
    orient = np.arctan2(gy, gx)  # [-pi, pi]
    bin_idx = np.minimum(
        ((orient + np.pi) / (2 * np.pi) * _HIST_BINS_ORIENT).astype(np.intp),
        _HIST_BINS_ORIENT - 1,
    )
    hist = np.empty((gh, gw, _HIST_BINS_ORIENT))
    for b in range(_HIST_BINS_ORIENT):
        hist[:, :, b] = np.where(bin_idx == b, mag, 0.0).sum(axis=(2, 3))
    hist /= patch_size * patch_size  # mean magnitude per pixel

    variance = gray.reshape(gh, patch_size, gw, patch_size).var(axis=(1, 3))[:, :, None]

    blocks = [_standardize_block(mean_rgb), _standardize_block(hist), variance / _VAR_SCALE]
    values = np.concatenate(blocks, axis=2).astype(np.float32)
    return DenseFeatureMap(grid_h=gh, grid_w=gw, dim=values.shape[2], patch_size=patch_size, values=values)


def store_feature_file(m: DenseFeatureMap, path: str | Path) -> None:
    """Write a DenseFeatureMap in the FMAP v1 container."""
    payload = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, 0, m.grid_h, m.grid_w, m.dim, m.patch_size)
    Path(path).write_bytes(header + payload)


def load_feature_file(path: str | Path) -> DenseFeatureMap:
    """Parse and validate an FMAP v1 file."""
    raw = Path(path).read_bytes()
    if len(raw) < _FMAP_HEADER.size:
        raise FeatureFormatError(
            f"file too short for FMAP header: {len(raw)} bytes, need {_FMAP_HEADER.size}"
        )
    magic, version, _reserved, gh, gw, dim, patch = _FMAP_HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {FMAP_MAGIC!r}")
    if version != FMAP_VERSION:
        raise FeatureFormatError(f"unsupported FMAP version {version}")
    if gh < 1 or gw < 1 or dim < 1 or patch < 1:
        raise FeatureFormatError(f"invalid header dims {gh}x{gw}x{dim}, patch {patch}")
    expected = gh * gw * dim * 4
    got = len(raw) - _FMAP_HEADER.size
    if got != expected:
        raise FeatureFormatError(
            f"payload is {got} bytes, expected {expected} (missing {expected - got})"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_FMAP_HEADER.size).reshape(gh, gw, dim)
    if not np.isfinite(values).all():
        raise FeatureFormatError("payload contains NaN or Inf")
    return DenseFeatureMap(grid_h=gh, grid_w=gw, dim=dim, patch_size=patch, values=values.copy())


def cosine_similarity_map(a: DenseFeatureMap, b: DenseFeatureMap) -> SimilarityMap:
    """Per-cell cosine similarity; cells where either vector has near-zero norm score 0."""
    if (a.grid_h, a.grid_w, a.dim) != (b.grid_h, b.grid_w, b.dim):
        raise ParameterError(
            f"feature grids differ: {a.grid_h}x{a.grid_w}x{a.dim} vs {b.grid_h}x{b.grid_w}x{b.dim}"
        )
    va = a.values.astype(np.float64)
    vb = b.values.astype(np.float64)
    dots = (va * vb).sum(axis=2)
    na = np.linalg.norm(va, axis=2)
    nb = np.linalg.norm(vb, axis=2)
    ok = (na >= _NORM_EPS) & (nb >= _NORM_EPS)
    scores = np.zeros_like(dots)
    np.divide(dots, na * nb, out=scores, where=ok)
    scores = np.clip(scores, -1.0, 1.0)
    return SimilarityMap(grid_h=a.grid_h, grid_w=a.grid_w, scores=scores)


def otsu_threshold(scores: SimilarityMap, bins: int = DEFAULT_BINS) -> float:
    """Bin-edge threshold maximizing between-class variance on a fixed [-1, 1] histogram.

    Among equal maxima the lowest threshold wins. Raises
    DegenerateHistogramError when no split separates two nonempty classes
    (all scores identical, or all in one bin).
    """
    if bins < 2:
        raise ParameterError(f"bins must be at least 2, got {bins}")
    flat = scores.scores.ravel()
    counts, edges = np.histogram(flat, bins=bins, range=(-1.0, 1.0))
    total = counts.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0

    # Cumulative class weights and means for every split k: bins [0, k) vs [k, bins)
    csum = np.cumsum(counts)
    cmean = np.cumsum(counts * centers)
    w0 = csum[:-1] / total  # split after bin k-1, k = 1..bins-1
    w1 = 1.0 - w0
    sum0 = cmean[:-1]
    sum1 = cmean[-1] - sum0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(csum[:-1] > 0, sum0 / csum[:-1], 0.0)
        mu1 = np.where(total - csum[:-1] > 0, sum1 / (total - csum[:-1]), 0.0)
    var_between = w0 * w1 * (mu0 - mu1) ** 2

    best = int(np.argmax(var_between))  # argmax takes the first (lowest) maximum
    if var_between[best] <= 0.0:
        raise DegenerateHistogramError(
            "no threshold separates the similarity histogram (single occupied bin)"
        )
    return float(edges[best + 1])


def binarize(scores: SimilarityMap, threshold: float) -> EditMask:
    """Cells scoring strictly below the threshold are edited (bit 1)."""
    return EditMask.from_array(scores.scores < threshold)


def resize_mask(mask: EditMask, out_w: int, out_h: int) -> EditMask:
    """Nearest-neighbor resampling (pixel-center mapping); output stays binary."""
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output dims must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (mask.width, mask.height):
        return mask
    sy = np.floor((np.arange(out_h) + 0.5) * mask.height / out_h).astype(np.intp)
    sx = np.floor((np.arange(out_w) + 0.5) * mask.width / out_w).astype(np.intp)
    sy = np.clip(sy, 0, mask.height - 1)
    sx = np.clip(sx, 0, mask.width - 1)
    return EditMask.from_array(mask.bits[sy[:, None], sx[None, :]])


class BuiltinFeatureSource:
    """Feature source backed by extract_features_builtin."""

    def __init__(self, patch_size: int = DEFAULT_PATCH) -> None:
        self.patch_size = patch_size

    def describe(self) -> str:
        return f"builtin:patch={self.patch_size}"

    def features_for(self, img: ImageBuffer, role: str) -> DenseFeatureMap:
        return extract_features_builtin(img, self.patch_size)


class FileFeatureSource:
    """Feature source reading precomputed FMAP files (role 'original' or 'edited')."""

    def __init__(self, original_path: str | Path, edited_path: str | Path) -> None:
        self.paths = {"original": Path(original_path), "edited": Path(edited_path)}

    def describe(self) -> str:
        return f"fmap:{self.paths['original'].name},{self.paths['edited'].name}"

    def features_for(self, img: ImageBuffer, role: str) -> DenseFeatureMap:
        return load_feature_file(self.paths[role])


@dataclass(frozen=True)
class MaskConfig:
    bins: int = DEFAULT_BINS
    out_size: int = MASK_SIZE


def annotate_masks(
    aligned_original: ImageBuffer,
    aligned_edited: ImageBuffer,
    feature_source,
    cfg: MaskConfig | None = None,
) -> tuple[EditMask, MaskStats]:
    """Features on both aligned images, cosine map, Otsu, binarize, resize to the standard size.

    Stage errors surface as AnnotationError with the stage name.
    """
    cfg = cfg or MaskConfig()
    if (aligned_original.width, aligned_original.height) != (
        aligned_edited.width,
        aligned_edited.height,
    ):
        raise AnnotationError(
            "features",
            f"aligned images differ in size: {aligned_original.width}x{aligned_original.height}"
            f" vs {aligned_edited.width}x{aligned_edited.height}",
        )
    try:
        fa = feature_source.features_for(aligned_original, "original")
        fb = feature_source.features_for(aligned_edited, "edited")
    except (ParameterError, FeatureFormatError) as exc:
        raise AnnotationError("features", str(exc)) from exc

    try:
        sim = cosine_similarity_map(fa, fb)
    except ParameterError as exc:
        raise AnnotationError("similarity", str(exc)) from exc

    try:
        threshold = otsu_threshold(sim, cfg.bins)
    except DegenerateHistogramError as exc:
        raise AnnotationError("threshold", f"degenerate histogram: {exc}") from exc

    mask = resize_mask(binarize(sim, threshold), cfg.out_size, cfg.out_size)
    stats = MaskStats(
        threshold=threshold,
        edited_fraction=mask.edited_fraction(),
        feature_source=feature_source.describe(),
    )
    return mask, stats
