"""Keypoint detection, descriptor matching, robust affine estimation, warping, and border cropping.

The detector is the classic oriented-FAST construction: FAST-9 corners ranked
by a Harris-style response, intensity-centroid orientation, and a
rotation-steered 256-point binary test pattern sampled on a smoothed image.
The test pattern is generated once from a fixed seed so descriptors are
bit-reproducible across runs and platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, sobel, uniform_filter

from .imagecore import ForgemaskError, ImageBuffer, ParameterError, Rect, crop, to_grayscale

DEFAULT_MAX_KEYPOINTS = 1000
DEFAULT_RATIO = 0.75
DEFAULT_RANSAC_ITERATIONS = 2000
DEFAULT_REPROJ_THRESHOLD = 3.0
DEFAULT_SEED = 0x5EED

_FAST_THRESHOLD = 20
_FAST_ARC = 9
_BORDER_MARGIN = 20
_CENTROID_RADIUS = 15
_PATTERN_SEED = 0xC0DE
_PATTERN_SIZE = 256
_PATTERN_CLIP = 13
_HARRIS_K = 0.04

# Bresenham circle of radius 3: the 16 (dx, dy) offsets probed by FAST.
_FAST_OFFSETS = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)

_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


class DetectionError(ForgemaskError):
    """Keypoint detection could not run on the given image."""


class EstimationError(ForgemaskError):
    """RANSAC found no usable affine model."""


class RefinementError(ForgemaskError):
    """Least-squares refinement hit a rank-deficient system."""


class AlignmentError(ForgemaskError):
    """A stage of align_pair failed; ``stage`` names the culprit."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _generate_pattern(seed: int, count: int) -> np.ndarray:
    """256 integer point pairs (ax, ay, bx, by), Gaussian around the patch center."""
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma = (2 * _PATTERN_CLIP + 5) / 5.0
    raw = rng.normal(0.0, sigma, size=(count * 2, 4))
    pts = np.clip(np.rint(raw), -_PATTERN_CLIP, _PATTERN_CLIP).astype(np.int32)
    distinct = (pts[:, 0] != pts[:, 2]) | (pts[:, 1] != pts[:, 3])
    pts = pts[distinct]
    if pts.shape[0] < count:  # pragma: no cover - seed dependent, never with 0xC0DE
        raise RuntimeError("binary test pattern generation fell short")
    return pts[:count]


_PATTERN = _generate_pattern(_PATTERN_SEED, _PATTERN_SIZE)

_disk = [
    (dx, dy)
    for dy in range(-_CENTROID_RADIUS, _CENTROID_RADIUS + 1)
    for dx in range(-_CENTROID_RADIUS, _CENTROID_RADIUS + 1)
    if dx * dx + dy * dy <= _CENTROID_RADIUS * _CENTROID_RADIUS
]
_DISK_DX = np.array([d[0] for d in _disk], dtype=np.int32)
_DISK_DY = np.array([d[1] for d in _disk], dtype=np.int32)
del _disk


@dataclass(frozen=True)
class Keypoint:
    """Corner location with strength and orientation (degrees in [0, 360))."""

    x: float
    y: float
    response: float
    angle: float


@dataclass(frozen=True)
class Match:
    query_idx: int
    train_idx: int
    distance: int


@dataclass(frozen=True)
class AffineTransform:
    """The 6-coefficient map (x, y) -> (a1*x + a2*y + a3, a4*x + a5*y + a6)."""

    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.coefficients()):
            raise ParameterError("affine coefficients must be finite")
        if abs(self.det()) <= 1e-8:
            raise ParameterError(f"affine transform is singular (|det|={abs(self.det()):.3e})")

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> AffineTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ParameterError(f"expected a 2x3 matrix, got {m.shape}")
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])

    def coefficients(self) -> tuple[float, float, float, float, float, float]:
        return (self.a1, self.a2, self.a3, self.a4, self.a5, self.a6)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a1, self.a2, self.a3], [self.a4, self.a5, self.a6]])

    def det(self) -> float:
        return self.a1 * self.a5 - self.a2 * self.a4

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        p = np.asarray(points, dtype=np.float64)
        x = p[..., 0] * self.a1 + p[..., 1] * self.a2 + self.a3
        y = p[..., 0] * self.a4 + p[..., 1] * self.a5 + self.a6
        return np.stack([x, y], axis=-1)

    def invert(self) -> AffineTransform:
        d = self.det()
        b1 = self.a5 / d
        b2 = -self.a2 / d
        b4 = -self.a4 / d
        b5 = self.a1 / d
        b3 = -(b1 * self.a3 + b2 * self.a6)
        b6 = -(b4 * self.a3 + b5 * self.a6)
        return AffineTransform(b1, b2, b3, b4, b5, b6)


@dataclass(frozen=True, eq=False)
class RansacResult:
    transform: AffineTransform
    inlier_flags: np.ndarray
    inlier_ratio: float

    def __post_init__(self) -> None:
        self.inlier_flags.setflags(write=False)


@dataclass(frozen=True)
class AlignmentConfig:
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS
    ratio: float = DEFAULT_RATIO
    ransac_iterations: int = DEFAULT_RANSAC_ITERATIONS
    reproj_threshold: float = DEFAULT_REPROJ_THRESHOLD
    seed: int = DEFAULT_SEED
    fast_threshold: int = _FAST_THRESHOLD


@dataclass(frozen=True)
class AlignmentStats:
    """Per-pair provenance recorded in the dataset manifest."""

    keypoints_original: int
    keypoints_edited: int
    match_count: int
    inlier_count: int
    inlier_ratio: float
    transform: AffineTransform
    crop_rect: Rect
    refine_fell_back: bool = False

    def to_dict(self) -> dict:
        return {
            "keypoints_original": self.keypoints_original,
            "keypoints_edited": self.keypoints_edited,
            "match_count": self.match_count,
            "inlier_count": self.inlier_count,
            "inlier_ratio": self.inlier_ratio,
            "affine": list(self.transform.coefficients()),
            "crop": [self.crop_rect.x, self.crop_rect.y, self.crop_rect.w, self.crop_rect.h],
            "refine_fell_back": self.refine_fell_back,
        }


def _fast_corners(img: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean map of FAST-9 corners (contiguous arc of 9 brighter or darker circle pixels)."""
    h, w = img.shape
    center = np.asarray(img, dtype=np.float64)
    ring = np.empty((16, h, w), dtype=np.float64)
    for k, (dx, dy) in enumerate(_FAST_OFFSETS):
        ring[k] = np.roll(np.roll(center, -dy, axis=0), -dx, axis=1)
    brighter = ring > center + threshold
    darker = ring < center - threshold

    def has_arc(flags: np.ndarray) -> np.ndarray:
        doubled = np.concatenate([flags, flags[: _FAST_ARC - 1]], axis=0).astype(np.int8)
        csum = np.cumsum(doubled, axis=0, dtype=np.int16)
        csum = np.concatenate([np.zeros((1, h, w), np.int16), csum], axis=0)
        window = csum[_FAST_ARC:] - csum[:-_FAST_ARC]
        return (window == _FAST_ARC).any(axis=0)

    return has_arc(brighter) | has_arc(darker)


def _harris_response(img: np.ndarray) -> np.ndarray:
    gx = sobel(img, axis=1, mode="nearest")
    gy = sobel(img, axis=0, mode="nearest")
    sxx = uniform_filter(gx * gx, size=7, mode="nearest")
    syy = uniform_filter(gy * gy, size=7, mode="nearest")
    sxy = uniform_filter(gx * gy, size=7, mode="nearest")
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - _HARRIS_K * trace * trace


def _orientations(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Intensity-centroid angle, degrees in [0, 360), for each keypoint."""
    patch = img[ys[:, None] + _DISK_DY[None, :], xs[:, None] + _DISK_DX[None, :]]
    m10 = (patch * _DISK_DX[None, :]).sum(axis=1)
    m01 = (patch * _DISK_DY[None, :]).sum(axis=1)
    return np.degrees(np.arctan2(m01, m10)) % 360.0


def _steered_descriptors(
    smoothed: np.ndarray, ys: np.ndarray, xs: np.ndarray, angles_deg: np.ndarray
) -> np.ndarray:
    """Pack the 256 steered binary tests into (N, 32) uint8 rows."""
    theta = np.radians(angles_deg)[:, None]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    pax, pay, pbx, pby = (_PATTERN[:, i][None, :].astype(np.float64) for i in range(4))
    ax = np.rint(xs[:, None] + pax * cos_t - pay * sin_t).astype(np.intp)
    ay = np.rint(ys[:, None] + pax * sin_t + pay * cos_t).astype(np.intp)
    bx = np.rint(xs[:, None] + pbx * cos_t - pby * sin_t).astype(np.intp)
    by = np.rint(ys[:, None] + pbx * sin_t + pby * cos_t).astype(np.intp)
    bits = smoothed[ay, ax] < smoothed[by, bx]
    return np.packbits(bits, axis=1)


def detect_keypoints(
    gray: ImageBuffer,
    max_count: int = DEFAULT_MAX_KEYPOINTS,
    fast_threshold: int = _FAST_THRESHOLD,
) -> list[tuple[Keypoint, bytes]]:
    """Detect up to ``max_count`` oriented corners with 32-byte binary descriptors.

    Keypoints are ranked by Harris response after 3x3 non-maximum suppression.
    Output order and descriptor bits are deterministic for a fixed input.
    """
    if gray.channels != 1:
        raise DetectionError("keypoint detection needs a grayscale image")
    if min(gray.width, gray.height) < 32:
        raise DetectionError(
            f"image too small for detection: {gray.width}x{gray.height}, need min dim >= 32"
        )
    if max_count < 1:
        raise ParameterError(f"max_count must be positive, got {max_count}")

    plane = gray.plane()
    # A light pre-smooth suppresses codec noise and lets saddle-type corners
    # (checkerboard junctions) break FAST's arc symmetry.
    img_f = gaussian_filter(plane.astype(np.float64), sigma=1.0, mode="nearest")
    corners = _fast_corners(img_f, fast_threshold)

    interior = np.zeros_like(corners)
    m = _BORDER_MARGIN
    if gray.height > 2 * m and gray.width > 2 * m:
        interior[m:-m, m:-m] = True
    corners &= interior
    if not corners.any():
        return []

    response = _harris_response(img_f)
    local_max = response == maximum_filter(response, size=3, mode="nearest")
    corners &= local_max
    if not corners.any():
        return []

    ys, xs = np.nonzero(corners)
    scores = response[ys, xs]
    # Strongest first; ties resolved by raster order for determinism.
    order = np.lexsort((xs, ys, -scores))[:max_count]
    ys, xs, scores = ys[order], xs[order], scores[order]

    angles = _orientations(img_f, ys, xs)
    smoothed = gaussian_filter(img_f, sigma=2.0, mode="nearest")
    packed = _steered_descriptors(smoothed, ys, xs, angles)

    out = []
    for i in range(len(ys)):
        kp = Keypoint(x=float(xs[i]), y=float(ys[i]), response=float(scores[i]), angle=float(angles[i]))
        out.append((kp, packed[i].tobytes()))
    return out


def _as_descriptor_array(descriptors) -> np.ndarray:
    rows = list(descriptors)
    if not rows:
        raise ParameterError("descriptor list is empty")
    for d in rows:
        if len(d) != 32:
            raise ParameterError(f"descriptors must be 32 bytes, got {len(d)}")
    return np.frombuffer(b"".join(bytes(d) for d in rows), dtype=np.uint8).reshape(len(rows), 32)


def hamming_distance(a: bytes, b: bytes) -> int:
    """Popcount of the XOR of two 32-byte descriptors."""
    if len(a) != 32 or len(b) != 32:
        raise ParameterError("descriptors must be 32 bytes")
    av = np.frombuffer(a, dtype=np.uint8)
    bv = np.frombuffer(b, dtype=np.uint8)
    return int(_POPCOUNT[av ^ bv].sum())


def match_descriptors(query, train, ratio: float = DEFAULT_RATIO) -> list[Match]:
    """Nearest-neighbor Hamming matching with the distance-ratio test.

    A query keeps its nearest train descriptor only when d1/d2 <= ratio.
    With a single train descriptor, or a zero second-nearest distance, only
    exact (distance 0) matches are emitted.
    """
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio must be in (0, 1], got {ratio}")
    q = _as_descriptor_array(query)
    t = _as_descriptor_array(train)

    dist = _POPCOUNT[q[:, None, :] ^ t[None, :, :]].sum(axis=2, dtype=np.uint16)

    matches: list[Match] = []
    if t.shape[0] == 1:
        for qi in range(q.shape[0]):
            if dist[qi, 0] == 0:
                matches.append(Match(qi, 0, 0))
        return matches

    nearest = np.argsort(dist, axis=1, kind="stable")[:, :2]
    for qi in range(q.shape[0]):
        i1, i2 = nearest[qi]
        d1 = int(dist[qi, i1])
        d2 = int(dist[qi, i2])
        if d2 == 0:
            keep = d1 == 0
        else:
            keep = d1 <= ratio * d2
        if keep:
            matches.append(Match(qi, int(i1), d1))
    return matches


def _solve_minimal(samples_src: np.ndarray, samples_dst: np.ndarray) -> np.ndarray:
    """Batch-solve exact affines from (K, 3, 2) point triples; returns (K, 6) coefficient rows."""
    k = samples_src.shape[0]
    design = np.concatenate([samples_src, np.ones((k, 3, 1))], axis=2)
    sol = np.linalg.solve(design, samples_dst)  # (K, 3, 2): columns (a1,a2,a3) and (a4,a5,a6)
    return np.concatenate([sol[:, :, 0], sol[:, :, 1]], axis=1)


def estimate_affine_ransac(
    src_points: np.ndarray,
    dst_points: np.ndarray,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    reproj_threshold: float = DEFAULT_REPROJ_THRESHOLD,
    seed: int = DEFAULT_SEED,
) -> RansacResult:
    """Robust 6-DoF affine fit over point correspondences.

    The best model maximizes the inlier count (reprojection error <=
    ``reproj_threshold``); ties fall to the lower total inlier error, then to
    the earlier iteration. Deterministic for a fixed seed.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ParameterError(f"expected matching (N, 2) point arrays, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise EstimationError(f"need at least 3 correspondences, got {n}")
    if iterations < 1:
        raise ParameterError(f"iterations must be positive, got {iterations}")
    if reproj_threshold <= 0:
        raise ParameterError(f"reproj_threshold must be positive, got {reproj_threshold}")

    rng = np.random.Generator(np.random.PCG64(seed))
    keys = rng.random((iterations, n))
    triples = np.argsort(keys, axis=1, kind="stable")[:, :3]

    s = src[triples]  # (iters, 3, 2)
    d = dst[triples]
    area2 = (s[:, 1, 0] - s[:, 0, 0]) * (s[:, 2, 1] - s[:, 0, 1]) - (
        s[:, 1, 1] - s[:, 0, 1]
    ) * (s[:, 2, 0] - s[:, 0, 0])
    valid = np.abs(area2) > 1e-8
    if not valid.any():
        raise EstimationError("every sampled minimal set was collinear")

    coefs = _solve_minimal(s[valid], d[valid])  # (K, 6)
    px = coefs[:, 0:1] * src[:, 0] + coefs[:, 1:2] * src[:, 1] + coefs[:, 2:3]
    py = coefs[:, 3:4] * src[:, 0] + coefs[:, 4:5] * src[:, 1] + coefs[:, 5:6]
    err = np.sqrt((px - dst[:, 0]) ** 2 + (py - dst[:, 1]) ** 2)  # (K, N)
    inliers = err <= reproj_threshold
    counts = inliers.sum(axis=1)
    totals = np.where(inliers, err, 0.0).sum(axis=1)

    best = np.lexsort((totals, -counts))[0]
    if counts[best] < 3:
        raise EstimationError(f"no model reached 3 inliers (best {int(counts[best])})")

    c = coefs[best]
    if abs(c[0] * c[4] - c[1] * c[3]) <= 1e-8:
        raise EstimationError("best model is numerically singular")
    transform = AffineTransform(*c)
    flags = inliers[best].copy()
    return RansacResult(transform=transform, inlier_flags=flags, inlier_ratio=float(flags.sum() / n))


def refine_affine_least_squares(src_points: np.ndarray, dst_points: np.ndarray) -> AffineTransform:
    """Least-squares affine over all given pairs, via SVD-based lstsq."""
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ParameterError(f"expected matching (N, 2) point arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise RefinementError(f"need at least 3 pairs, got {src.shape[0]}")
    design = np.concatenate([src, np.ones((src.shape[0], 1))], axis=1)
    sol, _, rank, _ = np.linalg.lstsq(design, dst, rcond=None)
    if rank < 3:
        raise RefinementError(f"design matrix rank {rank} < 3 (collinear input)")
    t = np.array([[sol[0, 0], sol[1, 0], sol[2, 0]], [sol[0, 1], sol[1, 1], sol[2, 1]]])
    if abs(t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]) <= 1e-8:
        raise RefinementError("refined transform is singular")
    return AffineTransform.from_matrix(t)


def warp_affine(img: ImageBuffer, t: AffineTransform, out_w: int, out_h: int) -> ImageBuffer:
    """Resample ``img`` under ``t`` into an out_w x out_h frame.

    Each output pixel samples the source at the inverse-mapped location with
    bilinear interpolation; samples outside the source are black.
    """
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output dims must be positive, got {out_w}x{out_h}")
    inv = t.invert()
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    sx = inv.a1 * gx + inv.a2 * gy + inv.a3
    sy = inv.a4 * gx + inv.a5 * gy + inv.a6

    # The source covers [-0.5, dim-0.5] in pixel-area terms; samples in the
    # half-pixel apron replicate the border row/column instead of going black.
    w, h = img.width, img.height
    eps = 1e-7
    valid = (sx > -0.5 - eps) & (sx < w - 0.5 + eps) & (sy > -0.5 - eps) & (sy < h - 0.5 + eps)
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)

    x0 = np.clip(np.floor(sx).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(sx, np.intp)
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(sy, np.intp)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    src = img.data.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    value = top * (1 - fy) + bottom * fy
    value[~valid] = 0.0
    out = np.rint(value).clip(0, 255).astype(np.uint8)
    return ImageBuffer.from_array(out)


def _clip_polygon(poly: list[tuple[float, float]], w_max: float, h_max: float) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex polygon to [0, w_max] x [0, h_max]."""

    def clip_edge(points, inside, intersect):
        out = []
        for i, cur in enumerate(points):
            prev = points[i - 1]
            cur_in, prev_in = inside(cur), inside(prev)
            if prev_in and cur_in:
                out.append(cur)
            elif prev_in and not cur_in:
                out.append(intersect(prev, cur))
            elif not prev_in and cur_in:
                out.append(intersect(prev, cur))
                out.append(cur)
        return out

    def x_cross(p, q, x):
        t = (x - p[0]) / (q[0] - p[0])
        return (x, p[1] + t * (q[1] - p[1]))

    def y_cross(p, q, y):
        t = (y - p[1]) / (q[1] - p[1])
        return (p[0] + t * (q[0] - p[0]), y)

    for inside, intersect in (
        (lambda p: p[0] >= 0.0, lambda p, q: x_cross(p, q, 0.0)),
        (lambda p: p[0] <= w_max, lambda p, q: x_cross(p, q, w_max)),
        (lambda p: p[1] >= 0.0, lambda p, q: y_cross(p, q, 0.0)),
        (lambda p: p[1] <= h_max, lambda p, q: y_cross(p, q, h_max)),
    ):
        poly = clip_edge(poly, inside, intersect)
        if not poly:
            return []
    return poly


def _scanline_range(poly: list[tuple[float, float]], y: float) -> tuple[float, float] | None:
    """Admissible [x_left, x_right] of the convex polygon at height y."""
    xs: list[float] = []
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            if y0 == y:
                xs.extend([x0, x1])
            continue
        lo, hi = (y0, y1) if y0 < y1 else (y1, y0)
        if lo <= y <= hi:
            t = (y - y0) / (y1 - y0)
            xs.append(x0 + t * (x1 - x0))
    if not xs:
        return None
    return min(xs), max(xs)


def compute_common_crop(
    t: AffineTransform, src_w: int, src_h: int, dst_w: int, dst_h: int
) -> Rect:
    """Largest axis-aligned integer rectangle inside both the destination frame
    and the warped source footprint.

    Built on the convexity of the clipped footprint: the left boundary is a
    convex function of y and the right boundary concave, so the admissible
    x-range of a rectangle spanning [y1, y2] is fixed by the two endpoint
    scanlines. All integer (y1, y2) intervals are scored; ties go to larger
    area, then smaller x, then smaller y.
    """
    # Footprint of the source's pixel-area rectangle (half a pixel beyond the
    # centers), matching the warp's border-replication apron; clipped against
    # the destination's pixel-center bounds, where output pixels live.
    lo, whi, hhi = -0.5, src_w - 0.5, src_h - 0.5
    corners = [(lo, lo), (whi, lo), (whi, hhi), (lo, hhi)]
    quad = [tuple(p) for p in t.apply(np.array(corners))]
    poly = _clip_polygon(quad, float(dst_w - 1), float(dst_h - 1))
    if len(poly) < 3:
        raise AlignmentError("crop", "warped footprint does not intersect the destination frame")

    poly_y = [p[1] for p in poly]
    y_lo = math.ceil(min(poly_y) - 1e-9)
    y_hi = math.floor(max(poly_y) + 1e-9)
    if y_hi < y_lo:
        raise AlignmentError("crop", "footprint intersection thinner than one pixel row")

    ys = np.arange(y_lo, y_hi + 1)
    left = np.empty(len(ys))
    right = np.empty(len(ys))
    for i, y in enumerate(ys):
        rng = _scanline_range(poly, float(y))
        if rng is None:  # pragma: no cover - y inside [min_y, max_y] always intersects
            left[i], right[i] = np.inf, -np.inf
        else:
            left[i], right[i] = rng

    # Pairwise (y1 <= y2) interval table; endpoint max/min give the x-range.
    xl = np.maximum(left[:, None], left[None, :])
    xr = np.minimum(right[:, None], right[None, :])
    x_start = np.ceil(xl - 1e-9)
    widths = np.floor(xr + 1e-9) - x_start + 1
    widths = np.where(np.isfinite(widths), widths, -1.0)
    heights = (ys[None, :] - ys[:, None] + 1).astype(np.float64)
    feasible = (heights >= 1) & (widths >= 1)
    if not feasible.any():
        raise AlignmentError("crop", "no integer rectangle fits the footprint intersection")

    areas = np.where(feasible, widths * heights, -1.0).ravel()
    cand_x = np.where(feasible, x_start, np.inf).ravel()
    y1_idx = np.repeat(np.arange(len(ys)), len(ys))
    cand_y = np.where(feasible.ravel(), ys[y1_idx].astype(np.float64), np.inf)
    best = np.lexsort((cand_y, cand_x, -areas))[0]
    return Rect(
        x=int(cand_x[best]),
        y=int(cand_y[best]),
        w=int(widths.ravel()[best]),
        h=int(heights.ravel()[best]),
    )


def align_pair(
    original: ImageBuffer, edited: ImageBuffer, cfg: AlignmentConfig | None = None
) -> tuple[ImageBuffer, ImageBuffer, AlignmentStats]:
    """Register ``original`` onto ``edited`` and crop both to the shared footprint.

    Runs detection, matching, RANSAC, least-squares refinement, warping, and
    the common crop. Any stage failure raises AlignmentError with the stage
    name; rank-deficient refinement silently falls back to the coarse model
    and flags it in the stats.
    """
    cfg = cfg or AlignmentConfig()
    gray_o = to_grayscale(original)
    gray_e = to_grayscale(edited)

    try:
        kp_o = detect_keypoints(gray_o, cfg.max_keypoints, cfg.fast_threshold)
        kp_e = detect_keypoints(gray_e, cfg.max_keypoints, cfg.fast_threshold)
    except DetectionError as exc:
        raise AlignmentError("detection", str(exc)) from exc
    if not kp_o or not kp_e:
        raise AlignmentError(
            "detection",
            f"no keypoints detected ({len(kp_o)} in original, {len(kp_e)} in edited)",
        )

    matches = match_descriptors([d for _, d in kp_o], [d for _, d in kp_e], cfg.ratio)
    if len(matches) < 3:
        raise AlignmentError("matching", f"only {len(matches)} ratio-test matches, need 3")

    src = np.array([(kp_o[m.query_idx][0].x, kp_o[m.query_idx][0].y) for m in matches])
    dst = np.array([(kp_e[m.train_idx][0].x, kp_e[m.train_idx][0].y) for m in matches])

    try:
        coarse = estimate_affine_ransac(
            src, dst, cfg.ransac_iterations, cfg.reproj_threshold, cfg.seed
        )
    except EstimationError as exc:
        raise AlignmentError("estimation", str(exc)) from exc

    fell_back = False
    try:
        refined = refine_affine_least_squares(src[coarse.inlier_flags], dst[coarse.inlier_flags])
    except RefinementError:
        refined = coarse.transform
        fell_back = True

    warped = warp_affine(original, refined, edited.width, edited.height)
    rect = compute_common_crop(refined, original.width, original.height, edited.width, edited.height)

    stats = AlignmentStats(
        keypoints_original=len(kp_o),
        keypoints_edited=len(kp_e),
        match_count=len(matches),
        inlier_count=int(coarse.inlier_flags.sum()),
        inlier_ratio=coarse.inlier_ratio,
        transform=refined,
        crop_rect=rect,
        refine_fell_back=fell_back,
    )
    return crop(warped, rect), crop(edited, rect), stats
