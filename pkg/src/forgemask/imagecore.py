"""Image buffers, codec IO, color conversion, and rectangle cropping shared by all modules."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class ForgemaskError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ForgemaskError):
    """An argument violates an operation's contract."""


class DecodeError(ForgemaskError):
    """An encoded image stream could not be decoded."""


class BoundsError(ForgemaskError):
    """A rectangle falls outside its host image."""


#: Chroma subsampling applied on every JPEG encode; recorded in manifests.
JPEG_SUBSAMPLING = "4:2:0"
_PIL_SUBSAMPLING = 2  # Pillow's code for 4:2:0

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8"


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit raster image: row-major, channel-interleaved, immutable after construction.

    ``data`` has shape (height, width, channels) and dtype uint8. The buffer
    takes ownership of the array and marks it read-only.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ParameterError(
                f"image dimensions must be at least 1x1, got {self.width}x{self.height}"
            )
        if self.channels not in (1, 3):
            raise ParameterError(f"channels must be 1 (gray) or 3 (RGB), got {self.channels}")
        expected = (self.height, self.width, self.channels)
        if not isinstance(self.data, np.ndarray) or self.data.shape != expected:
            raise ParameterError(
                f"data shape must be {expected}, got "
                f"{self.data.shape if isinstance(self.data, np.ndarray) else type(self.data)}"
            )
        if self.data.dtype != np.uint8:
            raise ParameterError(f"data dtype must be uint8, got {self.data.dtype}")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> ImageBuffer:
        """Build a buffer from an (H, W) or (H, W, C) array, copying the data."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3:
            raise ParameterError(f"expected a 2-D or 3-D array, got ndim={a.ndim}")
        a = np.ascontiguousarray(a, dtype=np.uint8).copy()
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, data=a)

    def plane(self) -> np.ndarray:
        """The single channel of a grayscale image as a 2-D array."""
        if self.channels != 1:
            raise ParameterError(f"plane() needs a 1-channel image, got {self.channels}")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle with top-left corner (x, y) and extent (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise ParameterError(f"rect extent must be positive, got {self.w}x{self.h}")


def _sniff_format(stream: bytes) -> str:
    if stream[: len(_PNG_MAGIC)] == _PNG_MAGIC:
        return "PNG"
    if stream[: len(_JPEG_MAGIC)] == _JPEG_MAGIC:
        return "JPEG"
    return "unknown"


def _to_pil(img: ImageBuffer) -> Image.Image:
    if img.channels == 1:
        return Image.fromarray(img.plane(), mode="L")
    return Image.fromarray(img.data, mode="RGB")


def decode_image(stream: bytes) -> ImageBuffer:
    """Decode a PNG or JPEG byte stream.

    JPEG always decodes to RGB; a grayscale PNG stays 1-channel. Other PNG
    color types (palette, alpha) are converted to RGB.
    """
    name = _sniff_format(stream)
    try:
        with Image.open(io.BytesIO(stream)) as im:
            fmt = im.format or name
            if fmt not in ("PNG", "JPEG"):
                raise DecodeError(f"unsupported image format {fmt}; only PNG and JPEG are handled")
            if fmt == "PNG" and im.mode == "L":
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im)
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"could not decode {name} stream: {exc}") from exc
    return ImageBuffer.from_array(arr)


def encode_image(img: ImageBuffer) -> bytes:
    """Encode a buffer as PNG (lossless round-trip)."""
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """Convert RGB to luma with BT.601 weights; 1-channel input is returned unchanged."""
    if img.channels == 1:
        return img
    rgb = img.data.astype(np.float64)
    luma = rgb[:, :, 0] * 0.299 + rgb[:, :, 1] * 0.587 + rgb[:, :, 2] * 0.114
    gray = np.rint(luma).astype(np.uint8)
    return ImageBuffer.from_array(gray)


def crop(img: ImageBuffer, r: Rect) -> ImageBuffer:
    """Extract the sub-image covered by ``r``."""
    if r.x < 0 or r.y < 0 or r.x + r.w > img.width or r.y + r.h > img.height:
        raise BoundsError(
            f"rect {r} exceeds image bounds {img.width}x{img.height}"
        )
    block = img.data[r.y : r.y + r.h, r.x : r.x + r.w]
    return ImageBuffer.from_array(block)


def jpeg_reencode(img: ImageBuffer, quality: int) -> ImageBuffer:
    """Encode as baseline JPEG at the given quality factor, then decode again.

    Dimensions are preserved; pixel values change with the codec's loss.
    """
    if not 1 <= quality <= 100:
        raise ParameterError(f"JPEG quality must be in 1..100, got {quality}")
    if img.channels != 3:
        raise ParameterError("jpeg_reencode requires an RGB image")
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="JPEG", quality=quality, subsampling=_PIL_SUBSAMPLING)
    out = decode_image(buf.getvalue())
    return out
