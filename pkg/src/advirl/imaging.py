"""Image and mask value types, pixel metrics and lossless image I/O.

Pixels are stored as real values in [0, 1] with shape ``(height, width, 3)``.
Quantization to 8 bits only happens when writing files and inside :func:`mse`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image as PILImage

PathLike = Union[str, Path]


class ImageError(ValueError):
    """Base class for image and mask errors."""


class DimensionMismatchError(ImageError):
    pass


class ImageFileError(ImageError):
    """Base class for file-level failures."""


class UnreadableImageError(ImageFileError):
    pass


class MalformedHeaderError(ImageFileError):
    pass


class UnsupportedBitDepthError(ImageFileError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """An RGB image with channel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError(f"pixels must have shape (height, width, 3), got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ImageError("pixel values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageError(
                f"pixel values must lie in [0, 1], got range [{px.min()}, {px.max()}]"
            )
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    @classmethod
    def constant(cls, width: int, height: int, color: Sequence[float]) -> "Image":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(color, dtype=np.float64)
        return cls(px)

    @classmethod
    def from_uint8(cls, data: np.ndarray) -> "Image":
        return cls(np.asarray(data, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def mean_color(self) -> np.ndarray:
        return self.pixels.reshape(-1, 3).mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True, eq=False)
class Mask:
    """Per-pixel foreground indicator with an optional class label."""

    bits: np.ndarray
    label: Optional[str] = field(default=None)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ImageError(f"mask bits must have shape (height, width), got {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes(), self.label))


def _check_same_size(a, b, what: str) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatchError(
            f"{what}: size mismatch {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def mse(a: Image, b: Image) -> float:
    """Mean squared error over all channels, measured on the 8-bit [0, 255] scale."""
    _check_same_size(a, b, "mse")
    diff = (a.pixels - b.pixels) * 255.0
    return float(np.mean(diff * diff))


def apply_mask(img: Image, m: Mask, background: Sequence[float] = (0.0, 0.0, 0.0)) -> Image:
    """Keep pixels where the mask is set and replace the rest with ``background``."""
    _check_same_size(img, m, "apply_mask")
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise ImageError("background must be an rgb triple")
    out = np.where(m.bits[..., None], img.pixels, bg)
    return Image(out)


def downsample(img: Image, factor: int) -> Image:
    """Box-filter downsampling: every output pixel averages a factor x factor block."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ImageError(f"downsample factor must be a positive integer, got {factor!r}")
    if img.width % factor or img.height % factor:
        raise DimensionMismatchError(
            f"image size {img.width}x{img.height} is not divisible by {factor}"
        )
    if factor == 1:
        return img
    h, w = img.height // factor, img.width // factor
    blocks = img.pixels.reshape(h, factor, w, factor, 3)
    return Image(blocks.mean(axis=(1, 3)))


# -- file I/O ---------------------------------------------------------------


def _read_ppm(data: bytes, path: PathLike) -> np.ndarray:
    # P6 header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise MalformedHeaderError(f"{path}: expected P6 magic, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-numeric PPM header field") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: invalid PPM size {width}x{height}")
    if maxval != 255:
        raise UnsupportedBitDepthError(f"{path}: PPM maxval {maxval} unsupported (need 255)")
    if pos >= n or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: missing whitespace after PPM header")
    pos += 1
    payload = data[pos:]
    expected = width * height * 3
    if len(payload) < expected:
        raise MalformedHeaderError(
            f"{path}: PPM payload has {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(height, width, 3)


def _read_png(path: PathLike) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "F") or (im.info.get("bitdepth", 8) > 8):
                raise UnsupportedBitDepthError(f"{path}: {im.mode} images are not supported")
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA", "1"):
                raise UnsupportedBitDepthError(f"{path}: unsupported PNG mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageFileError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: cannot decode PNG ({exc})") from exc


def _read_raw(path: PathLike) -> np.ndarray:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise UnreadableImageError(f"cannot read {p}: {exc}") from exc
    if data.startswith(b"\x89PNG"):
        return _read_png(p)
    if data.startswith(b"P"):
        return _read_ppm(data, p)
    raise MalformedHeaderError(f"{p}: not a PNG or binary PPM file")


def load_image(path: PathLike) -> Image:
    return Image.from_uint8(_read_raw(path))


def save_image(img: Image, path: PathLike) -> None:
    """Write ``img`` as PNG or binary PPM, chosen by the file suffix."""
    p = Path(path)
    data = img.to_uint8()
    suffix = p.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        p.write_bytes(header + data.tobytes())
    elif suffix == ".png":
        PILImage.fromarray(data, mode="RGB").save(p, format="PNG")
    else:
        raise ImageFileError(f"unsupported image suffix {suffix!r} (use .png or .ppm)")


def load_mask(path: PathLike, label: Optional[str] = None) -> Mask:
    """Read a mask file; pixels with luminance above 127 are foreground."""
    rgb = _read_raw(path).astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return Mask(luma > 127.0, label=label)


def save_mask(m: Mask, path: PathLike) -> None:
    data = np.where(m.bits, 255, 0).astype(np.uint8)
    save_image(Image.from_uint8(np.repeat(data[..., None], 3, axis=2)), path)


def chroma_mask(img: Image, background: Sequence[float], tol: float = 0.02,
                label: Optional[str] = None) -> Mask:
    """Trivial segmenter: foreground is every pixel farther than ``tol`` from the backdrop color."""
    bg = np.asarray(background, dtype=np.float64)
    dist = np.max(np.abs(img.pixels - bg), axis=2)
    return Mask(dist > tol, label=label)
