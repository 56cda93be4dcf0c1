"""8-bit grayscale raster model and image file I/O.

The canonical interchange format is binary PGM (P5, maxval 255); PNG is
accepted on input.  Masks are stored as PGM with 0 (background) / 255
(foreground).
"""

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601 luma

WHITE = 255


class RasterError(ValueError):
    """Invalid raster data or unreadable image file."""


def round_half_away(x):
    """Round half away from zero (np.round would round half to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class GrayRaster:
    """Grayscale image: row-major uint8 pixel matrix of shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise RasterError(f"raster must be 2-D with positive dimensions, got shape {p.shape}")
        if p.dtype != np.uint8:
            if p.min() < 0 or p.max() > 255:
                raise RasterError("pixel values outside [0, 255]")
            p = p.astype(np.uint8)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


@dataclass(frozen=True)
class ForegroundMask:
    """Boolean foreground mask; True marks fingerprint area."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise RasterError(f"mask must be 2-D with positive dimensions, got shape {b.shape}")
        object.__setattr__(self, "bits", b.astype(bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def matches(self, img: GrayRaster) -> bool:
        return self.bits.shape == img.pixels.shape

    def coverage(self) -> float:
        return float(self.bits.mean())


def to_grayscale(rgb: np.ndarray) -> GrayRaster:
    """Convert an RGB array (H, W, 3) to grayscale with BT.601 weights.

    Already-gray input (all channels equal, or a 2-D array) is returned
    unchanged, so grayscale conversion is exactly idempotent.
    """
    arr = np.asarray(rgb)
    if arr.ndim == 2:
        return GrayRaster(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise RasterError(f"expected (H, W, 3) color image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RasterError("zero-sized image")
    r, g, b = (arr[:, :, i].astype(np.float64) for i in range(3))
    y = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
    return GrayRaster(round_half_away(y).astype(np.uint8))


def apply_mask(img: GrayRaster, mask: ForegroundMask) -> GrayRaster:
    """Whiten everything outside the foreground mask."""
    if not mask.matches(img):
        raise RasterError("mask dimensions do not match raster")
    out = img.pixels.copy()
    out[~mask.bits] = WHITE
    return GrayRaster(out)


# --- PGM (P5) ----------------------------------------------------------------

_PGM_HEADER = re.compile(rb"^P5\s(?:#[^\n]*\n|\s)*(\d+)\s(?:#[^\n]*\n|\s)*(\d+)\s(?:#[^\n]*\n|\s)*(\d+)\s")


def write_pgm(img: GrayRaster, path) -> None:
    data = b"P5\n%d %d\n255\n" % (img.width, img.height) + img.tobytes()
    Path(path).write_bytes(data)


def read_pgm(path) -> GrayRaster:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise RasterError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise RasterError(f"{path}: unsupported maxval {maxval} (expected 255)")
    body = raw[m.end():]
    if len(body) < width * height:
        raise RasterError(f"{path}: truncated pixel data ({len(body)} of {width * height} bytes)")
    pixels = np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width)
    return GrayRaster(pixels.copy())


def write_mask_pgm(mask: ForegroundMask, path) -> None:
    write_pgm(GrayRaster(np.where(mask.bits, WHITE, 0).astype(np.uint8)), path)


def read_mask_pgm(path) -> ForegroundMask:
    return ForegroundMask(read_pgm(path).pixels >= 128)


# --- Generic loading ---------------------------------------------------------

def load_image(path) -> GrayRaster:
    """Load a PGM or PNG image as grayscale.

    PNG color images are converted with the fixed BT.601 weights; PNG
    grayscale is taken as-is.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("L", "I;16", "I"):
                    arr = np.asarray(im.convert("L"))
                    return GrayRaster(arr.copy())
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise RasterError(f"{path}: cannot read PNG ({exc})") from exc
        return to_grayscale(arr)
    raise RasterError(f"{path}: unsupported image format (use .pgm or .png)")
