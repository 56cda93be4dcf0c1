"""Canny-based sharpness metric for finger images.

The image is scaled to a fixed width, an annular region between two nested
ellipses is selected, Canny edges are detected, and the edge density inside
the annulus is calibrated to an integer score in [0, 100].
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .filters import resize_bilinear, sobel_gradients
from .raster import ForegroundMask, GrayRaster, round_half_away


class SharpnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class SharpnessConfig:
    normalized_width: int = 400
    outer_ellipse: tuple = (0.48, 0.48)  # semi-axes as fractions of width/height
    inner_fraction: float = 0.4          # inner ellipse as fraction of outer
    canny_sigma: float = 1.4
    canny_low: float = 0.1               # fractions of the max gradient magnitude
    canny_high: float = 0.3
    calibration: tuple = (0.0, 0.18)     # raw edge-density range mapped to [0, 100]

    def __post_init__(self):
        if not (0.0 < self.inner_fraction < 1.0):
            raise ValueError("inner_fraction must be in (0, 1)")
        if not (0.0 <= self.canny_low < self.canny_high):
            raise ValueError("need 0 <= canny_low < canny_high")
        lo, hi = self.calibration
        if hi <= lo:
            raise ValueError("calibration raw_max must exceed raw_min")


@dataclass(frozen=True)
class EdgeMap:
    edges: np.ndarray  # bool

    @property
    def count(self) -> int:
        return int(self.edges.sum())


def scale_to_width(img: GrayRaster, width: int) -> GrayRaster:
    """Aspect-preserving bilinear resize to the given width."""
    if width < 16:
        raise ValueError("width must be >= 16")
    if img.width == width:
        return img
    scale = width / img.width
    out = resize_bilinear(img.as_float(), scale, scale)
    return GrayRaster(np.clip(round_half_away(out), 0, 255).astype(np.uint8))


def elliptical_mask(width: int, height: int, cfg: SharpnessConfig = SharpnessConfig()) -> ForegroundMask:
    """Annulus between the two nested ellipses centered on the image."""
    ax_o = cfg.outer_ellipse[0] * width
    ay_o = cfg.outer_ellipse[1] * height
    ax_i = cfg.inner_fraction * ax_o
    ay_i = cfg.inner_fraction * ay_o
    xs = np.arange(width) + 0.5 - width / 2.0
    ys = np.arange(height) + 0.5 - height / 2.0
    xo = (xs / ax_o) ** 2
    yo = (ys / ay_o) ** 2
    xi = (xs / ax_i) ** 2
    yi = (ys / ay_i) ** 2
    outer = yo[:, None] + xo[None, :] <= 1.0
    inner = yi[:, None] + xi[None, :] <= 1.0
    return ForegroundMask(outer & ~inner)


_NMS_OFFSETS = (
    ((0, 1), (0, -1)),    # sector 0: ~horizontal gradient
    ((1, 1), (-1, -1)),   # sector 1: diagonal
    ((1, 0), (-1, 0)),    # sector 2: ~vertical gradient
    ((1, -1), (-1, 1)),   # sector 3: anti-diagonal
)


def canny(img: GrayRaster, cfg: SharpnessConfig = SharpnessConfig()) -> EdgeMap:
    """Canny edge detection.

    Gaussian smoothing, Sobel gradients, non-maximum suppression along the
    quantized gradient direction, and double-threshold hysteresis with
    thresholds relative to the maximum gradient magnitude.
    """
    smoothed = ndi.gaussian_filter(img.as_float(), cfg.canny_sigma, mode="nearest")
    gx, gy = sobel_gradients(smoothed)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak < 1e-6:  # flat image up to float noise of the smoothing kernel
        return EdgeMap(np.zeros(mag.shape, dtype=bool))

    # Quantize gradient direction into 4 sectors of 45 degrees.
    angle = np.mod(np.arctan2(gy, gx), math.pi)
    sector = ((angle + math.pi / 8.0) // (math.pi / 4.0)).astype(int) % 4

    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros((h, w), dtype=bool)
    for s, ((dy1, dx1), (dy2, dx2)) in enumerate(_NMS_OFFSETS):
        n1 = padded[1 + dy1:h + 1 + dy1, 1 + dx1:w + 1 + dx1]
        n2 = padded[1 + dy2:h + 1 + dy2, 1 + dx2:w + 1 + dx2]
        keep |= (sector == s) & (mag >= n1) & (mag >= n2)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= cfg.canny_high * peak
    weak = nms >= cfg.canny_low * peak
    labels, n = ndi.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return EdgeMap(np.zeros_like(strong))
    anchored = np.zeros(n + 1, dtype=bool)
    anchored[np.unique(labels[strong])] = True
    anchored[0] = False
    return EdgeMap(anchored[labels])


def ait_sharpness(img: GrayRaster, cfg: SharpnessConfig = SharpnessConfig()) -> tuple[int, float]:
    """(score in [0, 100], raw edge density inside the annulus)."""
    scaled = scale_to_width(img, cfg.normalized_width)
    mask = elliptical_mask(scaled.width, scaled.height, cfg)
    n_mask = int(mask.bits.sum())
    if n_mask == 0:
        raise SharpnessError("elliptical mask selects no pixels")
    edges = canny(scaled, cfg)
    raw = float(edges.edges[mask.bits].sum()) / n_mask
    lo, hi = cfg.calibration
    score = int(round_half_away(100.0 * min(max((raw - lo) / (hi - lo), 0.0), 1.0)))
    return score, raw
