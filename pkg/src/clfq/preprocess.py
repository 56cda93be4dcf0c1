"""Contactless fingerprint pre-processing pipeline.

Turns a segmented finger image into a quality-ready sample: grayscale,
foreground segmentation, upright rotation, iterative CLAHE enhancement,
ridge-period measurement and resampling to a fixed ridge period, and
background whitening.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .filters import (
    binary_close,
    largest_component,
    resize_bilinear,
    resize_mask_nearest,
    rotate_image,
    sobel_gradients,
)
from .raster import ForegroundMask, GrayRaster, WHITE, apply_mask, round_half_away

DEFAULT_CLAHE_SCHEDULE = ((64, 2.0), (32, 2.0), (16, 2.0))
DEFAULT_TARGET_PERIOD = 9.0
DEFAULT_PERIOD_RANGE = (8.0, 12.0)

PERIOD_BLOCK = 32          # block side for ridge-period measurement
PERIOD_MIN_LAG = 3         # shortest plausible ridge period in px
PERIOD_PEAK_MIN = 0.25     # autocorrelation peak acceptance level
PERIOD_CONC_MIN = 0.85     # spectral concentration needed to call a block periodic
SEGMENT_BLOCK = 16
SEGMENT_VAR_FACTOR = 0.25  # block variance threshold relative to global variance
SEGMENT_DENOISE_WINDOW = 3
SEGMENT_CLOSE_SIZE = 5
SCALE_LIMITS = (0.1, 10.0)
ROTATE_MIN_AXIS_RATIO = 1.05


class PreprocessError(RuntimeError):
    """Pipeline failure; `stage` identifies the failing step."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PreprocessConfig:
    clahe_schedule: tuple = DEFAULT_CLAHE_SCHEDULE
    target_ridge_period: float = DEFAULT_TARGET_PERIOD
    acceptable_period_range: tuple = DEFAULT_PERIOD_RANGE
    rotation: str = "auto-moment"  # or "asis"

    def __post_init__(self):
        sides = [s for s, _ in self.clahe_schedule]
        if sides != sorted(sides, reverse=True) or len(set(sides)) != len(sides):
            raise ValueError("clahe_schedule tile sides must be strictly decreasing")
        lo, hi = self.acceptable_period_range
        if not (0 < lo <= self.target_ridge_period <= hi):
            raise ValueError("need 0 < min <= target_ridge_period <= max")
        if self.rotation not in ("asis", "auto-moment"):
            raise ValueError(f"unknown rotation mode {self.rotation!r}")


@dataclass
class PipelineMetadata:
    angle_deg: float = 0.0
    measured_period_px: float = 0.0
    scale_factor: float = 1.0
    stages: list = field(default_factory=list)
    rotation_degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "angle_deg": self.angle_deg,
            "measured_period_px": self.measured_period_px,
            "scale_factor": self.scale_factor,
            "stages": list(self.stages),
        }


# --- CLAHE --------------------------------------------------------------------

def _tile_mappings(pix: np.ndarray, tile_px: int, ny: int, nx: int, clip_limit: float) -> np.ndarray:
    """Equalization mapping (256 entries) per tile from clipped histograms.

    The clip limit is a multiple of the mean bin height of the tile; excess
    mass is spread uniformly over all bins in one pass.
    """
    h, w = pix.shape
    ty = np.minimum(np.arange(h) // tile_px, ny - 1)
    tx = np.minimum(np.arange(w) // tile_px, nx - 1)
    tile_id = ty[:, None] * nx + tx[None, :]
    combined = tile_id.astype(np.int64) * 256 + pix
    hist = np.bincount(combined.ravel(), minlength=ny * nx * 256).reshape(ny * nx, 256).astype(np.float64)
    sizes = hist.sum(axis=1, keepdims=True)
    if math.isfinite(clip_limit):
        limit = clip_limit * sizes / 256.0
        excess = np.maximum(hist - limit, 0.0).sum(axis=1, keepdims=True)
        hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist, axis=1)
    return round_half_away(255.0 * cdf / cdf[:, -1:]).reshape(ny, nx, 256)


def clahe_pass(img: GrayRaster, tile_px: int, clip_limit: float) -> GrayRaster:
    """One contrast-limited adaptive histogram equalization pass.

    Per-tile clipped-histogram equalization with bilinear interpolation
    between the mappings of neighbouring tiles.  The clip limit is a
    multiple of the mean histogram bin height; excess mass is spread
    uniformly over all bins.  A tile larger than the image degenerates to a
    single-tile (global) equalization.
    """
    if tile_px < 2:
        raise ValueError("tile_px must be >= 2")
    if clip_limit < 1.0:
        raise ValueError("clip_limit must be >= 1.0")
    pix = img.pixels
    h, w = pix.shape
    nx = max(1, -(-w // tile_px))
    ny = max(1, -(-h // tile_px))

    mappings = _tile_mappings(pix, tile_px, ny, nx, clip_limit)
    centers_x = np.array([(tx * tile_px + min((tx + 1) * tile_px, w) - 1) / 2.0 for tx in range(nx)])
    centers_y = np.array([(ty * tile_px + min((ty + 1) * tile_px, h) - 1) / 2.0 for ty in range(ny)])

    if nx == 1 and ny == 1:
        return GrayRaster(mappings[0, 0][pix].astype(np.uint8))

    # Fractional tile coordinates of every pixel, clamped to the center grid.
    fx = np.interp(np.arange(w), centers_x, np.arange(nx)) if nx > 1 else np.zeros(w)
    fy = np.interp(np.arange(h), centers_y, np.arange(ny)) if ny > 1 else np.zeros(h)
    x0i = np.clip(np.floor(fx).astype(np.intp), 0, nx - 1)
    y0i = np.clip(np.floor(fy).astype(np.intp), 0, ny - 1)
    x1i = np.minimum(x0i + 1, nx - 1)
    y1i = np.minimum(y0i + 1, ny - 1)
    wx = (fx - x0i)[None, :]
    wy = (fy - y0i)[:, None]

    v = pix
    m00 = mappings[y0i[:, None], x0i[None, :], v]
    m01 = mappings[y0i[:, None], x1i[None, :], v]
    m10 = mappings[y1i[:, None], x0i[None, :], v]
    m11 = mappings[y1i[:, None], x1i[None, :], v]
    out = (m00 * (1 - wx) + m01 * wx) * (1 - wy) + (m10 * (1 - wx) + m11 * wx) * wy
    return GrayRaster(round_half_away(out).astype(np.uint8))


def enhance_iterative(img: GrayRaster, schedule=DEFAULT_CLAHE_SCHEDULE) -> GrayRaster:
    """Apply CLAHE passes in schedule order (decreasing tile sides)."""
    if not schedule:
        raise ValueError("empty CLAHE schedule")
    out = img
    for tile_px, clip in schedule:
        out = clahe_pass(out, tile_px, clip)
    return out


# --- Ridge period ---------------------------------------------------------------

def _spectral_concentration(signature: np.ndarray, pad: int = 4, halfwidth: int = 8) -> float:
    """Fraction of non-DC power near the dominant frequency of a signature.

    Hann-windowed, zero-padded spectrum; close to 1 for any periodic
    signature, well below 1 for white noise.
    """
    windowed = signature * np.hanning(signature.size)
    power = np.abs(np.fft.rfft(windowed, n=pad * signature.size)) ** 2
    nz = power[1:]
    total = nz.sum()
    if total <= 0:
        return 0.0
    k = int(np.argmax(nz))
    lo, hi = max(0, k - halfwidth), min(nz.size, k + halfwidth + 1)
    return float(nz[lo:hi].sum() / total)


def _block_period(block: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> float | None:
    """Dominant ridge period of one block, or None when aperiodic.

    Projects intensities onto the gradient-dominant direction (normal to
    the ridges), autocorrelates the 1-D signature and takes the first
    significant peak lag, refined by parabolic interpolation.
    """
    vxy = 2.0 * np.sum(gx * gy)
    vxx_yy = np.sum(gx * gx - gy * gy)
    if vxy == 0.0 and vxx_yy == 0.0:
        return None
    normal = 0.5 * math.atan2(vxy, vxx_yy)  # direction of intensity variation

    h, w = block.shape
    ys, xs = np.mgrid[0:h, 0:w]
    # Integer-aligned projection bins, ~1 px wide along the normal.
    proj = xs * math.cos(normal) + ys * math.sin(normal)
    bins = np.floor(proj + 0.5).astype(int)
    bins -= bins.min()
    counts = np.bincount(bins.ravel())
    sums = np.bincount(bins.ravel(), weights=block.ravel())
    valid = counts > 0
    signature = sums[valid] / counts[valid]
    signature = signature - signature.mean()
    n = signature.size
    if n < 2 * PERIOD_MIN_LAG or not np.any(signature):
        return None
    if _spectral_concentration(signature) < PERIOD_CONC_MIN:
        return None

    # Unbiased autocorrelation so peak height does not decay with lag.
    overlap = n - np.arange(n)
    ac = np.correlate(signature, signature, mode="full")[n - 1:] / overlap
    if ac[0] <= 0:
        return None
    ac = ac / ac[0]
    max_lag = min(n - PERIOD_MIN_LAG, n - 1)
    for lag in range(PERIOD_MIN_LAG, max_lag):
        if ac[lag] >= ac[lag - 1] and ac[lag] > ac[lag + 1] and ac[lag] >= PERIOD_PEAK_MIN:
            denom = ac[lag - 1] - 2.0 * ac[lag] + ac[lag + 1]
            shift = 0.0 if denom == 0 else 0.5 * (ac[lag - 1] - ac[lag + 1]) / denom
            return lag + float(np.clip(shift, -0.5, 0.5))
    return None


def estimate_ridge_period(img: GrayRaster, mask: ForegroundMask) -> float:
    """Median dominant ridge period (px) over foreground blocks."""
    pix = img.as_float()
    bits = mask.bits
    h, w = pix.shape
    gx_all, gy_all = sobel_gradients(pix)
    periods = []
    any_foreground = False
    for by in range(h // PERIOD_BLOCK):
        for bx in range(w // PERIOD_BLOCK):
            sl = np.s_[by * PERIOD_BLOCK:(by + 1) * PERIOD_BLOCK, bx * PERIOD_BLOCK:(bx + 1) * PERIOD_BLOCK]
            if bits[sl].mean() < 0.5:
                continue
            any_foreground = True
            p = _block_period(pix[sl], gx_all[sl], gy_all[sl])
            if p is not None:
                periods.append(p)
    if not any_foreground:
        raise PreprocessError("ridge-period", "no foreground block of %dx%d px" % (PERIOD_BLOCK, PERIOD_BLOCK))
    if not periods:
        raise PreprocessError("ridge-period", "no dominant periodicity in any foreground block")
    return float(np.median(periods))


def normalize_ridge_frequency(img: GrayRaster, measured_period: float, target: float) -> GrayRaster:
    """Resample so the measured ridge period becomes the target period."""
    if measured_period <= 0 or target <= 0:
        raise ValueError("periods must be positive")
    scale = target / measured_period
    if not (SCALE_LIMITS[0] <= scale <= SCALE_LIMITS[1]):
        raise PreprocessError("normalize", f"implausible scale factor {scale:.3g}")
    out = resize_bilinear(img.as_float(), scale, scale)
    return GrayRaster(np.clip(round_half_away(out), 0, 255).astype(np.uint8))


# --- Segmentation / rotation ----------------------------------------------------

def _otsu_split(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance over a small value set.

    Runs on log-variances so the handful of extreme boundary blocks cannot
    outweigh the background/foreground split.
    """
    logs = np.sort(np.log10(values + 1e-6))
    best_t = logs[-1]
    best_score = -1.0
    total = logs.size
    cum = np.cumsum(logs)
    for k in range(1, total):
        if logs[k] == logs[k - 1]:
            continue
        n0, n1 = k, total - k
        m0 = cum[k - 1] / n0
        m1 = (cum[-1] - cum[k - 1]) / n1
        score = n0 * n1 * (m0 - m1) ** 2
        if score > best_score:
            best_score = score
            best_t = (logs[k - 1] + logs[k]) / 2.0
    return float(10.0**best_t - 1e-6)


def segment_foreground(img: GrayRaster) -> ForegroundMask:
    """Block-variance segmentation with closing and largest-component retention.

    A block is foreground when its variance clears the lower of two cuts:
    a fixed fraction of the global variance, or an Otsu split of the
    per-block variances.  The global-fraction rule alone drops low-contrast
    foreground next to bright backgrounds (between-class variance inflates
    the global figure); the Otsu rule alone shreds uniformly textured
    images.  Taking the minimum keeps both degenerate cases correct.
    """
    pix = img.as_float()
    h, w = pix.shape
    # Variance of a median-filtered copy: sensor-style pixel noise shrinks
    # by an order of magnitude while ridge texture and region boundaries
    # survive, and (unlike linear smoothing) no edge energy bleeds into
    # background blocks.
    smooth = ndi.median_filter(pix, size=SEGMENT_DENOISE_WINDOW, mode="nearest")
    ny, nx = -(-h // SEGMENT_BLOCK), -(-w // SEGMENT_BLOCK)
    block_vars = np.zeros((ny, nx))
    for by in range(ny):
        for bx in range(nx):
            block = smooth[by * SEGMENT_BLOCK:(by + 1) * SEGMENT_BLOCK, bx * SEGMENT_BLOCK:(bx + 1) * SEGMENT_BLOCK]
            block_vars[by, bx] = block.var()
    threshold = min(SEGMENT_VAR_FACTOR * smooth.var(), _otsu_split(block_vars.ravel()))
    grid = block_vars > threshold
    bits = np.kron(grid, np.ones((SEGMENT_BLOCK, SEGMENT_BLOCK), dtype=bool))[:h, :w]
    bits = binary_close(bits, SEGMENT_CLOSE_SIZE)
    bits = largest_component(bits)
    if not bits.any():
        raise PreprocessError("segmentation", "empty foreground")
    return ForegroundMask(bits)


def _principal_axis(bits: np.ndarray) -> tuple[float, float]:
    """(angle of major axis from x-axis in degrees, major/minor axis ratio)."""
    ys, xs = np.nonzero(bits)
    x = xs - xs.mean()
    y = ys - ys.mean()
    mu20 = np.mean(x * x)
    mu02 = np.mean(y * y)
    mu11 = np.mean(x * y)
    angle = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    common = math.hypot(mu20 - mu02, 2.0 * mu11)
    lam1 = (mu20 + mu02 + common) / 2.0
    lam2 = (mu20 + mu02 - common) / 2.0
    ratio = math.inf if lam2 <= 0 else math.sqrt(lam1 / lam2)
    return math.degrees(angle), ratio


def rotate_upright(img: GrayRaster, mask: ForegroundMask) -> tuple[GrayRaster, ForegroundMask, float, bool]:
    """Align the mask's principal axis to vertical.

    Returns (rotated image, rotated mask, applied angle in degrees,
    degenerate flag).  Near-circular masks (axis ratio < 1.05) are left
    untouched and flagged.
    """
    if not mask.matches(img):
        raise PreprocessError("rotation", "mask dimensions do not match raster")
    axis_deg, ratio = _principal_axis(mask.bits)
    if ratio < ROTATE_MIN_AXIS_RATIO:
        return img, mask, 0.0, True
    angle = 90.0 - axis_deg
    angle = (angle + 90.0) % 180.0 - 90.0  # fold to (-90, 90]
    # Array rows grow downward, so a ccw rotation in image coordinates is a
    # negative-angle ndi.rotate.
    rotated = rotate_image(img.as_float(), -angle, order=1, cval=WHITE)
    rot_mask = rotate_image(mask.bits.astype(np.float64), -angle, order=0, cval=0.0) > 0.5
    return (
        GrayRaster(np.clip(round_half_away(rotated), 0, 255).astype(np.uint8)),
        ForegroundMask(rot_mask),
        float(angle),
        False,
    )


# --- Full pipeline ----------------------------------------------------------------

def preprocess(image, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[GrayRaster, ForegroundMask, PipelineMetadata]:
    """Run the full pipeline on a grayscale raster or an (H, W, 3) array.

    Stages: grayscale, segment, rotate (config-dependent), iterative CLAHE,
    ridge-period estimation, frequency normalization, background whitening.
    Any stage error aborts with the stage identity.
    """
    from .raster import to_grayscale

    meta = PipelineMetadata()
    if isinstance(image, GrayRaster):
        img = image
    else:
        try:
            img = to_grayscale(image)
        except Exception as exc:
            raise PreprocessError("grayscale", str(exc)) from exc
    meta.stages.append("grayscale")

    mask = segment_foreground(img)
    meta.stages.append("segmentation")

    if cfg.rotation == "auto-moment":
        img, mask, angle, degenerate = rotate_upright(img, mask)
        meta.angle_deg = angle
        meta.rotation_degenerate = degenerate
        meta.stages.append("rotation")

    try:
        img = enhance_iterative(img, cfg.clahe_schedule)
    except Exception as exc:
        raise PreprocessError("enhancement", str(exc)) from exc
    meta.stages.append("enhancement")

    period = estimate_ridge_period(img, mask)
    meta.measured_period_px = period
    meta.stages.append("ridge-period")

    scale = cfg.target_ridge_period / period
    img = normalize_ridge_frequency(img, period, cfg.target_ridge_period)
    mask = ForegroundMask(resize_mask_nearest(mask.bits, scale, scale))
    meta.scale_factor = scale
    meta.stages.append("normalization")

    img = apply_mask(img, mask)
    meta.stages.append("whitening")
    return img, mask, meta
