"""Block-based quality components and the canonical 65-entry feature vector.

Five block families (orientation certainty, local clarity, frequency-domain
analysis, ridge-valley uniformity, orientation flow) are each summarized as
ten histogram bins plus mean and standard deviation; together with five
scalar components they form a fixed-order vector of 65 named values.

The local clarity, frequency-domain and uniformity constructions are
reconstructions from their standard one-line definitions (regression-line
threshold over a 1-D ridge signature), not bit-exact ports of any reference
implementation.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .filters import sample_rotated_patch, sobel_gradients
from .raster import ForegroundMask, GrayRaster

DEFAULT_BLOCK = 32
MIN_COVERAGE = 0.5  # foreground fraction needed for a valid block
N_BINS = 10

_FAMILY_PREFIXES = {
    "fda": "Frequency Domain Analysis",
    "lcs": "Local Clarity Score",
    "ocl": "Orientation Certainty Level",
    "of": "Orientation Flow",
    "rvu": "Ridge Valley Uniformity",
}


def _family_names(prefix: str) -> list[str]:
    return [f"{prefix} Bin {i}" for i in range(N_BINS)] + [f"{prefix} Mean", f"{prefix} Standard Deviation"]


#: Canonical fixed feature order; the four external minutiae entries of the
#: full 69-entry table are not part of this toolkit.
CANONICAL_FEATURE_NAMES: tuple = tuple(
    _family_names(_FAMILY_PREFIXES["fda"])
    + ["ROI Area Mean"]
    + _family_names(_FAMILY_PREFIXES["lcs"])
    + ["MMB", "MU"]
    + _family_names(_FAMILY_PREFIXES["ocl"])
    + _family_names(_FAMILY_PREFIXES["of"])
    + ["ROI Relative Orientation Map Coherence Sum", "ROI Orientation Map Coherence Sum"]
    + _family_names(_FAMILY_PREFIXES["rvu"])
)

assert len(CANONICAL_FEATURE_NAMES) == 65


class FeatureError(RuntimeError):
    """A feature family could not be computed."""


@dataclass(frozen=True)
class OrientationMap:
    """Per-block ridge orientation, radians in [0, pi)."""

    theta: np.ndarray  # (ny, nx)
    valid: np.ndarray  # (ny, nx) bool
    block_px: int

    @property
    def shape(self):
        return self.theta.shape


@dataclass(frozen=True)
class CoherenceMap:
    values: np.ndarray  # (ny, nx), in [0, 1]
    valid: np.ndarray
    block_px: int


@dataclass(frozen=True)
class BlockValues:
    """Per-valid-block scalar values of one feature family."""

    name: str
    values: np.ndarray  # 1-D


@dataclass(frozen=True)
class FeatureVector:
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if len(self.names) != v.size:
            raise FeatureError(f"{len(self.names)} names but {v.size} values")
        if not np.all(np.isfinite(v)):
            bad = [self.names[i] for i in np.nonzero(~np.isfinite(v))[0]]
            raise FeatureError(f"non-finite feature values: {bad}")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def value(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


# --- Block plumbing -----------------------------------------------------------


def _grid_dims(img: GrayRaster, block_px: int) -> tuple[int, int]:
    ny, nx = img.height // block_px, img.width // block_px
    if ny < 1 or nx < 1:
        raise FeatureError(f"image {img.width}x{img.height} smaller than one {block_px}px block")
    return ny, nx


def _block_sums(arr: np.ndarray, ny: int, nx: int, b: int) -> np.ndarray:
    return arr[: ny * b, : nx * b].reshape(ny, b, nx, b).sum(axis=(1, 3))


def _coverage(mask: ForegroundMask, ny: int, nx: int, b: int) -> np.ndarray:
    return _block_sums(mask.bits.astype(np.float64), ny, nx, b) / float(b * b)


def _gradient_moments(img: GrayRaster, ny: int, nx: int, b: int):
    gx, gy = sobel_gradients(img.as_float())
    gxx = _block_sums(gx * gx, ny, nx, b)
    gyy = _block_sums(gy * gy, ny, nx, b)
    gxy = _block_sums(gx * gy, ny, nx, b)
    return gxx, gyy, gxy


def orientation_field(sample: GrayRaster, mask: ForegroundMask, block_px: int = DEFAULT_BLOCK) -> OrientationMap:
    """Per-block ridge orientation from doubled-angle gradient averaging.

    theta = 1/2 atan2(sum 2 gx gy, sum gx^2 - gy^2) gives the dominant
    gradient direction; the ridge orientation is perpendicular to it and is
    what this map stores.  Blocks with < 50% foreground or zero gradient
    energy are invalid.
    """
    if block_px < 8:
        raise ValueError("block_px must be >= 8")
    ny, nx = _grid_dims(sample, block_px)
    gxx, gyy, gxy = _gradient_moments(sample, ny, nx, block_px)
    gradient_dir = 0.5 * np.arctan2(2.0 * gxy, gxx - gyy)
    theta = np.mod(gradient_dir + np.pi / 2.0, np.pi)
    energy = gxx + gyy
    valid = (_coverage(mask, ny, nx, block_px) >= MIN_COVERAGE) & (energy > 0)
    theta = np.where(valid, theta, 0.0)
    return OrientationMap(theta=theta, valid=valid, block_px=block_px)


def coherence_map(sample: GrayRaster, mask: ForegroundMask, block_px: int = DEFAULT_BLOCK) -> CoherenceMap:
    """Vector-sum coherence of the gradient field per block, in [0, 1]."""
    if block_px < 8:
        raise ValueError("block_px must be >= 8")
    ny, nx = _grid_dims(sample, block_px)
    gxx, gyy, gxy = _gradient_moments(sample, ny, nx, block_px)
    denom = gxx + gyy
    num = np.hypot(gxx - gyy, 2.0 * gxy)
    values = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    valid = _coverage(mask, ny, nx, block_px) >= MIN_COVERAGE
    return CoherenceMap(values=np.clip(values, 0.0, 1.0), valid=valid, block_px=block_px)


def coherence_sums(cmap: CoherenceMap) -> tuple[float, float]:
    """(sum of coherence over valid blocks, same normalized by block count)."""
    vals = cmap.values[cmap.valid]
    if vals.size == 0:
        raise FeatureError("coherence sums: zero valid blocks")
    total = float(vals.sum())
    return total, total / vals.size


def ocl_blocks(sample: GrayRaster, mask: ForegroundMask, block_px: int = DEFAULT_BLOCK) -> BlockValues:
    """Orientation certainty per block: 1 - l2/l1 of the gradient covariance."""
    ny, nx = _grid_dims(sample, block_px)
    gxx, gyy, gxy = _gradient_moments(sample, ny, nx, block_px)
    half_trace = (gxx + gyy) / 2.0
    root = np.sqrt(((gxx - gyy) / 2.0) ** 2 + gxy**2)
    lam1 = half_trace + root
    lam2 = half_trace - root
    ocl = np.where(lam1 > 0, 1.0 - np.clip(lam2, 0.0, None) / np.where(lam1 > 0, lam1, 1.0), 0.0)
    valid = _coverage(mask, ny, nx, block_px) >= MIN_COVERAGE
    if not valid.any():
        raise FeatureError("Orientation Certainty Level: zero valid blocks")
    return BlockValues("Orientation Certainty Level", np.clip(ocl[valid], 0.0, 1.0))


# --- Ridge signature families ---------------------------------------------------


def _ridge_profile(sample_f: np.ndarray, center_xy, theta: float, block_px: int):
    """Profile across the ridges plus its regression line for one block.

    The block is resampled so ridges run vertically; the profile is the
    column mean, and the regression line over column index serves as the
    local gray-level threshold.
    """
    normal = theta + np.pi / 2.0
    patch = sample_rotated_patch(sample_f, center_xy, normal, block_px)
    profile = patch.mean(axis=0)
    x = np.arange(block_px, dtype=np.float64)
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    slope = float(np.dot(xc, profile - profile.mean())) / denom
    line = profile.mean() + slope * xc
    return patch, profile, line


def _iter_valid_blocks(omap: OrientationMap):
    ny, nx = omap.shape
    b = omap.block_px
    for by in range(ny):
        for bx in range(nx):
            if omap.valid[by, bx]:
                center = ((bx + 0.5) * b - 0.5, (by + 0.5) * b - 0.5)
                yield by, bx, center


def _profile_table(sample: GrayRaster, omap: OrientationMap) -> list:
    """(patch, profile, line) for every valid block, in block scan order."""
    sample_f = sample.as_float()
    return [
        _ridge_profile(sample_f, center, omap.theta[by, bx], omap.block_px)
        for by, bx, center in _iter_valid_blocks(omap)
    ]


def local_clarity_blocks(
    sample: GrayRaster,
    mask: ForegroundMask,
    block_px: int = DEFAULT_BLOCK,
    orientation: OrientationMap | None = None,
    _profiles: list | None = None,
) -> BlockValues:
    """Ridge/valley separability per block, in [0, 1].

    Columns of the ridge-aligned block are split into ridge and valley
    regions by the regression line; the clarity is one minus the fraction
    of pixels on the wrong side of the line for their region.  Blocks whose
    columns fall entirely on one side score 0.
    """
    omap = orientation if orientation is not None else orientation_field(sample, mask, block_px)
    out = []
    for patch, profile, line in _profiles if _profiles is not None else _profile_table(sample, omap):
        ridge_cols = profile < line
        valley_cols = ~ridge_cols
        if not ridge_cols.any() or not valley_cols.any():
            out.append(0.0)
            continue
        bad_ridge = np.count_nonzero(patch[:, ridge_cols] > line[ridge_cols])
        bad_valley = np.count_nonzero(patch[:, valley_cols] < line[valley_cols])
        out.append(1.0 - (bad_ridge + bad_valley) / patch.size)
    if not out:
        raise FeatureError("Local Clarity Score: zero valid blocks")
    return BlockValues("Local Clarity Score", np.clip(np.array(out), 0.0, 1.0))


def fda_blocks(
    sample: GrayRaster,
    mask: ForegroundMask,
    block_px: int = DEFAULT_BLOCK,
    orientation: OrientationMap | None = None,
    _profiles: list | None = None,
) -> BlockValues:
    """Dominant-frequency power concentration of the ridge signature, [0, 1]."""
    omap = orientation if orientation is not None else orientation_field(sample, mask, block_px)
    out = []
    for _, profile, _ in _profiles if _profiles is not None else _profile_table(sample, omap):
        power = np.abs(np.fft.rfft(profile - profile.mean())) ** 2
        nz = power[1:]
        total = nz.sum()
        out.append(0.0 if total <= 0 else float(nz.max() / total))
    if not out:
        raise FeatureError("Frequency Domain Analysis: zero valid blocks")
    return BlockValues("Frequency Domain Analysis", np.clip(np.array(out), 0.0, 1.0))


def rvu_blocks(
    sample: GrayRaster,
    mask: ForegroundMask,
    block_px: int = DEFAULT_BLOCK,
    orientation: OrientationMap | None = None,
    _profiles: list | None = None,
) -> BlockValues:
    """Ridge-to-valley width balance per block: exp(-|log ratio|) in (0, 1]."""
    omap = orientation if orientation is not None else orientation_field(sample, mask, block_px)
    out = []
    for _, profile, line in _profiles if _profiles is not None else _profile_table(sample, omap):
        out.append(uniformity_from_signature(profile, line))
    if not out:
        raise FeatureError("Ridge Valley Uniformity: zero valid blocks")
    return BlockValues("Ridge Valley Uniformity", np.array(out))


def uniformity_from_signature(profile: np.ndarray, line: np.ndarray) -> float:
    """exp(-|log(ridge width / valley width)|); 0 when either side is missing."""
    ridge = int(np.count_nonzero(profile < line))
    valley = profile.size - ridge
    if ridge == 0 or valley == 0:
        return 0.0
    return min(ridge, valley) / max(ridge, valley)


def orientation_flow_blocks(omap: OrientationMap) -> BlockValues:
    """Local orientation smoothness: 1 - (mean folded angular difference)/(pi/2).

    The difference to each valid 8-neighbour is taken modulo pi and folded
    to [0, pi/2].  Blocks without any valid neighbour are excluded.
    """
    ny, nx = omap.shape
    out = []
    for by in range(ny):
        for bx in range(nx):
            if not omap.valid[by, bx]:
                continue
            diffs = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0:
                        continue
                    y, x = by + dy, bx + dx
                    if 0 <= y < ny and 0 <= x < nx and omap.valid[y, x]:
                        d = abs(omap.theta[by, bx] - omap.theta[y, x]) % math.pi
                        diffs.append(min(d, math.pi - d))
            if diffs:
                out.append(1.0 - (sum(diffs) / len(diffs)) / (math.pi / 2.0))
    if not out:
        raise FeatureError("Orientation Flow: no block with a valid neighbour")
    return BlockValues("Orientation Flow", np.clip(np.array(out), 0.0, 1.0))


# --- Scalars and assembly --------------------------------------------------------


def scalar_features(sample: GrayRaster, mask: ForegroundMask, block_px: int = DEFAULT_BLOCK) -> tuple[float, float, float]:
    """(MU, MMB, ROI Area Mean).

    MU is the mean gray over the foreground, MMB the mean of per-block mean
    grays over valid blocks, ROI Area Mean the mean per-block foreground
    coverage.
    """
    if not mask.matches(sample):
        raise FeatureError("scalar features: mask dimensions do not match sample")
    if not mask.bits.any():
        raise FeatureError("scalar features: empty mask")
    ny, nx = _grid_dims(sample, block_px)
    coverage = _coverage(mask, ny, nx, block_px)
    valid = coverage >= MIN_COVERAGE
    if not valid.any():
        raise FeatureError("scalar features: zero valid blocks")
    mu = float(sample.as_float()[mask.bits].mean())
    block_means = _block_sums(sample.as_float(), ny, nx, block_px) / float(block_px * block_px)
    mmb = float(block_means[valid].mean())
    roi_area_mean = float(coverage.mean())
    return mu, mmb, roi_area_mean


def histogram_bins(values: BlockValues, n_bins: int = N_BINS) -> np.ndarray:
    """Relative frequencies over equal-width bins on [0, 1], last bin closed."""
    v = np.asarray(values.values, dtype=np.float64)
    if v.size == 0:
        raise FeatureError(f"{values.name}: no values to bin")
    if v.min() < 0.0 or v.max() > 1.0:
        raise FeatureError(f"{values.name}: values outside [0, 1]")
    idx = np.minimum((v * n_bins).astype(int), n_bins - 1)
    return np.bincount(idx, minlength=n_bins) / v.size


def _family_entries(values: BlockValues) -> list[float]:
    bins = histogram_bins(values)
    return list(bins) + [float(values.values.mean()), float(values.values.std())]


def extract_feature_vector(sample: GrayRaster, mask: ForegroundMask, block_px: int = DEFAULT_BLOCK) -> FeatureVector:
    """Compute all families at the given block size and assemble the vector."""
    omap = orientation_field(sample, mask, block_px)
    cmap = coherence_map(sample, mask, block_px)
    coh_sum, coh_rel = coherence_sums(cmap)
    mu, mmb, roi_area = scalar_features(sample, mask, block_px)
    profiles = _profile_table(sample, omap)

    entries: list[float] = []
    entries += _family_entries(fda_blocks(sample, mask, block_px, omap, _profiles=profiles))
    entries.append(roi_area)
    entries += _family_entries(local_clarity_blocks(sample, mask, block_px, omap, _profiles=profiles))
    entries += [mmb, mu]
    entries += _family_entries(ocl_blocks(sample, mask, block_px))
    entries += _family_entries(orientation_flow_blocks(omap))
    entries += [coh_rel, coh_sum]
    entries += _family_entries(rvu_blocks(sample, mask, block_px, omap, _profiles=profiles))
    return FeatureVector(CANONICAL_FEATURE_NAMES, np.array(entries))


# --- Feature CSV ------------------------------------------------------------------


def write_features_csv(path, rows) -> None:
    """Write (image_id, FeatureVector) pairs with the canonical header."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", *CANONICAL_FEATURE_NAMES])
        for image_id, fv in rows:
            if tuple(fv.names) != CANONICAL_FEATURE_NAMES:
                raise FeatureError(f"{image_id}: non-canonical feature names")
            writer.writerow([image_id, *(repr(float(v)) for v in fv.values)])


def read_features_csv(path) -> list:
    """Read a feature CSV back into (image_id, FeatureVector) pairs."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", *CANONICAL_FEATURE_NAMES]:
            raise FeatureError(f"{path}: unexpected feature CSV header")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 66:
                raise FeatureError(f"{path}:{lineno}: expected 66 columns, got {len(row)}")
            try:
                values = np.array([float(x) for x in row[1:]])
            except ValueError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from exc
            out.append((row[0], FeatureVector(CANONICAL_FEATURE_NAMES, values)))
    return out
