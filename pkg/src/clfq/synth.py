"""Synthetic contactless-fingerprint-like training data.

A base ridge pattern is rendered by iteratively band-pass filtering seeded
noise with a smooth random orientation field; a quality knob c in [0, 100]
is mapped to degradation parameters (blur, motion, noise, contrast,
illumination, dirt, rotation jitter) whose midpoints worsen monotonically
as c drops.  Per-field jitter shrinks to zero at c = 0 and c = 100 so the
preset extremes are exact, while mid-range samples overlap across presets.
"""

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .features import FeatureVector, extract_feature_vector, write_features_csv
from .forest import ForestModel, LabeledDataset, predict_prob
from .preprocess import PreprocessConfig, preprocess
from .raster import ForegroundMask, GrayRaster, WHITE, round_half_away, write_mask_pgm, write_pgm

PATTERN_W = 192
PATTERN_H = 256
RIDGE_PERIOD = 9.0
RIDGE_DARK = 60.0
RIDGE_LIGHT = 210.0
SYNTH_TILE = 32
SYNTH_ITERATIONS = 3
MAX_RETRIES = 25

HIGH_PRESET_RANGE = (66.0, 100.0)
LOW_PRESET_RANGE = (0.0, 33.0)

#: Degradation value at c = 0 (worst) and c = 100 (best) per field.
QUALITY_DEGRADATION_RANGES = {
    "blur_sigma": (1.7, 0.0),
    "motion_len": (5.0, 0.0),
    "noise_sigma": (18.0, 0.5),
    "contrast_scale": (0.35, 1.0),
    "illumination_gradient": (0.3, 0.0),
    "rotation_jitter": (3.0, 0.0),
    "dirt_density": (0.1, 0.0),
}
QUALITY_JITTER_SPAN = 8.0    # max +- per-field jitter on the c scale
QUALITY_JITTER_TAPER = 10.0  # jitter ramps down to 0 within this distance of 0/100


@dataclass(frozen=True)
class QualityPreset:
    c_range: tuple
    label: int

    def __post_init__(self):
        lo, hi = self.c_range
        if not (0.0 <= lo <= hi <= 100.0):
            raise ValueError("preset range must satisfy 0 <= lo <= hi <= 100")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


HIGH_PRESET = QualityPreset(HIGH_PRESET_RANGE, 1)
LOW_PRESET = QualityPreset(LOW_PRESET_RANGE, 0)

#: Bimodal presets train the classifier.  Evaluation corpora instead span the
#: moderate-quality band continuously, like real mobile captures whose utility
#: varies sample by sample rather than clustering at the extremes.
TRAINING_PRESETS = (HIGH_PRESET, LOW_PRESET)
EVALUATION_PRESETS = (QualityPreset((65.0, 85.0), 1), QualityPreset((45.0, 65.0), 0))


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 0.0
    motion_len: float = 0.0
    noise_sigma: float = 0.0
    contrast_scale: float = 1.0
    illumination_gradient: float = 0.0
    rotation_jitter: float = 0.0
    dirt_density: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.contrast_scale > 1.0:
            raise ValueError("contrast_scale must be <= 1")


# --- Base pattern -----------------------------------------------------------------


def _orientation_surface(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Smooth random ridge-orientation field around vertical, radians."""
    xs = np.linspace(0.0, 1.0, w)[None, :]
    ys = np.linspace(0.0, 1.0, h)[:, None]
    theta = np.full((h, w), math.pi / 2.0)
    for _ in range(2):
        kx = rng.integers(1, 3)
        ky = rng.integers(1, 3)
        phase_x, phase_y = rng.uniform(0, 2 * math.pi, 2)
        amp = rng.uniform(0.15, 0.35)
        theta = theta + amp * np.sin(2 * math.pi * kx * xs + phase_x) * np.sin(2 * math.pi * ky * ys + phase_y)
    return theta


_N_FILTER_ANGLES = 32


def _bandpass_filter_bank(period: float) -> np.ndarray:
    """Oriented band-pass filters (rfft2 layout) for quantized wave normals."""
    tile = SYNTH_TILE
    fy = np.fft.fftfreq(tile)[:, None]
    fx = np.fft.rfftfreq(tile)[None, :]
    radius = np.hypot(fx, fy)
    f0 = 1.0 / period
    radial = np.exp(-((radius - f0) ** 2) / (2 * (0.3 * f0) ** 2))
    ang = np.arctan2(fy, fx)
    bank = np.empty((_N_FILTER_ANGLES, tile, fx.size))
    for k in range(_N_FILTER_ANGLES):
        normal = k * math.pi / _N_FILTER_ANGLES
        diff = np.mod(ang - normal + math.pi / 2.0, math.pi) - math.pi / 2.0
        bank[k] = radial * np.exp(-(diff**2) / (2 * 0.35**2))
    return bank


def _oriented_bandpass_tiles(field: np.ndarray, theta: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """One pass of per-tile oriented band-pass filtering with overlap-add.

    All tiles go through one batched FFT; each tile picks the filter of its
    quantized center orientation.
    """
    h, w = field.shape
    tile = SYNTH_TILE
    step = tile // 2
    window = np.outer(np.hanning(tile), np.hanning(tile))
    y_starts = range(0, h - tile + 1, step)
    x_starts = range(0, w - tile + 1, step)
    origins = [(y0, x0) for y0 in y_starts for x0 in x_starts]

    patches = np.stack([field[y0:y0 + tile, x0:x0 + tile] for y0, x0 in origins])
    # Wave vector is normal to the ridges.
    normals = np.array([theta[y0 + tile // 2, x0 + tile // 2] + math.pi / 2.0 for y0, x0 in origins])
    bins = np.mod(np.round(normals / (math.pi / _N_FILTER_ANGLES)).astype(int), _N_FILTER_ANGLES)
    spectra = np.fft.rfft2(patches * window) * bank[bins]
    responses = np.fft.irfft2(spectra, s=(tile, tile)) * window

    acc = np.zeros((h, w))
    weight = np.zeros((h, w))
    w2 = window**2
    for (y0, x0), resp in zip(origins, responses):
        acc[y0:y0 + tile, x0:x0 + tile] += resp
        weight[y0:y0 + tile, x0:x0 + tile] += w2
    out = np.divide(acc, weight, out=np.zeros_like(acc), where=weight > 1e-9)
    std = out.std()
    return out / std if std > 0 else out


_FILTER_BANK = None


def generate_base_pattern(seed: int) -> tuple[GrayRaster, ForegroundMask]:
    """Clean ridge-pattern sample with an elliptical foreground mask."""
    global _FILTER_BANK
    if _FILTER_BANK is None:
        _FILTER_BANK = _bandpass_filter_bank(RIDGE_PERIOD)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(0,)))
    w, h = PATTERN_W, PATTERN_H
    theta = _orientation_surface(rng, w, h)
    field = rng.standard_normal((h, w))
    for _ in range(SYNTH_ITERATIONS):
        field = _oriented_bandpass_tiles(field, theta, _FILTER_BANK)

    ridges = np.tanh(3.0 * field)  # soft threshold: ridge/valley separation
    gray = (RIDGE_LIGHT + RIDGE_DARK) / 2.0 - (RIDGE_LIGHT - RIDGE_DARK) / 2.0 * ridges

    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ax, ay = 0.42 * w, 0.46 * h
    mask = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    gray = np.where(mask, gray, float(WHITE))
    return GrayRaster(np.clip(round_half_away(gray), 0, 255).astype(np.uint8)), ForegroundMask(mask)


# --- Quality mapping ---------------------------------------------------------------


def params_from_quality(c: float, rng: np.random.Generator) -> DegradationParams:
    """Draw degradation parameters for a quality knob c in [0, 100].

    Each field uses its own jittered copy of c (jitter amplitude tapers to
    zero at the scale ends), linearly mapped between the field's worst and
    best values.
    """
    if not (0.0 <= c <= 100.0):
        raise ValueError("c must be in [0, 100]")
    values = {}
    taper = min(min(c, 100.0 - c) / QUALITY_JITTER_TAPER, 1.0)
    for name, (worst, best) in QUALITY_DEGRADATION_RANGES.items():
        span = QUALITY_JITTER_SPAN * taper
        c_field = float(np.clip(c + rng.uniform(-span, span), 0.0, 100.0))
        values[name] = worst + (best - worst) * (c_field / 100.0)
    return DegradationParams(**values)


def degrade(img: GrayRaster, mask: ForegroundMask, p: DegradationParams, rng: np.random.Generator) -> GrayRaster:
    """Apply the degradation pipeline; all-zero parameters reproduce the input.

    Order: contrast compression, illumination gradient, Gaussian blur,
    motion blur, additive noise, dirt speckles, rotation jitter.
    """
    out = img.as_float()
    h, w = out.shape

    if p.contrast_scale < 1.0:
        pivot = out[mask.bits].mean() if mask.bits.any() else out.mean()
        out = pivot + (out - pivot) * p.contrast_scale

    if p.illumination_gradient > 0.0:
        direction = rng.uniform(0.0, 2.0 * math.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = (xs - w / 2.0) * math.cos(direction) + (ys - h / 2.0) * math.sin(direction)
        out = out + p.illumination_gradient * ramp

    if p.blur_sigma > 0.0:
        out = ndi.gaussian_filter(out, p.blur_sigma, mode="nearest")

    if p.motion_len >= 2.0:
        out = _motion_blur(out, p.motion_len, rng.uniform(0.0, math.pi))

    if p.noise_sigma > 0.0:
        out = out + rng.normal(0.0, p.noise_sigma, out.shape)

    if p.dirt_density > 0.0:
        out = _dirt_speckles(out, mask, p.dirt_density, rng)

    if p.rotation_jitter > 0.0:
        angle = rng.uniform(-p.rotation_jitter, p.rotation_jitter)
        out = ndi.rotate(out, angle, reshape=False, order=1, mode="constant", cval=WHITE, prefilter=False)

    return GrayRaster(np.clip(round_half_away(out), 0, 255).astype(np.uint8))


def _motion_blur(arr: np.ndarray, length: float, angle: float) -> np.ndarray:
    n = max(2, int(round(length)))
    kernel = np.zeros((n, n))
    c = (n - 1) / 2.0
    for i in range(4 * n):
        t = -0.5 + i / (4.0 * n - 1.0)
        x = c + t * (n - 1) * math.cos(angle)
        y = c + t * (n - 1) * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                if 0 <= xi < n and 0 <= yi < n:
                    kernel[yi, xi] += (1 - abs(x - xi)) * (1 - abs(y - yi))
    kernel /= kernel.sum()
    return ndi.convolve(arr, kernel, mode="nearest")


def _dirt_speckles(arr: np.ndarray, mask: ForegroundMask, density: float, rng: np.random.Generator) -> np.ndarray:
    h, w = arr.shape
    area = int(mask.bits.sum())
    mean_blob_area = math.pi * 4.0**2
    n_blobs = int(round(density * area / mean_blob_area))
    if n_blobs == 0:
        return arr
    out = arr.copy()
    ys, xs = np.nonzero(mask.bits)
    for _ in range(n_blobs):
        k = rng.integers(0, ys.size)
        cy, cx = ys[k], xs[k]
        radius = rng.uniform(2.0, 6.0)
        depth = rng.uniform(40.0, 110.0)
        r = int(math.ceil(3 * radius))
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (radius / 2.0) ** 2))
        out[y0:y1, x0:x1] -= depth * bump
    return out


# --- Dataset generation ---------------------------------------------------------------


@dataclass
class SampleRecord:
    image_id: str
    finger_id: str
    seed: int
    c: float
    label: int
    preset: str
    params: DegradationParams
    features: FeatureVector


@dataclass
class SynthDataset:
    records: list
    failures: int

    def labeled(self) -> LabeledDataset:
        return LabeledDataset(
            ids=[r.image_id for r in self.records],
            X=np.stack([r.features.values for r in self.records]),
            y=np.array([r.label for r in self.records], dtype=np.int64),
        )


def _sample_seed(seed: int, label: int, index: int, attempt: int) -> int:
    return (seed * 1_000_003 + label * 500_000 + index * 101 + attempt * 7_777_777) & 0x7FFFFFFF


def generate_sample(sample_seed: int, c: float, base_seed: int, preprocess_cfg: PreprocessConfig):
    """(degraded raw image, preprocessed sample, mask, features, params)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=sample_seed, spawn_key=(1,)))
    base_img, base_mask = generate_base_pattern(base_seed)
    params = params_from_quality(c, rng)
    degraded = degrade(base_img, base_mask, params, rng)
    sample, mask, _ = preprocess(degraded, preprocess_cfg)
    features = extract_feature_vector(sample, mask)
    return degraded, sample, mask, features, params


def _build_sample(task) -> tuple:
    """Worker: generate one corpus sample with its retry loop.

    All randomness is derived from (seed, label, index, attempt), so the
    result is identical however the tasks are scheduled.
    """
    seed, preset, index, samples_per_finger, preprocess_cfg, keep_images = task
    finger_index = index // samples_per_finger
    base_seed = _sample_seed(seed, preset.label, finger_index, 0) ^ 0x5EED
    failures = 0
    last_error = None
    for attempt in range(MAX_RETRIES):
        sseed = _sample_seed(seed, preset.label, index, attempt)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=sseed, spawn_key=(2,)))
        c = float(rng.uniform(*preset.c_range))
        try:
            degraded, sample, mask, features, params = generate_sample(sseed, c, base_seed, preprocess_cfg)
        except Exception as exc:  # noqa: BLE001 - any stage failure triggers a regenerate
            failures += 1
            last_error = exc
            continue
        image_id = f"c{preset.label}_f{finger_index:05d}_s{index % samples_per_finger}_{sseed:08x}"
        rec = SampleRecord(
            image_id=image_id,
            finger_id=f"c{preset.label}_f{finger_index:05d}",
            seed=sseed,
            c=c,
            label=preset.label,
            preset="high" if preset.label == 1 else "low",
            params=params,
            features=features,
        )
        images = (degraded, sample, mask) if keep_images else None
        return rec, images, failures
    raise RuntimeError(
        f"gave up generating sample {index} of preset {preset.c_range} "
        f"after {MAX_RETRIES} attempts: {last_error}"
    )


def generate_dataset(
    n_per_class: int,
    presets=TRAINING_PRESETS,
    seed: int = 0,
    out_dir=None,
    samples_per_finger: int = 1,
    preprocess_cfg: PreprocessConfig = PreprocessConfig(rotation="asis"),
    jobs: int = 1,
) -> SynthDataset:
    """Generate a labeled corpus; optionally write images, features, manifest.

    Exactly n_per_class samples per preset.  Consecutive samples of a class
    share a base ridge pattern in groups of `samples_per_finger`, which
    gives ground-truth mated pairs for evaluation corpora.  Failed samples
    (e.g. degradation destroyed all periodicity) are logged and regenerated
    with a fresh seed.  Generation parallelizes over samples; outputs do
    not depend on the job count.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    writing = out_dir is not None
    if writing:
        out_dir = Path(out_dir)
        for sub in ("images", "samples", "masks"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

    tasks = [
        (seed, preset, index, samples_per_finger, preprocess_cfg, writing)
        for preset in presets
        for index in range(n_per_class)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_build_sample, tasks, chunksize=8))
    else:
        results = [_build_sample(t) for t in tasks]

    records = []
    failures = 0
    for rec, images, n_failed in results:
        records.append(rec)
        failures += n_failed
        if writing:
            degraded, sample, mask = images
            write_pgm(degraded, out_dir / "images" / f"{rec.image_id}.pgm")
            write_pgm(sample, out_dir / "samples" / f"{rec.image_id}.pgm")
            write_mask_pgm(mask, out_dir / "masks" / f"{rec.image_id}.pgm")

    ds = SynthDataset(records=records, failures=failures)
    if writing:
        write_features_csv(out_dir / "features.csv", [(r.image_id, r.features) for r in records])
        write_manifest(ds, out_dir / "manifest.csv")
    return ds


MANIFEST_FIELDS = ["image_id", "finger_id", "seed", "c", "label", "preset"] + list(QUALITY_DEGRADATION_RANGES)


def write_manifest(ds: SynthDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in ds.records:
            row = [r.image_id, r.finger_id, r.seed, repr(r.c), r.label, r.preset]
            row += [repr(float(getattr(r.params, f))) for f in QUALITY_DEGRADATION_RANGES]
            w.writerow(row)


def read_manifest(path) -> list:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: unexpected manifest header")
        return list(reader)


# --- Label validation -----------------------------------------------------------------


@dataclass
class LabelDisagreement:
    image_id: str
    label: int
    predicted: int
    probability: float


def validate_labels(model: ForestModel, data: LabeledDataset) -> list:
    """Rows whose predicted class disagrees with their label, with probabilities."""
    out = []
    for image_id, x, label in zip(data.ids, data.X, data.y):
        p = predict_prob(model, x)
        predicted = int(p >= 0.5)
        if predicted != int(label):
            out.append(LabelDisagreement(image_id, int(label), predicted, p))
    return out


def apply_relabels(data: LabeledDataset, relabels: dict) -> LabeledDataset:
    """Return a dataset with labels overridden by image id."""
    y = data.y.copy()
    unknown = set(relabels) - set(data.ids)
    if unknown:
        raise ValueError(f"relabel ids not in dataset: {sorted(unknown)[:5]}")
    index = {i: k for k, i in enumerate(data.ids)}
    for image_id, label in relabels.items():
        y[index[image_id]] = int(label)
    return LabeledDataset(data.ids, data.X, y)
