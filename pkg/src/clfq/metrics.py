"""Biometric performance and predictive-power metrics.

Error-vs-discard characteristic: every mated comparison carries a
similarity score s and a pair quality q = min(q1, q2).  A decision
threshold t is fixed from the empirical distribution of the mated scores so
that the initial FNMR matches the configured target; the curve then tracks
the FNMR while discarding a growing fraction of the lowest-quality
comparisons.  With the default convention the denominator stays the total
comparison count, so the curve is non-increasing by construction.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import ForegroundMask, GrayRaster


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ComparisonRecord:
    probe_id: str
    reference_id: str
    mated: bool
    score: float
    q1: int
    q2: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise MetricError(f"{self.probe_id}/{self.reference_id}: non-finite score")
        for q in (self.q1, self.q2):
            if not (0 <= q <= 100):
                raise MetricError(f"{self.probe_id}/{self.reference_id}: quality {q} outside [0, 100]")


@dataclass(frozen=True)
class EdcConfig:
    f: float = 0.25                  # initial FNMR target
    discard_step: float = 0.01
    discard_max: float = 0.98
    pauc_limit: float = 0.2
    denominator: str = "total"       # or "remaining"
    score_convention: str = "similarity"  # or "dissimilarity"

    def __post_init__(self):
        if not (0.0 < self.f < 1.0):
            raise ValueError("initial FNMR target must be in (0, 1)")
        if self.denominator not in ("total", "remaining"):
            raise ValueError(f"unknown denominator convention {self.denominator!r}")
        if self.score_convention not in ("similarity", "dissimilarity"):
            raise ValueError(f"unknown score convention {self.score_convention!r}")
        if not (0.0 < self.discard_step <= self.discard_max < 1.0):
            raise ValueError("need 0 < discard_step <= discard_max < 1")

    def grid(self) -> np.ndarray:
        n_steps = int(math.floor(self.discard_max / self.discard_step + 1e-9))
        return np.round(np.arange(n_steps + 1) * self.discard_step, 12)


@dataclass
class EdcCurve:
    fractions: np.ndarray   # ascending discard fractions
    fnmr: np.ndarray
    thresholds_u: np.ndarray  # implied quality threshold per point
    t: float                # decision threshold on similarity scores
    f: float                # configured initial FNMR target

    def points(self):
        return list(zip(self.fractions, self.fnmr))


@dataclass
class DetResult:
    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray
    eer: float


def combine_quality(q1: int, q2: int) -> int:
    """Pairwise quality of a comparison: the minimum of the two."""
    return min(q1, q2)


# --- DET / EER -----------------------------------------------------------------


def compute_det(mated_scores, nonmated_scores) -> DetResult:
    """Threshold sweep over observed scores; FNMR(t) = P(mated <= t), FMR(t) = P(nonmated > t)."""
    mated = np.asarray(mated_scores, dtype=np.float64)
    nonmated = np.asarray(nonmated_scores, dtype=np.float64)
    if mated.size == 0 or nonmated.size == 0:
        raise MetricError("need at least one mated and one non-mated score")
    union = np.unique(np.concatenate([mated, nonmated]))
    thresholds = np.concatenate([[union[0] - 1.0], union])
    fnmr = np.searchsorted(np.sort(mated), thresholds, side="right") / mated.size
    fmr = 1.0 - np.searchsorted(np.sort(nonmated), thresholds, side="right") / nonmated.size
    k = int(np.argmin(np.abs(fnmr - fmr)))
    eer = float((fnmr[k] + fmr[k]) / 2.0)
    return DetResult(thresholds=thresholds, fmr=fmr, fnmr=fnmr, eer=eer)


# --- EDC -----------------------------------------------------------------------


def _initial_threshold(scores: np.ndarray, cfg: EdcConfig) -> float:
    """Decision threshold from the empirical mated-score distribution.

    similarity convention: the f-quantile, so that counting s <= t yields an
    initial FNMR of f as closely as the empirical CDF allows.  The
    dissimilarity convention takes the (1 - f)-quantile as printed in the
    classic formulation for distance scores.
    """
    n = scores.size
    srt = np.sort(scores)
    if srt[0] == srt[-1]:
        raise MetricError("degenerate score distribution: all mated scores equal")
    quantile = cfg.f if cfg.score_convention == "similarity" else 1.0 - cfg.f
    k = max(1, int(math.ceil(quantile * n)))
    return float(srt[k - 1])


def edc_curve(records, cfg: EdcConfig = EdcConfig()) -> EdcCurve:
    """Error-vs-discard curve over mated comparison records.

    Discard steps realize exact record counts ceil(fraction * n), removing
    the lowest pair qualities first (ties broken by record index); the
    implied quality threshold u is reported for each point.
    """
    recs = [r for r in records if r.mated]
    if not recs:
        raise MetricError("no mated records")
    n = len(recs)
    scores = np.array([r.score for r in recs], dtype=np.float64)
    quality = np.array([combine_quality(r.q1, r.q2) for r in recs], dtype=np.int64)
    t = _initial_threshold(scores, cfg)
    is_error = scores <= t

    discard_order = np.lexsort((np.arange(n), quality))  # by quality, then index
    error_in_order = is_error[discard_order]
    cum_errors_removed = np.concatenate([[0], np.cumsum(error_in_order)])
    total_errors = int(is_error.sum())

    fractions = cfg.grid()
    fnmr = np.empty(fractions.size)
    us = np.empty(fractions.size)
    for i, frac in enumerate(fractions):
        m = int(math.ceil(frac * n - 1e-9))
        m = min(m, n)
        remaining_errors = total_errors - int(cum_errors_removed[m])
        denom = n if cfg.denominator == "total" else max(n - m, 1)
        fnmr[i] = remaining_errors / denom
        us[i] = quality[discard_order[m - 1]] if m > 0 else 0.0
    return EdcCurve(fractions=fractions, fnmr=fnmr, thresholds_u=us, t=t, f=cfg.f)


def edc_pauc(curve: EdcCurve, limit: float = 0.2) -> float:
    """Trapezoidal area under (discard fraction, FNMR) over [0, limit]."""
    fr = np.asarray(curve.fractions, dtype=np.float64)
    fn = np.asarray(curve.fnmr, dtype=np.float64)
    if fr[0] > 0.0 or fr[-1] < limit - 1e-12:
        raise MetricError(f"curve does not cover [0, {limit}]")
    inside = fr <= limit + 1e-12
    xs = fr[inside]
    ys = fn[inside]
    if xs[-1] < limit - 1e-12:
        y_at = float(np.interp(limit, fr, fn))
        xs = np.append(xs, limit)
        ys = np.append(ys, y_at)
    return float(np.trapezoid(ys, xs) if hasattr(np, "trapezoid") else np.trapz(ys, xs))


# --- Toy matcher ------------------------------------------------------------------


TOY_SEARCH_RADIUS = 6
TOY_MIN_OVERLAP = 400  # px


def _masked_crop(img: GrayRaster, mask: ForegroundMask):
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise MetricError("empty mask")
    sl = np.s_[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    return img.as_float()[sl], mask.bits[sl]


def toy_matcher(
    a: GrayRaster, mask_a: ForegroundMask, b: GrayRaster, mask_b: ForegroundMask,
    search_radius: int = TOY_SEARCH_RADIUS,
) -> float:
    """Similarity in [0, 1]: best masked correlation over a translation window.

    Samples are cropped to their mask bounding boxes, aligned on the mask
    centers of mass, and the maximum Pearson correlation of overlapping
    foreground pixels over integer shifts up to the search radius is mapped
    from [-1, 1] to [0, 1].
    """
    pa, ma = _masked_crop(a, mask_a)
    pb, mb = _masked_crop(b, mask_b)
    cy_a, cx_a = (arr.mean() for arr in np.nonzero(ma))
    cy_b, cx_b = (arr.mean() for arr in np.nonzero(mb))
    base_oy = int(round(cy_a - cy_b))
    base_ox = int(round(cx_a - cx_b))
    best = None
    for dy in range(-search_radius, search_radius + 1):
        for dx in range(-search_radius, search_radius + 1):
            r = _shift_correlation(pa, ma, pb, mb, base_oy + dy, base_ox + dx)
            if r is not None and (best is None or r > best):
                best = r
    if best is None:
        raise MetricError("no mask overlap inside the search window")
    return (best + 1.0) / 2.0


def _shift_correlation(pa, ma, pb, mb, oy, ox):
    ha, wa = pa.shape
    hb, wb = pb.shape
    y0a, y1a = max(0, oy), min(ha, oy + hb)
    x0a, x1a = max(0, ox), min(wa, ox + wb)
    if y1a <= y0a or x1a <= x0a:
        return None
    y0b, x0b = y0a - oy, x0a - ox
    sub_a = pa[y0a:y1a, x0a:x1a]
    sub_b = pb[y0b:y0b + (y1a - y0a), x0b:x0b + (x1a - x0a)]
    overlap = ma[y0a:y1a, x0a:x1a] & mb[y0b:y0b + (y1a - y0a), x0b:x0b + (x1a - x0a)]
    if overlap.sum() < TOY_MIN_OVERLAP:
        return None
    va = sub_a[overlap]
    vb = sub_b[overlap]
    va = va - va.mean()
    vb = vb - vb.mean()
    denom = math.sqrt(float(np.dot(va, va)) * float(np.dot(vb, vb)))
    if denom == 0.0:
        return 0.0
    return float(np.dot(va, vb)) / denom


# --- CSV schemas -------------------------------------------------------------------


SCORES_HEADER = ["probe_id", "reference_id", "mated", "score", "q1", "q2"]
EDC_HEADER = ["discard_fraction", "fnmr", "u"]
DET_HEADER = ["threshold", "fmr", "fnmr"]


def write_scores_csv(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORES_HEADER)
        for r in records:
            w.writerow([r.probe_id, r.reference_id, int(r.mated), repr(float(r.score)), r.q1, r.q2])


def read_scores_csv(path) -> list:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise MetricError(f"{path}: expected header {','.join(SCORES_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise MetricError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                out.append(
                    ComparisonRecord(
                        probe_id=row[0],
                        reference_id=row[1],
                        mated=bool(int(row[2])),
                        score=float(row[3]),
                        q1=int(row[4]),
                        q2=int(row[5]),
                    )
                )
            except (ValueError, MetricError) as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_edc_csv(curve: EdcCurve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EDC_HEADER)
        for frac, fnmr, u in zip(curve.fractions, curve.fnmr, curve.thresholds_u):
            w.writerow([repr(float(frac)), repr(float(fnmr)), repr(float(u))])


def read_edc_csv(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EDC_HEADER:
            raise MetricError(f"{path}: expected header {','.join(EDC_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(tuple(float(x) for x in row))
            except ValueError as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise MetricError(f"{path}: empty curve")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def write_det_csv(det: DetResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DET_HEADER)
        for t, fm, fn in zip(det.thresholds, det.fmr, det.fnmr):
            w.writerow([repr(float(t)), repr(float(fm)), repr(float(fn))])
