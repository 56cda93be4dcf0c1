"""Shared low-level numerics: gradients, resampling, rotation helpers."""

import numpy as np
from scipy import ndimage as ndi

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives (gx, gy) of a float image, reflect boundary."""
    f = np.asarray(img, dtype=np.float64)
    gx = ndi.convolve(f, SOBEL_X, mode="reflect")
    gy = ndi.convolve(f, SOBEL_Y, mode="reflect")
    return gx, gy


def resize_bilinear(img: np.ndarray, scale_x: float, scale_y: float) -> np.ndarray:
    """Bilinear resample by independent axis scale factors.

    Output size is round-half-away of the scaled size (at least 1 px).
    Pixel-center convention: output center i maps to (i + 0.5) / s - 0.5,
    so scale 1.0 is an exact identity.
    """
    f = np.asarray(img, dtype=np.float64)
    h, w = f.shape
    if scale_x == 1.0 and scale_y == 1.0:
        return f.copy()
    out_w = max(1, int(np.floor(w * scale_x + 0.5)))
    out_h = max(1, int(np.floor(h * scale_y + 0.5)))
    xs = (np.arange(out_w) + 0.5) / scale_x - 0.5
    ys = (np.arange(out_h) + 0.5) / scale_y - 0.5
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def resize_mask_nearest(bits: np.ndarray, scale_x: float, scale_y: float) -> np.ndarray:
    """Nearest-neighbour mask resize matching resize_bilinear dimensions."""
    b = np.asarray(bits, dtype=bool)
    h, w = b.shape
    if scale_x == 1.0 and scale_y == 1.0:
        return b.copy()
    out_w = max(1, int(np.floor(w * scale_x + 0.5)))
    out_h = max(1, int(np.floor(h * scale_y + 0.5)))
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) / scale_x).astype(np.intp), 0, w - 1)
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) / scale_y).astype(np.intp), 0, h - 1)
    return b[ys][:, xs]


def rotate_image(img: np.ndarray, angle_deg: float, *, order: int, cval: float) -> np.ndarray:
    """Rotate counterclockwise about the image center, expanding the canvas."""
    return ndi.rotate(
        np.asarray(img, dtype=np.float64),
        angle_deg,
        reshape=True,
        order=order,
        mode="constant",
        cval=cval,
        prefilter=False,
    )


def sample_rotated_patch(img: np.ndarray, center_xy: tuple[float, float], angle: float, size: int) -> np.ndarray:
    """Sample a size x size patch around a center, rotated by `angle` radians.

    The patch u-axis (columns) corresponds to the direction `angle` in the
    source image, so sampling with angle = ridge normal yields a patch whose
    ridges run vertically.  Bilinear interpolation, edge pixels extended.
    """
    half = (size - 1) / 2.0
    u = np.arange(size) - half
    uu, vv = np.meshgrid(u, u)  # vv: rows, uu: cols
    ca, sa = np.cos(angle), np.sin(angle)
    cx, cy = center_xy
    xs = cx + uu * ca - vv * sa
    ys = cy + uu * sa + vv * ca
    return ndi.map_coordinates(
        np.asarray(img, dtype=np.float64), [ys, xs], order=1, mode="nearest"
    )


def binary_close(bits: np.ndarray, size: int) -> np.ndarray:
    """Morphological closing with a size x size structuring element.

    Erosion treats the outside as foreground so the image border is not
    eaten away.
    """
    structure = np.ones((size, size), dtype=bool)
    dilated = ndi.binary_dilation(bits, structure=structure)
    return ndi.binary_erosion(dilated, structure=structure, border_value=1)


def largest_component(bits: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected True component."""
    labels, n = ndi.label(bits, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(bits, dtype=bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))
