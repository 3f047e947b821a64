"""Semi-automated boundary refinement on the 16x working scale.

The annotator draws a rough freehand ROI on a contrast-enhanced preview; the
refiner detects the strongest edge inside that ROI, closes small gaps, keeps
the largest connected piece, and traces its outer contour back to full-slide
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateHistogram, EmptyRoi, InvalidSigma, NoEdgeFound
from .filters import gaussian_blur, sobel_magnitude
from .slide_io import RasterImage


@dataclass(frozen=True)
class EnhancedImage:
    """Illumination-corrected luminance in [0, 1] at the downsampled scale."""

    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class RoiPolygon:
    """Freehand polygon in downsampled-frame coordinates, implicitly closed.
    Self-intersection is allowed; the even-odd rule decides the interior."""

    points: Sequence[tuple[float, float]]

    def __post_init__(self) -> None:
        if len(self.points) < 3:
            raise ValueError("ROI polygon needs at least 3 points")


@dataclass(frozen=True)
class RefineParams:
    blur_sigma: float = 20.0
    close_radius: int = 3
    downsample_factor: int = 16

    def __post_init__(self) -> None:
        if self.blur_sigma <= 0:
            raise InvalidSigma("blur_sigma must be positive")
        if self.close_radius < 1:
            raise ValueError("close_radius must be >= 1")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")


def illumination_correct(img: RasterImage, sigma: float) -> EnhancedImage:
    """Flatten uneven illumination by dividing luminance by its own blur.

    Luminance is the plain RGB mean. The ratio (1 = neutral background) is
    clamped to [0, 2] and halved so the output sits in [0, 1] with neutral
    mapping to 0.5.
    """
    if sigma <= 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    lum = img.pixels.astype(np.float64).mean(axis=2) / 255.0
    blurred = gaussian_blur(lum, sigma)
    ratio = lum / np.maximum(blurred, 1.0 / 255.0)
    return EnhancedImage(np.clip(ratio, 0.0, 2.0) / 2.0)


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    """Offsets of the discrete disk {(dx, dy): dx^2 + dy^2 <= radius^2}."""
    return [
        (dx, dy)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dx * dx + dy * dy <= radius * radius
    ]


def _shifted(src: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(src)
    h, w = src.shape
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0:ys1, xs0:xs1] = src[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
    return out


def morph_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary closing with a disk: dilation then erosion, computed on a frame
    padded by the radius so border pixels behave as on an infinite background.
    Extensive and idempotent."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    offsets = disk_offsets(radius)
    padded = np.pad(mask.astype(bool), radius, constant_values=False)
    dilated = np.zeros_like(padded)
    for dx, dy in offsets:
        dilated |= _shifted(padded, dx, dy)
    eroded = np.ones_like(padded)
    for dx, dy in offsets:
        eroded &= _shifted(dilated, dx, dy)
    return eroded[radius:-radius, radius:-radius]


def grayscale_close(values: np.ndarray, radius: int) -> np.ndarray:
    """Grayscale closing with a disk; used to tidy the preview for display."""
    footprint = np.zeros((2 * radius + 1, 2 * radius + 1), dtype=bool)
    for dx, dy in disk_offsets(radius):
        footprint[dy + radius, dx + radius] = True
    dil = ndimage.grey_dilation(values, footprint=footprint, mode="nearest")
    return ndimage.grey_erosion(dil, footprint=footprint, mode="nearest")


def enhance_preview(img: RasterImage, params: RefineParams | None = None) -> EnhancedImage:
    """Preview used by the annotation tool: illumination correction followed
    by a small grayscale closing that fills pinholes and smooths contours.
    Gradients for refinement are computed on this same image."""
    params = params or RefineParams()
    enhanced = illumination_correct(img, params.blur_sigma)
    return EnhancedImage(np.clip(grayscale_close(enhanced.values, params.close_radius), 0.0, 1.0))


def polygon_mask(points: Sequence[tuple[float, float]], width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers."""
    mask = np.zeros((height, width), dtype=bool)
    pts = [(float(x), float(y)) for x, y in points]
    n = len(pts)
    for row in range(height):
        yc = row + 0.5
        crossings = []
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                t = (yc - y0) / (y1 - y0)
                crossings.append(x0 + t * (x1 - x0))
        crossings.sort()
        for j in range(0, len(crossings) - 1, 2):
            lo = int(np.ceil(crossings[j] - 0.5))
            hi = int(np.ceil(crossings[j + 1] - 0.5)) - 1
            lo = max(lo, 0)
            hi = min(hi, width - 1)
            if hi >= lo:
                mask[row, lo : hi + 1] = True
    return mask


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values * 256.0), 0, 255).astype(np.int64)


def _otsu_cut(counts: np.ndarray) -> int:
    """Smallest cut t in [0, 254] maximizing between-class variance; class 0 is
    levels <= t. Exact integer arithmetic so ties resolve deterministically."""
    total = int(counts.sum())
    levels = np.arange(256, dtype=np.int64)
    total_sum = int((levels * counts).sum())
    if np.count_nonzero(counts) < 2:
        raise DegenerateHistogram("all values fall into one bin")
    best_t = 0
    best_num, best_den = -1, 1
    w0 = 0
    s0 = 0
    for t in range(255):
        w0 += int(counts[t])
        s0 += t * int(counts[t])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (s0 * w1 - (total_sum - s0) * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def otsu_threshold(values: Sequence[float] | np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance over 256 bins.

    Returns the smallest maximizing boundary on the 0..255 level scale as a
    value in [0, 1); callers treat values strictly above it as foreground.
    """
    if bins != 256:
        raise ValueError("only 256-bin histograms are supported")
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ValueError("need at least two values")
    counts = np.bincount(_quantize(arr), minlength=256)
    return _otsu_cut(counts) / 255.0


# Moore neighborhood in clockwise screen order (x right, y down)
_MOORE = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)]


def moore_trace(mask: np.ndarray) -> list[tuple[int, int]]:
    """Outer contour of a connected foreground set, clockwise, starting from
    the top-left boundary pixel (row-major first foreground pixel)."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask")
    first = np.lexsort((xs, ys))[0]
    start = (int(xs[first]), int(ys[first]))
    h, w = mask.shape

    def fg(p: tuple[int, int]) -> bool:
        return 0 <= p[0] < w and 0 <= p[1] < h and bool(mask[p[1], p[0]])

    contour: list[tuple[int, int]] = []
    cur = start
    back = (start[0] - 1, start[1])  # entered from the west by construction
    first_move: tuple | None = None
    limit = 4 * int(mask.sum()) + 8
    for _ in range(limit):
        contour.append(cur)
        bidx = _MOORE.index((back[0] - cur[0], back[1] - cur[1]))
        nxt = None
        for k in range(1, 9):
            d = (bidx + k) % 8
            cand = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if fg(cand):
                prev = (d - 1) % 8
                nxt = cand
                nback = (cur[0] + _MOORE[prev][0], cur[1] + _MOORE[prev][1])
                break
        if nxt is None:
            return contour  # isolated pixel
        if first_move is None:
            first_move = (cur, nxt)
        elif (cur, nxt) == first_move:
            return contour[:-1]  # start revisited with the same exit: done
        cur, back = nxt, nback
    return contour


def refine_roi(
    enhanced: EnhancedImage, roi: RoiPolygon, params: RefineParams
) -> list[tuple[int, int]]:
    """Detect the dominant edge inside a freehand ROI and return its closed
    outer contour in level-0 coordinates.

    Pipeline: even-odd ROI mask -> Sobel magnitude zeroed outside the mask ->
    Otsu threshold over masked pixels -> disk closing -> largest 8-connected
    component -> clockwise Moore trace -> scale by the downsample factor.
    """
    mask = polygon_mask(roi.points, enhanced.width, enhanced.height)
    if not mask.any():
        raise EmptyRoi("ROI rasterizes to zero pixels inside the image")
    mag = sobel_magnitude(enhanced.values)
    mag[~mask] = 0.0
    masked = mag[mask]
    vmax = float(masked.max())
    if vmax <= 0.0 or float(masked.min()) == vmax:
        raise NoEdgeFound("all masked gradients are equal")
    levels = _quantize(mag / vmax)
    try:
        cut = _otsu_cut(np.bincount(levels[mask], minlength=256))
    except DegenerateHistogram as exc:
        raise NoEdgeFound(str(exc)) from exc
    edges = mask & (levels > cut)
    closed = morph_close(edges, params.close_radius)
    labels, count = ndimage.label(closed, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise NoEdgeFound("no edge pixels survived thresholding")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    largest = int(np.argmax(sizes)) + 1
    contour = moore_trace(labels == largest)
    f = params.downsample_factor
    scaled = [(x * f, y * f) for x, y in contour]
    scaled.append(scaled[0])
    return scaled
