"""Slide ingestion, downsampling, and deterministic synthetic slide generation.

Slides are plain 8-bit RGB rasters (PNG on disk). The synthetic generator
produces desk-scale stand-ins for scanned tissue sections: textured blobs on a
white background, one of which carries a visually distinct band along part of
its boundary, together with the matching boundary annotations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .annotation import Annotation, AnnotationClass, AnnotationSet
from .errors import DecodeError, InvalidFactor, InvalidSpec

Image.MAX_IMAGE_PIXELS = None  # slides are legitimately gigantic


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB raster; ``pixels`` has shape (height, width, 3), dtype uint8."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"expected (h, w, 3) uint8 array, got {p.shape} {p.dtype}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class SlideManifest:
    """Pixel geometry and provenance of one slide.

    ``block_id`` groups serial sections cut from the same tissue block; the
    train/test split must never straddle a block.
    """

    slide_id: str
    width: int
    height: int
    source_path: str
    block_id: str
    microns_per_pixel: float | None = None

    def __post_init__(self) -> None:
        if not self.block_id:
            raise ValueError("block_id must be non-empty")

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "width": self.width,
            "height": self.height,
            "source_path": self.source_path,
            "microns_per_pixel": self.microns_per_pixel,
            "block_id": self.block_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SlideManifest":
        return cls(
            slide_id=obj["slide_id"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            source_path=obj["source_path"],
            block_id=obj["block_id"],
            microns_per_pixel=obj.get("microns_per_pixel"),
        )


def write_manifest(manifest: SlideManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> SlideManifest:
    return SlideManifest.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic slide; identical specs yield identical bytes."""

    width: int
    height: int
    tissue_blob_count: int
    cautery_arc_fraction: float
    band_width: int
    seed: int

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidSpec("width and height must be >= 1")
        if self.tissue_blob_count < 1:
            raise InvalidSpec("tissue_blob_count must be >= 1")
        if not 0.0 <= self.cautery_arc_fraction <= 1.0:
            raise InvalidSpec("cautery_arc_fraction must lie in [0, 1]")
        if self.band_width < 4:
            raise InvalidSpec("band_width must be >= 4")


def load_slide(path: str | Path) -> tuple[SlideManifest, RasterImage]:
    """Decode an 8-bit RGB raster; the manifest mirrors the decoded geometry."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DecodeError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    img = RasterImage(arr)
    manifest = SlideManifest(
        slide_id=path.stem,
        width=img.width,
        height=img.height,
        source_path=str(path),
        block_id="unassigned",
    )
    return manifest, img


def save_png(img: RasterImage, path: str | Path, compress_level: int = 1) -> None:
    """Write a slide PNG. Encoding is deterministic for identical pixels."""
    Image.fromarray(img.pixels, mode="RGB").save(
        str(path), format="PNG", compress_level=compress_level
    )


def downsample_bilinear(img: RasterImage, factor: int) -> RasterImage:
    """Downsample by an integer factor with pixel-center bilinear sampling.

    Output dims are ceil(w/f) x ceil(h/f); each output pixel samples the source
    at its own center mapped back to source coordinates, with edge clamping.
    Factor 1 returns a bitwise-identical copy.
    """
    if factor < 1 or factor > min(img.width, img.height):
        raise InvalidFactor(f"factor {factor} invalid for {img.width}x{img.height}")
    if factor == 1:
        return RasterImage(img.pixels.copy())
    out_w = -(-img.width // factor)
    out_h = -(-img.height // factor)
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * factor - 0.5
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * factor - 0.5
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, img.width - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :, None]
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None, None]
    src = img.pixels.astype(np.float64)
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# --- synthetic slide generation ---

_TISSUE_BASE = np.array([225.0, 158.0, 196.0])  # pale pink, loosely H&E-like


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int) -> np.ndarray:
    """Smooth seeded noise in [0, 1]: smoothstep blend of a coarse random grid,
    upsampled separably (rows first, then columns)."""
    gh = height // cell + 2
    gw = width // cell + 2
    grid = rng.random((gh, gw)).astype(np.float32)
    ys = np.arange(height, dtype=np.float32) / cell
    xs = np.arange(width, dtype=np.float32) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    fy = (fy * fy * (3.0 - 2.0 * fy))[:, None]
    fx = fx * fx * (3.0 - 2.0 * fx)
    rows = grid[:, x0] * (1.0 - fx) + grid[:, x0 + 1] * fx  # (gh, width)
    return rows[y0] * (1.0 - fy) + rows[y0 + 1] * fy


def tissue_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Seeded value-noise over a pink base; float32 array (h, w, 3) in [0, 255].
    Shade stays in [0.72, 1.10], so channel values never leave [0, 248]."""
    coarse = max(8, min(height, width) // 48)
    noise = 0.65 * _value_noise(rng, height, width, coarse * 4) + 0.35 * _value_noise(
        rng, height, width, coarse
    )
    shade = 0.72 + 0.38 * noise
    return _TISSUE_BASE[None, None, :].astype(np.float32) * shade[:, :, None]


def cautery_texture(tissue: np.ndarray) -> np.ndarray:
    """Cautery variant of a tissue texture: darkened 35%, box-smoothed 5 px,
    hue-shifted toward purple (green channel suppressed)."""
    ct = ndimage.uniform_filter(
        (tissue * np.float32(0.65)).astype(np.float32), size=(5, 5, 1), mode="nearest"
    )
    ct[:, :, 1] *= np.float32(0.62)
    return ct


def _blob_radius(thetas: np.ndarray, base_radius: float, rng: np.random.Generator) -> np.ndarray:
    r = np.full_like(thetas, base_radius)
    for k in range(2, 6):
        amp = rng.uniform(-0.08, 0.08)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        r += base_radius * amp * np.sin(k * thetas + phase)
    return r


def synthesize_slide(spec: SyntheticSpec) -> tuple[RasterImage, AnnotationSet]:
    """Generate a deterministic synthetic slide plus boundary annotations.

    The first blob carries a contiguous band covering ``cautery_arc_fraction``
    of its boundary length, rendered with the cautery texture on the tissue
    side. Annotations cover that blob's boundary: the band arc (cautery), the
    rest (non-cautery), and short equivocal transition stretches at the two
    arc endpoints. Other blobs are unlabeled scenery.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)

    # blob geometry: main blob near the center (seeded offset so region grids
    # see differing class shares across slides), others placed clear of it
    min_dim = min(w, h)
    main_radius = 0.33 * min_dim
    centers = [
        (
            w / 2.0 + rng.uniform(-0.10, 0.10) * min_dim,
            h / 2.0 + rng.uniform(-0.10, 0.10) * min_dim,
        )
    ]
    radii = [main_radius]
    for _ in range(spec.tissue_blob_count - 1):
        r = rng.uniform(0.07, 0.11) * min_dim
        for _attempt in range(64):
            cx = rng.uniform(r + 2, w - r - 2) if w > 2 * r + 4 else w / 2.0
            cy = rng.uniform(r + 2, h - r - 2) if h > 2 * r + 4 else h / 2.0
            d = math.hypot(cx - centers[0][0], cy - centers[0][1])
            if d >= main_radius + r + spec.band_width + 8:
                break
        centers.append((cx, cy))
        radii.append(r)

    annotations: list[Annotation] = []
    for blob_idx, ((cx, cy), base_r) in enumerate(zip(centers, radii)):
        blob_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        n_samples = int(np.clip(2.0 * math.pi * base_r / 5.0, 256, 4096))
        thetas = np.linspace(-math.pi, math.pi, n_samples, endpoint=False)
        r_theta = _blob_radius(thetas, base_r, blob_rng)

        pad = spec.band_width + 8
        x0 = max(0, int(cx - r_theta.max() - pad))
        y0 = max(0, int(cy - r_theta.max() - pad))
        x1 = min(w, int(cx + r_theta.max() + pad) + 1)
        y1 = min(h, int(cy + r_theta.max() + pad) + 1)
        if x1 <= x0 or y1 <= y0:
            continue
        box_h, box_w = y1 - y0, x1 - x0

        # interior test is radial: dist(p, center) <= r(theta(p));
        # samples are parameterized over [-pi, pi) to match arctan2 directly
        dx = (np.arange(x0, x1, dtype=np.float32) - np.float32(cx))[None, :]
        dy = (np.arange(y0, y1, dtype=np.float32) - np.float32(cy))[:, None]
        ang = np.arctan2(dy, dx)
        ang += np.float32(math.pi)
        ang *= np.float32(n_samples / (2.0 * math.pi))
        idx = np.minimum(ang.astype(np.int32), n_samples - 1)
        del ang
        rr2 = dx * dx + dy * dy
        r_lookup = r_theta.astype(np.float32)[idx]
        inside = rr2 <= r_lookup * r_lookup

        tex = tissue_texture(blob_rng, box_h, box_w)

        # boundary polyline in image coordinates, clamped into bounds
        bx = np.clip(np.rint(cx + r_theta * np.cos(thetas)).astype(np.int64), 0, w - 1)
        by = np.clip(np.rint(cy + r_theta * np.sin(thetas)).astype(np.int64), 0, h - 1)
        boundary = list(zip(bx.tolist(), by.tolist()))
        seglen = np.hypot(np.diff(bx, append=bx[0]), np.diff(by, append=by[0]))
        cumlen = np.concatenate([[0.0], np.cumsum(seglen)])
        total = cumlen[-1]

        if blob_idx == 0 and spec.cautery_arc_fraction > 0.0 and total > 0.0:
            f = spec.cautery_arc_fraction
            start_len = blob_rng.uniform(0.0, total)

            def span_indices(lo: float, hi: float) -> list[int]:
                # boundary sample indices whose arclength position falls in
                # [lo, hi), wrapping around the closed loop
                lo_m = lo % total
                hi_m = hi % total
                pos = cumlen[:-1]
                if hi - lo >= total:
                    sel = np.ones(n_samples, dtype=bool)
                elif lo_m <= hi_m:
                    sel = (pos >= lo_m) & (pos < hi_m)
                else:
                    sel = (pos >= lo_m) | (pos < hi_m)
                order = np.argsort((pos - lo_m) % total)
                return [int(i) for i in order if sel[i]]

            arc_idx = span_indices(start_len, start_len + f * total)
            arc_pts = [boundary[i] for i in arc_idx]

            # paint the band: tissue-side pixels radially within band_width of
            # the boundary, restricted to the arc's angular span
            in_arc = np.zeros(n_samples, dtype=bool)
            in_arc[arc_idx] = True
            inner = np.maximum(r_lookup - np.float32(spec.band_width), 0.0)
            band = inside & in_arc[idx] & (rr2 >= inner * inner)
            if band.any():
                rows = np.flatnonzero(band.any(axis=1))
                cols = np.flatnonzero(band.any(axis=0))
                br0, br1 = rows[0], rows[-1] + 1
                bc0, bc1 = cols[0], cols[-1] + 1
                sub = band[br0:br1, bc0:bc1]
                ct = cautery_texture(tex[br0:br1, bc0:bc1])
                tex[br0:br1, bc0:bc1][sub] = ct[sub]

            e = 0.015  # equivocal transition half-width, as a fraction of length
            if f >= 1.0:
                pts = [boundary[i] for i in span_indices(0.0, total)]
                annotations.append(
                    Annotation("cautery_0", AnnotationClass.CAUTERY, pts + pts[:1], "manual")
                )
            elif f <= 4 * e or f >= 1.0 - 4 * e:
                annotations.append(
                    Annotation("cautery_0", AnnotationClass.CAUTERY, arc_pts, "manual")
                )
                non_idx = span_indices(start_len + f * total, start_len + total)
                annotations.append(
                    Annotation(
                        "non_cautery_0",
                        AnnotationClass.NON_CAUTERY,
                        [boundary[i] for i in non_idx],
                        "manual",
                    )
                )
            else:
                el = e * total
                fl = f * total
                caut = span_indices(start_len + el, start_len + fl - el)
                non = span_indices(start_len + fl + el, start_len + total - el)
                eq_a = span_indices(start_len - el, start_len + el)
                eq_b = span_indices(start_len + fl - el, start_len + fl + el)
                annotations.append(
                    Annotation(
                        "cautery_0",
                        AnnotationClass.CAUTERY,
                        [boundary[i] for i in caut],
                        "manual",
                    )
                )
                annotations.append(
                    Annotation(
                        "non_cautery_0",
                        AnnotationClass.NON_CAUTERY,
                        [boundary[i] for i in non],
                        "manual",
                    )
                )
                for eq_n, eq_idx in enumerate((eq_a, eq_b)):
                    annotations.append(
                        Annotation(
                            f"equivocal_{eq_n}",
                            AnnotationClass.EQUIVOCAL,
                            [boundary[i] for i in eq_idx],
                            "manual",
                        )
                    )
        elif blob_idx == 0 and total > 0.0:
            annotations.append(
                Annotation(
                    "non_cautery_0",
                    AnnotationClass.NON_CAUTERY,
                    boundary + boundary[:1],
                    "manual",
                )
            )

        box = canvas[y0:y1, x0:x1]
        tex_u8 = (tex + np.float32(0.5)).astype(np.uint8)  # rounding; values stay < 255
        np.copyto(box, tex_u8, where=inside[:, :, None])

    ann_set = AnnotationSet(slide_id=f"synthetic-{spec.seed}", version=0, annotations=annotations)
    return RasterImage(canvas), ann_set
