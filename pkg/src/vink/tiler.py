"""Region planning and patch gridding.

A slide is covered by overlapping square regions (4096 px by default, 10%
overlap); each region splits exactly into a 16x16 grid of 256 px patches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidOverlap, InvalidRegionSide
from .slide_io import RasterImage

PATCH_SIDE = 256
GRID_DIM = 16
REGION_SIDE = PATCH_SIDE * GRID_DIM  # 4096


@dataclass(frozen=True)
class RegionSpec:
    region_id: tuple[int, int]  # (row_index, col_index)
    origin: tuple[int, int]  # (x, y), level-0 pixels
    side: int = REGION_SIDE


@dataclass(frozen=True)
class PatchSpec:
    parent_region: tuple[int, int]
    grid_pos: tuple[int, int]  # (r, c), 0 <= r, c < 16
    origin: tuple[int, int]
    side: int = PATCH_SIDE


def _axis_origins(extent: int, side: int, stride: int) -> list[int]:
    origins = []
    pos = 0
    while pos + side < extent:
        origins.append(pos)
        pos += stride
    final = max(0, extent - side)
    if not origins or origins[-1] != final:
        origins.append(final)
    return origins


def plan_regions(
    width: int, height: int, side: int = REGION_SIDE, overlap: float = 0.10
) -> list[RegionSpec]:
    """Plan region origins per axis: 0, stride, 2*stride, ... with
    stride = floor(side * (1 - overlap)); the last origin is clamped to
    extent - side (never negative) and duplicates dropped. Row-major order.
    """
    if not 0.0 <= overlap < 1.0:
        raise InvalidOverlap(f"overlap {overlap} outside [0, 1)")
    if width < 1 or height < 1 or side < 1:
        raise ValueError("width, height, and side must be >= 1")
    stride = max(1, int(side * (1.0 - overlap)))
    xs = _axis_origins(width, side, stride)
    ys = _axis_origins(height, side, stride)
    return [
        RegionSpec(region_id=(r, c), origin=(x, y), side=side)
        for r, y in enumerate(ys)
        for c, x in enumerate(xs)
    ]


def grid_patches(region: RegionSpec) -> list[PatchSpec]:
    """Split a region into its 256 patches, row-major."""
    if region.side != REGION_SIDE:
        raise InvalidRegionSide(f"region side {region.side} != {REGION_SIDE}")
    ox, oy = region.origin
    return [
        PatchSpec(
            parent_region=region.region_id,
            grid_pos=(r, c),
            origin=(ox + c * PATCH_SIDE, oy + r * PATCH_SIDE),
        )
        for r in range(GRID_DIM)
        for c in range(GRID_DIM)
    ]


def crop(img: RasterImage, origin: tuple[int, int], side: int) -> RasterImage:
    """Copy a side x side window; pixels beyond the image are white."""
    x, y = origin
    if x < 0 or y < 0:
        raise ValueError("crop origin must be non-negative")
    out = np.full((side, side, 3), 255, dtype=np.uint8)
    x1 = min(x + side, img.width)
    y1 = min(y + side, img.height)
    if x < img.width and y < img.height:
        out[: y1 - y, : x1 - x] = img.pixels[y:y1, x:x1]
    return RasterImage(out)


def write_plan(regions: list[RegionSpec], path: str | Path) -> None:
    payload = [
        {"region_id": list(r.region_id), "x": r.origin[0], "y": r.origin[1], "side": r.side}
        for r in regions
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_plan(path: str | Path) -> list[RegionSpec]:
    payload = json.loads(Path(path).read_text())
    return [
        RegionSpec(
            region_id=(int(r["region_id"][0]), int(r["region_id"][1])),
            origin=(int(r["x"]), int(r["y"])),
            side=int(r["side"]),
        )
        for r in payload
    ]
