"""Annotation schema, polyline rasterization, and majority-rule patch labels.

Expert boundary traces are sparse polylines tagged cautery / non-cautery /
equivocal. They are drawn onto the pixel grid one Bresenham segment at a
time; patches then take the class that contributed the most pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError


class AnnotationClass(str, Enum):
    CAUTERY = "cautery"
    NON_CAUTERY = "non_cautery"
    EQUIVOCAL = "equivocal"


class PatchLabel(IntEnum):
    """Patch classes; values match the feature-cache label byte."""

    NON_CAUTERY = 0
    CAUTERY = 1
    EQUIVOCAL = 2
    UNLABELED = 3


# mask pixel codes, ordered so that overlap precedence is a plain max:
# equivocal > cautery > non-cautery > none
MASK_NONE = 0
MASK_NON_CAUTERY = 1
MASK_CAUTERY = 2
MASK_EQUIVOCAL = 3

_CLASS_TO_MASK = {
    AnnotationClass.NON_CAUTERY: MASK_NON_CAUTERY,
    AnnotationClass.CAUTERY: MASK_CAUTERY,
    AnnotationClass.EQUIVOCAL: MASK_EQUIVOCAL,
}


@dataclass(frozen=True)
class Annotation:
    """One labeled polyline in level-0 pixel coordinates.

    Polylines are open; a closed contour repeats its first point. ``source``
    records whether the trace was drawn by hand or produced by the assisted
    refinement tool.
    """

    id: str
    cls: AnnotationClass
    points: Sequence[tuple[int, int]]
    source: str = "manual"

    def __post_init__(self) -> None:
        if len(self.points) < 1:
            raise ValidationError(f"annotation {self.id}: empty polyline")
        if self.source not in ("manual", "refined"):
            raise ValidationError(f"annotation {self.id}: bad source {self.source!r}")


@dataclass
class AnnotationSet:
    slide_id: str
    version: int = 0
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [a.id for a in self.annotations]
        if len(ids) != len(set(ids)):
            raise ValidationError("annotation ids must be unique")

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "version": self.version,
            "annotations": [
                {
                    "id": a.id,
                    "class": a.cls.value,
                    "points": [[int(x), int(y)] for x, y in a.points],
                    "source": a.source,
                }
                for a in self.annotations
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationSet":
        anns = []
        for a in obj.get("annotations", []):
            try:
                acls = AnnotationClass(a["class"])
            except ValueError:
                raise ValidationError(f"unknown annotation class {a['class']!r}") from None
            pts = [(int(p[0]), int(p[1])) for p in a["points"]]
            anns.append(Annotation(a["id"], acls, pts, a.get("source", "manual")))
        return cls(slide_id=obj["slide_id"], version=int(obj.get("version", 0)), annotations=anns)


def write_annotations(ann: AnnotationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ann.to_json(), indent=2, sort_keys=True) + "\n")


def read_annotations(path: str | Path) -> AnnotationSet:
    return AnnotationSet.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel labels over a window; ``values`` is (h, w) uint8 mask codes."""

    bounds: tuple[int, int, int, int]  # x, y, w, h in level-0 pixels
    values: np.ndarray

    def __post_init__(self) -> None:
        x, y, w, h = self.bounds
        if self.values.shape != (h, w):
            raise ValueError(f"mask values {self.values.shape} != bounds {(h, w)}")


def bresenham(p0: tuple[int, int], p1: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer line rasterization from p0 to p1, both endpoints included.

    Steps along the major axis, picking the minor coordinate nearest the true
    line (ties round toward +inf), so the pixel set is independent of segment
    direction. Produces max(|dx|, |dy|) + 1 eight-connected pixels.
    """
    x0, y0 = int(p0[0]), int(p0[1])
    x1, y1 = int(p1[0]), int(p1[1])
    dx = x1 - x0
    dy = y1 - y0
    n = max(abs(dx), abs(dy))
    if n == 0:
        return [(x0, y0)]
    pts: list[tuple[int, int]] = []
    if abs(dx) >= abs(dy):
        sx = 1 if dx > 0 else -1
        for i in range(n + 1):
            # floor(y0 + i*dy/n + 1/2) in exact integer arithmetic
            y = y0 + (2 * i * dy + n) // (2 * n)
            pts.append((x0 + sx * i, y))
    else:
        sy = 1 if dy > 0 else -1
        for i in range(n + 1):
            x = x0 + (2 * i * dx + n) // (2 * n)
            pts.append((x, y0 + sy * i))
    return pts


def rasterize(ann: AnnotationSet, bounds: tuple[int, int, int, int]) -> LabelMask:
    """Draw every polyline into a window; out-of-window pixels are discarded.

    Where classes overlap on one pixel, equivocal wins over cautery, which
    wins over non-cautery.
    """
    x, y, w, h = bounds
    if w < 1 or h < 1:
        raise ValueError("bounds must span at least one pixel")
    values = np.zeros((h, w), dtype=np.uint8)
    for a in ann.annotations:
        code = _CLASS_TO_MASK[a.cls]
        pts = a.points
        segments = zip(pts, pts[1:]) if len(pts) > 1 else [(pts[0], pts[0])]
        for p0, p1 in segments:
            for px, py in bresenham(p0, p1):
                lx, ly = px - x, py - y
                if 0 <= lx < w and 0 <= ly < h and values[ly, lx] < code:
                    values[ly, lx] = code
    return LabelMask(bounds=bounds, values=values)


def count_labels(mask: LabelMask, window: tuple[int, int, int, int]) -> tuple[int, int, int]:
    """(cautery, non_cautery, equivocal) pixel counts inside window ∩ mask."""
    mx, my, mw, mh = mask.bounds
    wx, wy, ww, wh = window
    x0 = max(wx, mx)
    y0 = max(wy, my)
    x1 = min(wx + ww, mx + mw)
    y1 = min(wy + wh, my + mh)
    if x1 <= x0 or y1 <= y0:
        return 0, 0, 0
    sub = mask.values[y0 - my : y1 - my, x0 - mx : x1 - mx]
    return (
        int(np.count_nonzero(sub == MASK_CAUTERY)),
        int(np.count_nonzero(sub == MASK_NON_CAUTERY)),
        int(np.count_nonzero(sub == MASK_EQUIVOCAL)),
    )


def label_from_counts(cautery: int, non_cautery: int, equivocal: int) -> PatchLabel:
    """Majority rule over pixel counts.

    Equivocal wins only as a strict plurality; a cautery/non-cautery tie (or
    no labeled pixels at all) is unlabeled rather than guessed.
    """
    if cautery == 0 and non_cautery == 0 and equivocal == 0:
        return PatchLabel.UNLABELED
    if equivocal > cautery and equivocal > non_cautery:
        return PatchLabel.EQUIVOCAL
    if cautery > non_cautery:
        return PatchLabel.CAUTERY
    if non_cautery > cautery:
        return PatchLabel.NON_CAUTERY
    return PatchLabel.UNLABELED


def label_patch(mask: LabelMask, patch) -> PatchLabel:
    """Label one patch window from the rasterized mask (see label_from_counts)."""
    window = (patch.origin[0], patch.origin[1], patch.side, patch.side)
    return label_from_counts(*count_labels(mask, window))


def filter_regions(regions: Sequence, masks: Iterable[LabelMask]) -> list:
    """Keep the regions whose mask has at least one labeled pixel, in order."""
    kept = []
    for region, mask in zip(regions, masks):
        if np.any(mask.values != MASK_NONE):
            kept.append(region)
    return kept
