"""Region-level voting, margin stitching, and overlay rendering.

Patch decisions are aggregated into one call per 4096 px region by majority
vote; connected runs of cautery regions are stitched into margin segments
(singletons suppressed as noise); decisions are painted over a 16x preview
as a translucent red/blue overlay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotation import PatchLabel
from .errors import GeometryMismatch, WrongPatchCount
from .slide_io import RasterImage
from .tiler import GRID_DIM, RegionSpec

PATCHES_PER_REGION = GRID_DIM * GRID_DIM  # 256
DEFAULT_STRIDE = 3686  # floor(4096 * 0.9)

COLOR_CAUTERY = (255, 0, 0)
COLOR_NON_CAUTERY = (0, 0, 255)
COLOR_EQUIVOCAL = (0, 255, 0)


class Decision(str, Enum):
    CAUTERY = "cautery"
    NON_CAUTERY = "non_cautery"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class RegionDecision:
    region_id: tuple[int, int]
    votes_cautery: int
    votes_non: int
    decision: Decision

    @property
    def participating(self) -> int:
        return self.votes_cautery + self.votes_non


@dataclass(frozen=True)
class MarginSegment:
    segment_id: int
    member_regions: list[tuple[int, int]]
    approx_length: int


def _count_votes(entries: Sequence[PatchLabel]) -> tuple[int, int]:
    if len(entries) != PATCHES_PER_REGION:
        raise WrongPatchCount(f"expected {PATCHES_PER_REGION} entries, got {len(entries)}")
    cautery = sum(1 for e in entries if e == PatchLabel.CAUTERY)
    non = sum(1 for e in entries if e == PatchLabel.NON_CAUTERY)
    return cautery, non


def vote_region(region_id: tuple[int, int], entries: Sequence[PatchLabel]) -> RegionDecision:
    """Majority vote over the participating patches; unlabeled and equivocal
    entries do not vote. No participants: excluded. Tie: cautery (a missed
    margin costs more than a false flag)."""
    cautery, non = _count_votes(entries)
    if cautery + non == 0:
        decision = Decision.EXCLUDED
    elif cautery >= non:
        decision = Decision.CAUTERY
    else:
        decision = Decision.NON_CAUTERY
    return RegionDecision(region_id, cautery, non, decision)


def region_truth(entries: Sequence[PatchLabel]) -> Decision:
    """Same participation and majority rules over ground-truth patch labels,
    except a tie is excluded: ambiguous truth is not scored."""
    cautery, non = _count_votes(entries)
    if cautery + non == 0 or cautery == non:
        return Decision.EXCLUDED
    return Decision.CAUTERY if cautery > non else Decision.NON_CAUTERY


_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def stitch_margins(
    decisions: Iterable[RegionDecision], stride: int = DEFAULT_STRIDE
) -> list[MarginSegment]:
    """8-connected components of cautery regions on the region grid.

    Single-region components are dropped as isolated noise. Segments are
    ordered by size descending, ties by their smallest (row, col) member, and
    approx_length is component size times the region stride.
    """
    cautery = {d.region_id for d in decisions if d.decision == Decision.CAUTERY}
    seen: set[tuple[int, int]] = set()
    components: list[list[tuple[int, int]]] = []
    for cell in sorted(cautery):
        if cell in seen:
            continue
        stack = [cell]
        seen.add(cell)
        comp = []
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for dr, dc in _NEIGHBORS:
                nxt = (cur[0] + dr, cur[1] + dc)
                if nxt in cautery and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(comp) >= 2:
            components.append(sorted(comp))
    components.sort(key=lambda c: (-len(c), c[0]))
    return [
        MarginSegment(segment_id=i, member_regions=comp, approx_length=len(comp) * stride)
        for i, comp in enumerate(components)
    ]


def render_overlay(
    base: RasterImage,
    regions: Sequence[RegionSpec],
    decisions: Sequence[RegionDecision],
    slide_size: tuple[int, int],
    equivocal_truth_regions: Sequence[tuple[int, int]] | None = None,
    factor: int = 16,
    alpha: float = 0.5,
) -> RasterImage:
    """Blend per-region decisions over the downsampled preview.

    Cautery regions blend red, non-cautery blue, optional equivocal ground
    truth green; excluded regions stay untouched. Where overlapping regions
    disagree, cautery wins; equivocal display paints only where no decision
    does. out = round((1-alpha)*base + alpha*color) from the base, never from
    an already blended pixel.
    """
    slide_w, slide_h = slide_size
    want_w = -(-slide_w // factor)
    want_h = -(-slide_h // factor)
    if (base.width, base.height) != (want_w, want_h):
        raise GeometryMismatch(
            f"base is {base.width}x{base.height}, slide/{factor} is {want_w}x{want_h}"
        )
    by_id: Mapping[tuple[int, int], RegionSpec] = {r.region_id: r for r in regions}

    def rect(region_id: tuple[int, int]) -> tuple[int, int, int, int] | None:
        spec = by_id.get(region_id)
        if spec is None:
            return None
        x0 = max(0, spec.origin[0] // factor)
        y0 = max(0, spec.origin[1] // factor)
        x1 = min(want_w, -(-(spec.origin[0] + spec.side) // factor))
        y1 = min(want_h, -(-(spec.origin[1] + spec.side) // factor))
        return (x0, y0, x1, y1) if x1 > x0 and y1 > y0 else None

    # class map with explicit priority: cautery > non-cautery; equivocal only
    # where nothing else painted
    classmap = np.zeros((want_h, want_w), dtype=np.uint8)
    for dec in decisions:
        if dec.decision != Decision.NON_CAUTERY:
            continue
        r = rect(dec.region_id)
        if r:
            classmap[r[1] : r[3], r[0] : r[2]] = 1
    for dec in decisions:
        if dec.decision != Decision.CAUTERY:
            continue
        r = rect(dec.region_id)
        if r:
            classmap[r[1] : r[3], r[0] : r[2]] = 2
    for region_id in equivocal_truth_regions or []:
        r = rect(region_id)
        if r:
            sub = classmap[r[1] : r[3], r[0] : r[2]]
            sub[sub == 0] = 3

    out = base.pixels.astype(np.float64)
    for code, color in ((1, COLOR_NON_CAUTERY), (2, COLOR_CAUTERY), (3, COLOR_EQUIVOCAL)):
        sel = classmap == code
        if sel.any():
            out[sel] = (1.0 - alpha) * out[sel] + alpha * np.array(color, dtype=np.float64)
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def write_decisions(decisions: Sequence[RegionDecision], path: str | Path) -> None:
    payload = [
        {
            "region_id": list(d.region_id),
            "votes_cautery": d.votes_cautery,
            "votes_non": d.votes_non,
            "participating": d.participating,
            "decision": d.decision.value,
        }
        for d in decisions
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_decisions(path: str | Path) -> list[RegionDecision]:
    payload = json.loads(Path(path).read_text())
    return [
        RegionDecision(
            region_id=(int(d["region_id"][0]), int(d["region_id"][1])),
            votes_cautery=int(d["votes_cautery"]),
            votes_non=int(d["votes_non"]),
            decision=Decision(d["decision"]),
        )
        for d in payload
    ]


def write_segments(segments: Sequence[MarginSegment], path: str | Path) -> None:
    payload = [
        {
            "segment_id": s.segment_id,
            "regions": [list(r) for r in s.member_regions],
            "approx_length_px": s.approx_length,
        }
        for s in segments
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
