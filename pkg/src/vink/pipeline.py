"""Batch pipeline stages over a data directory.

Layout under one root:

    slides/<id>.png          manifests/<id>.json      annotations/<id>.json
    plans/<id>.json          regions/<id>.json        caches/<id>.vinf
    predictions/<id>.json    decisions/<id>.json      truths/<id>.json
    segments/<id>.json       overlays/<id>.png        model.vinm

Every stochastic stage derives its generator from one root seed plus a stage
tag, so stages can be re-run independently without disturbing each other.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregate, annotation, classifier, features, metrics, tiler
from .annotation import AnnotationSet, PatchLabel, count_labels, label_from_counts, rasterize
from .errors import DimensionMismatch, VinkError
from .features import FeatureCache, FeatureRecord, extract_toy
from .slide_io import (
    RasterImage,
    SlideManifest,
    SyntheticSpec,
    downsample_bilinear,
    load_slide,
    read_manifest,
    save_png,
    synthesize_slide,
    write_manifest,
)
from .tiler import RegionSpec, crop, grid_patches, plan_regions

DOWNSAMPLE_FACTOR = 16


class DataLayout:
    """Path conventions under a data root."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def slide_png(self, slide_id: str) -> Path:
        return self.root / "slides" / f"{slide_id}.png"

    def manifest(self, slide_id: str) -> Path:
        return self.root / "manifests" / f"{slide_id}.json"

    def annotations(self, slide_id: str) -> Path:
        return self.root / "annotations" / f"{slide_id}.json"

    def plan(self, slide_id: str) -> Path:
        return self.root / "plans" / f"{slide_id}.json"

    def regions(self, slide_id: str) -> Path:
        return self.root / "regions" / f"{slide_id}.json"

    def cache(self, slide_id: str) -> Path:
        return self.root / "caches" / f"{slide_id}.vinf"

    def predictions(self, slide_id: str) -> Path:
        return self.root / "predictions" / f"{slide_id}.json"

    def decisions(self, slide_id: str) -> Path:
        return self.root / "decisions" / f"{slide_id}.json"

    def truths(self, slide_id: str) -> Path:
        return self.root / "truths" / f"{slide_id}.json"

    def segments(self, slide_id: str) -> Path:
        return self.root / "segments" / f"{slide_id}.json"

    def overlay(self, slide_id: str) -> Path:
        return self.root / "overlays" / f"{slide_id}.png"

    def model(self) -> Path:
        return self.root / "model.vinm"

    def slide_ids(self) -> list[str]:
        mdir = self.root / "manifests"
        if not mdir.is_dir():
            return []
        return sorted(p.stem for p in mdir.glob("*.json"))


def stage_seed(root_seed: int, stage: str, index: int = 0) -> int:
    """Deterministic per-stage, per-item sub-seed."""
    key = zlib.crc32(stage.encode("utf-8"))
    seq = np.random.SeedSequence([root_seed, key, index])
    return int(seq.generate_state(1, np.uint64)[0])


def synth_dataset(
    root: str | Path,
    count: int,
    seed: int,
    width: int = 8192,
    height: int = 8192,
    blobs: int = 2,
    arc_fraction: float = 0.5,
    band_width: int = 48,
    blocks: int = 2,
    threads: int = 1,
    prefix: str = "synth",
) -> list[str]:
    """Generate `count` synthetic slides split into `blocks` contiguous tissue
    blocks, writing slide PNG + manifest + annotations for each."""
    layout = DataLayout(root)
    layout.dir("slides")
    layout.dir("manifests")
    layout.dir("annotations")

    def synth_one(i: int) -> str:
        slide_id = f"{prefix}{i:03d}"
        fraction = arc_fraction
        if 0.0 < arc_fraction < 1.0:
            # jitter the band share per slide so region grids do not all see
            # the same class balance
            jitter_rng = np.random.default_rng(stage_seed(seed, "arc", i))
            fraction = float(np.clip(arc_fraction + jitter_rng.uniform(-0.08, 0.08), 0.05, 0.95))
        spec = SyntheticSpec(
            width=width,
            height=height,
            tissue_blob_count=blobs,
            cautery_arc_fraction=fraction,
            band_width=band_width,
            seed=stage_seed(seed, "synth", i),
        )
        img, ann = synthesize_slide(spec)
        ann.slide_id = slide_id
        block = f"block_{chr(ord('a') + (i * blocks) // count)}"
        save_png(img, layout.slide_png(slide_id))
        write_manifest(
            SlideManifest(
                slide_id=slide_id,
                width=img.width,
                height=img.height,
                source_path=f"slides/{slide_id}.png",
                block_id=block,
            ),
            layout.manifest(slide_id),
        )
        annotation.write_annotations(ann, layout.annotations(slide_id))
        return slide_id

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(synth_one, range(count)))
    return [synth_one(i) for i in range(count)]


def tile_slide(root: str | Path, slide_id: str, side: int = tiler.REGION_SIDE,
               overlap: float = 0.10) -> list[RegionSpec]:
    layout = DataLayout(root)
    manifest = read_manifest(layout.manifest(slide_id))
    regions = plan_regions(manifest.width, manifest.height, side=side, overlap=overlap)
    layout.dir("plans")
    tiler.write_plan(regions, layout.plan(slide_id))
    return regions


def _slide_mask(layout: DataLayout, slide_id: str) -> annotation.LabelMask:
    manifest = read_manifest(layout.manifest(slide_id))
    ann = annotation.read_annotations(layout.annotations(slide_id))
    return rasterize(ann, (0, 0, manifest.width, manifest.height))


def rasterize_slide(root: str | Path, slide_id: str) -> list[RegionSpec]:
    """Rasterize the slide's annotations and keep only regions that contain
    at least one labeled pixel."""
    layout = DataLayout(root)
    regions = tiler.read_plan(layout.plan(slide_id))
    mask = _slide_mask(layout, slide_id)
    kept = []
    for region in regions:
        window = (region.origin[0], region.origin[1], region.side, region.side)
        if any(count_labels(mask, window)):
            kept.append(region)
    layout.dir("regions")
    tiler.write_plan(kept, layout.regions(slide_id))
    return kept


def extract_slide(root: str | Path, slide_id: str, threads: int = 1) -> FeatureCache:
    """Toy-extract every patch of every labeled region into the slide cache."""
    layout = DataLayout(root)
    _, img = load_slide(layout.slide_png(slide_id))
    regions = tiler.read_plan(layout.regions(slide_id))
    mask = _slide_mask(layout, slide_id)

    def extract_region(region: RegionSpec) -> list[FeatureRecord]:
        records = []
        for patch in grid_patches(region):
            window = (patch.origin[0], patch.origin[1], patch.side, patch.side)
            label = label_from_counts(*count_labels(mask, window))
            vector = extract_toy(crop(img, patch.origin, patch.side))
            records.append(
                FeatureRecord(
                    region_id=region.region_id,
                    grid_pos=patch.grid_pos,
                    origin=patch.origin,
                    label=label,
                    vector=vector,
                )
            )
        return records

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_region = list(pool.map(extract_region, regions))
    else:
        per_region = [extract_region(r) for r in regions]
    cache = FeatureCache(
        dimension=features.TOY_DIM,
        extractor_id=features.TOY_EXTRACTOR_ID,
        records=[rec for recs in per_region for rec in recs],
    )
    layout.dir("caches")
    features.write_cache(cache, layout.cache(slide_id))
    return cache


def slides_in_blocks(root: str | Path, blocks: Sequence[str]) -> list[str]:
    layout = DataLayout(root)
    wanted = set(blocks)
    out = []
    for sid in layout.slide_ids():
        if read_manifest(layout.manifest(sid)).block_id in wanted:
            out.append(sid)
    return out


def train_model(
    cache_by_slide: dict[str, FeatureCache],
    config: classifier.TrainConfig,
    model_path: str | Path,
    train_blocks: Sequence[str] | None = None,
) -> classifier.TrainReport:
    """Train on the binary-labeled records of the given per-slide caches and
    save the best checkpoint."""
    records_by_slide = {
        sid: [r for r in cache.records if r.label in (PatchLabel.CAUTERY, PatchLabel.NON_CAUTERY)]
        for sid, cache in cache_by_slide.items()
    }
    dims = {cache.dimension for cache in cache_by_slide.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"caches disagree on feature dimension: {sorted(dims)}")
    model, rep = classifier.train(records_by_slide, config)
    model.metadata["train_blocks"] = sorted(train_blocks or [])
    model.metadata["extractor_id"] = next(iter(cache_by_slide.values())).extractor_id
    classifier.save_model(model, model_path)
    return rep


def infer_slide(root: str | Path, slide_id: str, model_path: str | Path) -> dict:
    """Predict every cached patch; ground-truth label rides along so voting
    can decide participation later."""
    layout = DataLayout(root)
    cache = features.read_cache(layout.cache(slide_id))
    model = classifier.load_model(model_path)
    if model.dim != cache.dimension:
        raise DimensionMismatch(
            f"model expects {model.dim}-dim features, cache holds {cache.dimension}"
        )
    if cache.records:
        x = np.stack([r.vector.astype(np.float64) for r in cache.records])
        probs, preds = classifier.predict_batch(model, x)
    else:
        probs, preds = np.zeros(0), np.zeros(0, dtype=np.int64)
    payload = {
        "slide_id": slide_id,
        "records": [
            {
                "region_id": list(rec.region_id),
                "grid_pos": list(rec.grid_pos),
                "label": int(rec.label),
                "p": float(p),
                "pred": int(pred),
            }
            for rec, p, pred in zip(cache.records, probs, preds)
        ],
    }
    layout.dir("predictions")
    layout.predictions(slide_id).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    return payload


def _group_by_region(records: list[dict]) -> dict[tuple[int, int], list[dict]]:
    grouped: dict[tuple[int, int], list[dict]] = {}
    for rec in records:
        grouped.setdefault((rec["region_id"][0], rec["region_id"][1]), []).append(rec)
    return grouped


def vote_slide(root: str | Path, slide_id: str) -> tuple[list, list]:
    """Vote each region from its patch predictions and derive the region
    ground truth from the patch labels; write both files."""
    layout = DataLayout(root)
    payload = json.loads(layout.predictions(slide_id).read_text())
    grouped = _group_by_region(payload["records"])
    decisions = []
    truths = []
    for region_id in sorted(grouped):
        recs = grouped[region_id]
        entries = []
        labels = []
        for rec in recs:
            label = PatchLabel(rec["label"])
            labels.append(label)
            if label in (PatchLabel.UNLABELED, PatchLabel.EQUIVOCAL):
                entries.append(label)
            else:
                entries.append(PatchLabel.CAUTERY if rec["pred"] == 1 else PatchLabel.NON_CAUTERY)
        decisions.append(aggregate.vote_region(region_id, entries))
        truth_votes_c = sum(1 for l in labels if l == PatchLabel.CAUTERY)
        truth_votes_n = sum(1 for l in labels if l == PatchLabel.NON_CAUTERY)
        truths.append(
            aggregate.RegionDecision(
                region_id=region_id,
                votes_cautery=truth_votes_c,
                votes_non=truth_votes_n,
                decision=aggregate.region_truth(labels),
            )
        )
    layout.dir("decisions")
    layout.dir("truths")
    aggregate.write_decisions(decisions, layout.decisions(slide_id))
    aggregate.write_decisions(truths, layout.truths(slide_id))
    return decisions, truths


def stitch_slide(root: str | Path, slide_id: str,
                 stride: int = aggregate.DEFAULT_STRIDE) -> list:
    layout = DataLayout(root)
    decisions = aggregate.read_decisions(layout.decisions(slide_id))
    segments = aggregate.stitch_margins(decisions, stride=stride)
    layout.dir("segments")
    aggregate.write_segments(segments, layout.segments(slide_id))
    return segments


def equivocal_display_regions(cache: FeatureCache) -> list[tuple[int, int]]:
    """Regions where equivocal is the strict plurality of labeled patches;
    shown green on overlays, never scored."""
    counts: dict[tuple[int, int], list[int]] = {}
    for rec in cache.records:
        c = counts.setdefault(rec.region_id, [0, 0, 0])
        if rec.label == PatchLabel.CAUTERY:
            c[0] += 1
        elif rec.label == PatchLabel.NON_CAUTERY:
            c[1] += 1
        elif rec.label == PatchLabel.EQUIVOCAL:
            c[2] += 1
    return sorted(rid for rid, (c, n, e) in counts.items() if e > c and e > n)


def render_slide(root: str | Path, slide_id: str, alpha: float = 0.5,
                 show_equivocal: bool = True) -> RasterImage:
    layout = DataLayout(root)
    manifest = read_manifest(layout.manifest(slide_id))
    _, img = load_slide(layout.slide_png(slide_id))
    base = downsample_bilinear(img, DOWNSAMPLE_FACTOR)
    regions = tiler.read_plan(layout.regions(slide_id))
    decisions = aggregate.read_decisions(layout.decisions(slide_id))
    equivocal = []
    if show_equivocal and layout.cache(slide_id).exists():
        equivocal = equivocal_display_regions(features.read_cache(layout.cache(slide_id)))
    overlay = aggregate.render_overlay(
        base,
        regions,
        decisions,
        slide_size=(manifest.width, manifest.height),
        equivocal_truth_regions=equivocal,
        factor=DOWNSAMPLE_FACTOR,
        alpha=alpha,
    )
    layout.dir("overlays")
    save_png(overlay, layout.overlay(slide_id))
    return overlay


def _decision_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.json"))
    return [path]


def evaluate_regions(pred_path: str | Path, truth_path: str | Path) -> dict:
    """Accumulate one confusion matrix over aligned decision/truth files and
    report accuracy plus FNR (cautery positive)."""
    pred_files = _decision_files(Path(pred_path))
    truth_files = _decision_files(Path(truth_path))
    if [p.name for p in pred_files] != [t.name for t in truth_files]:
        raise VinkError("prediction and truth files do not line up")
    matrix = metrics.ConfusionMatrix()
    for pf, tf in zip(pred_files, truth_files):
        preds = aggregate.read_decisions(pf)
        truths = [(t.region_id, t.decision) for t in aggregate.read_decisions(tf)]
        metrics.accumulate(preds, truths, matrix)
    return metrics.report(matrix, scope="region")


def evaluate_patches(pred_path: str | Path) -> dict:
    """Patch-scale metrics straight from prediction files."""
    matrix = metrics.ConfusionMatrix()
    for pf in _decision_files(Path(pred_path)):
        payload = json.loads(pf.read_text())
        preds = [r["pred"] for r in payload["records"]]
        labels = [PatchLabel(r["label"]) for r in payload["records"]]
        metrics.accumulate_patches(preds, labels, matrix)
    return metrics.report(matrix, scope="patch")


def check_block_separation(root: str | Path, slide_ids: Sequence[str],
                           model_path: str | Path) -> None:
    """Refuse evaluation on slides whose tissue block was trained on."""
    layout = DataLayout(root)
    model = classifier.load_model(model_path)
    train_blocks = set(model.metadata.get("train_blocks", []))
    if not train_blocks:
        return
    for sid in slide_ids:
        block = read_manifest(layout.manifest(sid)).block_id
        if block in train_blocks:
            raise VinkError(
                f"slide {sid} belongs to block {block}, which the model was trained on; "
                "evaluation requires unseen blocks"
            )
