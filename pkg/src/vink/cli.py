"""Command-line entry point wiring the pipeline stages into batch runs.

Subcommands: synth, tile, rasterize, extract, train, infer, vote, stitch,
eval, render, serve. Exit codes: 0 success, 1 operational error, 2 usage
error. `--seed` makes a full run bit-reproducible; VIN_DATA_DIR provides the
default data root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import classifier, features, pipeline
from .errors import VinkError


def _data_root(args) -> Path:
    root = args.data or os.environ.get("VIN_DATA_DIR")
    if not root:
        raise VinkError("no data root: pass --data or set VIN_DATA_DIR")
    return Path(root)


def _slide_ids(args) -> list[str]:
    layout = pipeline.DataLayout(_data_root(args))
    if getattr(args, "slide", None):
        return [args.slide]
    ids = layout.slide_ids()
    if not ids:
        raise VinkError(f"no slide manifests under {layout.root}")
    return ids


def _add_common(parser: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        parser.add_argument("--data", help="data root (default: $VIN_DATA_DIR)")
    parser.add_argument("--seed", type=int, default=0, help="root seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides")
    _add_common(p)
    p.add_argument("--out", help="alias for --data")
    p.add_argument("--slides", type=int, default=10)
    p.add_argument("--width", type=int, default=8192)
    p.add_argument("--height", type=int, default=8192)
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--arc-fraction", type=float, default=0.5)
    p.add_argument("--band-width", type=int, default=48)
    p.add_argument("--blocks", type=int, default=2)

    p = sub.add_parser("tile", help="plan overlapping regions per slide")
    _add_common(p)
    p.add_argument("--slide")
    p.add_argument("--region-side", type=int, default=4096)
    p.add_argument("--overlap", type=float, default=0.10)

    p = sub.add_parser("rasterize", help="rasterize annotations, keep labeled regions")
    _add_common(p)
    p.add_argument("--slide")

    p = sub.add_parser("extract", help="extract per-patch features into caches")
    _add_common(p)
    p.add_argument("--slide")

    p = sub.add_parser("train", help="train the patch classifier")
    _add_common(p)
    p.add_argument("--cache", action="append", help="explicit cache file (repeatable)")
    p.add_argument("--train-blocks", help="comma-separated block ids to train on")
    p.add_argument("--out", help="model output path (default: <data>/model.vinm)")
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("infer", help="predict every cached patch")
    _add_common(p)
    p.add_argument("--slide")
    p.add_argument("--model")

    p = sub.add_parser("vote", help="vote regions and derive region truths")
    _add_common(p)
    p.add_argument("--slide")

    p = sub.add_parser("stitch", help="stitch cautery regions into margin segments")
    _add_common(p)
    p.add_argument("--slide")
    p.add_argument("--stride", type=int, default=3686)

    p = sub.add_parser("eval", help="score decisions against truths")
    _add_common(p)
    p.add_argument("--pred", required=True, help="decision file or directory")
    p.add_argument("--truth", help="truth file or directory (region scope)")
    p.add_argument("--scope", choices=["region", "patch"], default="region")
    p.add_argument("--model", help="model path; with --data, enforces block separation")
    p.add_argument("--out", help="also write the report JSON here")

    p = sub.add_parser("render", help="render decision overlays")
    _add_common(p)
    p.add_argument("--slide")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--no-equivocal", action="store_true")

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)

    return parser


def _cmd_synth(args) -> None:
    root = Path(args.out) if args.out else _data_root(args)
    ids = pipeline.synth_dataset(
        root,
        count=args.slides,
        seed=args.seed,
        width=args.width,
        height=args.height,
        blobs=args.blobs,
        arc_fraction=args.arc_fraction,
        band_width=args.band_width,
        blocks=args.blocks,
        threads=args.threads,
    )
    print(f"wrote {len(ids)} slides under {root}")


def _cmd_tile(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        regions = pipeline.tile_slide(root, sid, side=args.region_side, overlap=args.overlap)
        print(f"{sid}: {len(regions)} regions")


def _cmd_rasterize(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        kept = pipeline.rasterize_slide(root, sid)
        print(f"{sid}: {len(kept)} labeled regions")


def _cmd_extract(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        cache = pipeline.extract_slide(root, sid, threads=args.threads)
        print(f"{sid}: {len(cache.records)} patches cached")


def _cmd_train(args) -> None:
    config = classifier.TrainConfig(
        learning_rate=args.lr,
        max_epochs=args.epochs,
        dropout_p=args.dropout,
        batch_size=args.batch,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    train_blocks: list[str] = []
    if args.cache:
        cache_by_slide = {Path(c).stem: features.read_cache(c) for c in args.cache}
        model_path = Path(args.out) if args.out else Path("model.vinm")
    else:
        root = _data_root(args)
        layout = pipeline.DataLayout(root)
        if args.train_blocks:
            train_blocks = sorted(args.train_blocks.split(","))
            ids = pipeline.slides_in_blocks(root, train_blocks)
        else:
            ids = layout.slide_ids()
        if not ids:
            raise VinkError("no slides selected for training")
        cache_by_slide = {sid: features.read_cache(layout.cache(sid)) for sid in ids}
        model_path = Path(args.out) if args.out else layout.model()
    report = pipeline.train_model(cache_by_slide, config, model_path, train_blocks=train_blocks)
    print(
        f"trained on {len(cache_by_slide)} slides; best epoch {report.best_epoch} "
        f"val accuracy {report.best_val_accuracy:.4f} -> {model_path}"
    )


def _model_path(args) -> Path:
    if getattr(args, "model", None):
        return Path(args.model)
    return pipeline.DataLayout(_data_root(args)).model()


def _cmd_infer(args) -> None:
    root = _data_root(args)
    model_path = _model_path(args)
    for sid in _slide_ids(args):
        payload = pipeline.infer_slide(root, sid, model_path)
        print(f"{sid}: {len(payload['records'])} patches predicted")


def _cmd_vote(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        decisions, _ = pipeline.vote_slide(root, sid)
        voted = sum(1 for d in decisions if d.decision != "excluded")
        print(f"{sid}: {voted}/{len(decisions)} regions voted")


def _cmd_stitch(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        segments = pipeline.stitch_slide(root, sid, stride=args.stride)
        print(f"{sid}: {len(segments)} margin segments")


def _cmd_eval(args) -> None:
    if args.scope == "patch":
        report = pipeline.evaluate_patches(args.pred)
    else:
        if not args.truth:
            raise VinkError("region-scope eval needs --truth")
        if args.data or os.environ.get("VIN_DATA_DIR"):
            pred = Path(args.pred)
            slide_ids = [p.stem for p in (pred.glob("*.json") if pred.is_dir() else [pred])]
            try:
                model_path = _model_path(args)
            except VinkError:
                model_path = None
            if model_path and model_path.exists():
                pipeline.check_block_separation(_data_root(args), slide_ids, model_path)
        report = pipeline.evaluate_regions(args.pred, args.truth)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


def _cmd_render(args) -> None:
    root = _data_root(args)
    for sid in _slide_ids(args):
        pipeline.render_slide(root, sid, alpha=args.alpha, show_equivocal=not args.no_equivocal)
        print(f"{sid}: overlay written")


def _cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(_data_root(args)), host=args.host, port=args.port, log_level="warning")


_COMMANDS = {
    "synth": _cmd_synth,
    "tile": _cmd_tile,
    "rasterize": _cmd_rasterize,
    "extract": _cmd_extract,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "vote": _cmd_vote,
    "stitch": _cmd_stitch,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "serve": _cmd_serve,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except (VinkError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
