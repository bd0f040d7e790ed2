"""Command-line entry point: ``xraysplat {phantom,train,render,eval}``.

Machine-readable results go to stdout as JSON; logs go to stderr.  Exit
codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import set_threads
from .checkpoint import load_checkpoint
from .errors import InvalidConfig, XraySplatError
from .geometry import load_geometry
from .io import write_pfm
from .phantom import build_dataset, load_dataset
from .rasterizer import render
from .trainer import evaluate, train

log = logging.getLogger("xraysplat")


def parse_sr_mode(text: str) -> tuple[str, str | None]:
    if text in ("off", "bicubic"):
        return text, None
    if text.startswith("dir="):
        path = text[4:]
        if not path:
            raise argparse.ArgumentTypeError("dir= needs a path")
        return "dir", path
    raise argparse.ArgumentTypeError(f"expected off, bicubic or dir=PATH, got {text!r}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    sys.stdout.flush()


def cmd_phantom(args) -> int:
    out = build_dataset(args.out, n_views=args.views, n_frames=args.frames, hr=args.hr, seed=args.seed,
                        span_degrees=args.span, n_heldout=args.heldout, n_branches=args.branches,
                        noise_sigma=args.noise)
    ds = load_dataset(out)
    _emit({"out": str(out), "n_views": ds.n_views, "n_frames": ds.n_frames,
           "n_hr": len(list((out / "hr").glob("*.pfm"))), "n_lr": len(list((out / "lr").glob("*.pfm"))),
           "n_heldout_views": len(ds.heldout_views),
           "normalization_scale": ds.manifest["normalization_scale"]})
    return 0


def _train_overrides(args) -> dict:
    o = {}
    if args.iters is not None:
        o["train.iters"] = args.iters
    if args.seed is not None:
        o["train.seed"] = args.seed
    if args.sr_mode is not None:
        mode, path = args.sr_mode
        o["train.sr_mode"] = mode
        if path is not None:
            o["train.sr_dir"] = path
    if args.variant is not None:
        o["train.variant"] = args.variant
    if args.learnable_confidence:
        o["confidence.learnable"] = True
    if args.n_init is not None:
        o["scene.n_init"] = args.n_init
    if args.data is not None:
        o["paths.dataset"] = str(args.data)
    if args.out is not None:
        o["paths.out"] = str(args.out)
    if args.init_points is not None:
        o["paths.init_points"] = str(args.init_points)
    return o


def cmd_train(args) -> int:
    from .config import build_config, load_toml

    tree = load_toml(args.config) if args.config else {}
    overrides = _train_overrides(args)
    cfg, paths = build_config(tree, overrides)
    if "dataset" not in paths or "out" not in paths:
        raise InvalidConfig("train needs --data and --out (or [paths] dataset/out)")
    if cfg.densify_start >= cfg.densify_stop:
        log.info("densification window [%d, %d] is empty", cfg.densify_start, cfg.densify_stop)
    ds = load_dataset(paths["dataset"])
    points = np.load(paths["init_points"]) if "init_points" in paths else None
    result = train(ds, cfg, paths["out"], init_points=points)
    _emit({"checkpoint": str(result.checkpoint), "iterations": result.iterations,
           "final_loss": result.final_loss, "n_kernels": len(result.scene), "wall_time": result.wall_time,
           "log": str(Path(paths["out"]) / "train_log.jsonl")})
    return 0


def _resolve_view(args):
    if args.geometry is not None:
        views = load_geometry(args.geometry)
    elif args.data is not None:
        ds = load_dataset(args.data)
        views = ds.views + ds.heldout_views
    else:
        raise InvalidConfig("render needs --data or --geometry to locate the view")
    for v in views:
        if v.view_id == args.view:
            return v
    raise InvalidConfig(f"view id {args.view} not found")


def cmd_render(args) -> int:
    scene, field, _ = load_checkpoint(args.ckpt)
    view = _resolve_view(args)
    if args.frame is not None:
        if args.data is None:
            raise InvalidConfig("--frame needs --data for the frame times")
        t = load_dataset(args.data).frame_time(args.frame)
    else:
        t = args.t
    res = args.res
    w, h = (res, res) if res else (view.width_hr, view.height_hr)
    img = render(scene, field, view, t, width=w, height=h).image.pixels
    write_pfm(args.out, img)
    _emit({"out": str(args.out), "view": view.view_id, "t": t, "width": w, "height": h})
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate((ckpt[0], ckpt[1]), ds, args.split, frames=args.frames)
    if args.dump_dir is not None:
        cams = ds.views if args.split == "train" else ds.heldout_views
        by_id = {v.view_id: v for v in cams}
        for vid, fr in report.items:
            img = render(ckpt[0], ckpt[1], by_id[vid], ds.frame_time(fr)).image.pixels
            write_pfm(Path(args.dump_dir) / f"{vid}_{fr:04}.pfm", img)
    _emit(report.to_dict(per_image=not args.summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xraysplat",
                                description="Dynamic Gaussian splatting for sparse X-ray projection sequences.")
    p.add_argument("--threads", type=int, default=None, help="worker threads for rasterization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write a synthetic phantom dataset")
    ph.add_argument("--views", type=int, default=30)
    ph.add_argument("--frames", type=int, default=20)
    ph.add_argument("--hr", type=int, default=256, help="HR detector size in pixels (square)")
    ph.add_argument("--out", type=Path, required=True)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--span", type=float, default=180.0, help="orbit arc in degrees")
    ph.add_argument("--heldout", type=int, default=10, help="number of held-out views")
    ph.add_argument("--branches", type=int, default=31)
    ph.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma on LR images")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="reconstruct a dataset")
    tr.add_argument("--data", type=Path)
    tr.add_argument("--out", type=Path)
    tr.add_argument("--config", type=Path, help="TOML run file; flags override it")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--sr-mode", type=parse_sr_mode, help="off | bicubic | dir=PATH")
    tr.add_argument("--variant", choices=("full", "pseudo_only"))
    tr.add_argument("--learnable-confidence", action="store_true")
    tr.add_argument("--n-init", type=int)
    tr.add_argument("--init-points", type=Path, help=".npy array (N, 3) of initial kernel centres")
    tr.set_defaults(func=cmd_train)

    rd = sub.add_parser("render", help="render a checkpoint at a view and time")
    rd.add_argument("--ckpt", type=Path, required=True)
    rd.add_argument("--view", type=int, required=True, help="view id")
    rd.add_argument("--data", type=Path)
    rd.add_argument("--geometry", type=Path)
    g = rd.add_mutually_exclusive_group(required=True)
    g.add_argument("--t", type=float)
    g.add_argument("--frame", type=int)
    rd.add_argument("--res", type=int, help="square output size; defaults to the view's HR size")
    rd.add_argument("--out", type=Path, required=True)
    rd.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against ground truth")
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--split", choices=("train", "heldout"), default="heldout")
    ev.add_argument("--frames", type=int, nargs="+")
    ev.add_argument("--summary", action="store_true", help="omit per-image values")
    ev.add_argument("--dump-dir", type=Path, help="also write every rendered image as PFM")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                parser.error("--threads must be >= 1")
            set_threads(args.threads)
        return args.func(args)
    except (XraySplatError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
