"""Command-line entry point: ``rfmvs <subcommand> ...``.

Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 self-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .config import RunConfig
from .errors import (
    ConfigError,
    CoverageTooLow,
    DegenerateConfiguration,
    EmptyCloud,
    EmptyMask,
    MalformedCameraFile,
    MalformedHeader,
    NonFiniteLoss,
    NonFiniteValue,
    ShapeMismatch,
)
from .fusion_eval import PointCloud, evaluate, filter_depths, fuse_cloud
from .geometry import DepthMap
from .refiner import RangeFreeMVS, initialize, run_inference
from .synthdata import PRIMITIVES, SceneSpec, make_scene
from .training import prepare_sample, save_weights, load_weights, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 2, 3, 4
INPUT_ERRORS = (ConfigError, MalformedCameraFile, MalformedHeader, FileNotFoundError, ShapeMismatch,
                EmptyCloud, EmptyMask, CoverageTooLow, KeyError, ValueError)
NUMERIC_ERRORS = (NonFiniteValue, NonFiniteLoss, DegenerateConfiguration, FloatingPointError)

log = logging.getLogger("rfmvs")


def _config(args) -> RunConfig:
    # options given after the subcommand win over the global ones
    path = getattr(args, "sub_config", None) or args.config
    return RunConfig.load(path, [*(args.set or ()), *(getattr(args, "sub_set", None) or ())])


def _model(cfg: RunConfig, weights=None) -> RangeFreeMVS:
    torch.manual_seed(cfg.seed)
    model = RangeFreeMVS(cfg.model_config(), cfg.refiner_config()).to(cfg.torch_dtype)
    if weights:
        load_weights(weights, model)
    model.eval()
    return model


def _references(bundle, ref_arg):
    refs = [r for r, _ in bundle.pairs]
    if ref_arg is not None:
        if ref_arg not in refs:
            raise KeyError(f"view {ref_arg} is not a reference in the pair list")
        refs = [ref_arg]
    return refs


def _views_for(bundle, ref, n_views):
    views = bundle.views_for(ref)
    return views[:n_views] if n_views else views


def cmd_synth(args, cfg: RunConfig):
    spec = SceneSpec(primitive=args.primitive, n_views=args.views, depth_scale=args.scale,
                     width=args.width, height=args.height)
    scene = make_scene(spec, seed=cfg.seed)
    n = len(scene.views)
    pairs = [(i, [j for j in range(n) if j != i]) for i in range(n)]
    ranges = None
    if not args.no_depth_range:
        ranges = []
        for d in scene.gt.depths:
            v = d.values[d.mask]
            ranges.append([float(v.min()), float((v.max() - v.min()) / 191.0)])
    fileio.write_bundle(args.out, scene.views, pairs, scene.gt.depths, scene.gt.cloud, ranges)
    print(json.dumps({"bundle": str(args.out), "views": n, "primitive": args.primitive, "scale": args.scale}))


def cmd_init(args, cfg: RunConfig):
    bundle = fileio.read_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ref in _references(bundle, args.ref):
        fused, mask, _ = initialize(_views_for(bundle, ref, cfg.n_views), cfg.refiner_config())
        fileio.depth_to_pfm(out / f"init_{ref:08d}.pfm", DepthMap(np.where(mask, fused, 0.0), mask))
    print(json.dumps(bundle.report))


def cmd_infer(args, cfg: RunConfig):
    bundle = fileio.read_bundle(args.bundle)
    model = _model(cfg, args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ref in _references(bundle, args.ref):
        res = run_inference(model, _views_for(bundle, ref, cfg.n_views), seed=cfg.seed, dtype=cfg.torch_dtype)
        fileio.depth_to_pfm(out / f"{ref:08d}.pfm", res.depth_map())
    print(json.dumps(bundle.report))


def cmd_train(args, cfg: RunConfig):
    torch.manual_seed(cfg.seed)
    model = RangeFreeMVS(cfg.model_config(), cfg.refiner_config()).to(cfg.torch_dtype)
    if args.bundle:
        bundles = [fileio.read_bundle(b) for b in args.bundle]
        samples = [_bundle_sample(b, model, cfg) for b in bundles]
    else:
        scenes = [make_scene(SceneSpec(primitive=p), seed=cfg.seed + i) for i, p in enumerate(PRIMITIVES)]
        samples = [prepare_sample(s, model, cfg.torch_dtype, name=p) for s, p in zip(scenes, PRIMITIVES)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    summary = train(model, samples, cfg.train_config(), out_dir=out, resume=args.resume, max_steps=args.steps,
                    log_every=args.log_every)
    save_weights(out / "model.ckpt", model)
    print(json.dumps({"steps": summary["steps"], "best_val": summary["best_val"],
                      "final_loss": summary["losses"][-1] if summary["losses"] else None}))


def _bundle_sample(bundle, model, cfg):
    from types import SimpleNamespace

    if bundle.gt_depths is None:
        raise FileNotFoundError(f"{bundle.root} has no ground-truth depths")
    ref, srcs = bundle.pairs[0]
    idx = [ref, *srcs][: cfg.n_views]
    scene = SimpleNamespace(views=[bundle.views[i] for i in idx],
                            gt=SimpleNamespace(depths=[bundle.gt_depths[i] for i in idx]))
    return prepare_sample(scene, model, cfg.torch_dtype, name=str(bundle.root))


def cmd_fuse(args, cfg: RunConfig):
    bundle = fileio.read_bundle(args.bundle)
    depths = []
    for i in range(len(bundle.views)):
        path = Path(args.depths) / f"{i:08d}.pfm"
        if not path.exists():
            raise FileNotFoundError(f"missing depth map {path}")
        depths.append(fileio.depth_from_pfm(path))
    fc = cfg.fusion_config()
    masks = filter_depths(depths, bundle.views, fc.pixel_threshold, fc.depth_threshold, fc.min_views)
    cloud = fuse_cloud(depths, masks, bundle.views, fc.voxel)
    fileio.write_ply(args.out, cloud.points, cloud.colors, binary=not args.ascii)
    print(json.dumps({"points": len(cloud), "kept": [int(m.sum()) for m in masks]}))


def cmd_eval(args, cfg: RunConfig):
    pred = PointCloud(fileio.read_ply(args.pred)[0])
    gt = PointCloud(fileio.read_ply(args.gt)[0])
    report = evaluate(pred, gt, cfg.outlier_cap, cfg.tau, brute_force=args.brute_force)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_selfcheck(args, cfg: RunConfig):
    from .selfcheck import run_selfcheck

    results = run_selfcheck(seed=cfg.seed, quick=not args.full)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_SELFCHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfmvs", description="Depth-range-free multi-view stereo.")
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    common.add_argument("--set", dest="sub_set", action="append", metavar="KEY=VALUE", help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    s = add("synth", help="write a synthetic scene bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--primitive", choices=PRIMITIVES, default="plane")
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--scale", type=float, default=1.0, help="global scene scale")
    s.add_argument("--width", type=int, default=80)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--no-depth-range", action="store_true", help="omit trailing depth-range lines")

    s = add("init", help="write the initial coarse depth D_0 per reference view")
    s.add_argument("bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--ref", type=int)

    s = add("infer", help="estimate reference depth maps")
    s.add_argument("bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--weights")
    s.add_argument("--ref", type=int)

    s = add("train", help="train on synthetic scenes or bundles")
    s.add_argument("--out", required=True)
    s.add_argument("--bundle", action="append")
    s.add_argument("--resume")
    s.add_argument("--steps", type=int, help="stop after this many steps")
    s.add_argument("--log-every", type=int, default=50)

    s = add("fuse", help="filter depth maps and fuse a point cloud")
    s.add_argument("bundle")
    s.add_argument("--depths", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ascii", action="store_true")

    s = add("eval", help="compare two point clouds")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.add_argument("--brute-force", action="store_true")

    s = add("selfcheck", help="run the oracle, gradient and property checks")
    s.add_argument("--full", action="store_true", help="use the larger sample counts")
    return p


COMMANDS = {
    "synth": cmd_synth, "init": cmd_init, "infer": cmd_infer, "train": cmd_train,
    "fuse": cmd_fuse, "eval": cmd_eval, "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
