"""Command-line driver for training, registration, and evaluation.

Subcommands: train, align-pair, align-stack, gen-warp, eval (ncc | heatmap |
dice | epe), xsection. Reports go to stdout as `key=value` lines; every run
echoes its effective configuration first. Exit codes: 0 success, 1 runtime
failure (one-line diagnostic on stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ssemreg import config as cfgmod
from ssemreg import metrics, stackio, synthwarp
from ssemreg.autoencoder import ArchitectureSpec, build_model, train_autoencoder
from ssemreg.config import ConfigError
from ssemreg.registration import register
from ssemreg.stackalign import align_stack
from ssemreg.stacks import StackError
from ssemreg.stackio import CheckpointError, VectorMapError
from ssemreg.warpfield import upsample_field, warp_image

__all__ = ["main", "entry"]

# first-class flags and the config keys they override
_FLAG_KEYS = {
    "seed": "seed",
    "arch": "arch",
    "steps": "train_steps",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "iterations": "iterations",
    "reg_lr": "reg_lr",
    "window": "window",
    "sigma": "sigma",
    "points": "tps_points",
    "grid_spacing": "grid_spacing",
    "interpolation": "interpolation",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=("shallow7x7", "deep3x3"))
    p.add_argument("--steps", type=int, help="autoencoder training steps")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--reg-lr", type=float, dest="reg_lr")
    p.add_argument("--window", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--grid-spacing", type=int, dest="grid_spacing")
    p.add_argument("--interpolation", choices=("bilinear", "tps"))


def _effective_config(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = cfgmod.parse_config(args.config, overrides)
    for line in cfgmod.config_lines(cfg):
        print(f"config.{line}")
    return cfg


def _save_heatmap(hm: metrics.Heatmap, prefix: Path) -> None:
    """PNG rendering ([-1,1] -> 8-bit, invalid windows black) plus raw CSV."""
    vals = np.where(hm.valid, hm.values, -1.0)
    img = np.round((vals + 1.0) * 127.5).astype(np.uint8)
    stackio.save_image(img / 255.0, prefix.with_suffix(".png"), "raw")
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in hm.values:
            writer.writerow([f"{v:.6f}" if np.isfinite(v) else "nan" for v in row])


def _report(key: str, value) -> None:
    if isinstance(value, float):
        print(f"{key}={value:.6f}")
    else:
        print(f"{key}={value}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    cfg = _effective_config(args)
    stack = stackio.load_stack(args.stack, "raw")
    model = build_model(ArchitectureSpec.preset(cfg["arch"]), seed=cfg["seed"])
    model, losses = train_autoencoder(model, stack, cfgmod.train_config(cfg))
    stackio.save_checkpoint(model, args.out)
    curve = args.loss_csv or Path(str(args.out) + ".loss.csv")
    Path(curve).parent.mkdir(parents=True, exist_ok=True)
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.8g}"])
    _report("checkpoint", args.out)
    _report("steps", len(losses))
    if losses:
        _report("loss_first", losses[0])
        _report("loss_last", losses[-1])
    return 0


def _align_one(fixed, moving, model, cfg, similarity, out_dir: Path):
    reg_cfg = cfgmod.registration_config(cfg, similarity=similarity)
    result = register(moving, [fixed], [1.0], model, reg_cfg)
    vmap = result.vector_map
    aligned = warp_image(moving, upsample_field(vmap))
    stackio.save_vector_map(vmap, out_dir / f"vector_map_{similarity}.vmap")
    stackio.save_image(aligned, out_dir / f"aligned_{similarity}.png", "raw")
    hm = metrics.ncc_heatmap(fixed, aligned, cfg["ncc_window"], cfg["ncc_stride"])
    _save_heatmap(hm, out_dir / f"heatmap_{similarity}")
    _report(f"ncc_{similarity}", metrics.ncc(fixed, aligned))
    _report(f"heatmap_mean_{similarity}", hm.summary)
    _report(f"mean_abs_v_{similarity}", float(np.mean(np.abs(vmap.displacements))))
    _report(f"loss_first_{similarity}", result.loss_trace[0])
    _report(f"loss_last_{similarity}", result.loss_trace[-1])


def _cmd_align_pair(args) -> int:
    cfg = _effective_config(args)
    fixed = stackio.load_image(args.fixed, "raw")
    moving = stackio.load_image(args.moving, "raw")
    model = stackio.load_checkpoint(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    hm0 = metrics.ncc_heatmap(fixed, moving, cfg["ncc_window"], cfg["ncc_stride"])
    _save_heatmap(hm0, out_dir / "heatmap_unregistered")
    _report("ncc_unregistered", metrics.ncc(fixed, moving))
    _report("heatmap_mean_unregistered", hm0.summary)

    variants = ("feature", "pixel") if args.similarity == "both" else (args.similarity,)
    for similarity in variants:
        _align_one(fixed, moving, model, cfg, similarity, out_dir)
    return 0


def _cmd_align_stack(args) -> int:
    cfg = _effective_config(args)
    stack = stackio.load_stack(args.stack, "raw")
    model = stackio.load_checkpoint(args.model)
    plan = cfgmod.alignment_plan(cfg)
    out_dir = Path(args.out)
    sections_dir = out_dir / "sections"
    maps_dir = out_dir / "maps"
    if sections_dir.exists() and any(sections_dir.iterdir()) and not args.force:
        raise StackError(f"{sections_dir} already contains files; pass --force to overwrite")
    sections_dir.mkdir(parents=True, exist_ok=True)

    def sink(pos, arr):
        stackio.save_image(arr, sections_dir / f"{stack.indices[pos]:04d}.png", "raw")

    result = align_stack(stack, model, plan, sink=sink)
    for pos, vmap in enumerate(result.maps):
        stackio.save_vector_map(vmap, maps_dir / f"{stack.indices[pos]:04d}.vmap")
    _report("sections", stack.depth)
    _report("window", plan.window)
    _report("peak_resident_sections", result.peak_resident)
    mean_disp = float(np.mean([np.mean(np.abs(m.displacements)) for m in result.maps[1:]]))
    _report("mean_abs_v", mean_disp)
    return 0


def _cmd_gen_warp(args) -> int:
    cfg = _effective_config(args)
    stack = stackio.load_stack(args.stack, args.kind)
    deformed, flows = synthwarp.deform_stack(stack, cfg["sigma"], cfg["tps_points"], cfg["seed"])
    out_dir = Path(args.out)
    stackio.save_stack(deformed, out_dir / "sections", force=args.force)
    for pos, flow in enumerate(flows):
        stackio.save_vector_map(flow, out_dir / "flows" / f"{stack.indices[pos]:04d}.vmap")
    _report("sections", stack.depth)
    _report("sigma", cfg["sigma"])
    _report("max_abs_flow", float(np.max([np.max(np.abs(f)) for f in flows])))
    return 0


def _cmd_eval_ncc(args) -> int:
    a = stackio.load_image(args.a, "raw")
    b = stackio.load_image(args.b, "raw")
    mask = stackio.load_image(args.mask, "raw") if args.mask else None
    _report("ncc", metrics.ncc(a, b, mask))
    return 0


def _cmd_eval_heatmap(args) -> int:
    a = stackio.load_image(args.a, "raw")
    b = stackio.load_image(args.b, "raw")
    hm = metrics.ncc_heatmap(a, b, args.window, args.stride)
    _save_heatmap(hm, Path(args.out_prefix))
    _report("heatmap_mean", hm.summary)
    _report("heatmap_valid_windows", int(hm.valid.sum()))
    _report("ncc", metrics.ncc(a, b))
    return 0


def _cmd_eval_dice(args) -> int:
    gt = stackio.load_stack(args.gt, "label")
    test = stackio.load_stack(args.test, "label")
    if gt.depth != test.depth:
        print(f"error: stack depths differ: ground truth has {gt.depth}, test has {test.depth}", file=sys.stderr)
        return 1
    gt_vol = np.stack(list(gt.sections()))
    test_vol = np.stack(list(test.sections()))
    labels = np.unique(gt_vol[gt_vol != 0])
    k = min(args.k, labels.size)
    _report("mean_dice", metrics.mean_dice_top_k(gt_vol, test_vol, k))
    _report("labels_used", k)
    return 0


def _load_dense_flow(path):
    obj = stackio.load_vector_map(path)
    if isinstance(obj, np.ndarray):
        return obj
    return upsample_field(obj)  # coarse maps are upsampled on the fly


def _cmd_eval_epe(args) -> int:
    est = _load_dense_flow(args.est)
    gt = _load_dense_flow(args.gt)
    mask = stackio.load_image(args.mask, "raw") if args.mask else None
    _report("mean_endpoint_error", metrics.mean_endpoint_error(est, gt, mask))
    return 0


def _cmd_xsection(args) -> int:
    stack = stackio.load_stack(args.stack, args.kind)
    slice_img = metrics.cross_section(stack, args.axis, args.index)
    stackio.save_image(slice_img, args.out, stack.kind)
    _report("output", args.out)
    _report("slice_shape", "x".join(str(s) for s in slice_img.shape))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssemreg",
        description="Register serial-section microscopy stacks with learned features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an autoencoder on a raw stack")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--loss-csv", type=Path, default=None)
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("align-pair", help="register one moving image onto a fixed one")
    p.add_argument("--fixed", required=True, type=Path)
    p.add_argument("--moving", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path, help="checkpoint path")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--similarity", choices=("feature", "pixel", "both"), default="both")
    _add_config_args(p)
    p.set_defaults(func=_cmd_align_pair)

    p = sub.add_parser("align-stack", help="sliding-window alignment of a stack")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    _add_config_args(p)
    p.set_defaults(func=_cmd_align_stack)

    p = sub.add_parser("gen-warp", help="apply random smooth deformations with ground truth")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--kind", choices=("raw", "label"), default="raw")
    p.add_argument("--force", action="store_true")
    _add_config_args(p)
    p.set_defaults(func=_cmd_gen_warp)

    p = sub.add_parser("eval", help="score registration quality")
    esub = p.add_subparsers(dest="metric", required=True)

    e = esub.add_parser("ncc", help="global normalized cross correlation")
    e.add_argument("--a", required=True, type=Path)
    e.add_argument("--b", required=True, type=Path)
    e.add_argument("--mask", type=Path, default=None)
    e.set_defaults(func=_cmd_eval_ncc)

    e = esub.add_parser("heatmap", help="windowed NCC heatmap")
    e.add_argument("--a", required=True, type=Path)
    e.add_argument("--b", required=True, type=Path)
    e.add_argument("--window", type=int, default=32)
    e.add_argument("--stride", type=int, default=16)
    e.add_argument("--out-prefix", required=True, type=Path)
    e.set_defaults(func=_cmd_eval_heatmap)

    e = esub.add_parser("dice", help="mean Dice over the largest labels")
    e.add_argument("--gt", required=True, type=Path)
    e.add_argument("--test", required=True, type=Path)
    e.add_argument("--k", type=int, default=50)
    e.set_defaults(func=_cmd_eval_dice)

    e = esub.add_parser("epe", help="mean endpoint error between dense flows")
    e.add_argument("--est", required=True, type=Path)
    e.add_argument("--gt", required=True, type=Path)
    e.add_argument("--mask", type=Path, default=None)
    e.set_defaults(func=_cmd_eval_epe)

    p = sub.add_parser("xsection", help="fixed-row/column slice through a stack")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--axis", choices=("row", "column"), default="row")
    p.add_argument("--index", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--kind", choices=("raw", "label"), default="raw")
    p.set_defaults(func=_cmd_xsection)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (StackError, CheckpointError, VectorMapError, ConfigError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
