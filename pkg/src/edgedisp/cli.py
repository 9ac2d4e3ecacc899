"""Command-line pipeline: gen-data, gen-gt, train, eval, infer.

Machine-readable results go to stdout, diagnostics to stderr; exit code
0 on success, 2 for usage/precondition failures, 1 otherwise. Flag
precedence is defaults < --config JSON file < explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Dict, Optional

import numpy as np

from . import data as ddata
from . import losses, network, trainer
from .losses import LossWeights
from .network import NetworkConfig
from .tensor import Tensor
from .trainer import TrainConfig


def _worker_cap() -> int:
    """Honor the DAGM_THREADS cap (this build runs single-threaded anyway)."""
    try:
        return max(1, int(os.environ.get("DAGM_THREADS", "1")))
    except ValueError:
        return 1


# -- disparity colormap -------------------------------------------------------


def _colormap() -> np.ndarray:
    """Fixed 256-entry RGB lookup (piecewise-linear jet, integer-exact)."""
    t = np.arange(256) / 255.0
    def ramp(x):
        return np.clip(1.5 - np.abs(x), 0.0, 1.0)
    r = ramp(4.0 * t - 3.0)
    g = ramp(4.0 * t - 2.0)
    b = ramp(4.0 * t - 1.0)
    return np.rint(255.0 * np.stack([r, g, b], axis=1)).astype(np.uint8)


_LUT = _colormap()


def colorize(values: np.ndarray, vmax: float) -> np.ndarray:
    """Map values in [0, vmax] through the fixed LUT to [H,W,3] uint8."""
    idx = np.clip(np.rint(255.0 * np.asarray(values) / vmax), 0, 255).astype(np.intp)
    return _LUT[idx]


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.dmax >= args.width // 2:
        print(f"error: dmax {args.dmax} must be < width/2 = {args.width // 2}",
              file=sys.stderr)
        return 2
    cfg = {"H": args.height, "W": args.width, "D_max": args.dmax,
           "n_objects": args.objects}
    manifest = []
    for i in range(args.count):
        sample = ddata.synth_stereogram(args.seed + i, cfg)
        files = ddata.save_sample(args.out, i, sample)
        manifest.append({"index": i, "seed": args.seed + i, "files": files})
    print(json.dumps({"out": args.out, "count": args.count, "config": cfg,
                      "samples": manifest}, indent=2))
    return 0


def cmd_gen_gt(args) -> int:
    inst, _ = ddata.read_pgm(args.inst)
    sem, _ = ddata.read_pgm(args.sem)
    if inst.shape != sem.shape:
        print(f"error: mask extents differ: {inst.shape} vs {sem.shape}",
              file=sys.stderr)
        return 2
    edges = ddata.depth_edge_gt(inst, sem, args.dilate)
    ddata.write_pgm(args.out, edges, maxval=255)
    print(json.dumps({"out": args.out, "edge_pixels": int(edges.sum()),
                      "shape": list(edges.shape)}))
    return 0


_TRAIN_OVERLAY_KEYS = {
    "seed", "batch_size", "steps", "eval_interval", "phase", "grad_clip",
    "edge_dilate_radius",
}


def _build_train_config(args) -> TrainConfig:
    overlay: Dict = {}
    if args.config:
        with open(args.config) as f:
            overlay = json.load(f)
    net_kwargs = overlay.get("network", {})
    loss_kwargs = overlay.get("loss_weights", {})
    kwargs = {k: v for k, v in overlay.items() if k in _TRAIN_OVERLAY_KEYS}
    if "lr_schedule" in overlay:
        kwargs["lr_schedule"] = tuple((int(s), float(l)) for s, l in overlay["lr_schedule"])
    for name in ("seed", "batch_size", "steps", "eval_interval"):
        v = getattr(args, name)
        if v is not None:
            kwargs[name] = v
    if args.a is not None:
        loss_kwargs["a"] = args.a
    return TrainConfig(
        network=NetworkConfig(**net_kwargs),
        loss_weights=LossWeights(**loss_kwargs),
        data_dir=args.data, val_dir=args.val_data, out_dir=args.out,
        **kwargs)


def cmd_train(args) -> int:
    cfg = _build_train_config(args)
    result = trainer.train(cfg)
    print(json.dumps(result, indent=2))
    return 0


def cmd_eval(args) -> int:
    report = trainer.evaluate(args.ckpt, args.data)
    print(json.dumps(report, indent=2))
    return 0


def cmd_infer(args) -> int:
    params, _state, cfg = trainer.load_checkpoint(args.ckpt)
    left, lmax = ddata.read_pgm(args.left)
    right, rmax = ddata.read_pgm(args.right)
    if left.shape != right.shape:
        print(f"error: image extents differ: {left.shape} vs {right.shape}",
              file=sys.stderr)
        return 2
    h, w = left.shape
    to3 = lambda img, mx: Tensor(np.broadcast_to(img / mx, (3, h, w)).copy())
    sample = ddata.StereoSample(to3(left, lmax), to3(right, rmax),
                                Tensor(np.zeros((h, w))),
                                np.zeros((h, w), dtype=np.int64),
                                np.zeros((h, w), dtype=np.int64),
                                np.ones((h, w), dtype=np.uint8))
    disp = trainer.predict(params, cfg, sample)
    ddata.write_pfm(args.out_disp, disp)
    ddata.write_ppm(args.out_vis, colorize(disp, cfg.d_max - 1))
    report = {"out_disp": args.out_disp, "out_vis": args.out_vis,
              "d_max": cfg.d_max, "mean_disparity": float(disp.mean())}
    if args.gt:
        gt = ddata.read_pfm(args.gt)
        valid = np.ones_like(gt, dtype=bool)
        report["epe"] = losses.epe(disp, gt, valid)
        if args.out_err:
            err = np.abs(disp - gt)
            ddata.write_ppm(args.out_err, colorize(np.clip(err, 0, 5.0), 5.0))
            report["out_err"] = args.out_err
    print(json.dumps(report, indent=2))
    return 0


# -- argument parsing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="edgedisp",
        description="edge-aware stereo disparity: data generation, training, "
                    "evaluation, inference")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic stereo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--dmax", type=int, default=16)
    g.add_argument("--objects", type=int, default=2)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-gt", help="depth-edge ground truth from mask files")
    g.add_argument("--inst", required=True)
    g.add_argument("--sem", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--dilate", type=int, default=0)
    g.set_defaults(func=cmd_gen_gt)

    g = sub.add_parser("train", help="train a model")
    g.add_argument("--config", help="JSON overlay for the training config")
    g.add_argument("--data", required=True)
    g.add_argument("--val-data", dest="val_data")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--eval-interval", dest="eval_interval", type=int)
    g.add_argument("--a", type=float, help="edge loss mixing weight")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("infer", help="predict disparity for one pair")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--left", required=True)
    g.add_argument("--right", required=True)
    g.add_argument("--out-disp", dest="out_disp", required=True)
    g.add_argument("--out-vis", dest="out_vis", required=True)
    g.add_argument("--gt")
    g.add_argument("--out-err", dest="out_err")
    g.set_defaults(func=cmd_infer)

    return p


def main(argv: Optional[list] = None) -> int:
    _worker_cap()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ValueError, FileNotFoundError)) else 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
