"""Command-line interface: training, evaluation, window visualization,
complexity accounting and dataset generation."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data
from .attention import complexity
from .config import RunConfig
from .core import Tensor
from .model import IwinModel, ModelConfig
from .training import class_counts, evaluate_model, train
from .viz import viz_windows


def _load_model(checkpoint_path: str, config_path: str | None) -> tuple[IwinModel, RunConfig]:
    ckpt = Path(checkpoint_path)
    cfg_file = Path(config_path) if config_path else ckpt.parent / "config.cfg"
    if not cfg_file.exists():
        raise SystemExit(f"no config found at {cfg_file}; pass --config")
    cfg = RunConfig.load(cfg_file)
    model = IwinModel(ModelConfig.from_run_config(cfg), seed=cfg.seed)
    model.load(ckpt)
    return model, cfg


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    scenes = data.generate(cfg.data_seed, cfg.train_scenes + cfg.val_scenes,
                           H=cfg.image_h, W=cfg.image_w,
                           num_obj_classes=cfg.num_object_classes,
                           num_int_classes=cfg.num_interaction_classes)
    train_scenes = scenes[:cfg.train_scenes]
    val_scenes = scenes[cfg.train_scenes:]
    model, result = train(cfg, train_scenes, val_scenes, out_dir=args.out)
    print(f"best mAP {result.best_map:.4f} at epoch {result.best_epoch}; "
          f"checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint, args.config)
    scenes, _ = data.load_dataset(args.data)
    setting = "known" if args.setting.startswith("known") else "default"
    report = evaluate_model(model, scenes, setting=setting,
                            train_class_counts=None, batch_size=cfg.batch_size)
    print(f"setting\t{report.setting}")
    for (obj, inter), ap in sorted(report.per_class_ap.items()):
        print(f"class\tobj={obj}\tint={inter}\tAP\t{ap:.4f}")
    print(f"mAP_full\t{report.map_full:.4f}")
    print(f"mAP_rare\t{report.map_rare:.4f}")
    print(f"mAP_nonrare\t{report.map_nonrare:.4f}")
    return 0


def cmd_viz(args) -> int:
    model, _ = _load_model(args.checkpoint, args.config)
    tensors = checkpoint.load_tensors(args.image)
    if "image" not in tensors:
        raise SystemExit(f"{args.image} has no 'image' record")
    trace = viz_windows(model, Tensor(tensors["image"]), args.out, out_ppm=args.ppm)
    print(f"{len(trace['tokens'])} tokens, {trace['ancestors_per_token']} ancestors each "
          f"-> {args.out}")
    return 0


def cmd_complexity(args) -> int:
    rows = []
    for kind in args.kind.split(","):
        rep = complexity(kind.strip(), args.h, args.w, args.c, args.sw)
        rows.append(rep)
    print("kind\tH\tW\tC\tS_w\tformula_flops\tmeasured_macs")
    for rep in rows:
        print(f"{rep.kind}\t{rep.H}\t{rep.W}\t{rep.C}\t{rep.S_w}"
              f"\t{rep.formula_flops}\t{rep.measured_macs}")
    return 0


def cmd_gen_data(args) -> int:
    scenes = data.generate(args.seed, args.count, H=args.height, W=args.width,
                           num_obj_classes=args.objects, num_int_classes=args.interactions)
    meta = {"seed": args.seed, "count": args.count,
            "image_h": args.height, "image_w": args.width,
            "num_object_classes": args.objects,
            "num_interaction_classes": args.interactions,
            "class_counts": {f"{k[0]}x{k[1]}": v
                             for k, v in sorted(class_counts(scenes).items())}}
    data.save_dataset(scenes, args.out, meta)
    n_inst = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({n_inst} instances) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iwin")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on generated synthetic scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", choices=["default", "known"], default="default")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-windows", help="trace sampling ancestry of final tokens")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="tensor container with an 'image' record")
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--ppm", default=None, help="optional raster with points burned in")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("complexity", help="formula vs. measured attention MACs")
    p.add_argument("--kind", required=True, help="g, w, or comma-separated list")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--sw", type=int, default=0)
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--interactions", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
