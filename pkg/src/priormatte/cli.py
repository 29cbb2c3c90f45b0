"""Command-line surface: train / eval / infer / dump-attn / count-params /
selfcheck."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, load_config
from .diagnostics import dump_attention
from .metrics import MetricReport, compute_metrics
from .model import MattingModel, count_params
from .tensor import load_checkpoint
from .training import make_sample, train
from .trimap import (AlphaMatte, read_alpha, read_image, read_trimap,
                     write_alpha)


def _load_cfg(args):
    if args.config:
        return load_config(args.config)
    return ModelConfig(), TrainConfig()


def _build_model(model_cfg, checkpoint=None, seed=0):
    model = MattingModel(model_cfg, seed=seed)
    if checkpoint:
        model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _cmd_train(args):
    model_cfg, train_cfg = _load_cfg(args)
    if args.seed is not None:
        train_cfg.seed = args.seed
    model = _build_model(model_cfg, seed=train_cfg.seed)
    train(model, train_cfg, args.out, steps=args.steps)
    print(f"training finished; artifacts in {args.out}")
    return 0


def _eval_samples(args, train_cfg):
    if args.synthetic:
        for i in range(args.samples):
            sample = make_sample(train_cfg, train_cfg.seed * 7919 + i)
            yield (f"synthetic-{i}", sample.composite, sample.trimap,
                   AlphaMatte(sample.alpha))
    else:
        root = Path(args.data)
        for image_path in sorted(root.glob("*_image.png")):
            stem = image_path.name[:-len("_image.png")]
            yield (stem,
                   read_image(image_path).planes,
                   read_trimap(root / f"{stem}_trimap.png"),
                   read_alpha(root / f"{stem}_alpha.png"))


def _cmd_eval(args):
    model_cfg, train_cfg = _load_cfg(args)
    if args.seed is not None:
        train_cfg.seed = args.seed
    model = _build_model(model_cfg, checkpoint=args.checkpoint)
    rows = []
    for name, planes, trimap, gt in _eval_samples(args, train_cfg):
        pred = model.infer(planes, trimap)
        rows.append((name, compute_metrics(pred, gt, trimap)))
    if not rows:
        print("no evaluation samples found", file=sys.stderr)
        return 1
    mean = MetricReport(*[float(np.mean([r.as_row()[i] for _, r in rows]))
                          for i in range(4)])
    out = args.out or "metrics.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "sad", "mse", "grad", "conn"])
        for name, rep in rows:
            writer.writerow([name] + rep.as_row())
        writer.writerow(["mean"] + mean.as_row())
    print(f"SAD={mean.sad:.4f} MSE={mean.mse:.4f} "
          f"Grad={mean.grad:.4f} Conn={mean.conn:.4f} -> {out}")
    return 0


def _cmd_infer(args):
    model_cfg, _ = _load_cfg(args)
    model = _build_model(model_cfg, checkpoint=args.checkpoint)
    image = read_image(args.image)
    trimap = read_trimap(args.trimap)
    alpha = model.infer(image.planes, trimap, clamp=not args.no_clamp)
    write_alpha(alpha, args.out)
    print(f"alpha written to {args.out}")
    return 0


def _cmd_dump_attn(args):
    model_cfg, train_cfg = _load_cfg(args)
    if args.seed is not None:
        train_cfg.seed = args.seed
    model = _build_model(model_cfg, checkpoint=args.checkpoint)
    sample = make_sample(train_cfg, train_cfg.seed)
    records = []
    model.forward(sample.composite, sample.trimap, capture=records)
    dump_attention(records, args.out)
    print(f"attention CSVs written to {args.out}")
    return 0


def _cmd_count_params(args):
    model_cfg, _ = _load_cfg(args)
    model = MattingModel(model_cfg)
    total, breakdown = count_params(model)
    for name, n in sorted(breakdown.items()):
        print(f"{name}: {n}")
    print(total)
    return 0


def _cmd_selfcheck(args):
    from .selfcheck import run_selfcheck
    return 0 if run_selfcheck() else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="priormatte",
        description="Trimap-prior windowed-attention matting, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic composites")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="compute matting metrics")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dir of *_image/_trimap/_alpha.png")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="predict an alpha matte")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-clamp", action="store_true")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("dump-attn", help="write attention diagnostics CSVs")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/attn")
    p.set_defaults(fn=_cmd_dump_attn)

    p = sub.add_parser("count-params", help="count learnable scalars")
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_count_params)

    p = sub.add_parser("selfcheck", help="run built-in oracle checks")
    p.set_defaults(fn=_cmd_selfcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
