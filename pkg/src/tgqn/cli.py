"""Command-line entry point: ``tgqn {datagen,train,eval,render,attn}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import VARIANTS, ConfigError, RunConfig, dump_config, load_config
from .pipeline import (
    dump_attention,
    episode_context,
    evaluate,
    load_datasets,
    render_sequence,
    train,
    write_metrics_csv,
)
from .scene_forge import generate_dataset, read_shard


def _bool(text: str) -> bool:
    if text.lower() not in ("true", "false"):
        raise argparse.ArgumentTypeError("expected true or false")
    return text.lower() == "true"


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.masked is not None:
        changes["masked"] = args.masked
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.dataset is not None:
        changes["train_path"] = str(args.dataset)
    if args.steps is not None:
        changes["max_steps"] = args.steps
    return cfg.replace(**changes).validate()


def cmd_datagen(args) -> int:
    path = generate_dataset(args.num_scenes, args.views, args.camera_mode, args.seed or 0, args.out,
                            image_size=args.image_size)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.train_path:
        raise ConfigError("a dataset is required (--dataset or train_path)")
    out = Path(args.out or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    data = load_datasets(cfg)

    def progress(row):
        print(f"step {row['step']:>6}  loss {row['loss']:.2f}  recon {row['recon']:.2f}  "
              f"kl {row['kl']:.3f}  sigma {row['sigma']:.3f}", flush=True)

    train(cfg, data, out, progress)
    print(f"checkpoint written to {out / 'checkpoint.tgqc'}")
    return 0


def cmd_eval(args) -> int:
    expected = load_config(args.config) if args.config else None
    ckpt = load_checkpoint(args.checkpoint, expected)
    cfg = ckpt.run_config
    shard = read_shard(args.dataset or cfg.eval_path or cfg.train_path)
    scenes = None
    if not args.dataset and not cfg.eval_path:
        scenes = load_datasets(cfg, train=shard).eval_scenes
    report = evaluate(ckpt, shard, args.scenes, args.seed, args.repeats, scenes=scenes, masked=args.masked)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv([(cfg.variant, cfg.seed if args.seed is None else args.seed, report)], out / "metrics.csv")
        (out / "metrics.txt").write_text(report.to_text())
    return 0


def _episode(args, cfg):
    shard = read_shard(args.dataset or cfg.train_path)
    v = shard.poses.shape[1]
    n = cfg.n_views
    return episode_context(shard, args.scene, np.arange(n), min(n, v - 1), ordered=True)


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.run_config
    ctx = _episode(args, cfg)
    frames = render_sequence(ckpt, ctx, args.seed or 0, masked=args.masked)
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(f).save(out / f"step{i + 1}.png")
    truth = np.round(ctx.step_targets[0].movedim(1, -1).numpy() * 255).astype(np.uint8)
    Image.fromarray(np.concatenate([np.concatenate(list(frames), 1), np.concatenate(list(truth), 1)], 0)).save(
        out / "sequence_vs_truth.png")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.run_config
    files = dump_attention(ckpt, _episode(args, cfg), args.out or "attention", masked=args.masked)
    print(f"wrote {len(files)} files to {args.out or 'attention'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgqn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--masked", type=_bool)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", type=Path)
        sp.add_argument("--checkpoint", type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--steps", type=int)

    sp = sub.add_parser("datagen", help="render a dataset shard")
    common(sp)
    sp.add_argument("--num-scenes", type=int, default=100)
    sp.add_argument("--views", type=int, default=10)
    sp.add_argument("--camera-mode", choices=("ring", "free"), default="ring")
    sp.add_argument("--image-size", type=int, default=32)
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--scenes", type=int)
    sp.add_argument("--repeats", type=int)
    sp.set_defaults(func=cmd_eval)

    for name, func, helptext in (("render", cmd_render, "render a view sequence"),
                                 ("attn", cmd_attn, "dump attention scores")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--scene", type=int, default=0)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    if args.command != "datagen" and args.command != "train" and args.checkpoint is None:
        print(f"tgqn {args.command}: --checkpoint is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as e:
        print(f"tgqn {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
