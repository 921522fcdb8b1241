"""Training loop, evaluation protocol and attention dumps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import Checkpoint, model_tensors, restore_model, save_checkpoint
from .config import ConfigError, RunConfig
from .decoder import GENERATION
from .model import TGQN, OrderedContext, distance_order
from .objectives import MetricsReport, lr_schedule, pixel_l1, pixel_l2, sigma_schedule, ssim
from .scene_forge import Shard, read_shard

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class UnsupportedVariant(ValueError):
    pass


def _seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def to_frames(images: np.ndarray) -> torch.Tensor:
    """uint8 ``[..., H, W, 3]`` -> float ``[..., 3, H, W]`` in ``[0, 1]``."""
    t = torch.from_numpy(np.ascontiguousarray(images)).float() / 255.0
    return t.movedim(-1, -3)


def make_context(shard: Shard, scene_idx, context_idx, query_idx, ordered: bool) -> OrderedContext:
    """Gather a batch: ``context_idx`` is ``[B, N]`` view indices, ``query_idx`` ``[B]``.

    With ``ordered`` the contexts are sorted by distance to the query.
    """
    scene_idx = np.asarray(scene_idx)
    context_idx = np.array(context_idx)
    query_idx = np.asarray(query_idx)
    if context_idx.shape[1] < 1:
        raise ValueError("at least one context view is required")
    if ordered:
        for b in range(len(scene_idx)):
            poses = shard.poses[scene_idx[b], context_idx[b], :3]
            q = shard.poses[scene_idx[b], query_idx[b], :3]
            context_idx[b] = context_idx[b][distance_order(poses, q)]
    s = scene_idx[:, None]
    return OrderedContext(
        to_frames(shard.images[s, context_idx]),
        torch.from_numpy(shard.poses[s, context_idx].astype(np.float32)),
        torch.from_numpy(shard.poses[scene_idx, query_idx].astype(np.float32)),
        to_frames(shard.images[scene_idx, query_idx]),
    )


def sample_batch(shard: Shard, scenes: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> OrderedContext:
    v = shard.poses.shape[1]
    if v < cfg.n_views + 1:
        raise ConfigError(f"episodes have {v} views, need at least n_views + 1 = {cfg.n_views + 1}")
    scene_idx = rng.choice(scenes, size=cfg.batch_size)
    picks = np.stack([rng.permutation(v)[: cfg.n_views + 1] for _ in range(cfg.batch_size)])
    return make_context(shard, scene_idx, picks[:, 1:], picks[:, 0], cfg.train_ordered)


def split_scenes(num_scenes: int, holdout_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split: the last scenes are held out."""
    n_hold = int(round(num_scenes * holdout_frac))
    if num_scenes - n_hold < 1:
        n_hold = 0
    idx = np.arange(num_scenes)
    return idx[: num_scenes - n_hold], idx[num_scenes - n_hold :]


@dataclass
class Datasets:
    train: Shard
    train_scenes: np.ndarray
    eval: Shard
    eval_scenes: np.ndarray


def load_datasets(cfg: RunConfig, train: Shard | None = None, held_out: Shard | None = None) -> Datasets:
    train = train if train is not None else read_shard(cfg.train_path)
    if train.image_size != cfg.image_size:
        raise ConfigError(f"dataset image_size {train.image_size} != config image_size {cfg.image_size}")
    if held_out is None and cfg.eval_path:
        held_out = read_shard(cfg.eval_path)
    if held_out is not None:
        tr = np.arange(train.num_scenes)
        ev = np.arange(held_out.num_scenes)
        data = Datasets(train, tr, held_out, ev)
    else:
        tr, ev = split_scenes(train.num_scenes, cfg.holdout_frac)
        data = Datasets(train, tr, train, ev)
    if cfg.max_train_scenes:
        data.train_scenes = data.train_scenes[: cfg.max_train_scenes]
    return data


def _dump_batch(out_dir: Path, step: int, ctx: OrderedContext) -> Path:
    path = out_dir / f"nonfinite_batch_step{step}.npz"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(path, frames=ctx.frames.numpy(), poses=ctx.poses.numpy(),
             query_pose=ctx.query_pose.numpy(), query_frame=ctx.query_frame.numpy())
    return path


def train(cfg: RunConfig, data: Datasets, out_dir=None, progress=None,
          stop_after: int | None = None) -> tuple[Checkpoint, list]:
    """Optimize a fresh model; returns the final checkpoint and the log rows.

    ``stop_after`` ends the run early while keeping the learning-rate and
    sigma schedules of the full ``max_steps`` run.
    """
    cfg.validate()
    last = cfg.max_steps if stop_after is None else min(stop_after, cfg.max_steps)
    torch.manual_seed(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    model = TGQN.from_run_config(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    history, rows = [], []
    sigma = cfg.sigma_start
    for step in range(last + 1):
        sigma = sigma_schedule(step, cfg.max_steps, cfg.sigma_start, cfg.sigma_end, cfg.sigma_anneal_frac)
        if cfg.eval_every and step % cfg.eval_every == 0 and step > 0:
            rep = evaluate_model(model, data.eval, data.eval_scenes[: cfg.eval_scenes], cfg, repeats=1)
            history.append({"step": step, **rep.__dict__})
            log.info("step %d held-out L1 %.3f", step, rep.l1_mean)
        if step == last:
            break
        lr = lr_schedule(step, cfg.max_steps, cfg.lr_start, cfg.lr_end)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(_seed(cfg.seed, step, 1))
        ctx = sample_batch(data.train, data.train_scenes, cfg, rng)
        gen = torch.Generator().manual_seed(_seed(cfg.seed, step, 2))
        breakdown, _ = model.loss(ctx, cfg.beta, sigma, gen)
        total = breakdown.total
        if not torch.isfinite(total):
            where = _dump_batch(out_dir or Path("."), step, ctx)
            raise TrainingDiverged(f"non-finite loss {float(total.detach())} at step {step}; batch dumped to {where}")
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == last - 1:
            row = {"step": step, "loss": float(total.detach()), "recon": breakdown.recon,
                   "kl": breakdown.kl, "sigma": sigma, "lr": lr}
            rows.append(row)
            if progress:
                progress(row)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(_checkpoint(model, cfg, step + 1, sigma, history), out_dir / "checkpoint.tgqc")
    ckpt = _checkpoint(model, cfg, last, sigma, history)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.tgqc")
        write_log(rows, out_dir / "train_log.csv")
    return ckpt, rows


def _checkpoint(model, cfg, step, sigma, history) -> Checkpoint:
    return Checkpoint(cfg.to_dict(), step, float(sigma), list(history), model_tensors(model))


def write_log(rows: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "recon", "kl", "sigma", "lr"])
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in ("loss", "recon", "kl", "sigma", "lr")])


# --------------------------------------------------------------------------
# evaluation


def eval_splits(shard: Shard, scene: int, repeat: int, seed: int, n_context: int = 3):
    """Random context views (in random order) and the remaining views as targets."""
    v = shard.poses.shape[1]
    rng = np.random.default_rng(_seed(seed, scene, repeat, 3))
    perm = rng.permutation(v)
    return perm[:n_context], np.sort(perm[n_context:])


def evaluate_predictions(predict, shard: Shard, scenes, repeats: int, seed: int, n_context: int = 3,
                         ordered: bool = False) -> MetricsReport:
    """Generic harness: ``predict(ctx, scene, repeat)`` returns ``[B, 3, H, W]`` frames.

    Each scene contributes ``V - n_context`` target views per repeat.
    """
    l1, l2, ss = [], [], []
    for scene in scenes:
        for r in range(repeats):
            ctx_idx, targets = eval_splits(shard, int(scene), r, seed, n_context)
            b = len(targets)
            ctx = make_context(shard, np.full(b, scene), np.tile(ctx_idx, (b, 1)), targets, ordered)
            truth = ctx.query_frame
            ctx.query_frame = None
            pred = predict(ctx, int(scene), r)
            for p, t in zip(pred, truth):
                l1.append(pixel_l1(p, t))
                l2.append(pixel_l2(p, t))
                ss.append(ssim(p, t))
    return MetricsReport.from_values(l1, l2, ss)


def evaluate_model(model: TGQN, shard: Shard, scenes, cfg: RunConfig, repeats: int | None = None,
                   seed: int | None = None) -> MetricsReport:
    if shard.image_size != model.cfg.image_size:
        raise ConfigError(f"dataset image_size {shard.image_size} != model image_size {model.cfg.image_size}")
    seed = cfg.seed if seed is None else seed

    def predict(ctx, scene, repeat):
        gen = torch.Generator().manual_seed(_seed(seed, scene, repeat, 4))
        return model.predict(ctx.to(model.dtype), gen)

    was_training = model.training
    model.eval()
    try:
        return evaluate_predictions(predict, shard, scenes, cfg.eval_repeats if repeats is None else repeats,
                                    seed, cfg.n_views, cfg.eval_ordered)
    finally:
        model.train(was_training)


def _restore(ckpt: Checkpoint, masked: bool | None) -> TGQN:
    """Rebuild the model; ``masked`` overrides the training-time mask flag."""
    model = restore_model(ckpt)
    if masked is not None:
        model.masked = masked
    return model


def evaluate(ckpt: Checkpoint, shard: Shard, num_eval_scenes: int | None = None, seed: int | None = None,
             repeats: int | None = None, scenes=None, masked: bool | None = None) -> MetricsReport:
    cfg = ckpt.run_config
    if shard.image_size != cfg.image_size:
        raise ConfigError(f"dataset image_size {shard.image_size} != checkpoint image_size {cfg.image_size}")
    model = _restore(ckpt, masked)
    if scenes is None:
        scenes = np.arange(shard.num_scenes)
    if num_eval_scenes is not None:
        scenes = scenes[:num_eval_scenes]
    return evaluate_model(model, shard, scenes, cfg, repeats, seed)


def write_metrics_csv(rows: list[tuple[str, int, MetricsReport]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MetricsReport.CSV_HEADER] + [rep.csv_row(v, s) for v, s, rep in rows]
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# attention dumps and renders


def episode_context(shard: Shard, scene: int, context_views, query_view: int, ordered: bool = True) -> OrderedContext:
    context_views = np.asarray(context_views)[None]
    return make_context(shard, np.array([scene]), context_views, np.array([query_view]), ordered)


def _gray_png(matrix: np.ndarray, path: Path, cell: int = 16) -> None:
    img = np.round(np.clip(matrix, 0, 1) * 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path)


def dump_attention(ckpt: Checkpoint, ctx: OrderedContext, out_dir, masked: bool | None = None) -> list[Path]:
    """Write every layer/head score matrix as CSV plus grayscale PNGs.

    Row ``n`` of each matrix is the attention used at rendering step ``n``.
    """
    cfg = ckpt.run_config
    if cfg.variant != "tgqn":
        raise UnsupportedVariant(f"attention dumps need a tgqn checkpoint, got {cfg.variant!r}")
    model = _restore(ckpt, masked)
    with torch.no_grad():
        attended = model.attention(model.encode(ctx.to(model.dtype)), model.masked)
    scores = attended.scores[0].double().numpy()  # [L, H, N, N]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    n = scores.shape[-1]
    header = ["step"] + [f"view_{k + 1}" for k in range(n)]

    def write(matrix, path):
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for i, row in enumerate(matrix):
                w.writerow([i + 1] + [repr(float(x)) for x in row])
        written.append(path)

    for layer in range(scores.shape[0]):
        for head in range(scores.shape[1]):
            write(scores[layer, head], out_dir / f"scores_layer{layer + 1}_head{head + 1}.csv")
    mean = attended.mean_scores()[0].double().numpy()
    write(mean, out_dir / "scores_mean.csv")
    _gray_png(mean, out_dir / "scores_mean.png")
    written.append(out_dir / "scores_mean.png")
    for i in range(n):
        _gray_png(mean[i : i + 1], out_dir / f"step{i + 1}.png")
        written.append(out_dir / f"step{i + 1}.png")
    return written


def render_sequence(ckpt: Checkpoint, ctx: OrderedContext, seed: int = 0, masked: bool | None = None) -> np.ndarray:
    """Generation-mode frames for every rendering step, uint8 ``[N, H, W, 3]``."""
    model = _restore(ckpt, masked)
    with torch.no_grad():
        outs, _ = model.run(ctx.to(model.dtype), GENERATION, torch.Generator().manual_seed(seed))
    frames = torch.stack([o.predicted[0] for o in outs]).movedim(1, -1).double().numpy()
    return np.round(frames * 255).astype(np.uint8)
