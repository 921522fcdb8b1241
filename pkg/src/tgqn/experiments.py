"""Reusable experiment protocols: single-scene overfitting and variant comparisons."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import TGQN, count_parameters
from .checkpoint import restore_model
from .pipeline import Datasets, evaluate_model, load_datasets, train, write_metrics_csv
from .scene_forge import Shard, generate_dataset, read_shard

log = logging.getLogger(__name__)


@dataclass
class OverfitResult:
    seed: int
    l1: float
    loss_first: float
    loss_at_check: float
    rows: list = field(repr=False, default_factory=list)


def single_scene_data(cfg: RunConfig, shard: Shard) -> Datasets:
    data = load_datasets(cfg, train=shard, held_out=shard)
    data.train_scenes = data.eval_scenes = np.array([0])
    return data


def overfit(cfg: RunConfig, shard: Shard, check_step: int = 500, full: bool = True, repeats: int = 5,
            progress=None) -> OverfitResult:
    """Train on scene 0 only and score generation-mode predictions of its own views.

    Scoring uses the training-time context ordering. With ``full=False`` the
    run stops right after ``check_step`` and no L1 is computed.
    """
    data = single_scene_data(cfg, shard)
    if check_step % cfg.log_every:  # the check step must land on a logged row
        cfg = cfg.replace(log_every=check_step)
    ckpt, rows = train(cfg, data, progress=progress,
                       stop_after=None if full else check_step + 1)
    losses = {r["step"]: r["loss"] for r in rows}
    l1 = float("nan")
    if full:
        model = restore_model(ckpt)
        l1 = evaluate_model(model, shard, [0], cfg.replace(eval_ordered=cfg.train_ordered), repeats).l1_mean
    return OverfitResult(cfg.seed, l1, losses[0], losses[check_step], rows)


def matched_tower_channels(cfg: RunConfig, target: int, search=range(16, 513)) -> int:
    """Tower width that brings ``cfg``'s parameter count closest to ``target``."""

    def count(c):
        return count_parameters(TGQN.from_run_config(cfg.replace(tower_channels=c)))

    lo, hi = search.start, search.stop - 1
    while lo < hi:  # the count grows with width, so bisect on it
        mid = (lo + hi) // 2
        if count(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    return min((c for c in (lo - 1, lo) if c >= search.start), key=lambda c: abs(count(c) - target))


def matched_configs(base: RunConfig, arms: dict[str, dict]) -> dict[str, RunConfig]:
    """Per-arm configs; non-attention arms get a wider tower to match the tgqn parameter count."""
    cfgs = {name: base.replace(**changes) for name, changes in arms.items()}
    reference = [c for c in cfgs.values() if c.variant == "tgqn"]
    if reference:
        target = count_parameters(TGQN.from_run_config(reference[0]))
        for name, c in cfgs.items():
            if c.variant != "tgqn":
                cfgs[name] = c.replace(tower_channels=matched_tower_channels(c, target))
    return cfgs


def ensure_dataset(path, num_scenes: int, views: int, mode: str, seed: int, image_size: int) -> Shard:
    path = Path(path)
    if path.exists():
        shard = read_shard(path)
        if (shard.num_scenes, shard.poses.shape[1], shard.image_size) == (num_scenes, views, image_size):
            return shard
    return read_shard(generate_dataset(num_scenes, views, mode, seed, path, image_size=image_size))


def compare_arms(cfgs: dict[str, RunConfig], seeds, shard: Shard, out_dir, eval_scenes: int, repeats: int,
                 progress=None) -> dict[str, list[float]]:
    """Train every arm under every seed; returns held-out L1 means per arm.

    Each (arm, seed) pair writes ``metrics.csv`` into its own directory.
    """
    out_dir = Path(out_dir)
    results = {name: [] for name in cfgs}
    for name, cfg in cfgs.items():
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            run_dir = out_dir / f"{name}_seed{seed}"
            data = load_datasets(run_cfg, train=shard)
            ckpt, _ = train(run_cfg, data, run_dir, progress)
            model = restore_model(ckpt)
            rep = evaluate_model(model, shard, data.eval_scenes[:eval_scenes], run_cfg, repeats)
            write_metrics_csv([(name, seed, rep)], run_dir / "metrics.csv")
            log.info("%s seed %d: held-out L1 %.3f", name, seed, rep.l1_mean)
            results[name].append(rep.l1_mean)
    return results


def medians(results: dict[str, list[float]]) -> dict[str, float]:
    return {k: float(np.median(v)) for k, v in results.items()}
