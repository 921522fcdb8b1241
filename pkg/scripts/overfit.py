"""Single-scene overfit run: final L1 on the scene's own views plus the step-500 descent check."""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from tgqn.config import RunConfig, load_config
from tgqn.experiments import overfit
from tgqn.scene_forge import generate_dataset, read_shard


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, help="YAML run config (defaults: full desk-scale model)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--check-step", type=int, default=500)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    base = load_config(args.config) if args.config else RunConfig()
    cfg = base.replace(max_steps=args.steps, variant="tgqn", masked=True)
    shard = read_shard(generate_dataset(1, 10, "ring", 0, args.out / "one_scene.tgqn", image_size=cfg.image_size))
    results = []
    for i, seed in enumerate(args.seeds):
        start = time.time()

        def progress(row, seed=seed):
            print(f"seed {seed} step {row['step']:>5} loss {row['loss']:.1f} sigma {row['sigma']:.3f}", flush=True)

        r = overfit(cfg.replace(seed=seed, log_every=100), shard, args.check_step, full=(i == 0), progress=progress)
        results.append({"seed": seed, "l1": r.l1, "loss_step0": r.loss_first,
                        f"loss_step{args.check_step}": r.loss_at_check, "seconds": round(time.time() - start, 1)})
        print(json.dumps(results[-1]), flush=True)
    (args.out / "overfit_results.json").write_text(json.dumps(results, indent=2) + "\n")
    ok = results[0]["l1"] < 5.0 and all(r[f"loss_step{args.check_step}"] < r["loss_step0"] for r in results)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
