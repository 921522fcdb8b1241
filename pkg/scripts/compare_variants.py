"""Held-out L1 comparison of model variants (table) or KL weights (beta).

Full scale is 3500 ring scenes, 20k steps per run and 3 seeds per arm.
Every knob can be shrunk for a quick directional check.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from tgqn.config import RunConfig, load_config
from tgqn.experiments import compare_arms, ensure_dataset, matched_configs, medians
from tgqn.model import TGQN, count_parameters

ARMS = {
    "table": {"tgqn-mask": {"variant": "tgqn", "masked": True},
              "seqgqn": {"variant": "seqgqn"},
              "gqn": {"variant": "gqn"}},
    "beta": {"beta250": {"beta": 250.0}, "beta1": {"beta": 1.0}},
}
ORDER = {"table": ["tgqn-mask", "seqgqn", "gqn"], "beta": ["beta250", "beta1"]}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("experiment", choices=sorted(ARMS))
    p.add_argument("--config", type=Path, help="YAML base config (defaults: full desk-scale model)")
    p.add_argument("--scenes", type=int, default=3500)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--eval-scenes", type=int, default=350)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = (load_config(args.config) if args.config else RunConfig()).replace(max_steps=args.steps)
    out = args.out / args.experiment
    shard = ensure_dataset(args.out / f"ring{args.scenes}_{base.image_size}.tgqn", args.scenes, 10, "ring", 0,
                           base.image_size)
    cfgs = matched_configs(base, ARMS[args.experiment])
    counts = {k: count_parameters(TGQN.from_run_config(c)) for k, c in cfgs.items()}
    print(f"parameter counts: {counts}", flush=True)

    def progress(row):
        if row["step"] % 500 == 0:
            print(f"  step {row['step']:>6} loss {row['loss']:.1f}", flush=True)

    results = compare_arms(cfgs, args.seeds, shard, out, args.eval_scenes, args.repeats, progress)
    med = medians(results)
    order = ORDER[args.experiment]
    ok = all(med[a] < med[b] for a, b in zip(order, order[1:]))
    summary = {"experiment": args.experiment, "steps": args.steps, "scenes": args.scenes, "seeds": args.seeds,
               "parameters": counts, "l1": results, "median_l1": med, "ordering_holds": ok}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
