"""Train one synthetic task end to end and print the per-chunk table.

    python3 scripts/run_task.py --task device --epochs 30
    python3 scripts/run_task.py --task cardio --policy random --set lr=0.03

--set takes any configuration key (see `ramcxr config`); it may repeat.
"""

import argparse
import json

from ramcxr.config import RunConfig, replace
from ramcxr.pipeline import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--task", choices=["cardio", "device"], default="cardio")
    ap.add_argument("--policy", choices=["learned", "random"], default="learned")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--val", type=int, default=500)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="base configuration file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--no-pretrain", action="store_true")
    ap.add_argument("--json", help="also write the summary here")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = dict(task=args.task, policy=args.policy, epochs=args.epochs, seed=args.seed)
    overrides.update(kv.split("=", 1) for kv in args.set)
    cfg = replace(cfg, **{k.strip(): v.strip() if isinstance(v, str) else v for k, v in overrides.items()})

    def show(chunk, trainer):
        dist = "" if chunk.target_distance is None else f"  final-glimpse distance {chunk.target_distance:6.2f} px"
        print(f"chunk {chunk.chunk:3d}  epoch {chunk.epoch:4d}  val acc {chunk.accuracy:.4f}{dist}", flush=True)

    res = run_experiment(cfg, args.train, args.val, args.test, not args.no_pretrain, on_chunk=show)
    if res.pretrain:
        for i, (a, b) in enumerate(zip(res.pretrain.initial, res.pretrain.final), start=1):
            print(f"pretrain layer {i}: held-out MSE {a:.5f} -> {b:.5f}")
    print(f"{args.task} / {args.policy}: test accuracy {res.test_accuracy:.4f} in {res.cpu_seconds / 60:.1f} CPU min")
    if args.json:
        summary = {"task": args.task, "policy": args.policy, "test_accuracy": res.test_accuracy,
                   "cpu_seconds": res.cpu_seconds,
                   "chunks": [{"epoch": c.epoch, "val_accuracy": c.accuracy, "target_distance": c.target_distance}
                              for c in res.chunks]}
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=1)


if __name__ == "__main__":
    main()
