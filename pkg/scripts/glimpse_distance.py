"""Per-step distance from glimpse centers to the implant, tracked over training.

Trains the device task like scripts/run_task.py and, after every chunk,
prints the mean pixel distance between each glimpse step's center and the
implant center over the validation positives (greedy rollouts). The last
column is the distance that the attention-concentration criterion tracks.

    python3 scripts/glimpse_distance.py --epochs 30
"""

import argparse

import numpy as np

from ramcxr.config import RunConfig, replace
from ramcxr.core import run_episodes
from ramcxr.glimpse import anchor_pixels
from ramcxr.pipeline import run_experiment, to_arrays
from ramcxr.synthcxr import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--val", type=int, default=500)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = replace(RunConfig(), task="device", epochs=args.epochs, seed=args.seed,
                  **dict(kv.split("=", 1) for kv in args.set))
    # the same images run_experiment will use for validation
    data = to_arrays(generate(cfg.synth, args.train + args.val + 1, cfg.seed), cfg.model.image_side)
    val = data.take(np.arange(args.train, args.train + args.val))
    pos = ~np.isnan(val.meta[:, 0])
    images, target = val.images[pos], val.meta[pos][:, ::-1]  # (row, col)
    side = cfg.model.image_side

    def show(chunk, trainer):
        ep = run_episodes(trainer.model, images, cfg.model.n_glimpses, "greedy")
        pix = np.stack([anchor_pixels(l, side) for l in ep.locations], axis=1)  # [N, n, 2]
        dist = np.hypot(*(pix - target[:, None, :]).transpose(2, 0, 1)).mean(axis=0)
        steps = " ".join(f"{d:5.1f}" for d in dist)
        print(f"epoch {chunk.epoch:4d}  val acc {chunk.accuracy:.3f}  distance per step {steps}", flush=True)

    run_experiment(cfg, args.train, args.val, 1, on_chunk=show)


if __name__ == "__main__":
    main()
