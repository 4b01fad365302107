"""``ramcxr`` command line: gen-data, pretrain, train, eval, trace.

Exit codes: 0 success, 2 configuration error, 3 I/O or dataset error,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .config import RunConfig, replace
from .core import RAM, rollout
from .glimpse import anchor_pixels
from .encoder import sample_patches
from .pipeline import ABLATION, HELD_OUT, build_model, held_out_mse, pretrain, split_indices, stream, to_arrays
from .synthcxr import (DatasetConsistencyError, DatasetFormatError, dataset_load, dataset_save, generate,
                       read_pgm, write_pgm)
from .tensor import ConfigError
from .trainer import metrics_line, random_policy_ablation, run_training, validate, write_heatmap

log = logging.getLogger("ramcxr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CKPT = 0, 2, 3, 4


# ----------------------------------------------------------------- helpers


def _config(args, from_ckpt: ckpt_io.Checkpoint | None = None) -> RunConfig:
    """--config file, else the checkpoint's own config, else defaults; then flag overrides."""
    if args.config:
        cfg = RunConfig.load(args.config)
    elif from_ckpt is not None:
        cfg = RunConfig.parse(from_ckpt.config_text)
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return replace(cfg, **overrides) if overrides else cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name} is required for this command")


def _model_from(ckpt: ckpt_io.Checkpoint, cfg: RunConfig) -> RAM:
    model = RAM(cfg.model)
    ckpt_io.restore_into(model, ckpt)
    return model


def _load_data(path, cfg: RunConfig):
    return to_arrays(dataset_load(path), cfg.model.image_side)


def _check_side(arrays, cfg: RunConfig):
    if len(arrays) and arrays.images.shape[-1] != cfg.model.image_side:
        raise ConfigError(f"dataset images are {arrays.images.shape[-1]} px, config expects "
                          f"image_side = {cfg.model.image_side}")


def _stem(out: Path) -> Path:
    return out.with_suffix("") if out.suffix else out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    _require(args, "out")
    cfg = _config(args)
    data = generate(cfg.synth, args.count, cfg.seed)
    dataset_save(data, args.out)
    pos = sum(d.label for d in data)
    frac = pos / len(data) if data else 0.0
    print(f"wrote {len(data)} images to {args.out}: {pos} positive ({frac:.1%}), {len(data) - pos} negative")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _require(args, "data", "out")
    init = ckpt_io.load(args.ckpt) if args.ckpt else None
    cfg = _config(args, init)
    if args.epochs is not None:
        cfg = replace(cfg, pretrain_epochs=args.epochs)
    data = _load_data(args.data, cfg)
    _check_side(data, cfg)
    model = _model_from(init, cfg) if init else build_model(cfg)
    report = pretrain(model, data.images, cfg.pretrain, cfg.seed)
    for i, (a, b) in enumerate(zip(report.initial, report.final), start=1):
        print(f"layer {i}: held-out MSE initial {a:.6g} final {b:.6g}")
    ckpt_io.save(args.out, ckpt_io.from_model(model, cfg.to_text(), cfg.seed, init.epoch if init else 0))
    return EXIT_OK


def pretrain_mse(model: RAM, images: np.ndarray, cfg: RunConfig) -> list[float]:
    """Held-out MSE of a stored model on the same patches the pretrain command scores."""
    held = sample_patches(images, max(cfg.pretrain.patches // 4, 1), model.cfg.glimpse, stream(cfg.seed, HELD_OUT))
    return held_out_mse(model, held)


def cmd_train(args) -> int:
    _require(args, "out")
    init = ckpt_io.load(args.ckpt) if args.ckpt else None
    cfg = _config(args, init)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg.train.epochs == 0:
        if args.ckpt:
            shutil.copyfile(args.ckpt, out)
        else:
            ckpt_io.save(out, ckpt_io.from_model(build_model(cfg), cfg.to_text(), cfg.seed, 0))
        print(f"0 epochs: wrote {out} unchanged")
        return EXIT_OK
    _require(args, "data")
    data = _load_data(args.data, cfg)
    _check_side(data, cfg)
    tr_idx, va_idx = split_indices(len(data), cfg.val_fraction, cfg.seed)
    train, val = data.take(tr_idx), data.take(va_idx)
    if len(train) == 0:
        raise DatasetConsistencyError("training split is empty")
    if len(val) == 0:
        val = train
    model = _model_from(init, cfg) if init else build_model(cfg)
    start_epoch = init.epoch if init else 0
    stem = _stem(out)
    metrics_path = stem.parent / f"{stem.name}.metrics.jsonl"
    text = cfg.to_text()
    with open(metrics_path, "w") as metrics:
        def on_epoch(rec):
            metrics.write(metrics_line({"kind": "epoch", **rec}) + "\n")

        def on_chunk(chunk, trainer):
            tag = f"{stem.name}.chunk{chunk.chunk:03d}"
            write_heatmap(chunk.histogram, stem.parent / f"{tag}.heatmap")
            ckpt_io.save(stem.parent / f"{tag}.ckpt",
                         ckpt_io.from_model(model, text, cfg.seed, start_epoch + trainer.epoch))
            rec = {"kind": "chunk", "chunk": chunk.chunk, "epoch": chunk.epoch, "val_accuracy": chunk.accuracy,
                   "visits": int(chunk.histogram.sum())}
            if chunk.target_distance is not None:
                rec["target_distance"] = chunk.target_distance
            metrics.write(metrics_line(rec) + "\n")
            metrics.flush()

        result = run_training(model, (train.images, train.labels), (val.images, val.labels, val.meta), cfg.train,
                              on_epoch=on_epoch, on_chunk=on_chunk)
    ckpt_io.save(out, ckpt_io.from_model(model, text, cfg.seed, start_epoch + cfg.train.epochs))
    last = result.chunks[-1]
    print(f"trained {cfg.train.epochs} epochs; final validation accuracy {last.accuracy:.4f}; "
          f"metrics in {metrics_path}")
    return EXIT_OK


def evaluate(model: RAM, cfg: RunConfig, images, labels, ablation: bool = False) -> dict:
    """Greedy accuracy and, optionally, the uniform-random-policy accuracy and gap."""
    n = cfg.model.n_glimpses
    v = validate(model, images, labels, n, "greedy", 1, cfg.train.heatmap_cell, threads=cfg.train.threads)
    report = {"n": int(len(labels)), "accuracy": v.accuracy}
    if ablation:
        rand = random_policy_ablation(model, images, labels, n, stream(cfg.seed, ABLATION), cfg.train.threads)
        report["random_policy_accuracy"] = rand
        report["gap"] = v.accuracy - rand
    return report


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data")
    ck = ckpt_io.load(args.ckpt)
    cfg = _config(args, ck)
    model = _model_from(ck, cfg)
    data = _load_data(args.data, cfg)
    _check_side(data, cfg)
    report = evaluate(model, cfg, data.images, data.labels, args.ablation)
    print(f"accuracy {report['accuracy']:.4f} on {report['n']} images")
    if args.ablation:
        print(f"random-policy accuracy {report['random_policy_accuracy']:.4f}")
        print(f"gap {report['gap']:+.4f}")
    return EXIT_OK


def trace_records(model: RAM, image: np.ndarray, n_glimpses: int) -> list[dict]:
    """One record per greedy glimpse step, then a summary record with the prediction."""
    tr = rollout(model, image, n_glimpses, mode="greedy")
    side = image.shape[-1]
    locs = np.array([l.as_array() for l in tr.locations])
    pix = anchor_pixels(locs, side)
    recs = []
    for t, (loc, mean, lp) in enumerate(zip(tr.locations, tr.means, tr.log_densities), start=1):
        recs.append({"t": t, "x": loc.x, "y": loc.y, "row": int(pix[t - 1, 0]), "col": int(pix[t - 1, 1]),
                     "o": None if mean is None else list(mean), "log_density": lp})
    recs.append({"predicted": tr.predicted, "logits": tr.logits})
    return recs


def render_path(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Copy of the image with the glimpse path drawn bright.

    The first center gets a ring, the last a triangle, and the centers are
    joined by straight segments.
    """
    img = np.array(image, dtype=np.float64).reshape(image.shape[-2:])
    side = img.shape[0]

    def put(r, c, v=1.0):
        if 0 <= r < side and 0 <= c < side:
            img[r, c] = v

    for (r0, c0), (r1, c1) in zip(pixels[:-1], pixels[1:]):
        steps = int(max(abs(r1 - r0), abs(c1 - c0), 1))
        for k in range(steps + 1):
            put(int(round(r0 + (r1 - r0) * k / steps)), int(round(c0 + (c1 - c0) * k / steps)), 0.8)
    r, c = pixels[0]
    for dr, dc in [(-2, -1), (-2, 0), (-2, 1), (2, -1), (2, 0), (2, 1), (-1, -2), (0, -2), (1, -2), (-1, 2), (0, 2),
                   (1, 2)]:
        put(r + dr, c + dc)
    r, c = pixels[-1]
    for dr in range(-2, 3):
        for dc in range(-(dr + 2) // 2, (dr + 2) // 2 + 1):
            put(r + dr, c + dc)
    return img[None]


def cmd_trace(args) -> int:
    _require(args, "ckpt", "image", "out")
    ck = ckpt_io.load(args.ckpt)
    cfg = _config(args, ck)
    model = _model_from(ck, cfg)
    image = read_pgm(args.image)
    if image.shape[-1] != cfg.model.image_side or image.shape[-2] != cfg.model.image_side:
        raise ConfigError(f"image is {image.shape[-2]}x{image.shape[-1]}, model expects side "
                          f"{cfg.model.image_side}")
    recs = trace_records(model, image, cfg.model.n_glimpses)
    with open(args.out, "w") as fh:
        for rec in recs:
            fh.write(json.dumps(rec) + "\n")
    if args.render:
        pix = np.array([[r["row"], r["col"]] for r in recs[:-1]])
        write_pgm(args.render, render_path(image, pix))
    print(f"predicted class {recs[-1]['predicted']}; {len(recs) - 1} steps written to {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    """Print the effective configuration (defaults when no file is given)."""
    sys.stdout.write(_config(args).to_text())
    return EXIT_OK


COMMANDS = {"config": cmd_config, "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "trace": cmd_trace}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramcxr", description="Recurrent attention model on synthetic radiographs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="worker threads for validation rollouts")
        if name != "config":
            p.add_argument("--out", help="output directory, checkpoint or trace file")
        if name not in ("gen-data", "config"):
            p.add_argument("--ckpt", help="input checkpoint")
        if name in ("pretrain", "train", "eval"):
            p.add_argument("--data", help="dataset directory")
        if name in ("pretrain", "train"):
            p.add_argument("--epochs", type=int, help="override the configured epoch count")
    sub.choices["gen-data"].add_argument("--count", type=int, default=1000, help="number of images")
    sub.choices["eval"].add_argument("--ablation", action="store_true",
                                     help="also report the uniform-random-policy accuracy")
    sub.choices["trace"].add_argument("--image", help="input graymap (P5) image")
    sub.choices["trace"].add_argument("--render", help="write the image with the glimpse path drawn on it")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, DatasetConsistencyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
