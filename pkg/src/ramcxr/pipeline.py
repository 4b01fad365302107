"""Glue shared by the command line, the experiment scripts and the acceptance tests.

Every random choice in a run comes from one child of the master seed, so a
run is reproducible from its configuration alone. Child streams 0 and 1 are
taken by the trainer (minibatch sampling, validation).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import PretrainConfig, RunConfig
from .core import RAM
from .encoder import check_window, reconstruction_mse, sample_patches, train_layer
from .synthcxr import LabeledImage, generate, stack_images
from .tensor import Tensor
from .trainer import ChunkResult, random_policy_ablation, run_training, validate

SPLIT, INIT, PATCHES, PRETRAIN, HELD_OUT, ABLATION = range(2, 8)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(which + 1)[which])


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; both index arrays are sorted."""
    order = stream(seed, SPLIT).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def meta_array(data: list[LabeledImage]) -> np.ndarray:
    """[N, 2] target centers (x=col, y=row), NaN where there is none."""
    out = np.full((len(data), 2), np.nan)
    for i, d in enumerate(data):
        if d.meta is not None:
            out[i] = d.meta
    return out


@dataclass
class Arrays:
    images: np.ndarray  # [N, S, S]
    labels: np.ndarray
    meta: np.ndarray

    def take(self, idx) -> "Arrays":
        return Arrays(self.images[idx], self.labels[idx], self.meta[idx])

    def __len__(self) -> int:
        return len(self.labels)


def to_arrays(data: list[LabeledImage], side: int | None = None) -> Arrays:
    images, labels = stack_images(data)
    if not data:
        images = np.zeros((0, side or 0, side or 0))
    return Arrays(images, labels, meta_array(data))


def build_model(cfg: RunConfig) -> RAM:
    return RAM(cfg.model, stream(cfg.seed, INIT))


@dataclass
class PretrainReport:
    initial: list[float]  # held-out MSE per layer before training
    final: list[float]  # held-out MSE per layer after training
    curves: list[list[float]]


def _layer_inputs(model: RAM, patches: np.ndarray) -> list[np.ndarray]:
    """Input of every stacked layer for the given first-layer patches."""
    out = [patches]
    for layer in model.stack.layers[:-1]:
        out.append(layer.encode(Tensor(out[-1])).data)
    return out


def held_out_mse(model: RAM, patches: np.ndarray) -> list[float]:
    """Per-layer reconstruction MSE, each layer fed by the codes of the one below."""
    inputs = _layer_inputs(model, patches)
    return [reconstruction_mse(layer, x) for layer, x in zip(model.stack.layers, inputs)]


def pretrain(model: RAM, images: np.ndarray, pcfg: PretrainConfig, seed: int) -> PretrainReport:
    """Layer-wise autoencoder training on random-location glimpse patches.

    Held-out patches come from their own stream. A layer's initial MSE is
    measured just before that layer trains, so layer 2 is scored on codes of
    the already trained layer 1.
    """
    gcfg = model.cfg.glimpse
    inputs = sample_patches(images, pcfg.patches, gcfg, stream(seed, PATCHES))
    held = sample_patches(images, max(pcfg.patches // 4, 1), gcfg, stream(seed, HELD_OUT))
    rng = stream(seed, PRETRAIN)
    report = PretrainReport([], [], [])
    for layer in model.stack.layers:
        report.initial.append(reconstruction_mse(layer, held))
        curve = train_layer(layer, inputs, pcfg.epochs, pcfg.lr, pcfg.momentum, pcfg.batch_size, rng)
        check_window(curve)
        report.curves.append(curve)
        report.final.append(reconstruction_mse(layer, held))
        inputs = layer.encode(Tensor(inputs)).data
        held = layer.encode(Tensor(held)).data
    return report


# ------------------------------------------------------------ experiments


@dataclass
class ExperimentResult:
    policy: str
    test_accuracy: float
    cpu_seconds: float
    chunks: list[ChunkResult] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    pretrain: PretrainReport | None = None
    n_val: int = 0
    model: RAM | None = None


def run_experiment(cfg: RunConfig, n_train: int, n_val: int, n_test: int, use_pretraining: bool = True,
                   on_chunk=None) -> ExperimentResult:
    """Generate a synthetic task, pretrain, train with chunked validation and score a held-out test set.

    The data and the initial weights depend only on cfg.seed, so two runs that
    differ only in cfg.train.policy see the same images, start from the same
    model and get the same number of updates. The test score is a greedy
    rollout with the policy the model was trained under (uniform locations
    for policy = random).
    """
    start = time.process_time()
    data = generate(cfg.synth, n_train + n_val + n_test, cfg.seed)
    arrays = to_arrays(data, cfg.model.image_side)
    train = arrays.take(np.arange(n_train))
    val = arrays.take(np.arange(n_train, n_train + n_val))
    test = arrays.take(np.arange(n_train + n_val, len(arrays)))
    model = build_model(cfg)
    report = pretrain(model, train.images, cfg.pretrain, cfg.seed) if use_pretraining else None
    result = run_training(model, (train.images, train.labels), (val.images, val.labels, val.meta), cfg.train,
                          on_chunk=on_chunk)
    n = cfg.model.n_glimpses
    if cfg.train.policy == "random":
        acc = random_policy_ablation(model, test.images, test.labels, n, stream(cfg.seed, ABLATION), cfg.train.threads)
    else:
        acc = validate(model, test.images, test.labels, n, "greedy", threads=cfg.train.threads).accuracy
    return ExperimentResult(cfg.train.policy, acc, time.process_time() - start, result.chunks, result.epochs, report,
                            n_val, model)
