"""Hybrid supervised + REINFORCE training and the chunked validation/heatmap protocol."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .core import RAM, Episode, run_episodes
from .glimpse import anchor_pixels
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    locator_lr: float = 0.001
    baseline_lr: float = 0.002
    baseline_weight: float = 1.0
    clip_norm: float = 5.0
    n_glimpses: int = 6
    chunk: int = 5
    repeats: int = 100
    eval_mode: str = "greedy"
    heatmap_cell: int = 5
    seed: int = 0
    threads: int = 1
    # "random" trains the same model with uniform locations (the ablation control)
    policy: str = "learned"

    def __post_init__(self):
        for name in ("batch_size", "n_glimpses", "chunk", "repeats", "heatmap_cell", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if min(self.lr, self.locator_lr, self.baseline_lr) < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.policy not in ("learned", "random"):
            raise ConfigError(f"policy must be learned or random, got {self.policy!r}")
        if self.eval_mode not in ("greedy", "sample"):
            raise ConfigError(f"eval_mode must be greedy or sample, got {self.eval_mode!r}")


def reward(predicted, label):
    """Terminal 0/1 reward; works elementwise on arrays."""
    out = np.asarray(predicted) == np.asarray(label)
    return out.astype(np.float64) if out.ndim else int(out)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    policy: float
    baseline: float
    rewards: np.ndarray
    predicted: np.ndarray


def hybrid_loss(ep: Episode, labels, baseline_weight: float = 1.0, reinforce: bool = True) -> LossParts:
    """Batch mean of CE - sum_t adv_t * log pi(l_{t+1}) + lambda * sum_t (R - v_t)^2.

    adv_t = R - v_t is a constant here. The decision made from h_t (glimpse
    index t) produced location t+1, whose log-density is ep.log_probs[t+1].
    reinforce=False drops the policy term (locations not drawn from the locator).
    """
    if ep.logits is None or len(ep.baselines) != ep.n_glimpses:
        raise RuntimeError("episode is incomplete")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = labels.shape[0]
    predicted = ep.predicted
    r = reward(predicted, labels).reshape(b)
    ce = T.sum(T.softmax_cross_entropy(ep.logits, labels))
    terms = [ce]
    policy_val = 0.0
    for t in range(ep.n_glimpses - 1 if reinforce else 0):
        adv = r - ep.baselines[t].data
        term = T.dot(ep.log_probs[t + 1], Tensor(-adv))
        policy_val += term.item()
        terms.append(term)
    base_val = 0.0
    r_t = Tensor(r)
    for v in ep.baselines:
        diff = T.sub(r_t, v)
        term = T.scale(T.dot(diff, diff), baseline_weight)
        base_val += term.item()
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    total = T.scale(total, 1.0 / b)
    return LossParts(total, ce.item() / b, policy_val / b, base_val / b, r, predicted)


def _clip(params: list[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Trainer:
    """Holds the optimizers (and their momentum buffers) for one model."""

    def __init__(self, model: RAM, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        own = {id(p) for p in model.baseline.params() + model.locator.params()}
        self.main_params = [p for p in model.trainable_params() if id(p) not in own]
        self.groups = [
            T.SGDMomentum(self.main_params, cfg.lr, cfg.momentum),
            T.SGDMomentum(model.locator.params(), cfg.locator_lr, cfg.momentum),
            T.SGDMomentum(model.baseline.params(), cfg.baseline_lr, cfg.momentum),
        ]
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
        self.epoch = 0

    def step(self, images: np.ndarray, labels: np.ndarray) -> LossParts:
        ep = run_episodes(self.model, images, self.cfg.n_glimpses, mode="sample", rng=self.rng,
                          policy=self.cfg.policy)
        parts = hybrid_loss(ep, labels, self.cfg.baseline_weight, reinforce=self.cfg.policy == "learned")
        for opt in self.groups:
            opt.zero_grad()
        T.backward(parts.total)
        for opt in self.groups:
            _clip(opt.params, self.cfg.clip_norm)
            opt.step()
        return parts

    def train_epoch(self, images: np.ndarray, labels: np.ndarray) -> dict:
        n = len(labels)
        if n == 0:
            raise ValueError("empty training set")
        order = self.rng.permutation(n)
        sums = {"loss": 0.0, "hybrid": 0.0, "accuracy": 0.0, "reward": 0.0}
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start : start + self.cfg.batch_size]
            parts = self.step(images[idx], labels[idx])
            k = len(idx)
            sums["loss"] += parts.ce * k
            sums["hybrid"] += parts.total.item() * k
            sums["accuracy"] += float((parts.predicted == labels[idx]).sum())
            sums["reward"] += float(parts.rewards.sum())
        self.epoch += 1
        return {"epoch": self.epoch, **{k: v / n for k, v in sums.items()}}


def train_epoch(trainer: Trainer, images: np.ndarray, labels: np.ndarray) -> dict:
    return trainer.train_epoch(images, labels)


# ------------------------------------------------------------------ validation


@dataclass
class Validation:
    accuracy: float
    histogram: np.ndarray  # [cells, cells] int64 visit counts
    final_locations: np.ndarray  # [N, 2] last glimpse location per image (first repeat)
    predicted: np.ndarray


def heatmap_shape(side: int, cell: int) -> tuple[int, int]:
    n = -(-side // cell)
    return n, n


def _rollout_shard(model: RAM, images, n_glimpses, mode, rng, policy, batch):
    preds, finals, locs = [], [], []
    for start in range(0, len(images), batch):
        ep = run_episodes(model, images[start : start + batch], n_glimpses, mode=mode, rng=rng, policy=policy)
        preds.append(ep.predicted)
        finals.append(ep.locations[-1])
        locs.append(np.stack(ep.locations, axis=1))  # [b, n, 2]
    return np.concatenate(preds), np.concatenate(finals), np.concatenate(locs)


def _rollout_all(model, images, n_glimpses, mode, rng, policy="learned", threads=1, batch=256):
    """Roll out every image; shards run in parallel but merge in index order."""
    if threads <= 1 or len(images) < 2:
        return _rollout_shard(model, images, n_glimpses, mode, rng, policy, batch)
    bounds = np.linspace(0, len(images), threads + 1).astype(int)
    streams = rng.spawn(threads) if rng is not None else [None] * threads
    with ThreadPoolExecutor(threads) as pool:
        futures = [pool.submit(_rollout_shard, model, images[lo:hi], n_glimpses, mode, s, policy, batch)
                   for lo, hi, s in zip(bounds[:-1], bounds[1:], streams) if hi > lo]
        results = [f.result() for f in futures]
    return tuple(np.concatenate(parts) for parts in zip(*results))


def validate(model: RAM, images: np.ndarray, labels: np.ndarray, n_glimpses: int, mode: str = "greedy",
             repeats: int = 1, cell: int = 25, rng: np.random.Generator | None = None,
             threads: int = 1, policy: str = "learned") -> Validation:
    """Accuracy plus a visit histogram over cell x cell pixel blocks.

    The histogram counts every glimpse of every repeat, so it sums to
    n_glimpses * repeats * len(images). Greedy rollouts of the learned policy
    are deterministic, so one pass is computed and its counts multiplied by
    repeats.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    side = images.shape[-1]
    hist = np.zeros(heatmap_shape(side, cell), dtype=np.int64)
    deterministic = mode == "greedy" and policy == "learned"
    passes = 1 if deterministic else repeats
    weight = repeats if deterministic else 1
    correct = 0
    first_final = first_pred = None
    for _ in range(passes):
        pred, final, locs = _rollout_all(model, images, n_glimpses, mode, rng, policy, threads)
        if first_final is None:
            first_final, first_pred = final, pred
        correct += int((pred == labels).sum()) * weight
        pix = anchor_pixels(locs.reshape(-1, 2), side) // cell
        np.add.at(hist, (pix[:, 0], pix[:, 1]), weight)
    acc = correct / (repeats * len(labels)) if len(labels) else 0.0
    return Validation(acc, hist, first_final, first_pred)


def random_policy_ablation(model: RAM, images: np.ndarray, labels: np.ndarray, n_glimpses: int,
                           rng: np.random.Generator, threads: int = 1) -> float:
    """Accuracy when every location after the first is uniform on [-1,1]^2."""
    pred, _, _ = _rollout_all(model, images, n_glimpses, "greedy", rng, policy="random", threads=threads)
    return float((pred == labels).mean())


def mean_target_distance(final_locations: np.ndarray, targets: np.ndarray, side: int) -> float:
    """Mean pixel distance between final-glimpse centers and target centers (x=col, y=row)."""
    if len(targets) == 0:
        return float("nan")
    pix = anchor_pixels(final_locations, side)  # (row, col)
    d = np.hypot(pix[:, 1] - targets[:, 0], pix[:, 0] - targets[:, 1])
    return float(d.mean())


# -------------------------------------------------------------------- driver


@dataclass
class ChunkResult:
    chunk: int
    epoch: int
    accuracy: float
    histogram: np.ndarray
    target_distance: float | None = None


@dataclass
class TrainingResult:
    model: RAM
    epochs: list[dict] = field(default_factory=list)
    chunks: list[ChunkResult] = field(default_factory=list)


def run_training(model: RAM, train: tuple, val: tuple, cfg: TrainConfig,
                 on_epoch: Callable[[dict], None] | None = None,
                 on_chunk: Callable[[ChunkResult, Trainer], None] | None = None,
                 trainer: Trainer | None = None) -> TrainingResult:
    """Train for cfg.epochs, validating at the end of every chunk of cfg.chunk epochs.

    train/val are (images [N,S,S], labels [N]) plus optional target centers
    [N,2] (NaN rows for images without a target) as a third element.
    """
    train_x, train_y = train[0], train[1]
    val_x, val_y = val[0], val[1]
    val_meta = val[2] if len(val) > 2 else None
    trainer = trainer or Trainer(model, cfg)
    val_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    result = TrainingResult(model)
    side = val_x.shape[-1] if len(val_x) else model.cfg.image_side
    n_chunks = -(-cfg.epochs // cfg.chunk)
    for c in range(n_chunks):
        last = min((c + 1) * cfg.chunk, cfg.epochs)
        while trainer.epoch < last:
            rec = trainer.train_epoch(train_x, train_y)
            result.epochs.append(rec)
            log.info("epoch %d loss %.4f acc %.3f reward %.3f", rec["epoch"], rec["loss"], rec["accuracy"],
                     rec["reward"])
            if on_epoch:
                on_epoch(rec)
        v = validate(model, val_x, val_y, cfg.n_glimpses, cfg.eval_mode, cfg.repeats, cfg.heatmap_cell,
                     val_rng, cfg.threads, cfg.policy)
        dist = None
        if val_meta is not None:
            has = ~np.isnan(val_meta[:, 0])
            if has.any():
                dist = mean_target_distance(v.final_locations[has], val_meta[has], side)
        chunk = ChunkResult(c + 1, trainer.epoch, v.accuracy, v.histogram, dist)
        result.chunks.append(chunk)
        log.info("chunk %d (epoch %d): val acc %.3f", chunk.chunk, chunk.epoch, chunk.accuracy)
        if on_chunk:
            on_chunk(chunk, trainer)
    return result


# ------------------------------------------------------------------- outputs


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def write_heatmap(hist: np.ndarray, stem) -> None:
    """Write <stem>.pgm (brightest = most visited) and <stem>.csv (raw counts)."""
    from .synthcxr import write_pgm

    stem = str(stem)
    peak = hist.max()
    write_pgm(stem + ".pgm", hist / peak if peak > 0 else hist.astype(np.float64))
    np.savetxt(stem + ".csv", hist, fmt="%d", delimiter=",")
