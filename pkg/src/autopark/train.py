"""Teacher-forced imitation training of the parking policy."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import kvfile
from .dataset import EpisodeRecord, observation, samples, target_sequence
from .optim import Adam
from .policy import Observation, Policy


@dataclass
class TrainConfig:
    dataset: str = "data"
    episodes: int = 0  # 0 = every episode in the manifest
    batch_size: int = 32
    micro_batch: int = 4
    epochs: int = 10
    lr: float = 3e-4
    pred_weight: float = 0.5
    depth_weight: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    frame_stride: int = 1
    disable_pedestrian_context: bool = False
    target_concat: bool = False

    def __post_init__(self):
        for name in ("batch_size", "micro_batch", "epochs", "frame_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.pred_weight < 0 or self.depth_weight < 0 or self.episodes < 0:
            raise ValueError("loss weights and episode count must be non-negative")

    @classmethod
    def parse(cls, text, **overrides):
        return kvfile.parse_into(cls, text, **overrides)

    def dump(self):
        return kvfile.dump(self)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    ctrl: float
    pred: float
    token_accuracy: float
    seconds: float


class FrameCache:
    """Builds (observation, target sequence) per (episode, frame).

    Only the pedestrian tracks are precomputed; float images are made on demand
    to keep memory proportional to the micro-batch.
    """

    def __init__(self, eps):
        self.eps = eps
        self.peds = [ep.ped_states() for ep in eps]

    def get(self, i, t):
        ep = self.eps[i]
        return observation(ep, t, self.peds[i]), target_sequence(ep, t)

    def batch(self, keys):
        items = [self.get(i, t) for i, t in keys]
        return Observation.stack(o for o, _ in items), [s for _, s in items]


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, batch {batch}; halting")


def train_step(policy: Policy, opt: Adam, cache: FrameCache, keys, config: TrainConfig, epoch=0, batch=0):
    """One optimiser step on ``keys`` with micro-batch gradient accumulation.

    Returns (loss, parts, correct, total).
    """
    opt.zero_grad()
    loss_sum, parts_sum, correct, total = 0.0, {}, 0, 0
    for lo in range(0, len(keys), config.micro_batch):
        chunk = keys[lo:lo + config.micro_batch]
        obs, seqs = cache.batch(chunk)
        loss, parts, (c, n) = policy.loss(obs, seqs, config.pred_weight, config.depth_weight,
                                          config.disable_pedestrian_context)
        _check_finite(loss.item(), epoch, batch)
        weight = len(chunk) / len(keys)
        (loss * weight).backward()
        loss_sum += weight * loss.item()
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + weight * v
        correct += c
        total += n
    opt.step()
    return loss_sum, parts_sum, correct, total


def train(eps, config: TrainConfig, policy: Policy | None = None, on_epoch=None, log=print):
    """Train on every frame of ``eps``; returns (policy, [EpochStats])."""
    eps = list(eps)
    if not eps or not any(len(ep) for ep in eps):
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    if policy is None:
        policy = Policy(np.random.default_rng([config.seed, 1]), target_concat=config.target_concat)
    opt = Adam(policy.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    keys = [(i, t) for i, t in samples(eps) if t % config.frame_stride == 0]
    cache = FrameCache(eps)
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = [keys[k] for k in rng.permutation(len(keys))]
        tot_loss = tot_ctrl = tot_pred = 0.0
        correct = total = 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            loss, parts, c, n = train_step(policy, opt, cache, batch, config, epoch, b)
            share = len(batch) / len(order)
            tot_loss += share * loss
            tot_ctrl += share * parts.get("ctrl", 0.0)
            tot_pred += share * parts.get("pred", 0.0)
            correct += c
            total += n
        stats = EpochStats(epoch, tot_loss, tot_ctrl, tot_pred, correct / max(total, 1),
                           time.perf_counter() - start)
        history.append(stats)
        if log is not None:
            log(f"epoch {epoch:4d}  loss {stats.loss:.5f}  ctrl {stats.ctrl:.5f}  pred {stats.pred:.5f}  "
                f"acc {stats.token_accuracy:.4f}  {stats.seconds:.1f}s")
        if on_epoch is not None:
            on_epoch(policy, stats)
    return policy, history


def token_accuracy(policy: Policy, eps, keys=None, micro_batch=4, disable_pedestrians=False):
    """Teacher-forced next-token accuracy over the given (episode, frame) keys."""
    eps = list(eps)
    keys = samples(eps) if keys is None else list(keys)
    cache = FrameCache(eps)
    correct = total = 0
    for lo in range(0, len(keys), micro_batch):
        obs, seqs = cache.batch(keys[lo:lo + micro_batch])
        _, _, (c, n) = policy.loss(obs, seqs, 0.0, 0.0, disable_pedestrians)
        correct += c
        total += n
    return correct / max(total, 1)


def frame_loss(policy: Policy, ep: EpisodeRecord, t, config: TrainConfig):
    obs = observation(ep, t)
    loss, _, _ = policy.loss(obs, [target_sequence(ep, t)], config.pred_weight, config.depth_weight,
                             config.disable_pedestrian_context)
    return loss
