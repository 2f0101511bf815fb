"""Episodic training and evaluation.

Training samples one task per step, builds the episode loss on a fresh tape,
backpropagates into all parameter groups, optionally clips, and applies the
optimizer.  Every ``val_interval`` episodes a validation block of
``val_episodes`` tasks runs, and the best validation accuracy checkpoints
the model.  Evaluation derives one RNG substream per episode by seed
splitting, so episode order (or any future parallelism) cannot change a
report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, accumulate_grads, backward, no_grad
from .errors import CsnError, NumericError
from .models import CSNModel, episode_loss, save_model
from .sources import TaskSource, sample_episode


class Adam:
    """Adam with bias correction (defaults beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.assign(p.value.data - self.lr * update)


class SGDMomentum:
    """Classic heavy-ball SGD: velocity = m*velocity + grad."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.vel = [np.zeros(p.shape) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.vel):
            v *= self.momentum
            v += p.grad
            p.assign(p.value.data - self.lr * v)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_gradients(params, threshold: float, kind: str = "norm") -> float:
    """Hard gradient clipping; returns the pre-clip global norm."""
    norm = global_grad_norm(params)
    if threshold <= 0:
        return norm
    if kind == "norm":
        if norm > threshold:
            scale = threshold / norm
            for p in params:
                p.grad *= scale
    elif kind == "value":
        for p in params:
            np.clip(p.grad, -threshold, threshold, out=p.grad)
    else:
        raise CsnError(f"unknown clip kind '{kind}'")
    return norm


@dataclass
class TrainerConfig:
    optimizer: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    clip: float = 0.0  # 0 disables clipping
    clip_kind: str = "norm"
    episodes: int = 2000
    val_interval: int = 400
    val_episodes: int = 400
    seed: int = 0
    way: int = 5
    shots: int = 1
    queries_per_class: int = 15


@dataclass
class EvalReport:
    mean: float
    std: float
    ci95: float
    episodes: int
    ms_per_episode: float
    accuracies: np.ndarray = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "ci95": self.ci95,
            "episodes": self.episodes,
            "ms_per_episode": self.ms_per_episode,
        }


def make_optimizer(params, cfg: TrainerConfig):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr)
    if cfg.optimizer == "sgdm":
        return SGDMomentum(params, lr=cfg.lr, momentum=cfg.momentum)
    raise CsnError(f"unknown optimizer '{cfg.optimizer}'")


class TrainingAbort(CsnError):
    """Raised when the loss turns non-finite; carries the episode context."""

    def __init__(self, episode_index: int, seed_entropy, cause: Exception):
        self.episode_index = episode_index
        self.seed_entropy = seed_entropy
        super().__init__(
            f"non-finite loss at episode {episode_index} "
            f"(episode seed {seed_entropy}): {cause}"
        )


def evaluate(model: CSNModel, source: TaskSource, split: str, episodes: int,
             way: int, shots: int, queries_per_class: int, seed: int = 0) -> EvalReport:
    """Accuracy over freshly sampled episodes; dropout off, no gradients.

    Deterministic for a given seed: each episode gets its own substream
    spawned from the seed, so results do not depend on evaluation order.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    streams = seed.spawn(episodes)
    accs = np.zeros(episodes)
    t0 = time.perf_counter()
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        episode = sample_episode(source, split, way, shots, queries_per_class, rng)
        with no_grad():
            _, stats = episode_loss(model, episode)
        accs[i] = stats["accuracy"]
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    std = float(accs.std(ddof=1)) if episodes > 1 else 0.0
    return EvalReport(
        mean=float(accs.mean()),
        std=std,
        ci95=1.96 * std / np.sqrt(episodes) if episodes > 1 else 0.0,
        episodes=episodes,
        ms_per_episode=elapsed_ms / episodes,
        accuracies=accs,
    )


def train(model: CSNModel, source: TaskSource, cfg: TrainerConfig,
          checkpoint_path=None, on_record=None) -> list:
    """Run the episodic training loop; returns the metric records.

    Each record is a dict with episode index, split, loss, accuracy, and
    timing fields.  ``on_record`` (if given) sees each record as it is
    emitted.  ``checkpoint_path`` receives the best-validation model, or the
    final model when no validation split is configured.
    """
    root = np.random.SeedSequence(cfg.seed)
    episode_seeds = root.spawn(cfg.episodes) if cfg.episodes else []
    val_seed_root, dropout_seed = root.spawn(2)
    dropout_rng = np.random.default_rng(dropout_seed)
    n_val_rounds = cfg.episodes // cfg.val_interval if cfg.val_interval > 0 else 0
    val_seeds = val_seed_root.spawn(n_val_rounds) if n_val_rounds else []

    records: list[dict] = []

    def emit(record):
        record["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        records.append(record)
        if on_record:
            on_record(record)

    params = model.parameters()
    optimizer = make_optimizer(params, cfg)
    has_val = len(source.classes("val")) >= cfg.way and cfg.val_interval > 0
    best_val = -1.0

    interval_loss = interval_acc = interval_ms = interval_cond = 0.0
    interval_count = 0
    val_round = 0

    for index in range(1, cfg.episodes + 1):
        seed_entropy = episode_seeds[index - 1].entropy
        rng = np.random.default_rng(episode_seeds[index - 1])
        episode = sample_episode(source, "train", cfg.way, cfg.shots,
                                 cfg.queries_per_class, rng)
        t0 = time.perf_counter()
        try:
            with Tape():
                loss, stats = episode_loss(model, episode, train=True, rng=dropout_rng)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError("episode_loss")
                grads = backward(loss)
        except NumericError as e:
            raise TrainingAbort(index, seed_entropy, e)
        accumulate_grads(params, grads)
        clip_gradients(params, cfg.clip, cfg.clip_kind)
        optimizer.step()
        model.zero_grads()

        interval_loss += loss_value
        interval_acc += stats["accuracy"]
        interval_cond += stats["cond_ms"]
        interval_ms += (time.perf_counter() - t0) * 1e3
        interval_count += 1

        at_interval = cfg.val_interval > 0 and index % cfg.val_interval == 0
        if at_interval or index == cfg.episodes:
            emit({
                "episode": index,
                "split": "train",
                "loss": interval_loss / interval_count,
                "accuracy": interval_acc / interval_count,
                "wall_ms": interval_ms / interval_count,
                "cond_ms": interval_cond / interval_count,
            })
            interval_loss = interval_acc = interval_ms = interval_cond = 0.0
            interval_count = 0

        if at_interval and has_val:
            report = evaluate(model, source, "val", cfg.val_episodes, cfg.way,
                              cfg.shots, cfg.queries_per_class,
                              seed=val_seeds[val_round])
            val_round += 1
            emit({
                "episode": index,
                "split": "val",
                "loss": 0.0,
                "accuracy": report.mean,
                "wall_ms": report.ms_per_episode,
                "cond_ms": 0.0,
            })
            if report.mean > best_val:
                best_val = report.mean
                if checkpoint_path is not None:
                    save_model(model, checkpoint_path)

    if checkpoint_path is not None and (not has_val or best_val < 0):
        save_model(model, checkpoint_path)
    return records
