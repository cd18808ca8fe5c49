"""Minibatch training: augmentation, scheduled loss, Adam, cosine learning rate."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, augment, stack
from .errors import ContractError, NumericalError
from .losses import LossConfig, combined_loss
from .schedules import LossSchedule, ScheduleKind, weights_at
from .segnet import Model, ModelConfig, init_model, save_model
from .tensor import DiffTensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "w_bce", "w_dice", "loss")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    lr_max: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "bce"
    switch_fraction: float = 0.9
    steps_per_epoch: int = 50
    seed: int = 0
    log_every: int = 10
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        ScheduleKind.parse(self.schedule)
        if self.lr_max <= 0.0:
            raise ValueError(f"lr_max must be positive, got {self.lr_max}")
        if self.steps_per_epoch < 1 or self.total_steps < self.steps_per_epoch:
            raise ValueError("need steps_per_epoch >= 1 and total_steps >= steps_per_epoch")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive")

    @property
    def total_epochs(self) -> int:
        return self.total_steps // self.steps_per_epoch

    def loss_schedule(self) -> LossSchedule:
        return LossSchedule(ScheduleKind.parse(self.schedule), self.total_epochs, self.switch_fraction)

    def epoch_of(self, step: int) -> int:
        return min(step // self.steps_per_epoch, self.total_epochs)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside 0..{cfg.total_steps}")
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, DiffTensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(
    params: dict[str, DiffTensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every parameter from its ``.grad``, in place."""
    for name, p in params.items():
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class LogRow(NamedTuple):
    step: int
    lr: float
    w_bce: float
    w_dice: float
    loss: float


def train(
    samples: Sequence[Sample],
    model: Model,
    cfg: TrainConfig,
    last_good_path=None,
) -> tuple[Model, list[LogRow]]:
    """Run ``cfg.total_steps`` optimisation steps on ``samples``; the final weights are kept.

    If the loss goes non-finite, the pre-step weights are written to
    ``last_good_path`` (when given) before :class:`NumericalError` is raised.
    """
    if not samples:
        raise ContractError("training split is empty")
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    schedule = cfg.loss_schedule()
    state = AdamState.zeros_like(model.params)
    rows: list[LogRow] = []
    for step in range(cfg.total_steps):
        picks = rng.integers(0, len(samples), size=cfg.batch_size)
        batch = [augment(samples[i], rng) if cfg.augment else samples[i] for i in picks]
        images, masks = stack(batch)
        w_bce, w_dice = weights_at(schedule, cfg.epoch_of(step))
        lr = cosine_lr(step, cfg)

        prob = model.forward(DiffTensor(images))
        if not np.all((prob.data > 0.0) & (prob.data < 1.0)):
            _save_last_good(model, last_good_path)
            raise NumericalError(f"step {step}: probability map left the open interval (0, 1)")
        loss = combined_loss(prob, masks, (w_bce, w_dice), cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            _save_last_good(model, last_good_path)
            raise NumericalError(f"step {step}: loss is {value}")

        model.zero_grad()
        T.backward(loss)
        adam_step(model.params, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            rows.append(LogRow(step, lr, w_bce, w_dice, value))
            if step % (cfg.log_every * 20) == 0:
                log.info("step %d lr %.3g weights (%g, %g) loss %.5f", step, lr, w_bce, w_dice, value)
    return model, rows


def _save_last_good(model: Model, path) -> None:
    if path is not None:
        save_model(model, path)


def write_log(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r.step, repr(r.lr), repr(r.w_bce), repr(r.w_dice), repr(r.loss)])


def read_log(path) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            LogRow(int(r["step"]), float(r["lr"]), float(r["w_bce"]), float(r["w_dice"]), float(r["loss"]))
            for r in reader
        ]


# ---------------------------------------------------------------------------
# k-fold driver


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class FoldJob:
    """One (schedule, fold) training run writing a checkpoint and a log CSV."""

    samples: tuple[Sample, ...]
    fold: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    ckpt_path: Path
    log_path: Path


def fold_job(
    train_samples: Sequence[Sample],
    fold: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
) -> FoldJob:
    """Job for one fold; init and batch seeds depend on the fold but not on the schedule."""
    out = Path(out_dir)
    return FoldJob(
        tuple(train_samples),
        fold,
        replace(model_cfg, seed=derive_seed(model_cfg.seed, fold)),
        replace(train_cfg, seed=derive_seed(train_cfg.seed, fold)),
        out / f"fold_{fold}.ckpt",
        out / f"fold_{fold}_log.csv",
    )


def run_fold_job(job: FoldJob) -> Path:
    model = init_model(job.model_cfg)
    job.ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    last_good = job.ckpt_path.with_suffix(".lastgood.ckpt")
    log.info("training %s", job.ckpt_path)
    model, rows = train(job.samples, model, job.train_cfg, last_good_path=last_good)
    write_log(rows, job.log_path)
    # the checkpoint is written last: its presence marks a completed fold
    tmp = job.ckpt_path.with_suffix(".tmp")
    save_model(model, tmp)
    tmp.replace(job.ckpt_path)
    return job.ckpt_path


def run_jobs(jobs: Sequence[FoldJob], workers: int = 1) -> list[Path]:
    """Run fold jobs, in parallel processes when ``workers > 1``.  Output order follows ``jobs``."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_fold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_fold_job, jobs))
