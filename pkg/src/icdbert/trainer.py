"""Adam fine-tuning of every model parameter with checkpointing and exact resume."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import (
    Dropout,
    ModelConfig,
    NumericError,
    Parameters,
    bce_with_logits,
    compute_gradients,
    forward,
)
from .rng import derive_seed
from .tokenizer import EncodedDataset

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "loss", "wall_ms"]


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 3e-5
    epochs: int = 6
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 10
    checkpoint_dir: str | None = None
    max_steps: int | None = None
    stop_after: int | None = None
    accumulation_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    warmup_steps: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        # lr == 0 is accepted as a null-update diagnostic run.
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.stop_after is not None and self.stop_after < 1:
            raise ValueError("stop_after must be >= 1")
        if self.schedule not in ("constant", "linear"):
            raise ValueError("schedule must be 'constant' or 'linear'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: Parameters
    v: Parameters
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Parameters,
    grads: Parameters,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Parameters, AdamState]:
    """One bias-corrected Adam update, applied in place.

    Refuses the whole step (nothing is modified) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; Adam step refused")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainerState:
    """Optimizer state plus position in the data stream.

    ``epoch`` counts finished epochs; ``cursor`` is the number of batches
    already consumed from the unfinished one, with ``loss_sum``/``loss_steps``
    accumulating its running loss.
    """

    adam: AdamState
    epoch: int = 0
    step: int = 0
    cursor: int = 0
    loss_sum: float = 0.0
    loss_steps: int = 0
    log_rows: list[list] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    mean_loss: float
    steps: int
    complete: bool


def _batches(n: int, config: TrainingConfig, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng(derive_seed(config.seed, f"epoch/{epoch}")).permutation(n)
    return [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]


def steps_per_epoch(n: int, config: TrainingConfig) -> int:
    return math.ceil(math.ceil(n / config.batch_size) / config.accumulation_steps)


def _learning_rate(config: TrainingConfig, step: int, total_steps: int) -> float:
    """Constant, or linear warmup to the peak followed by linear decay."""
    if config.schedule == "constant":
        return config.learning_rate
    if step <= config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    remaining = max(0, total_steps - step + 1)
    return config.learning_rate * remaining / max(1, total_steps - config.warmup_steps)


def _halted(config: TrainingConfig, state: "TrainerState") -> bool:
    limits = [n for n in (config.max_steps, config.stop_after) if n is not None]
    return any(state.step >= n for n in limits)


def train_epoch(
    params: Parameters,
    model_config: ModelConfig,
    data: EncodedDataset,
    config: TrainingConfig,
    state: TrainerState,
    total_steps: int | None = None,
) -> EpochMetrics:
    """Continue the current epoch in seeded batch order.

    Stops early once ``config.max_steps`` updates have been made (or
    ``config.stop_after``, which halts without changing the schedule horizon);
    the epoch is then left unfinished and resumes from ``state.cursor``.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    epoch = state.epoch + 1
    total_steps = total_steps or steps_per_epoch(len(data), config) * config.epochs
    batches = _batches(len(data), config, epoch)
    accum = config.accumulation_steps
    started = time.perf_counter()
    steps_taken = 0
    while state.cursor < len(batches):
        if _halted(config, state):
            break
        group = batches[state.cursor:state.cursor + accum]
        step = state.step + 1
        summed: Parameters | None = None
        step_loss = 0.0
        for micro, index in enumerate(group):
            dropout = (
                Dropout(model_config.dropout, config.seed, step * accum + micro)
                if model_config.dropout > 0
                else None
            )
            try:
                loss, grads, _ = compute_gradients(
                    params, model_config,
                    data.input_ids[index], data.attention_mask[index], data.labels[index],
                    data.segment_ids[index], dropout,
                )
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from None
            step_loss += loss / len(group)
            if summed is None:
                summed = grads
            else:
                for k in summed:
                    summed[k] += grads[k]
        if len(group) > 1:
            for k in summed:
                summed[k] /= len(group)
        adam_step(
            params, summed, state.adam,
            _learning_rate(config, step, total_steps), config.beta1, config.beta2, config.eps,
        )
        state.step = step
        state.cursor += len(group)
        state.loss_sum += step_loss
        state.loss_steps += 1
        steps_taken += 1
        if step % config.eval_every == 0:
            wall = f"{(time.perf_counter() - started) * 1000:.0f}" if config.record_wall_time else ""
            state.log_rows.append([epoch, step, f"{step_loss:.10f}", wall])
    mean_loss = state.loss_sum / state.loss_steps if state.loss_steps else float("nan")
    complete = state.cursor >= len(batches)
    if complete:
        state.epoch = epoch
        state.cursor = 0
        state.loss_sum = 0.0
        state.loss_steps = 0
        state.epoch_losses.append(mean_loss)
    return EpochMetrics(epoch, mean_loss, steps_taken, complete)


def dataset_loss(params: Parameters, model_config: ModelConfig, data: EncodedDataset, batch_size: int = 64) -> float:
    """Eval-mode mean BCE over a whole dataset (cell-weighted)."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward(params, model_config, data.input_ids[sl], data.attention_mask[sl], data.segment_ids[sl]).logits
        total += bce_with_logits(logits, data.labels[sl]) * logits.size
    return total / (len(data) * model_config.num_labels)


def write_training_log(path: str | os.PathLike, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def _append_log(path: Path, rows: list[list]) -> None:
    with open(path, "a", newline="", encoding="utf-8") as handle:
        csv.writer(handle, lineterminator="\n").writerows(rows)


def checkpoint_path(directory: str | os.PathLike, epoch: int, step: int | None = None) -> Path:
    """``epoch_NNN.ckpt`` after a full epoch, ``step_NNNNNN.ckpt`` for a mid-epoch stop."""
    if step is not None:
        return Path(directory) / f"step_{step:06d}.ckpt"
    return Path(directory) / f"epoch_{epoch:03d}.ckpt"


def latest_checkpoint(directory: str | os.PathLike) -> Path | None:
    """Checkpoint with the highest global step in ``directory``."""
    best = None
    for path in sorted(Path(directory).glob("*.ckpt")):
        step = load_checkpoint(path).step
        if best is None or step > best[0]:
            best = (step, path)
    return None if best is None else best[1]


def _snapshot(params, model_config, config, state) -> Checkpoint:
    training = config.to_dict()
    # Output location and the interruption point are not training state;
    # dropping them keeps checkpoints byte-identical across runs.
    training.pop("checkpoint_dir")
    training.pop("stop_after")
    return Checkpoint(
        config=model_config,
        params=params,
        adam_m=state.adam.m,
        adam_v=state.adam.v,
        adam_t=state.adam.t,
        epoch=state.epoch,
        step=state.step,
        seed=config.seed,
        training=training,
        log=state.log_rows,
        epoch_losses=state.epoch_losses,
        cursor=state.cursor,
        loss_sum=state.loss_sum,
        loss_steps=state.loss_steps,
    )


def fine_tune(
    params: Parameters,
    model_config: ModelConfig,
    train: EncodedDataset,
    config: TrainingConfig,
    log_path: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
) -> tuple[Parameters, TrainerState]:
    """Train for ``config.epochs`` epochs or until ``config.max_steps`` updates.

    A checkpoint is written after every epoch (and at a mid-epoch stop) when
    ``checkpoint_dir`` is set. Resuming restores parameters, Adam moments,
    counters, the batch cursor and the log, so the continuation is bitwise
    identical to an uninterrupted run.
    """
    if len(train) == 0:
        raise ValueError("training data is empty")
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model_config)
        if ckpt.seed != config.seed:
            raise ValueError(f"checkpoint seed {ckpt.seed} differs from configured seed {config.seed}")
        params = ckpt.params
        state = TrainerState(
            AdamState(ckpt.adam_m, ckpt.adam_v, ckpt.adam_t),
            epoch=ckpt.epoch,
            step=ckpt.step,
            cursor=ckpt.cursor,
            loss_sum=ckpt.loss_sum,
            loss_steps=ckpt.loss_steps,
            log_rows=[list(r) for r in ckpt.log],
            epoch_losses=list(ckpt.epoch_losses),
        )
    else:
        state = TrainerState(AdamState.zeros_like(params))

    total_steps = steps_per_epoch(len(train), config) * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    if log_path is not None:
        log_path = Path(log_path)
        write_training_log(log_path, state.log_rows)

    while state.epoch < config.epochs:
        if _halted(config, state):
            break
        logged = len(state.log_rows)
        metrics = train_epoch(params, model_config, train, config, state, total_steps)
        log.info(
            "epoch %d%s: mean loss %.6f over %d steps",
            metrics.epoch, "" if metrics.complete else " (partial)", metrics.mean_loss, metrics.steps,
        )
        if log_path is not None:
            _append_log(log_path, state.log_rows[logged:])
        if config.checkpoint_dir is not None:
            directory = Path(config.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            path = checkpoint_path(directory, metrics.epoch, None if metrics.complete else state.step)
            save_checkpoint(path, _snapshot(params, model_config, config, state))
    return params, state
