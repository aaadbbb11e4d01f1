"""Checkpoint and weight-import files built on :mod:`icdbert.archive`.

A checkpoint stores every parameter tensor (``param/<name>``), the Adam
moments (``adam.m/<name>``, ``adam.v/<name>``) and, in the header metadata,
the model config, training config, Adam step count, completed epochs, global
step, batch cursor, seed and the training log so far. Since all randomness is derived from
``(seed, epoch, step)`` this is also the full RNG cursor.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .archive import ArchiveError, read_archive, write_archive
from .encoder import ModelConfig, Parameters, parameter_shapes

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1
WEIGHTS_KIND = "weights"


class CheckpointError(ArchiveError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, tensor: str, found, expected):
        super().__init__(
            f"tensor {tensor!r}: checkpoint shape {tuple(found)} does not match config shape {tuple(expected)}"
        )
        self.tensor = tensor


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Parameters
    adam_m: Parameters
    adam_v: Parameters
    adam_t: int
    epoch: int
    step: int
    seed: int
    training: dict = field(default_factory=dict)
    log: list[list] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    cursor: int = 0
    loss_sum: float = 0.0
    loss_steps: int = 0


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    tensors = {}
    for name in ckpt.params:
        tensors[f"param/{name}"] = ckpt.params[name]
    for name in ckpt.adam_m:
        tensors[f"adam.m/{name}"] = ckpt.adam_m[name]
        tensors[f"adam.v/{name}"] = ckpt.adam_v[name]
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "training": ckpt.training,
        "adam_t": ckpt.adam_t,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "log": ckpt.log,
        "epoch_losses": ckpt.epoch_losses,
        "cursor": ckpt.cursor,
        "loss_sum": ckpt.loss_sum,
        "loss_steps": ckpt.loss_steps,
    }
    write_archive(path, CHECKPOINT_KIND, tensors, meta)


def _check_shapes(params: Parameters, config: ModelConfig) -> None:
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if params[name].shape != shape:
            raise ShapeMismatchError(name, params[name].shape, shape)
    extra = set(params) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(extra)}")


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``config`` given, every tensor shape is checked against it."""
    tensors, meta = read_archive(path, kind=CHECKPOINT_KIND)
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    stored = ModelConfig(**meta["model_config"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    _check_shapes(params, config if config is not None else stored)
    order = list(parameter_shapes(stored))
    params = {name: params[name] for name in order}
    adam_m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    adam_v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    adam_m = {name: adam_m[name] for name in order if name in adam_m}
    adam_v = {name: adam_v[name] for name in order if name in adam_v}
    return Checkpoint(
        config=config if config is not None else stored,
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t=int(meta["adam_t"]),
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        seed=int(meta["seed"]),
        training=meta.get("training", {}),
        log=meta.get("log", []),
        epoch_losses=meta.get("epoch_losses", []),
        cursor=int(meta.get("cursor", 0)),
        loss_sum=float(meta.get("loss_sum", 0.0)),
        loss_steps=int(meta.get("loss_steps", 0)),
    )


def export_weights(path: str | os.PathLike, params: Parameters, config: ModelConfig) -> None:
    """Flat named-tensor file; the manifest is the header's tensor list plus the config."""
    write_archive(path, WEIGHTS_KIND, params, {"model_config": config.to_dict()})


def import_weights(
    path: str | os.PathLike, config: ModelConfig, base: Parameters | None = None
) -> Parameters:
    """Overlay externally produced weights on ``base`` (e.g. a fresh init).

    Tensors absent from the file keep their ``base`` values, so encoder-only
    weights can be combined with a freshly initialized classifier head.
    """
    tensors, _ = read_archive(path, kind=WEIGHTS_KIND)
    expected = parameter_shapes(config)
    out = dict(base) if base is not None else {}
    for name, value in tensors.items():
        if name not in expected:
            raise CheckpointError(f"unknown tensor {name!r} in weights file")
        if value.shape != expected[name]:
            raise ShapeMismatchError(name, value.shape, expected[name])
        out[name] = np.asarray(value, dtype=np.float64)
    missing = set(expected) - set(out)
    if missing:
        raise CheckpointError(f"weights file lacks {sorted(missing)} and no base was given")
    return {name: out[name] for name in expected}
