"""Training loop, learning-rate schedule and keypoint inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..bonemap import BoneMapConfig, build_scale_stack, stack_sequence
from ..tga import TgaConfig, apply_tga
from ..usgrid import VideoSequence, pair_indices
from .checkpoint import save_checkpoint
from .keypoints import KeypointSet, reconstruction_loss
from .networks import NetworkSpec, Transporter, init_weights

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ustp"
METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    batch_size: int = 16
    train_pairs: int = 1024
    val_pairs: int = 512
    pair_separation: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "train_pairs", "val_pairs", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pair_separation < 0:
            raise ValueError("pair_separation must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


def learning_rate(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay: ``lr * decay ** floor(epoch / every)``."""
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class TrainResult:
    model: Transporter
    optimizer: torch.optim.Optimizer
    metrics: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]

    @property
    def final_loss(self) -> float:
        return self.metrics[-1]["train_loss"]


def _pairs(lengths: Sequence[int], total: int, separation: int, seed: int, tag: int) -> np.ndarray:
    """``(sequence, start)`` rows, ``total`` split evenly across sequences."""
    n = len(lengths)
    counts = [total // n + (1 if i < total % n else 0) for i in range(n)]
    rows = []
    for i, (length, count) in enumerate(zip(lengths, counts)):
        if count == 0:
            continue
        starts = pair_indices(length, separation, count, seed=[seed, tag, i])
        rows.append(np.stack([np.full(count, i), starts], axis=1))
    return np.concatenate(rows)


def _batch(stacks: list[torch.Tensor], rows: np.ndarray, separation: int) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.stack([stacks[s][t] for s, t in rows])
    tgt = torch.stack([stacks[s][t + separation] for s, t in rows])
    return src, tgt


def _target(tgt: torch.Tensor, spec: NetworkSpec) -> torch.Tensor:
    return tgt if spec.reconstruct_all_channels else tgt[:, :1]


def prepare_stacks(dataset: Sequence[VideoSequence], bonemap: BoneMapConfig, tga: TgaConfig,
                   threads: int = 1) -> list[torch.Tensor]:
    return [torch.from_numpy(stack_sequence(seq.frames, bonemap, tga, threads).astype(np.float32))
            for seq in dataset]


def evaluate_loss(model: Transporter, stacks, rows, cfg: TrainConfig) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(rows), cfg.batch_size):
            src, tgt = _batch(stacks, rows[i : i + cfg.batch_size], cfg.pair_separation)
            loss = reconstruction_loss(model(src, tgt), _target(tgt, model.spec))
            total += loss.item() * len(src)
    return total / len(rows)


def train(dataset: Sequence[VideoSequence], cfg: TrainConfig = TrainConfig(), spec: NetworkSpec = NetworkSpec(),
          bonemap: BoneMapConfig = BoneMapConfig(), tga: TgaConfig = TgaConfig(),
          out_dir: str | Path | None = None, stacks: list[torch.Tensor] | None = None,
          threads: int = 1) -> TrainResult:
    """Fit a transporter on frame pairs drawn from ``dataset``.

    Frames are TGA-compensated and expanded into scale stacks once up front
    (or taken from ``stacks``). When ``out_dir`` is given, the checkpoint is
    rewritten and one JSON line appended to the metrics log after every epoch.
    """
    if not dataset and not stacks:
        raise ValueError("training needs at least one sequence")
    if stacks is None:
        stacks = prepare_stacks(dataset, bonemap, tga, threads)
    channels = stacks[0].shape[1]
    if channels != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} channels, stacks have {channels}")
    stacks = [s for s in stacks if len(s) > cfg.pair_separation]
    if not stacks:
        raise ValueError("sequences are too short for the pair separation")
    lengths = [len(s) for s in stacks]

    train_rows = _pairs(lengths, cfg.train_pairs, cfg.pair_separation, cfg.seed, 0)
    val_rows = _pairs(lengths, cfg.val_pairs, cfg.pair_separation, cfg.seed, 1)
    shuffle = np.random.default_rng([cfg.seed, 2])

    torch.manual_seed(cfg.seed)
    model = init_weights(Transporter(spec), cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate(0, cfg))
    result = TrainResult(model, optimizer)

    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_NAME
        metrics_path.write_text("")

    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = train_rows[shuffle.permutation(len(train_rows))]
        running, seen = 0.0, 0
        for step in range(0, len(order), cfg.batch_size):
            src, tgt = _batch(stacks, order[step : step + cfg.batch_size], cfg.pair_separation)
            loss = reconstruction_loss(model(src, tgt), _target(tgt, spec))
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at epoch {epoch}, batch {step // cfg.batch_size}, lr {lr}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            result.step_losses.append(value)
            running += value * len(src)
            seen += len(src)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": running / seen,
            "val_loss": evaluate_loss(model, stacks, val_rows, cfg),
        }
        result.metrics.append(record)
        log.info("epoch %d lr %.6g train %.6f val %.6f", epoch, lr, record["train_loss"], record["val_loss"])
        if out_dir is not None:
            save_checkpoint(out_dir / CHECKPOINT_NAME, model, optimizer)
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
    model.eval()
    return result


def infer_keypoint_sets(frames, model: Transporter, bonemap: BoneMapConfig = BoneMapConfig(),
                        tga: TgaConfig = TgaConfig(), batch_size: int = 16, threads: int = 1) -> list[KeypointSet]:
    """KeyNet keypoints for raw frames (TGA and bone maps applied here)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    stacks = torch.from_numpy(stack_sequence(frames, bonemap, tga, threads).astype(np.float32))
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(stacks), batch_size):
            coords, _, conf = model.keynet(stacks[i : i + batch_size])
            for c, p in zip(coords.numpy(), conf.numpy()):
                out.append(KeypointSet(c.astype(np.float64), frames.shape[1:], p.astype(np.float64)))
    return out


def infer_keypoints(frame, model: Transporter, bonemap: BoneMapConfig = BoneMapConfig(),
                    tga: TgaConfig = TgaConfig()) -> KeypointSet:
    return infer_keypoint_sets(np.asarray(frame)[None], model, bonemap, tga)[0]


def scale_stack_tensor(frame, bonemap: BoneMapConfig = BoneMapConfig(), tga: TgaConfig = TgaConfig()) -> torch.Tensor:
    stack = build_scale_stack(apply_tga(frame, tga), bonemap)
    return torch.from_numpy(stack.channels.astype(np.float32))[None]
