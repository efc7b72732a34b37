"""Deterministic Adam training with early stopping.

One master seed derives four independent generator streams (init,
shuffling, dropout, synthesis) by spawning a numpy SeedSequence, so
consuming one stream never shifts another and a full training run is a
pure function of (dataset, configs, seed).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .data import WindowedDataset
from .errors import ConfigError, DimensionError, FormatError, NumericsError, UsageError
from .model import Model
from .tensor import Tensor, no_grad


@dataclass
class RngBundle:
    """Independent generator streams derived from one master seed."""

    init: np.random.Generator
    shuffle: np.random.Generator
    dropout: np.random.Generator
    synth: np.random.Generator


def seed_everything(seed: int) -> RngBundle:
    """Spawn the four per-purpose streams, in the documented order."""
    children = np.random.SeedSequence(seed).spawn(4)
    return RngBundle(*(np.random.default_rng(s) for s in children))


@dataclass
class TrainConfig:
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 50
    batch_size: int = 32
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")
        if self.patience > self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} must not exceed max_epochs {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class TrainTrace:
    """Per-epoch losses and timings plus where training stopped."""

    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, (tr, va, sec) in enumerate(
                    zip(self.train_mse, self.val_mse, self.seconds), start=1):
                fh.write(json.dumps(
                    {"epoch": i, "train_mse": tr, "val_mse": va, "seconds": sec}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainTrace":
        trace = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    trace.train_mse.append(float(row["train_mse"]))
                    trace.val_mse.append(float(row["val_mse"]))
                    trace.seconds.append(float(row["seconds"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FormatError(f"bad trace line in {path}: {exc}") from exc
        trace.stopped_epoch = len(trace.train_mse)
        if trace.val_mse:
            trace.best_epoch = int(np.argmin(trace.val_mse)) + 1
        return trace


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction.

    m_hat = m / (1 - beta1^t), v_hat = v / (1 - beta2^t),
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state must align")
    b1, b2 = cfg.betas
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


class Adam:
    """Adam bound to a list of parameter tensors."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState.for_params([p.data for p in params])

    def step(self) -> None:
        adam_step([p.data for p in self.params],
                  [p.grad for p in self.params], self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loop


def _tail_validation_split(dataset: WindowedDataset, fraction: float
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the tail (latest cycles) of each cell's pairs for validation."""
    by_cell: dict[str, list[int]] = {}
    for idx, (cell, _end) in enumerate(dataset.provenance):
        by_cell.setdefault(cell, []).append(idx)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for cell, indices in by_cell.items():
        indices.sort(key=lambda i: dataset.provenance[i][1])
        n_val = max(1, int(fraction * len(indices)))
        train_idx.extend(indices[:-n_val])
        val_idx.extend(indices[-n_val:])
    return np.array(sorted(train_idx), dtype=np.int64), np.array(sorted(val_idx), dtype=np.int64)


def _eval_mse(model: Model, inputs: np.ndarray, targets: np.ndarray) -> float:
    with no_grad():
        preds = model.forward(inputs, training=False).data
    return float(np.mean((preds - targets) ** 2))


def train(
    model: Model,
    dataset: WindowedDataset,
    cfg: TrainConfig,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[Model, TrainTrace]:
    """Mini-batch Adam training with validation-based early stopping.

    Pairs are shuffled each epoch; after each epoch the held-out tail is
    evaluated in eval mode. Training stops once the count of consecutive
    non-improving epochs reaches ``patience`` (so patience=0 stops after
    the first epoch) or at ``max_epochs``; the best-validation parameters
    are restored before returning.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise UsageError("training dataset is empty")
    streams = seed_everything(cfg.seed)
    train_idx, val_idx = _tail_validation_split(dataset, cfg.val_fraction)
    if train_idx.size == 0:
        raise UsageError("validation split left no training pairs")

    params = model.parameters()
    optimizer = Adam(params, cfg)
    trace = TrainTrace()
    best_val = np.inf
    best_snapshot: list[np.ndarray] | None = None
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = streams.shuffle.permutation(train_idx.size)
        shuffled = train_idx[order]
        sq_err_sum = 0.0
        for lo in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[lo:lo + cfg.batch_size]
            preds = model.forward(dataset.inputs[batch], training=True, rng=streams.dropout)
            loss = ops.mse_loss(preds, Tensor(dataset.targets[batch]))
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericsError(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sq_err_sum += loss_value * batch.size
        train_mse = sq_err_sum / shuffled.size
        val_mse = _eval_mse(model, dataset.inputs[val_idx], dataset.targets[val_idx])
        if not np.isfinite(val_mse):
            raise NumericsError(f"non-finite validation loss at epoch {epoch}")
        trace.train_mse.append(train_mse)
        trace.val_mse.append(val_mse)
        trace.seconds.append(time.perf_counter() - started)
        if progress is not None:
            progress(epoch, train_mse, val_mse)

        if val_mse < best_val:
            best_val = val_mse
            trace.best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
        trace.stopped_epoch = epoch
        if stale >= cfg.patience:
            break

    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.data = snap
    model.zero_grads()
    return model, trace
