"""Group pre-training and the alternating component/aggregator optimization."""

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import settings
from .data_model import DelfiError, UsageError
from .dataset import HistogramDataset, PointDataset, ResidualScale, StationGrouping
from .model import (
    AGGREGATOR,
    COMPONENTS,
    SHORT,
    MixtureModel,
    ModelConfig,
    batch_loss,
    init_model,
    load_model,
    loss_and_grad,
    save_model,
)
from .neural import AdamState, NonFiniteError, adam_step, clip_by_global_norm
from .storage import load_arrays

_logger = logging.getLogger(__name__)

PHASES = (COMPONENTS, AGGREGATOR)
MONITOR = "train_loss"
MONITOR_SIZE = 4096
LOG_COLUMNS = ["phase", "epoch", "iter", "loss"]


class TrainingError(DelfiError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_epochs: int = settings.DELFI_EPOCHS
    n_t: int = settings.DELFI_N_T
    m_t: int = settings.DELFI_M_T
    pretrain_epochs: int = settings.DELFI_PRETRAIN_EPOCHS
    lr: float = settings.DELFI_LR
    batch_size: int = settings.DELFI_BATCH_SIZE
    clip_norm: float = settings.DELFI_CLIP_NORM
    seed: int = settings.DELFI_SEED

    def __post_init__(self):
        for name in ("n_epochs", "n_t", "m_t", "pretrain_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"TrainConfig.{name} must be at least 1")
        if not self.lr > 0 or not self.clip_norm > 0:
            raise UsageError("TrainConfig.lr and clip_norm must be positive")


@dataclass
class TrainLog:
    """One row per optimizer step: (phase, epoch, iter, loss)."""

    entries: list[tuple[str, int, int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    final_train_loss: float = float("nan")
    final_test_loss: float = float("nan")

    def record(self, phase: str, epoch: int, iteration: int, loss: float):
        self.entries.append((phase, epoch, iteration, loss))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=LOG_COLUMNS)

    def steps(self, phase: str | None = None) -> int:
        return sum(1 for e in self.entries if phase is None or e[0] == phase)

    def epoch_means(self) -> list[float]:
        """Mean loss of the alternating-phase steps of each epoch, in epoch order."""
        df = self.frame()
        df = df[df["phase"].isin(PHASES)]
        return df.groupby("epoch", sort=True)["loss"].mean().tolist()

    def epoch_train_losses(self) -> list[float]:
        """Loss on the monitored training examples after each epoch, in epoch order."""
        return [e[3] for e in self.entries if e[0] == MONITOR]

    def to_csv(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False, float_format="%.17g")


def residual_scale_of(model: MixtureModel) -> ResidualScale:
    return ResidualScale(float(model.metadata.get("residual_scale", 1.0)))


def _targets(model: MixtureModel, dataset: PointDataset | HistogramDataset) -> np.ndarray:
    if model.variant == SHORT:
        if not isinstance(dataset, PointDataset):
            raise UsageError("Short-term models train on point datasets")
        return residual_scale_of(model).apply(dataset.residuals)
    if not isinstance(dataset, HistogramDataset):
        raise UsageError("Long-term models train on histogram datasets")
    if dataset.horizon != model.horizon:
        raise UsageError(f"Dataset horizon {dataset.horizon} does not match model horizon {model.horizon}")
    return dataset.targets


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _monitor_indices(n: int, seed: int) -> np.ndarray:
    if n <= MONITOR_SIZE:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, n]).choice(n, MONITOR_SIZE, replace=False))


def _mean_loss(model: MixtureModel, windows: np.ndarray, targets: np.ndarray, batch_size: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(windows), batch_size):
        chunk = slice(i, i + batch_size)
        total += batch_loss(model, windows[chunk], targets[chunk]) * len(targets[chunk])
    return total / len(windows)


def _step(
    model: MixtureModel,
    windows: np.ndarray,
    targets: np.ndarray,
    state: AdamState,
    clip_norm: float,
    batch_id: str,
    attention_override: np.ndarray | None = None,
) -> float:
    try:
        loss, grads = loss_and_grad(model, windows, targets, attention_override)
    except NonFiniteError as e:
        raise TrainingError(f"Non-finite values on batch {batch_id}: {e}") from e
    if not np.isfinite(loss):
        raise TrainingError(f"Non-finite loss on batch {batch_id}")
    clip_by_global_norm(grads, state.keys, clip_norm)
    adam_step(model.params, grads, state)
    return loss


def pretrain(
    model: MixtureModel,
    grouping: StationGrouping,
    train: PointDataset | HistogramDataset,
    cfg: TrainConfig,
    log: TrainLog | None = None,
) -> MixtureModel:
    """Trains each component alone on its station group, with attention pinned to it."""
    log = log if log is not None else TrainLog()
    targets = _targets(model, train)
    n = model.config.n_components
    for k in range(n):
        mask = np.isin(train.station_ids, grouping.members(k))
        if not mask.any():
            _logger.warning(f"No training examples for component {k}; skipping its pretraining")
            continue
        windows, group_targets = train.windows[mask], targets[mask]
        override = np.eye(n)[k]
        state = AdamState.zeros(model.params, model.component_keys(k), cfg.lr)
        phase = f"pretrain_{k}"
        for epoch in range(cfg.pretrain_epochs):
            rng = np.random.default_rng([cfg.seed, k, epoch])
            for it, idx in enumerate(_batches(len(windows), cfg.batch_size, rng)):
                loss = _step(
                    model, windows[idx], group_targets[idx], state, cfg.clip_norm, f"{phase}/{epoch}/{it}", override
                )
                log.record(phase, epoch, it, loss)
        _logger.info(f"Pretrained component {k} on {int(mask.sum())} examples")
    return model


@dataclass
class Checkpoint:
    model: MixtureModel
    states: dict[str, AdamState]
    epoch: int
    log: TrainLog


def save_checkpoint(path: str | Path, checkpoint: Checkpoint):
    arrays, adam = {}, {}
    for group, state in checkpoint.states.items():
        adam[group] = {"keys": list(state.keys), "step": state.step, "lr": state.lr}
        for key in state.keys:
            arrays[f"adam.{group}.m.{key}"] = state.m[key]
            arrays[f"adam.{group}.v.{key}"] = state.v[key]
    header = {
        "checkpoint_epoch": checkpoint.epoch,
        "adam": adam,
        "log": [list(e) for e in checkpoint.log.entries],
    }
    save_model(path, checkpoint.model, extra_arrays=arrays, extra_header=header)


def load_checkpoint(path: str | Path) -> Checkpoint:
    model = load_model(path)
    header, arrays = load_arrays(path)
    states = {}
    for group, meta in header["adam"].items():
        keys = tuple(meta["keys"])
        states[group] = AdamState(
            keys=keys,
            m={k: arrays[f"adam.{group}.m.{k}"] for k in keys},
            v={k: arrays[f"adam.{group}.v.{k}"] for k in keys},
            step=meta["step"],
            lr=meta["lr"],
        )
    log = TrainLog([(p, int(e), int(i), float(v)) for p, e, i, v in header["log"]])
    return Checkpoint(model, states, header["checkpoint_epoch"], log)


def train_alternating(
    model: MixtureModel,
    train: PointDataset | HistogramDataset,
    cfg: TrainConfig,
    log: TrainLog | None = None,
    checkpoint: Checkpoint | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[MixtureModel, TrainLog]:
    """n_t component-group steps then m_t aggregator-group steps per epoch.

    Each step is one mini-batch Adam update; the frozen group receives no update. Batches
    come from a per-epoch shuffle seeded by (seed, epoch), so resuming from a checkpoint
    written at the end of an epoch reproduces the uninterrupted run.
    """
    if len(train) == 0:
        raise UsageError("Cannot train on an empty dataset")
    if checkpoint is not None:
        model, states, start, log = checkpoint.model, checkpoint.states, checkpoint.epoch, checkpoint.log
        _logger.info(f"Resuming alternating training at epoch {start}")
    else:
        states = {group: AdamState.zeros(model.params, model.group_keys(group), cfg.lr) for group in PHASES}
        start = 0
        log = log if log is not None else TrainLog()

    targets = _targets(model, train)
    monitor = _monitor_indices(len(train), cfg.seed)
    budget = {COMPONENTS: cfg.n_t, AGGREGATOR: cfg.m_t}
    for epoch in range(start, cfg.n_epochs):
        batches = _batches(len(train), cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
        for phase in PHASES:
            for it in range(budget[phase]):
                b = it % len(batches)
                idx = batches[b]
                loss = _step(
                    model, train.windows[idx], targets[idx], states[phase], cfg.clip_norm, f"{phase}/{epoch}/{it}#{b}"
                )
                log.record(phase, epoch, it, loss)
        log.record(MONITOR, epoch, 0, _mean_loss(model, train.windows[monitor], targets[monitor]))
        _logger.info(
            f"Epoch {epoch}: mean step loss {log.epoch_means()[-1]:.6f}, training loss {log.epoch_train_losses()[-1]:.6f}"
        )
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, Checkpoint(model, states, epoch + 1, log))
    return model, log


def evaluate_loss(model: MixtureModel, dataset: PointDataset | HistogramDataset, batch_size: int = 1024) -> float:
    """Loss averaged over every example of dataset; NaN for an empty set."""
    if len(dataset) == 0:
        return float("nan")
    return _mean_loss(model, dataset.windows, _targets(model, dataset), batch_size)


def train_model(
    variant: str,
    train: PointDataset | HistogramDataset,
    grouping: StationGrouping,
    cfg: TrainConfig,
    model_config: ModelConfig | None = None,
    residual_scale: ResidualScale | None = None,
    horizon: int | None = None,
    test: PointDataset | HistogramDataset | None = None,
    metadata: dict | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
) -> tuple[MixtureModel, TrainLog]:
    """Initializes, pretrains and alternately trains one model; fills the log's final losses."""
    started = time.perf_counter()
    checkpoint, log = None, None
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        checkpoint = load_checkpoint(checkpoint_path)
        model = checkpoint.model
    else:
        meta = {"residual_scale": (residual_scale or ResidualScale()).scale, "train_config": asdict(cfg)}
        model = init_model(variant, model_config, cfg.seed, horizon, {**meta, **(metadata or {})})
        log = TrainLog()
        pretrain(model, grouping, train, cfg, log)
    model, log = train_alternating(
        model, train, cfg, log=log, checkpoint=checkpoint, checkpoint_path=checkpoint_path
    )
    log.wall_time = time.perf_counter() - started
    log.final_train_loss = evaluate_loss(model, train)
    if test is not None:
        log.final_test_loss = evaluate_loss(model, test)
    _logger.info(
        f"Trained {variant}-term model: train loss {log.final_train_loss:.6f}, test loss {log.final_test_loss:.6f}"
    )
    return model, log
