"""Teacher-forced Adam training with early stopping and plateau LR halving."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import NumericError, ParameterError, TrainingError
from ..numcore import AdamState, adam_step, mse
from ..trajectories import DatasetSplit, Trajectory
from .model import ModelParams, TransformerConfig, decode_autoregressive, decode_step_outputs, encode, init_params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10
    lr_patience: int = 5
    lr_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epochs <= 100:
            raise ParameterError("epochs must lie in [0, 100]")
        if self.batch_size < 1 or not self.lr > 0:
            raise ParameterError("batch_size must be >= 1 and lr > 0")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "lr"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), repr(r.lr)])
        return buf.getvalue()


def encoder_inputs(trajs: Sequence[Trajectory], config: TransformerConfig) -> np.ndarray:
    """``(N, T_obs, input_dim)`` uint8 fingerprints or float positions."""
    T = config.T_obs
    if config.input_mode == "position":
        return np.stack([t.positions[:T] for t in trajs])
    missing = [t.id for t in trajs if t.fingerprints is None]
    if missing:
        raise ParameterError(f"{len(missing)} trajectories have no fingerprints attached")
    return np.stack([t.fingerprints[:T].reshape(T, -1) for t in trajs])


def _check_shapes(trajs: Sequence[Trajectory], config: TransformerConfig) -> None:
    for t in trajs:
        if t.T_obs != config.T_obs or t.horizon != config.horizon:
            raise ParameterError(
                f"trajectory {t.id}: T_obs/horizon {t.T_obs}/{t.horizon} != config "
                f"{config.T_obs}/{config.horizon}"
            )


def predict(
    params: ModelParams,
    config: TransformerConfig,
    trajs: Sequence[Trajectory],
    batch_size: int = 256,
    inputs: np.ndarray | None = None,
) -> np.ndarray:
    """Free-running estimates ``(N, horizon, 2)`` in eval mode."""
    _check_shapes(trajs, config)
    X = encoder_inputs(trajs, config) if inputs is None else inputs
    start = np.stack([t.positions[config.T_obs - 1] for t in trajs])
    out = []
    for s in range(0, len(trajs), batch_size):
        Z = encode(X[s:s + batch_size], params, config)
        out.append(decode_autoregressive(Z, params, config, start[s:s + batch_size]))
    return np.concatenate(out) if out else np.zeros((0, config.horizon, 2))


def _teacher_forced_loss(params, config, X, pos, rng):
    T = config.T_obs
    Z = encode(X, params, config, train=True, rng=rng)
    dec_in = pos[:, T - 1:-1, :]
    pred = decode_step_outputs(Z, dec_in, params, config, train=True, rng=rng)
    return mse(pred, pos[:, T:, :])


def train(
    corpus: Sequence[Trajectory],
    split: DatasetSplit,
    config: TransformerConfig,
    train_cfg: TrainConfig = TrainConfig(),
    log=None,
) -> TrainResult:
    """Fit the transformer; returns the best-validation checkpoint.

    Training loss is the teacher-forced MSE in m^2; validation MSE uses
    free-running decoding. Stops after ``patience`` epochs without a new
    best validation loss and halves the learning rate after every
    ``lr_patience`` stagnant epochs.
    """
    by_id = {t.id: t for t in corpus}
    tr = [by_id[i] for i in split.train]
    va = [by_id[i] for i in split.val]
    if not tr or not va:
        raise ParameterError("training needs non-empty train and val splits")
    _check_shapes(tr + va, config)

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(config, int(rng.integers(2**62)))
    result = TrainResult(params)
    if train_cfg.epochs == 0:
        return result

    X_tr = encoder_inputs(tr, config)
    P_tr = np.stack([t.positions for t in tr])
    X_va = encoder_inputs(va, config)
    Y_va = np.stack([t.target for t in va])

    tensors = list(params)
    state = AdamState.for_params([t.data for t in tensors], lr=train_cfg.lr)
    best = params.snapshot()
    stale = since_lr = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        total = 0.0
        try:
            for s in range(0, len(order), train_cfg.batch_size):
                idx = order[s:s + train_cfg.batch_size]
                loss = _teacher_forced_loss(params, config, X_tr[idx], P_tr[idx], rng)
                for t in tensors:
                    t.grad = None
                loss.backward()
                adam_step([t.data for t in tensors], [t.grad for t in tensors], state)
                total += loss.item() * len(idx)
            val = float(np.mean((predict(params, config, va, inputs=X_va) - Y_va) ** 2))
        except NumericError as exc:
            raise TrainingError(f"training diverged: {exc}", epoch) from None
        train_mse = total / len(tr)
        if not (np.isfinite(train_mse) and np.isfinite(val)):
            raise TrainingError("non-finite loss", epoch)
        result.history.append(EpochRecord(epoch, train_mse, val, state.lr))
        if log is not None:
            log(f"epoch {epoch:3d} train {train_mse:.4f} val {val:.4f} lr {state.lr:.2e} "
                f"({time.perf_counter() - t0:.1f}s)")
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best = params.snapshot()
            stale = since_lr = 0
        else:
            stale += 1
            since_lr += 1
            if stale >= train_cfg.patience:
                break
            if since_lr >= train_cfg.lr_patience:
                state.lr *= train_cfg.lr_factor
                since_lr = 0
    params.load(best)
    return result


def save_loss_log(result: TrainResult, path: str | Path) -> None:
    Path(path).write_text(result.loss_csv())
