"""Dataset splitting, MSE training with Adam, and regression metrics.

Training is plain minibatch SGD-style: shuffle the train split each epoch
with a seeded generator, run forward + backward through the autodiff
graph, and apply bias-corrected Adam.  The model state returned is the
epoch with the lowest validation MSE.  Given one seed, the whole loop is
deterministic down to the checkpoint bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .frames import FrameDataset
from .vit import ViTModel, forward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mape_floor_n: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if len(self.split) != 3 or any(r < 0 for r in self.split):
            raise ValueError("split must be three non-negative ratios")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.mape_floor_n <= 0:
            raise ValueError("mape_floor_n must be positive")


@dataclass(frozen=True)
class Metrics:
    """rmse in newtons, r2 (None when the targets are constant), mape, n."""

    rmse: float
    r2: float | None
    mape: float
    n: int

    def to_dict(self) -> dict:
        return {"rmse_n": self.rmse, "r2": self.r2, "mape": self.mape, "n": self.n}


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_mse: float


def split_dataset(
    dataset: FrameDataset, ratios, seed: int
) -> tuple[FrameDataset, FrameDataset, FrameDataset]:
    """Shuffle once with the seed, then cut into train/val/test.

    Sizes are the floored ratio shares; the remainder goes to train.  The
    three parts are disjoint and cover the dataset.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(dataset)
    # Guard the floor against float dust: 0.7 * 1000 must allocate 700.
    counts = [int(math.floor(r * n + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    perm = np.random.default_rng(seed).permutation(n)
    c_train, c_val, _ = counts
    return (
        dataset.subset(perm[:c_train]),
        dataset.subset(perm[c_train : c_train + c_val]),
        dataset.subset(perm[c_train + c_val :]),
    )


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared errors over the batch, as a scalar graph node."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss: empty batch")
    diff = ad.sub(pred, target)
    sq = ad.mul(diff, diff)
    return ad.mean_over_axis(ad.reshape(sq, (sq.data.size,)), 0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p.data = p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


def _batch_mse(model: ViTModel, frames: np.ndarray, labels: np.ndarray, batch: int) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(frames), batch):
            pred = forward(frames[lo : lo + batch], model).data
            err = pred[:, 0].astype(np.float64) - labels[lo : lo + batch]
            total += float((err * err).sum())
    return total / len(frames)


def train(
    model: ViTModel, datasets, config: TrainConfig
) -> tuple[ViTModel, list[EpochLog]]:
    """Fit on datasets[0], select the best epoch on datasets[1].

    Returns the model holding the best-validation parameters and the
    per-epoch log.  With epochs = 0 the model is untouched and the log
    is empty.
    """
    train_ds, val_ds = datasets[0], datasets[1]
    if len(train_ds) == 0:
        raise ValueError("train split is empty")
    frames = train_ds.stacked().astype(model.dtype)
    labels = train_ds.labels.astype(np.float64)
    targets32 = train_ds.labels.astype(model.dtype).reshape(-1, 1)
    val_frames = val_ds.stacked().astype(model.dtype) if len(val_ds) else None
    val_labels = val_ds.labels.astype(np.float64) if len(val_ds) else None

    rng = np.random.default_rng(config.seed)
    state = init_adam_state(model.params)
    log: list[EpochLog] = []
    best_val = math.inf
    best_params: dict[str, np.ndarray] | None = None

    n = len(train_ds)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            pred = forward(frames[idx], model)
            loss = mse_loss(pred, Tensor(targets32[idx]))
            ad.zero_grad(model.params)
            ad.backward(loss)
            adam_step(
                model.params,
                {k: p.grad for k, p in model.params.items()},
                state,
                config,
            )
            sq_sum += float(loss.data) * len(idx)
        train_mse = sq_sum / n
        if val_frames is not None:
            val_mse = _batch_mse(model, val_frames, val_labels, max(config.batch_size, 64))
            if val_mse < best_val:
                best_val = val_mse
                best_params = {k: p.data.copy() for k, p in model.params.items()}
        else:
            val_mse = math.nan
        log.append(EpochLog(epoch, train_mse, val_mse))

    if best_params is not None:
        for name, p in model.params.items():
            p.data = best_params[name]
    return model, log


def predict_forces(model: ViTModel, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward in inference mode; returns float64 predictions, shape (N,)."""
    out = np.empty(len(frames), dtype=np.float64)
    with ad.no_grad():
        for lo in range(0, len(frames), batch_size):
            chunk = np.asarray(frames[lo : lo + batch_size], dtype=model.dtype)
            out[lo : lo + len(chunk)] = forward(chunk, model).data[:, 0]
    return out


def regression_metrics(preds, targets, mape_floor_n: float = 0.05) -> Metrics:
    """Metrics from raw prediction/target arrays, computed in float64.

    r2 is 1 - SS_res / SS_tot and is undefined (None) when every target
    is identical; mape divides by max(|target|, floor) so labels near
    zero cannot blow it up.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1:
        raise ValueError("preds and targets must be equal-length 1-D arrays")
    if preds.size == 0:
        raise ValueError("cannot compute metrics on an empty batch")
    if mape_floor_n <= 0:
        raise ValueError("mape_floor_n must be positive")
    err = preds - targets
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    r2 = None if ss_tot == 0.0 else 1.0 - float((err * err).sum()) / ss_tot
    mape = float(np.mean(np.abs(err) / np.maximum(np.abs(targets), mape_floor_n)))
    return Metrics(rmse=rmse, r2=r2, mape=mape, n=preds.size)


def evaluate(model: ViTModel, dataset: FrameDataset, mape_floor_n: float = 0.05) -> Metrics:
    """Regression metrics for a model on a labeled dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict_forces(model, dataset.stacked())
    return regression_metrics(preds, dataset.labels, mape_floor_n)
