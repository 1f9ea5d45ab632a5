"""Losses, an Adam optimizer, the training loop and evaluation metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, NormalizationStats, atomic_write_text, unzscore
from .model import _Network, load_state_dict, state_dict
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return T.mean(diff * diff)


def bce_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy from logits: ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    y = np.asarray(getattr(label, "data", label), dtype=logit.dtype)
    if logit.shape != y.shape:
        raise ValueError(f"shape mismatch: {logit.shape} vs {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    z = logit.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        prob = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
        return (g * (prob - y) / n,)

    return Tensor.from_op(np.asarray(loss.mean(), dtype=logit.dtype), (logit,), bw, "bce")


def sigmoid_np(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    task: str = "regression"
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    w1_steps: list[list[float]] = field(default_factory=list)  # per step, per channel
    train_loss_steps: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def epochs_completed(self) -> int:
        return len({r["epoch"] for r in self.rows})

    def split_rows(self, split: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        keys = ["epoch", "split", "loss"]
        extra = sorted({k for r in self.rows for k in r} - set(keys))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys + extra, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def _loss_fn(task: str):
    return mse_loss if task == "regression" else bce_loss


def predict(model: _Network, feats: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Raw outputs (normalized targets or logits) for precomputed features, eval mode."""
    was = model.training
    model.eval()
    out = [model.forward_features(Tensor(feats[i:i + batch_size])).data[:, 0]
           for i in range(0, len(feats), batch_size)]
    model.training = was
    return np.concatenate(out).astype(np.float64)


def evaluate(model: _Network, feats: np.ndarray, targets: np.ndarray, task: str,
             stats: NormalizationStats | None = None) -> dict[str, float]:
    """Loss in normalized space plus the task metrics in original units.

    ``targets`` are normalized (z-scores or 0/1 labels).
    """
    raw = predict(model, feats)
    if task == "regression":
        loss = float(np.mean((raw - targets) ** 2))
        if stats is not None:
            pred_u = unzscore(raw, stats.target_mean, stats.target_std)
            targ_u = unzscore(targets, stats.target_mean, stats.target_std)
        else:
            pred_u, targ_u = raw, targets
        rmse, r2 = metrics_regression(pred_u, targ_u)
        return {"loss": loss, "rmse": rmse, "r2": r2}
    z = raw
    loss = float(np.mean(np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))))
    acc, f1 = metrics_classification(sigmoid_np(z), targets)
    return {"loss": loss, "accuracy": acc, "f1": f1}


def train(model: _Network, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          stats: NormalizationStats | None = None, train_feats=None, val_feats=None) -> History:
    """Minibatch Adam with per-step fusion clamping and early stopping.

    The parameters of the best validation epoch are restored at the end.
    Precomputed features may be passed to skip re-running the (fixed)
    scattering front-end.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    stats = stats or train_set.fit_stats()
    if train_feats is None:
        train_feats = model.featurize(train_set.normalized_inputs(stats))
    if val_feats is None:
        val_feats = model.featurize(val_set.normalized_inputs(stats))
    y_train = train_set.normalized_targets(stats)
    y_val = val_set.normalized_targets(stats)
    loss_fn = _loss_fn(config.task)

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.lr, config.betas, config.eps)
    history = History()
    best, best_loss, bad_epochs, steps = None, math.inf, 0, 0
    n = len(train_feats)
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            target = Tensor(y_train[idx].reshape(-1, 1).astype(model.dtype))
            try:
                loss = loss_fn(model.forward_features(Tensor(train_feats[idx])), target)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError("loss is not finite")
                opt.zero_grad()
                T.backward(loss)
            except FloatingPointError as exc:
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, step {steps}: {exc}") from exc
            opt.step()
            model.after_step()
            steps += 1
            losses.append(value)
            history.train_loss_steps.append(value)
            history.w1_steps.append([float(w.data[0]) for w in model.fusion_weights()])
            if config.max_steps is not None and steps >= config.max_steps:
                break
        train_metrics = evaluate(model, train_feats, y_train, config.task, stats)
        val_metrics = evaluate(model, val_feats, y_val, config.task, stats)
        w1 = {f"w1_{c}": float(w.data[0]) for c, w in enumerate(model.fusion_weights())}
        history.rows.append({"epoch": epoch, "split": "train", **train_metrics, **w1})
        history.rows.append({"epoch": epoch, "split": "val", **val_metrics, **w1})
        log.info("epoch %d train %.4f val %.4f", epoch, train_metrics["loss"], val_metrics["loss"])
        if val_metrics["loss"] < best_loss:
            best_loss, best, bad_epochs = val_metrics["loss"], state_dict(model), 0
            history.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    if best is not None:
        load_state_dict(model, best)
    model.eval()
    return history


# -- metrics -----------------------------------------------------------------
def metrics_regression(preds, targets) -> tuple[float, float]:
    """RMSE and R^2 (NaN when the targets have zero variance)."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = float("nan") if ss_tot == 0 else 1.0 - float(np.sum((p - t) ** 2)) / ss_tot
    return rmse, r2


def metrics_classification(probs, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Accuracy in percent and F1 = 2TP / (2TP + FP + FN)."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    pred = (p >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    acc = 100.0 * float(np.mean(pred == y))
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2 * tp / denom
    return acc, float(f1)
