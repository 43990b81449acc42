"""Losses, Adam, the fixed-then-linear-decay schedule and the training loop with best-on-validation selection."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .metrics import ssim
from .model import PTNet, save_checkpoint
from .tensor import ParameterStore, Rng

log = logging.getLogger(__name__)


def _same_shape(pred, target, what):
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: shape mismatch {pred.shape} vs {target.shape}")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _same_shape(pred, target, "mse_loss")
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


def mae_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _same_shape(pred, target, "mae_loss")
    diff = pred - target
    return float(np.mean(np.abs(diff), dtype=np.float64)), np.sign(diff) / diff.size


LOSSES = {"mse": mse_loss, "mae": mae_loss}


@dataclass
class TrainPlan:
    batch_size: int = 4
    epochs_fixed: int = 5
    epochs_decay: int = 5
    lr: float = 2e-4
    loss: str = "mse"
    seed: int = 0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")
        if self.batch_size < 1 or self.epochs_fixed < 0 or self.epochs_decay < 0:
            raise ConfigError("batch_size must be positive and epoch counts non-negative")
        if self.epochs_fixed + self.epochs_decay == 0:
            raise ConfigError("training plan has no epochs")

    @property
    def epochs(self) -> int:
        return self.epochs_fixed + self.epochs_decay

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


def lr_at(step: int, plan: TrainPlan, steps_per_epoch: int) -> float:
    """Constant ``plan.lr`` for the fixed phase, then linear decay hitting 0 on the last step."""
    fixed = plan.epochs_fixed * steps_per_epoch
    decay = plan.epochs_decay * steps_per_epoch
    if step < fixed or decay == 0:
        return plan.lr
    k = min(step - fixed + 1, decay)
    return plan.lr * (1.0 - k / decay)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, store: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            {k: np.zeros_like(p) for k, p in store.items()},
            {k: np.zeros_like(p) for k, p in store.items()},
            0, beta1, beta2, eps,
        )


def adam_step(store: ParameterStore, opt: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update using the gradients currently in ``store``."""
    for name, g in store.grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name}")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, p in store.items():
        g = store.grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        if lr:
            p -= (lr / c1) * m / (np.sqrt(v / c2) + opt.eps)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in store.grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in store.grads.values():
            g *= scale
    return total


def select_best(val_scores) -> int:
    """Index of the highest score; ties resolve to the earliest."""
    if len(val_scores) == 0:
        raise ValueError("no validation scores")
    return int(np.argmax(np.asarray(val_scores, dtype=np.float64)))


def validation_ssim(model: PTNet, source, target, groups=None, batch_size=8) -> float:
    """Mean SSIM over volumes; slices sharing a ``groups`` label form one volume."""
    pred = np.clip(model.predict(source, batch_size), 0.0, 1.0)
    if groups is None:
        scores = [ssim(p[0], t[0]) for p, t in zip(pred, target)]
    else:
        groups = np.asarray(groups)
        scores = [ssim(pred[groups == g], target[groups == g]) for g in dict.fromkeys(groups.tolist())]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best_epoch: int
    best_val_ssim: float
    best_state: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train(
    model: PTNet,
    train_src: np.ndarray,
    train_tgt: np.ndarray,
    val_src: np.ndarray,
    val_tgt: np.ndarray,
    plan: TrainPlan,
    out_dir=None,
    val_groups=None,
    validate: Callable[[PTNet, int], float] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train ``model`` in place; on return it holds the best-validation weights.

    Epoch ``e`` (1-based) shuffles with seed ``plan.seed ^ e``. After every
    epoch the mean validation SSIM is computed (or taken from ``validate``),
    a checkpoint is written when ``out_dir`` is set, and one JSON line is
    appended to ``log.jsonl``.
    """
    n = len(train_src)
    if n == 0 or len(val_src) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    if train_src.shape != train_tgt.shape:
        raise DimensionError(f"source/target shape mismatch {train_src.shape} vs {train_tgt.shape}")
    loss_fn = LOSSES[plan.loss]
    bs = plan.batch_size
    spe = -(-n // bs)
    if max_steps is not None:
        spe = min(spe, max_steps)
    opt = OptimizerState.zeros_like(model.store, plan.beta1, plan.beta2, plan.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.jsonl").write_text("")
    result = TrainResult(-1, -np.inf, {})
    step = 0
    for epoch in range(1, plan.epochs + 1):
        order = Rng(plan.seed ^ epoch).permutation(n)
        epoch_losses = []
        lr = plan.lr
        for b in range(spe):
            idx = np.sort(order[b * bs : (b + 1) * bs])
            x = train_src[idx].astype(model.dtype, copy=False)
            y = train_tgt[idx].astype(model.dtype, copy=False)
            lr = lr_at(step, plan, spe)
            pred = model.forward(x)
            loss, grad = loss_fn(pred, y)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at step {step} (epoch {epoch}, lr {lr:.3g}); "
                    f"recent losses: {result.losses[-10:]}"
                )
            model.store.zero_grad()
            model.backward(grad)
            if plan.clip_norm is not None:
                clip_grad_norm(model.store, plan.clip_norm)
            adam_step(model.store, opt, lr)
            result.losses.append(loss)
            epoch_losses.append(loss)
            step += 1
        model.clear_cache()
        val = validate(model, epoch) if validate else validation_ssim(model, val_src, val_tgt, val_groups)
        row = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(epoch_losses)), "val_ssim": float(val)}
        result.log.append(row)
        log.info("epoch %d step %d lr %.3g loss %.5f val_ssim %.4f", epoch, step, lr, row["loss"], val)
        if out is not None:
            with open(out / "log.jsonl", "a") as fp:
                fp.write(json.dumps(row) + "\n")
            save_checkpoint(out / f"epoch_{epoch:03d}.ptck", model, {"epoch": epoch, "val_ssim": float(val)})
        if val > result.best_val_ssim:
            result.best_epoch, result.best_val_ssim = epoch, float(val)
            result.best_state = {k: p.copy() for k, p in model.store.items()}
    assert result.best_epoch == select_best([r["val_ssim"] for r in result.log]) + 1
    for k, p in result.best_state.items():
        model.store.params[k][...] = p
    if out is not None:
        save_checkpoint(out / "best.ptck", model, {"epoch": result.best_epoch, "val_ssim": result.best_val_ssim})
    return result
