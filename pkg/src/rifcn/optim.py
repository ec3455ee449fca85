"""Parameter updates (momentum SGD, schedule-decayed Nadam) and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    IGNORE,
    RiFCNModel,
    backprop,
    compute_loss,
    forward,
    predict,
    probs_to_labels,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


def _check_congruent(params: dict, grads: dict, *buffers: dict):
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name!r} missing or mis-shaped")
        for buf in buffers:
            if buf[name].shape != p.shape:
                raise ValueError(f"optimizer buffer for {name!r} mis-shaped")


@dataclass
class SgdMomentumState:
    eta: float = 0.01
    gamma: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: dict, grads: dict, state: SgdMomentumState) -> None:
    """v <- gamma*v + eta*g ; w <- w - v (in place)."""
    for name, p in params.items():
        state.velocity.setdefault(name, np.zeros_like(p))
    _check_congruent(params, grads, state.velocity)
    for name, p in params.items():
        v = state.velocity[name]
        v *= state.gamma
        v += state.eta * grads[name]
        p -= v


@dataclass
class NadamState:
    eta: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    t: int = 0
    mu_product: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def nadam_step(params: dict, grads: dict, state: NadamState) -> None:
    """One Nesterov-Adam update with the multiplicative momentum schedule.

    mu_t = beta1 * (1 - 0.5 * 0.96 ** (t * decay)), products of mu debias the
    gradient and first moment; the second moment uses the usual 1 - beta2**t.
    """
    for name, p in params.items():
        state.m.setdefault(name, np.zeros_like(p))
        state.v.setdefault(name, np.zeros_like(p))
    _check_congruent(params, grads, state.m, state.v)

    state.t += 1
    t, b1, b2 = state.t, state.beta1, state.beta2
    mu_t = b1 * (1.0 - 0.5 * 0.96 ** (t * state.schedule_decay))
    mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * state.schedule_decay))
    prod_t = state.mu_product * mu_t
    prod_next = prod_t * mu_next
    state.mu_product = prod_t
    v_corr = 1.0 - b2 ** t

    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        g_hat = g / (1.0 - prod_t)
        m_hat = m / (1.0 - prod_next)
        m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat
        p -= (state.eta * m_bar / (np.sqrt(v / v_corr) + state.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    val_fraction: float = 0.10
    early_stop_patience: int | None = 5
    seed: int = 0
    lr: float = 2e-4
    augment: bool = True

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    n_train: int = 0
    n_val: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,train_acc,val_acc"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.train_acc!r},{e.val_acc!r}"
            )
        return "\n".join(lines) + "\n"


def split_train_val(n: int, val_fraction: float, rng: np.random.Generator):
    """Seeded sample-level split; returns (train_idx, val_idx).

    The validation set is empty only when a single sample exists.
    """
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(model: RiFCNModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 8) -> tuple[float, float]:
    """Mean loss and pixel accuracy over supervised pixels, batch by batch."""
    nll_sum, correct, total = 0.0, 0, 0
    for s in range(0, len(images), batch_size):
        x, y = images[s:s + batch_size], labels[s:s + batch_size]
        probs = predict(model, x)
        mask = y != IGNORE
        count = int(mask.sum())
        if count == 0:
            continue
        nll_sum += compute_loss(probs, y) * count
        correct += int(((probs_to_labels(probs) == y) & mask).sum())
        total += count
    if total == 0:
        return math.nan, math.nan
    return nll_sum / total, correct / total


def train(model: RiFCNModel, dataset, cfg: TrainConfig, on_epoch=None) -> TrainReport:
    """Mini-batch Nadam training with validation split and early stopping.

    ``dataset`` is a sequence of ``(image (c, h, w), labels (h, w))`` pairs.
    Parameters are updated in place; with early stopping enabled the model
    ends at its best-validation-loss state.
    """
    from .data_io import augment_flips

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    images = np.stack([np.asarray(img) for img, _ in dataset]).astype(model.dtype)
    labels = np.stack([np.asarray(lab) for _, lab in dataset]).astype(np.int64)
    div = 2 ** model.levels
    if images.shape[2] % div or images.shape[3] % div:
        raise ValueError(f"patch size {images.shape[2:]} not divisible by 2^L = {div}")

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_train_val(len(images), cfg.val_fraction, rng)
    if len(val_idx) == 0:
        log.warning("single sample: validating on the training sample")
        val_idx = train_idx
    report = TrainReport(n_train=len(train_idx), n_val=len(val_idx))
    state = NadamState(eta=cfg.lr)
    best_loss, best_params, wait = math.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        aug_seed = int(rng.integers(2 ** 63))
        x_ep, y_ep = images[order], labels[order]
        if cfg.augment:
            pairs = augment_flips(list(zip(x_ep, y_ep)), aug_seed)
            x_ep = np.stack([p[0] for p in pairs])
            y_ep = np.stack([p[1] for p in pairs])
        for s in range(0, len(order), cfg.batch_size):
            xb, yb = x_ep[s:s + cfg.batch_size], y_ep[s:s + cfg.batch_size]
            if not (yb != IGNORE).any():
                continue
            probs, cache = forward(model, xb)
            loss = compute_loss(probs, yb)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}")
            grads = backprop(model, cache, probs, yb)
            nadam_step(model.params, grads, state)
            model.bump()
            if not all(np.isfinite(p).all() for p in model.params.values()):
                raise NonFiniteLossError(f"non-finite parameters at epoch {epoch}")

        tr_loss, tr_acc = evaluate(model, images[train_idx], labels[train_idx], cfg.batch_size)
        va_loss, va_acc = evaluate(model, images[val_idx], labels[val_idx], cfg.batch_size)
        if not math.isfinite(tr_loss):
            raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
        stats = EpochStats(epoch, tr_loss, va_loss, tr_acc, va_acc)
        report.epochs.append(stats)
        log.info("epoch %d train_loss=%.5f val_loss=%.5f train_acc=%.4f val_acc=%.4f",
                 epoch, tr_loss, va_loss, tr_acc, va_acc)
        if on_epoch is not None:
            on_epoch(stats)

        if cfg.early_stop_patience is None:
            report.best_epoch = epoch
            continue
        if va_loss < best_loss:
            best_loss, wait = va_loss, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= max(1, cfg.early_stop_patience):
                report.stopped_early = True
                break

    if best_params is not None:
        for k, v in best_params.items():
            model.params[k][...] = v
        model.bump()
    return report
