"""Mini-batch training: MSE loss, Adam with global-norm clipping, early stopping."""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    patience: int = 50
    seed: int = 0
    clip_norm: float | None = 5.0

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch-norm statistics")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")
        return self


class OptimizerState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def mse_loss(y_hat, y):
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {y_hat.shape} vs target {y.shape}")
    diff = y_hat - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(params, grads, state, cfg):
    """Update ``params`` (dict of arrays) in place.

    Returns the global gradient norm actually applied, after clipping.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise TrainingError(f"non-finite gradient in {', '.join(bad)}")
    scale = 1.0
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k] * scale
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)
    return norm * scale


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    wall_time_ms: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    stopped_early: bool = False

    @property
    def epochs_completed(self):
        return len(self.records)

    def losses(self):
        return [(r.epoch, r.train_loss, r.val_loss) for r in self.records]

    def to_csv(self, path, include_time=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "wall_time_ms"])
            for r in self.records:
                val = "" if r.val_loss is None else f"{r.val_loss:.12g}"
                ms = f"{r.wall_time_ms:.3f}" if include_time else ""
                w.writerow([r.epoch, f"{r.train_loss:.12g}", val, ms])


def evaluate_loss(model, x, y, batch_size=256):
    """Infer-mode MSE over a whole set; the last partial batch is kept."""
    return mse_loss(model.predict(x, batch_size), y)[0]


def fit(model, train_set, val_set=None, cfg=None):
    """Train ``model`` in place.

    ``train_set`` and ``val_set`` are ``(x, y)`` pairs of normalized arrays.
    With a non-empty validation set the parameters from the best validation
    epoch are restored before returning.
    """
    cfg = (cfg or TrainConfig()).validate()
    x, y = train_set
    if len(x) == 0:
        raise ConfigError("training set is empty")
    if len(x) < cfg.batch_size:
        raise ConfigError(f"training set ({len(x)}) smaller than one batch ({cfg.batch_size})")
    has_val = val_set is not None and len(val_set[0]) > 0
    params = model.params
    state = OptimizerState(params.blocks)
    rng = np.random.default_rng(cfg.seed)
    n_batches = len(x) // cfg.batch_size
    history = TrainingLog()
    best = None
    wait = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x))
        total = 0.0
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            params.zero_grad()
            y_hat, _, caches = model.forward(x[idx], mode="train")
            loss, dy = mse_loss(y_hat, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}", batch_index=bi, epoch=epoch)
            model.backward(caches, dy)
            try:
                adam_step(params.blocks, params.grads, state, cfg)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {bi}", batch_index=bi, epoch=epoch) from None
            total += loss
        train_loss = total / n_batches
        val_loss = evaluate_loss(model, *val_set) if has_val else None
        history.records.append(EpochRecord(epoch, train_loss, val_loss, 1000.0 * (time.perf_counter() - t0)))
        log.debug("epoch %d train %.6g val %s", epoch, train_loss, val_loss)
        if has_val:
            if not np.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
            if history.best_val_loss is None or val_loss < history.best_val_loss:
                history.best_val_loss = val_loss
                history.best_epoch = epoch
                best = params.copy()
                wait = 0
            else:
                wait += 1
                if wait > cfg.patience:
                    history.stopped_early = True
                    break
    if best is not None:
        params.load_state(best)
    return history
