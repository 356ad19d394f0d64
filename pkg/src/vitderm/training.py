"""Fine-tuning loop: SGD/Adam, cross-entropy (+ optional L2), and three callbacks.

Callback order after every epoch's validation pass:

1. checkpoint  - save weights whenever validation accuracy strictly improves
2. lr policy   - reduce-on-plateau (val loss) or fixed step decay
3. early stop  - halt after ``early_stop_patience`` epochs without val-loss improvement
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, NonFiniteError, TrainingDivergedError
from .manifest import ArrayDataset
from .model import ViTModel
from .weights import save_weights

logger = logging.getLogger(__name__)

HEAD_DENSE_WEIGHTS = ("head.dense1.w", "head.dense2.w")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: Optional[float] = None  # None -> 0.01 for sgd, 0.001 for adam
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    batch_size: int = 16
    epochs: int = 20
    steps_per_epoch: Optional[int] = None
    l2_lambda: float = 0.0
    l2_scope: str = "head"
    lr_policy: str = "plateau"
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    min_lr: float = 1e-6
    scheduler_every: int = 5
    scheduler_factor: float = 0.5
    early_stop_patience: Optional[int] = 5
    freeze_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.learning_rate is None:
            self.learning_rate = 0.01 if self.optimizer == "sgd" else 0.001
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch norm)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be positive")
        if self.lr_policy not in ("plateau", "scheduler", "none"):
            raise ConfigurationError(f"lr_policy must be plateau, scheduler or none, got {self.lr_policy!r}")
        if self.l2_scope not in ("head", "all"):
            raise ConfigurationError("l2_scope must be 'head' or 'all'")
        if self.l2_lambda < 0:
            raise ConfigurationError("l2_lambda must be nonnegative")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be positive (or None to disable)")
        if not 0 < self.plateau_factor < 1 or not 0 < self.scheduler_factor <= 1:
            raise ConfigurationError("lr reduction factors must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, momentum: float,
             velocity: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    """In place: ``v <- momentum * v - lr * g``; ``w <- w + v``."""
    for w, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g
        w += v
    return params


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7) -> Sequence[np.ndarray]:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for w, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Optimizer:
    """Applies sgd_step / adam_step to a fixed list of model tensors."""

    def __init__(self, tensors: Sequence[T.Tensor], config: TrainConfig):
        self.tensors = list(tensors)
        self.config = config
        self.lr = float(config.learning_rate)
        arrays = [t.data for t in self.tensors]
        if config.optimizer == "sgd":
            self.velocity = [np.zeros_like(a) for a in arrays]
        else:
            self.adam = AdamState.like(arrays)

    def step(self) -> None:
        params = [t.data for t in self.tensors]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        if self.config.optimizer == "sgd":
            sgd_step(params, grads, self.lr, self.config.momentum, self.velocity)
        else:
            c = self.config
            adam_step(params, grads, self.adam, self.lr, c.beta1, c.beta2, c.adam_eps)


# ---------------------------------------------------------------------------
# callbacks
# ---------------------------------------------------------------------------

@dataclass
class CallbackState:
    lr: float
    min_lr: float = 1e-6
    best_val_loss: float = math.inf
    epochs_since_loss_improve: int = 0
    plateau_best: float = math.inf
    plateau_counter: int = 0
    best_val_acc: float = -math.inf
    best_epoch: Optional[int] = None
    checkpoint_path: Optional[str] = None
    epoch: int = 0
    stop: bool = False


def early_stopping_update(state: CallbackState, val_loss: float, patience: int = 5) -> str:
    """Returns ``"stop"`` once ``patience`` consecutive epochs fail to strictly beat the best loss."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_loss_improve = 0
    else:
        state.epochs_since_loss_improve += 1
    if state.epochs_since_loss_improve >= patience:
        state.stop = True
    return "stop" if state.stop else "continue"


def reduce_lr_on_plateau(state: CallbackState, val_loss: float, patience: int = 3, factor: float = 0.1,
                         min_lr: Optional[float] = None) -> float:
    min_lr = state.min_lr if min_lr is None else min_lr
    if val_loss < state.plateau_best:
        state.plateau_best = val_loss
        state.plateau_counter = 0
    else:
        state.plateau_counter += 1
        if state.plateau_counter >= patience:
            state.lr = max(state.lr * factor, min_lr)
            state.plateau_counter = 0
    return state.lr


def step_decay_lr(initial_lr: float, epochs_done: int, every: int = 5, factor: float = 0.5) -> float:
    """Learning rate after ``epochs_done`` completed epochs."""
    return initial_lr * factor ** (epochs_done // every)


def checkpoint_update(state: CallbackState, val_acc: float, model: Optional[ViTModel], path, epoch: int = 0) -> bool:
    """Save ``model`` to ``path`` iff ``val_acc`` strictly beats the best so far."""
    if not val_acc > state.best_val_acc:
        return False
    if model is not None and path is not None:
        save_weights(model, path)
        state.checkpoint_path = str(path)
    state.best_val_acc = val_acc
    state.best_epoch = epoch
    return True


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class History:
    epochs: List[EpochRecord] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: Optional[int] = None
    best_val_acc: Optional[float] = None

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> List[float]:
        return [getattr(e, name) for e in self.epochs]

    def to_csv(self, path=None, include_seconds: bool = False) -> str:
        """CSV text (also written to ``path`` when given).

        Wall-clock seconds are left out by default so that identical seeded
        runs produce byte-identical files.
        """
        cols = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"]
        if include_seconds:
            cols.append("seconds")
        lines = [",".join(cols)]
        for e in self.epochs:
            lines.append(",".join(str(e.epoch) if c == "epoch" else repr(float(getattr(e, c))) for c in cols))
        lines.append(f"# epochs_run={len(self.epochs)}")
        lines.append(f"# best_epoch={self.best_epoch}")
        lines.append(f"# best_val_acc={self.best_val_acc!r}")
        lines.append(f"# stopped_early={self.stopped_early}")
        for w in self.warnings:
            lines.append(f"# warning={w}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def l2_penalty(model: ViTModel, scope: str = "head") -> Optional[T.Tensor]:
    """``sum ||W||^2`` over head dense weights (or every weight matrix with scope='all')."""
    if scope == "head":
        names = HEAD_DENSE_WEIGHTS
    else:
        names = [n for n in model.params if n.rsplit(".", 1)[-1].startswith("w")]
    total = None
    for n in names:
        w = model.params[n]
        term = T.tsum(w * w)
        total = term if total is None else total + term
    return total


def _batches(n: int, batch_size: int, order: np.ndarray) -> List[np.ndarray]:
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample: fold it into the previous batch
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def evaluate(model: ViTModel, data: ArrayDataset, batch_size: int = 64) -> Tuple[float, float, np.ndarray]:
    """Eval-mode ``(loss, accuracy, probabilities)`` over a dataset."""
    probs = model.predict_proba(data.images, batch_size)
    p_true = np.clip(probs[np.arange(len(data)), data.labels].astype(np.float64), T.CE_EPS, None)
    loss = float(-np.mean(np.log(p_true)))
    preds = np.argmax(probs, axis=1)
    acc = float(np.mean(preds == data.labels))
    return loss, acc, probs


def train(model: ViTModel, splits, config: TrainConfig, checkpoint_path=None):
    """Fit ``model`` on ``splits.train`` and monitor ``splits.val``.

    ``splits`` is anything with ``train`` and ``val`` attributes holding
    :class:`ArrayDataset` objects.  Returns ``(model, best_checkpoint_path,
    history)``; the model is left at its final-epoch weights.
    """
    train_set, val_set = splits.train, splits.val
    if len(train_set) < 2 or len(val_set) < 1:
        raise DataError("training needs at least 2 training samples and 1 validation sample")

    n_classes = model.config.num_classes
    lam = config.l2_lambda if config.l2_lambda > 0 else model.config.l2_lambda
    trainable, frozen = [], []
    for n, p in model.params.items():
        (frozen if config.freeze_backbone and not n.startswith("head.") else trainable).append(p)
    for p in frozen:
        p.requires_grad = False
    optimizer = Optimizer(trainable, config)
    state = CallbackState(lr=optimizer.lr, min_lr=config.min_lr)
    history = History()
    shuffle_rng = np.random.default_rng(config.seed)

    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            lr_used = optimizer.lr
            order = shuffle_rng.permutation(len(train_set))
            batches = _batches(len(train_set), config.batch_size, order)
            if config.steps_per_epoch is not None:
                batches = batches[:config.steps_per_epoch]
            loss_sum, correct, seen = 0.0, 0, 0
            for b, idx in enumerate(batches, 1):
                x, y = train_set.images[idx], train_set.labels[idx]
                step_rng = np.random.default_rng([config.seed, epoch, b])
                model.zero_grad()
                try:
                    logits = model.logits(x, training=True, rng=step_rng)
                    loss = T.softmax_cross_entropy(logits, T.one_hot(y, n_classes))
                except NonFiniteError:
                    raise TrainingDivergedError(epoch, b, math.nan) from None
                data_loss = float(loss.data)
                if lam > 0:
                    loss = loss + l2_penalty(model, config.l2_scope) * lam
                if not math.isfinite(float(loss.data)):
                    raise TrainingDivergedError(epoch, b, float(loss.data))
                loss.backward()
                optimizer.step()
                loss_sum += data_loss * len(idx)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
                seen += len(idx)

            val_loss, val_acc, _ = evaluate(model, val_set)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, 0, val_loss)

            try:
                checkpoint_update(state, val_acc, model, checkpoint_path, epoch)
            except OSError as exc:
                msg = f"epoch {epoch}: checkpoint save failed: {exc}"
                logger.warning(msg)
                history.warnings.append(msg)
            if config.lr_policy == "plateau":
                optimizer.lr = reduce_lr_on_plateau(state, val_loss, config.plateau_patience,
                                                     config.plateau_factor, config.min_lr)
            elif config.lr_policy == "scheduler":
                optimizer.lr = step_decay_lr(float(config.learning_rate), epoch, config.scheduler_every,
                                             config.scheduler_factor)
                state.lr = optimizer.lr
            decision = "continue"
            if config.early_stop_patience is not None:
                decision = early_stopping_update(state, val_loss, config.early_stop_patience)

            history.epochs.append(EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc,
                                              lr_used, time.perf_counter() - started))
            logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.3g", epoch,
                        loss_sum / seen, correct / seen, val_loss, val_acc, lr_used)
            if decision == "stop":
                history.stopped_early = True
                break
    finally:
        for p in frozen:
            p.requires_grad = True

    history.best_epoch = state.best_epoch
    history.best_val_acc = None if state.best_epoch is None else state.best_val_acc
    return model, state.checkpoint_path, history
