"""Maximum-likelihood training loop with Adam and validation early stopping."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import AdamState, adam_step, no_grad, value_and_grad
from .errors import InvalidParameterError, NumericError, TrainingFailure

log = logging.getLogger(__name__)

FULL_BATCH_LIMIT = 50_000


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    max_epochs: int = 5000
    patience: int = 100
    train_fraction: float = 0.9
    batch_size: int | None = None
    flow_layers: int = 5
    knots: int = 8
    nn_width: int = 50
    nn_depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidParameterError("train_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise InvalidParameterError("patience must be at least 1")
        if self.learning_rate <= 0:
            raise InvalidParameterError("learning_rate must be positive")
        if self.knots < 2 or self.flow_layers < 1 or self.nn_width < 1 or self.nn_depth < 0:
            raise InvalidParameterError("flow architecture sizes are out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def to_rows(self):
        return [(i, tr, va) for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss))]


def train_val_split(n: int, train_fraction: float, rng: np.random.Generator, strata=None):
    """Random split; with ``strata`` each level is split separately."""
    if strata is None:
        perm = rng.permutation(n)
        n_train = int(round(train_fraction * n))
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    strata = np.asarray(strata)
    train, val = [], []
    for level in np.unique(strata):
        rows = np.flatnonzero(strata == level)
        rows = rows[rng.permutation(len(rows))]
        n_train = int(round(train_fraction * len(rows)))
        n_train = min(max(n_train, 1), len(rows) - 1) if len(rows) > 1 else len(rows)
        train.append(rows[:n_train])
        val.append(rows[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def fit(params, nll, train_idx, val_idx, cfg: TrainConfig, rng: np.random.Generator,
        label: str = "flow", on_epoch=None) -> History:
    """Minimise ``nll(rows)`` over ``params``; restores the best-validation values.

    ``nll`` maps an index array to a scalar Tensor (mean negative
    log-likelihood of those rows). Ties in validation loss keep the earlier
    epoch. ``on_epoch(epoch)`` runs before each epoch.
    """
    state = AdamState.fresh(params, lr=cfg.learning_rate)
    history = History()
    best_val = np.inf
    best_values = [p.value.copy() for p in params]
    batch = cfg.batch_size or (len(train_idx) if len(train_idx) <= FULL_BATCH_LIMIT else 10_000)
    for epoch in range(cfg.max_epochs):
        if on_epoch is not None:
            on_epoch(epoch)
        order = train_idx if batch >= len(train_idx) else train_idx[rng.permutation(len(train_idx))]
        losses, weights = [], []
        for start in range(0, len(order), batch):
            rows = order[start:start + batch]
            try:
                loss, grads = value_and_grad(lambda: nll(rows), params)
                adam_step(params, grads, state)
            except NumericError as exc:
                raise TrainingFailure(f"{label}: training diverged at epoch {epoch}: {exc}",
                                      epoch=epoch) from exc
            losses.append(loss)
            weights.append(len(rows))
        with no_grad():
            val = float(nll(val_idx).value)
        if not np.isfinite(val):
            raise TrainingFailure(f"{label}: non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.train_loss.append(float(np.average(losses, weights=weights)))
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            history.best_epoch = epoch
            best_values = [p.value.copy() for p in params]
        elif epoch - history.best_epoch >= cfg.patience:
            break
    for p, v in zip(params, best_values):
        p.value[...] = v
    log.info("%s: stopped after %d epochs, best epoch %d (val %.5f)",
             label, len(history.val_loss), history.best_epoch, best_val)
    return history
