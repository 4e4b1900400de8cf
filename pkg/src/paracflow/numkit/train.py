from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adam import AdamState, adam_step
from .autodiff import GradTape, Var
from .errors import NumericError


@dataclass
class TrainConfig:
    batch: int = 64
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    # multiplicative lr decay applied once per epoch; 1.0 keeps lr constant
    lr_decay: float = 1.0


def minibatch_train(
    params: list[Var],
    loss_fn: Callable[[np.ndarray], Var],
    n: int,
    cfg: TrainConfig,
) -> list[float]:
    """Shuffle-and-batch Adam loop.

    ``loss_fn(idx)`` builds the mean loss over the rows ``idx`` of the caller's
    data.  Returns the sample-weighted mean loss of every epoch.
    """
    if n < 1:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    lr = cfg.lr
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            with GradTape() as tape:
                loss = loss_fn(idx)
            grads = tape.gradient(loss, params)
            adam_step(state, params, grads, lr)
            total += float(loss.value) * len(idx)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise NumericError("training loss diverged")
        trace.append(epoch_loss)
        lr *= cfg.lr_decay
    return trace
