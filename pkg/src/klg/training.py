"""Mini-batch gradient descent loop with dev-based snapshot selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from klg.errors import DivergenceError, NumericError
from klg.tensor import Tensor, sgd_step, zero_grad


@dataclass
class FitResult:
    best_epoch: int
    best_dev: float
    init_dev: float
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def snapshot(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def restore(params: Mapping[str, Tensor], snap: Mapping[str, np.ndarray]) -> None:
    for name, t in params.items():
        t.data[...] = snap[name]


def fit(
    params: Mapping[str, Tensor],
    batch_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
    n_train: int,
    dev_score: Callable[[], float],
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> FitResult:
    """Shuffle, step, score on dev after each epoch; leave ``params`` at the best snapshot.

    The untrained initialisation competes as epoch 0, so ``epochs=0`` or a
    zero learning rate returns the initial parameters.
    """
    tensors: Sequence[Tensor] = list(params.values())
    init_dev = dev_score()
    best = (init_dev, 0, snapshot(params))
    result = FitResult(best_epoch=0, best_dev=init_dev, init_dev=init_dev)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        steps = 0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            zero_grad(tensors)
            try:
                loss = batch_loss(idx, rng)
            except NumericError:
                raise DivergenceError(epoch, steps + 1, float("nan")) from None
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, steps + 1, value)
            loss.backward()
            sgd_step(tensors, lr)
            total += value
            steps += 1
            result.step_losses.append(value)
        dev = dev_score()
        result.history.append(
            {"epoch": epoch, "train_loss": total / max(steps, 1), "dev_micro_f1": dev}
        )
        if dev > best[0]:
            best = (dev, epoch, snapshot(params))
    zero_grad(tensors)
    restore(params, best[2])
    result.best_dev, result.best_epoch = best[0], best[1]
    return result
