"""Adaptive batch-size controller driven by the USGM curvature probe.

Each USGM step yields an observation ``(B, beta_hat)``.  The controller fits

    beta_hat ~= c1 + c2 / sqrt(B)

by exponentially weighted least squares (newest observation weight 1, each
older one discounted by ``1 - alpha``), grows the batch by one base batch per
step while the noise term ``c2 / sqrt(B)`` is still large relative to ``c1``,
then holds the batch fixed until the epoch ends, where it shrinks by
``shrink``.  Batches are always whole multiples of the base batch so a
standard loader can serve them.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optim import BetaObservation

CONTROLLER_COLUMNS = ("step", "B", "c1", "c2", "plateaued", "B_star", "epoch")
EPS_FLOOR = 1e-12


class InsufficientBatchDiversity(ValueError):
    pass


def wls_fit(history: Sequence[BetaObservation], alpha: float) -> tuple[float, float]:
    """Weighted least-squares intercept and slope of beta_hat against 1/sqrt(B)."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    if len(history) < 2 or len({o.batch_size for o in history}) < 2:
        raise InsufficientBatchDiversity("insufficient batch diversity")
    K = len(history) - 1
    x = np.array([1.0 / math.sqrt(o.batch_size) for o in history])
    y = np.array([o.beta_hat for o in history])
    w = (1.0 - alpha) ** (K - np.arange(K + 1, dtype=np.float64))
    sw = w.sum()
    x_bar = (w * x).sum() / sw
    y_bar = (w * y).sum() / sw
    sxx = (w * (x - x_bar) ** 2).sum()
    if sxx <= 0.0:
        raise InsufficientBatchDiversity("insufficient batch diversity")
    c2 = (w * (x - x_bar) * (y - y_bar)).sum() / sxx
    c1 = y_bar - c2 * x_bar
    return float(c1), float(c2)


@dataclass
class BatchController:
    base: int
    alpha: float = 0.01
    shrink: float = 2.0
    tol: float = 0.1
    history_scope: str = "epoch"  # or "all"
    min_observations: int = 10
    batch: int = 0
    history: list[BetaObservation] = field(default_factory=list)
    epoch_start: int = 0
    c1: float | None = None
    c2: float | None = None
    plateaued: bool = False
    best_batch: int | None = None
    epoch: int = 0

    def __post_init__(self):
        if self.base < 1:
            raise ValueError("base batch size must be a positive integer")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.shrink <= 1.0:
            raise ValueError("shrink divisor must exceed 1")
        if self.tol <= 0.0:
            raise ValueError("plateau tolerance must be positive")
        if self.history_scope not in ("epoch", "all"):
            raise ValueError("history_scope must be 'epoch' or 'all'")
        if self.batch == 0:
            self.batch = self.base
        if self.batch % self.base or self.batch < self.base:
            raise ValueError("batch must be a positive multiple of the base batch")

    @property
    def fit_window(self) -> list[BetaObservation]:
        return self.history[self.epoch_start:] if self.history_scope == "epoch" else self.history

    def observe(self, obs: BetaObservation) -> None:
        # no movement means no information about either term
        if obs.r == 0.0:
            return
        self.history.append(obs)

    def decide_batch(self) -> int:
        if self.plateaued:
            return self.best_batch
        window = self.fit_window
        try:
            c1, c2 = wls_fit(window, self.alpha)
        except InsufficientBatchDiversity:
            self.c1 = self.c2 = None
            self.batch += self.base
            return self.batch
        c2 = max(c2, 0.0)
        self.c1, self.c2 = c1, c2
        noisy = c2 / math.sqrt(self.batch) > self.tol * max(c1, EPS_FLOOR)
        if noisy or len(window) < self.min_observations:
            self.batch += self.base
        else:
            self.plateaued = True
            self.best_batch = self.batch
        return self.batch

    def epoch_reset(self) -> None:
        units = self.batch / self.base / self.shrink
        self.batch = self.base * max(1, math.floor(units + 0.5))
        self.plateaued = False
        self.best_batch = None
        self.epoch += 1
        self.epoch_start = len(self.history)


# ---------------------------------------------------------------- loading


class BaseBatchLoader:
    """Epoch-shuffled index batches of a fixed base size.

    A trailing partial batch is dropped unless ``drop_last`` is false, so
    every macro-batch is a whole multiple of the base size.
    """

    def __init__(self, n_samples: int, base: int, seed: int = 0, drop_last: bool = True):
        if n_samples <= 0 or base <= 0:
            raise ValueError("n_samples and base must be positive")
        if drop_last and n_samples < base:
            raise ValueError("fewer samples than one base batch")
        self.n_samples = n_samples
        self.base = base
        self.seed = seed
        self.drop_last = drop_last

    def epoch(self, epoch: int) -> deque[np.ndarray]:
        order = np.random.default_rng([self.seed, epoch]).permutation(self.n_samples)
        stop = self.n_samples - self.n_samples % self.base if self.drop_last else self.n_samples
        return deque(order[i:i + self.base] for i in range(0, stop, self.base))


def make_macrobatch(queue: deque[np.ndarray], batch: int, base: int) -> tuple[np.ndarray, bool]:
    """Concatenate ``batch // base`` base batches from ``queue``.

    Returns ``(indices, epoch_done)``; the final macro-batch of an epoch may
    be partial.
    """
    if batch % base:
        raise ValueError(f"batch size {batch} is not a multiple of base {base}")
    m = batch // base
    parts = [queue.popleft() for _ in range(min(m, len(queue)))]
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return idx, not queue


def scaled_epoch_axis(samples_consumed: int, dataset_size: int) -> float:
    if dataset_size <= 0:
        raise ValueError("dataset_size must be positive")
    return samples_consumed / dataset_size
