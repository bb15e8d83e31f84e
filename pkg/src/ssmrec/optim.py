"""Universal Stochastic Gradient Method plus SGD/Adam baselines.

All optimizer math runs on one flat float64 vector; ``flatten``/``unflatten``
move between that vector and a list of parameter tensors in a fixed order.
Norms are Euclidean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

TRACE_COLUMNS = ("step", "epoch_scaled_x", "batch_size", "loss", "beta_hat", "H", "r")


def flatten(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([p.value.reshape(-1) for p in params]) if params else np.zeros(0)


def unflatten(vec: np.ndarray, params: Sequence[Tensor]) -> None:
    """Write ``vec`` back into ``params`` in place."""
    pos = 0
    for p in params:
        size = p.value.size
        p.value[...] = vec[pos:pos + size].reshape(p.shape)
        pos += size
    if pos != vec.size:
        raise ValueError(f"vector of length {vec.size} does not match parameters of total size {pos}")


def flatten_grads(grads: dict, params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([grads[p].reshape(-1) for p in params]) if params else np.zeros(0)


# ---------------------------------------------------------------- USGM


@dataclass
class UsgmState:
    x: np.ndarray
    g: np.ndarray
    H: float
    D: float
    k: int = 0
    batch: int = 1  # batch size that produced g

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("diameter D must be positive")
        if self.H < 0:
            raise ValueError("H must be nonnegative")


@dataclass(frozen=True)
class BetaObservation:
    batch_size: int
    beta_hat: float
    step: int
    r: float = 1.0


def usgm_init(x0: np.ndarray, g0: np.ndarray, diameter: float, lr0: float, batch_size: int = 1) -> UsgmState:
    """Start state with ``H_0 = 1 / lr0``; ``batch_size`` is the batch behind ``g0``."""
    if lr0 <= 0:
        raise ValueError("initial learning rate must be positive")
    return UsgmState(
        x=np.array(x0, dtype=np.float64),
        g=np.array(g0, dtype=np.float64),
        H=1.0 / lr0,
        D=float(diameter),
        batch=batch_size,
    )


def usgm_propose(state: UsgmState) -> np.ndarray:
    """Minimizer of <g, x> + H/2 ||x - x_k||^2 over R^n."""
    if state.H <= 0:
        raise ValueError("usgm_propose: H must be positive")
    return state.x - state.g / state.H


def compute_beta_hat(g_next: np.ndarray, g: np.ndarray, x_next: np.ndarray, x: np.ndarray) -> float:
    g_next, g, x_next, x = (np.asarray(v, dtype=np.float64) for v in (g_next, g, x_next, x))
    if not (g_next.shape == g.shape == x_next.shape == x.shape):
        raise ValueError(
            f"compute_beta_hat: dimension mismatch {g_next.shape}, {g.shape}, {x_next.shape}, {x.shape}"
        )
    return float(np.dot(g_next - g, x_next - x))


def update_H(H: float, beta_hat: float, r: float, D: float) -> float:
    half_r2 = 0.5 * r * r
    return H + max(beta_hat - H * half_r2, 0.0) / (D * D + half_r2)


def usgm_step(
    state: UsgmState,
    oracle: Callable[[np.ndarray], np.ndarray],
    batch_size: int | None = None,
) -> tuple[UsgmState, BetaObservation]:
    """One iteration: propose, query the oracle at the proposal, update H.

    ``batch_size`` is the batch the oracle draws for the new gradient
    (defaults to the previous one).  The emitted observation pairs
    ``beta_hat_{k+1}`` with ``B_k``, the batch behind ``g_k``, because the
    noise in ``g_k`` sets the step and dominates the probe.
    """
    if batch_size is None:
        batch_size = state.batch
    x_next = usgm_propose(state)
    g_next = np.asarray(oracle(x_next), dtype=np.float64)
    diff = x_next - state.x
    r = float(np.linalg.norm(diff))
    beta = float(np.dot(g_next - state.g, diff))
    H_next = update_H(state.H, beta, r, state.D)
    k = state.k + 1
    new = replace(state, x=x_next, g=g_next, H=H_next, k=k, batch=batch_size)
    return new, BetaObservation(batch_size=state.batch, beta_hat=beta, step=k, r=r)


# ---------------------------------------------------------------- baselines


def sgd_step(x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    return x - lr * g


@dataclass
class AdamState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(x0: np.ndarray, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    x0 = np.array(x0, dtype=np.float64)
    return AdamState(x=x0, m=np.zeros_like(x0), v=np.zeros_like(x0), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, g: np.ndarray, lr: float | None = None) -> AdamState:
    """Bias-corrected Adam.  ``lr`` overrides the stored rate (schedules)."""
    lr = state.lr if lr is None else lr
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    x = state.x - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, x=x, m=m, v=v, t=t)


def inverse_sqrt_lr(base_lr: float, step: int, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then decay as ``sqrt(warmup / step)``."""
    step = max(step, 1)
    if warmup <= 0:
        return base_lr / math.sqrt(step)
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


# ---------------------------------------------------------------- traces


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TraceWriter:
    """CSV writer with fixed columns and round-trip float formatting."""

    def __init__(self, path, columns: Sequence[str]):
        self.columns = tuple(columns)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown trace columns: {sorted(unknown)}")
        self._writer.writerow([_fmt(row.get(c)) for c in self.columns])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
