"""Finite-difference suites for every autodiff primitive, the full model and
the odds-ratio gradient identity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .models import ModelConfig, init_params, next_item_loss
from .orpo import PreferencePair, or_gradient_identity_check

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
IDENTITY_TOL = 1e-6


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # random upstream weights so every output element matters
    return ad.sum(out * w)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    def p(*shape, low=None):
        v = rng.normal(size=shape)
        if low is not None:
            v = np.abs(v) + low
        return ad.parameter(v)

    def case(fn, params, out_shape):
        w = rng.normal(size=out_shape)
        return (lambda ps: _weighted(fn(*ps), w)), params

    idx_adv = (np.array([0, 2, 2]), np.array([1, 0, 1]))
    cases = {
        "add (broadcast)": case(ad.add, [p(3, 4), p(4)], (3, 4)),
        "sub (broadcast)": case(ad.sub, [p(2, 1, 3), p(4, 3)], (2, 4, 3)),
        "mul (broadcast)": case(ad.mul, [p(3, 4), p(3, 1)], (3, 4)),
        "div": case(ad.div, [p(3, 4), p(3, 4, low=0.5)], (3, 4)),
        "neg": case(ad.neg, [p(5)], (5,)),
        "exp": case(ad.exp, [p(2, 3)], (2, 3)),
        "log": case(ad.log, [p(2, 3, low=0.3)], (2, 3)),
        "sigmoid": case(ad.sigmoid, [p(7)], (7,)),
        "tanh": case(ad.tanh, [p(7)], (7,)),
        "gelu": case(ad.gelu, [p(7)], (7,)),
        "softplus": case(ad.softplus, [p(7)], (7,)),
        "log1mexp": case(lambda a: ad.log1mexp(-a), [p(6, low=0.05)], (6,)),
        "power": case(lambda a: ad.power(a, -0.5), [p(4, low=0.5)], (4,)),
        "softmax": case(ad.softmax, [p(3, 5)], (3, 5)),
        "log_softmax": case(ad.log_softmax, [p(3, 5)], (3, 5)),
        "matmul 2d": case(ad.matmul, [p(3, 4), p(4, 2)], (3, 2)),
        "matmul batched": case(ad.matmul, [p(2, 3, 4), p(4, 5)], (2, 3, 5)),
        "matmul vector": case(ad.matmul, [p(4), p(4, 3)], (3,)),
        "sum axis": case(lambda a: ad.sum(a, axis=1), [p(3, 4)], (3,)),
        "mean keepdims": case(lambda a: ad.mean(a, axis=-1, keepdims=True), [p(3, 4)], (3, 1)),
        "getitem basic": case(lambda a: ad.getitem(a, (slice(None), slice(1, 3))), [p(3, 4)], (3, 2)),
        "getitem advanced": case(lambda a: ad.getitem(a, idx_adv), [p(3, 2)], (3,)),
        "take": case(lambda a: ad.take(a, np.array([[0, 2], [2, 2]])), [p(4, 3)], (2, 2, 3)),
        "concatenate": case(lambda a, b: ad.concatenate([a, b], axis=1), [p(2, 3), p(2, 2)], (2, 5)),
        "stack": case(lambda a, b: ad.stack([a, b], axis=0), [p(2, 3), p(2, 3)], (2, 2, 3)),
        "transpose": case(ad.transpose, [p(2, 3, 4)], (2, 4, 3)),
        "reshape": case(lambda a: ad.reshape(a, (6, 2)), [p(3, 4)], (6, 2)),
        "ssm_scan": case(
            lambda a, b, c, x: ad.ssm_scan(ad.sigmoid(a), b, c, x),
            [p(2, 5, 3), p(2, 5, 3), p(2, 5, 3), p(2, 5, 4)],
            (2, 5, 4),
        ),
    }
    return cases


def check_primitives(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: ad.finite_diff_check(f, ps) for name, (f, ps) in primitive_cases(rng).items()}


TOY_MODEL = ModelConfig(n_items=6, dim=4, state_dim=2, n_layers=1, max_len=5, init_std=0.5)


def check_model(seed: int = 0) -> float:
    params = init_params(TOY_MODEL, seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(1, TOY_MODEL.vocab_size, size=(3, TOY_MODEL.max_len))
    ids[0, :2] = 0  # exercise the padding mask
    targets = rng.integers(1, TOY_MODEL.vocab_size, size=3)
    plist = params.parameters()
    return ad.finite_diff_check(lambda ps: next_item_loss(ids, targets, params), plist)


def random_pair(rng: np.random.Generator, config: ModelConfig = TOY_MODEL) -> PreferencePair:
    n = int(rng.integers(1, config.max_len + 1))
    context = tuple(int(i) for i in rng.integers(1, config.vocab_size, size=n))
    winner, loser = (int(i) for i in rng.choice(np.arange(1, config.vocab_size), size=2, replace=False))
    return PreferencePair(0, context, winner, loser, "rating-pair")


def check_or_identity(n_instances: int = 50, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        params = init_params(TOY_MODEL, seed * 1000 + i)
        reports.append(or_gradient_identity_check(params, random_pair(rng)))
    return reports


def run_all(seed: int = 0, n_identity: int = 50) -> list[SuiteResult]:
    prim = check_primitives(seed)
    out = [SuiteResult(f"primitive {name}", err, PRIMITIVE_TOL) for name, err in prim.items()]
    out.append(SuiteResult("full model", check_model(seed), MODEL_TOL))
    identity = check_or_identity(n_identity, seed)
    out.append(SuiteResult("odds-ratio gradient identity", max(r.max_error for r in identity), IDENTITY_TOL))
    return out
