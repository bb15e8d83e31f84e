"""Odds-ratio preference optimization for the sequential recommender.

Probabilities inside the odds are length-normalised: ``p = exp(mean log
P(y_t | x, y_<t))``.  All odds math stays in log space, with
``log odds = log p - log(1 - p)``.

Gradient identity.  Writing ``z = log odds_w - log odds_l`` and
``L_OR = -log sigmoid(z)``, one has ``grad log odds(p) = grad log p / (1 - p)``,
so ``grad z = h`` and ``dL_OR/dz = -(1 - sigmoid(z)) = -delta`` with
``delta = 1 / (1 + odds_w / odds_l)``.  Hence ``grad L_OR = -delta * h``.  The
product ``delta * h`` without the minus sign is the gradient of
``log sigmoid(z)``, the quantity being maximised.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .data import InteractionSequence
from .models import ModelParams, logits, model_forward, pad_batch
from .optim import adam_init, adam_step, flatten, flatten_grads, inverse_sqrt_lr, unflatten

SATURATION = 1e-12
SOURCES = ("rating-pair", "negative-sampled")


class SaturationError(ValueError):
    pass


@dataclass
class OrpoConfig:
    lam: float = 0.05
    lr: float = 5e-6
    warmup: int = 100
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("lr, epochs and batch_size must be positive; warmup nonnegative")


@dataclass(frozen=True)
class PreferencePair:
    user: int
    context: tuple[int, ...]
    winner: int
    loser: int
    source: str

    def __post_init__(self):
        if self.winner == self.loser:
            raise ValueError("winner and loser must differ")
        if not self.context:
            raise ValueError("context must be nonempty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown pair source {self.source!r}")


# ---------------------------------------------------------------- odds math


def _check_saturation(avg_logp: np.ndarray) -> None:
    if (np.asarray(avg_logp) >= math.log1p(-SATURATION)).any():
        raise SaturationError("probability saturated at 1; odds undefined")


def avg_log_likelihood(params: ModelParams, context: Sequence[int], targets: Sequence[int]) -> Tensor:
    """Mean of ``log P(y_t | x, y_<t)`` over the target items."""
    if len(targets) == 0:
        raise ValueError("targets must be nonempty")
    terms = []
    prefix = list(context)
    for item in targets:
        probs = model_forward(prefix, params)
        if not 0 <= item < probs.shape[0]:
            raise KeyError(f"unknown item id {item}")
        terms.append(ad.log(ad.getitem(probs, item)))
        prefix.append(item)
    return ad.mean(ad.stack(terms))


def log_odds(avg_logp) -> Tensor:
    avg_logp = ad.tensor(avg_logp)
    _check_saturation(avg_logp.value)
    return avg_logp - ad.log1mexp(avg_logp)


def odds(avg_logp: float) -> float:
    return math.exp(log_odds(float(avg_logp)).item())


def or_loss(logp_w, logp_l) -> Tensor:
    """``-log sigmoid(log odds_w - log odds_l)`` (elementwise)."""
    return ad.softplus(-(log_odds(logp_w) - log_odds(logp_l)))


def penalty_weight(logp_w: float, logp_l: float) -> float:
    """``delta = 1 / (1 + odds_w / odds_l)``."""
    z = log_odds(float(logp_w)).item() - log_odds(float(logp_l)).item()
    return float(ad.sigmoid(-z).item())


def pair_log_likelihoods(params: ModelParams, pairs: Sequence[PreferencePair]) -> tuple[Tensor, Tensor]:
    """Batched single-item ``log P`` of winners and losers, each ``[P]``."""
    ids = pad_batch([p.context for p in pairs], params.config.max_len)
    logp = ad.log_softmax(logits(ids, params))
    rows = np.arange(len(pairs))
    w = ad.getitem(logp, (rows, np.array([p.winner for p in pairs])))
    l_ = ad.getitem(logp, (rows, np.array([p.loser for p in pairs])))
    return w, l_


def orpo_loss(params: ModelParams, pairs: Sequence[PreferencePair], lam: float) -> Tensor:
    """Mean over pairs of ``NLL(winner) + lam * L_OR``."""
    if not pairs:
        raise ValueError("pair batch must be nonempty")
    w, l_ = pair_log_likelihoods(params, pairs)
    return ad.mean(-w + lam * or_loss(w, l_))


def mean_log_odds_gap(params: ModelParams, pairs: Sequence[PreferencePair]) -> float:
    w, l_ = pair_log_likelihoods(params, pairs)
    return float(np.mean(log_odds(w.value).value - log_odds(l_.value).value))


# ---------------------------------------------------------------- gradient identity


@dataclass(frozen=True)
class IdentityReport:
    autodiff_vs_identity: float
    autodiff_vs_fd: float
    identity_vs_fd: float
    literal_sign_error: float  # autodiff against +delta*h

    @property
    def max_error(self) -> float:
        return max(self.autodiff_vs_identity, self.autodiff_vs_fd, self.identity_vs_fd)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def or_gradient_identity_check(params: ModelParams, pair: PreferencePair, step: float = 1e-6) -> IdentityReport:
    """Compare three gradients of ``L_OR`` for one pair.

    (a) autodiff through the loss, (b) ``-delta * h`` assembled from autodiff
    gradients of ``log P`` only, (c) central finite differences.
    """
    plist = params.parameters()

    def logps():
        w, l_ = pair_log_likelihoods(params, [pair])
        return ad.sum(w), ad.sum(l_)

    def loss():
        w, l_ = logps()
        return or_loss(w, l_)

    auto = flatten_grads(ad.backward(loss(), plist), plist)
    w, l_ = logps()
    gw = flatten_grads(ad.backward(w, plist), plist)
    gl = flatten_grads(ad.backward(l_, plist), plist)
    lw, ll = w.item(), l_.item()
    h = gw / -math.expm1(lw) - gl / -math.expm1(ll)
    delta = penalty_weight(lw, ll)
    identity = -delta * h

    x0 = flatten(plist)
    fd = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += step
        unflatten(xp, plist)
        up = loss().item()
        xp[i] = x0[i] - step
        unflatten(xp, plist)
        down = loss().item()
        fd[i] = (up - down) / (2.0 * step)
    unflatten(x0, plist)
    return IdentityReport(
        autodiff_vs_identity=_rel(auto, identity),
        autodiff_vs_fd=_rel(auto, fd),
        identity_vs_fd=_rel(identity, fd),
        literal_sign_error=_rel(auto, delta * h),
    )


# ---------------------------------------------------------------- pair construction


class NegativeSampler(Protocol):
    def scores(self, context: Sequence[int]) -> np.ndarray: ...


class PopularitySampler:
    """Score = number of interactions with the item."""

    def __init__(self, sequences: Iterable[InteractionSequence], vocab_size: int):
        self.popularity = np.zeros(vocab_size)
        for s in sequences:
            np.add.at(self.popularity, np.asarray(s.items, dtype=np.int64), 1.0)

    def scores(self, context: Sequence[int]) -> np.ndarray:
        return self.popularity.copy()


class CooccurrenceSampler(PopularitySampler):
    """Score of item i = sum over context items j of the number of users that
    interacted with both i and j; popularity breaks ties."""

    def __init__(self, sequences: Iterable[InteractionSequence], vocab_size: int):
        sequences = list(sequences)
        super().__init__(sequences, vocab_size)
        rows, cols = [], []
        for u, s in enumerate(sequences):
            items = sorted(set(s.items))
            rows.extend([u] * len(items))
            cols.extend(items)
        x = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(sequences), vocab_size))
        self._x = x

    def scores(self, context: Sequence[int]) -> np.ndarray:
        ctx = np.zeros(self._x.shape[1])
        np.add.at(ctx, np.asarray(context, dtype=np.int64), 1.0)
        # (X^T X) ctx without materialising the item-item matrix
        return np.asarray(self._x.T @ (self._x @ ctx)).ravel()


def worst_unseen(sampler: NegativeSampler, context: Sequence[int], seen: Iterable[int]) -> int | None:
    """Lowest-scored item outside ``seen``; ties by popularity, then smaller id."""
    scores = sampler.scores(context)
    pop = getattr(sampler, "popularity", np.zeros_like(scores))
    allowed = np.ones(scores.shape[0], dtype=bool)
    allowed[0] = False
    allowed[np.asarray(list(seen), dtype=np.int64)] = False
    cand = np.flatnonzero(allowed)
    if cand.size == 0:
        return None
    order = np.lexsort((cand, pop[cand], scores[cand]))
    return int(cand[order[0]])


@dataclass
class PairReport:
    users: int = 0
    too_short: int = 0
    rating_ties: int = 0
    no_candidate: int = 0
    counts: Counter = field(default_factory=Counter)


def build_preference_pairs(
    sequences: Sequence[InteractionSequence],
    mode: str = "both",
    sampler: NegativeSampler | None = None,
    vocab_size: int | None = None,
) -> tuple[list[PreferencePair], PairReport]:
    """Rating pairs from each user's final two items and sampled-negative
    pairs with the final item as winner.

    ``mode`` is ``"rating"``, ``"sampled"`` or ``"both"``.  Pairs are ordered
    by user, rating pair first.
    """
    if mode not in ("rating", "sampled", "both"):
        raise ValueError(f"unknown pair mode {mode!r}")
    if mode != "rating" and sampler is None:
        if vocab_size is None:
            vocab_size = max(max(s.items) for s in sequences) + 1
        sampler = CooccurrenceSampler(sequences, vocab_size)
    pairs: list[PreferencePair] = []
    report = PairReport()
    for s in sequences:
        report.users += 1
        if len(s.items) < 3:
            report.too_short += 1
            continue
        if mode in ("rating", "both"):
            (a, b), (ra, rb) = s.items[-2:], s.ratings[-2:]
            if ra == rb:
                report.rating_ties += 1
            elif a != b:
                win, lose = (a, b) if ra > rb else (b, a)
                pairs.append(PreferencePair(s.user, tuple(s.items[:-2]), win, lose, "rating-pair"))
        if mode in ("sampled", "both"):
            context = s.items[:-1]
            loser = worst_unseen(sampler, context, s.items)
            if loser is None:
                report.no_candidate += 1
            else:
                pairs.append(PreferencePair(s.user, tuple(context), s.items[-1], loser, "negative-sampled"))
    report.counts = Counter(p.source for p in pairs)
    return pairs, report


def write_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            ctx = " ".join(str(i) for i in p.context)
            fh.write(f"{p.user}\t{ctx}\t{p.winner}\t{p.loser}\t{p.source}\n")


def read_pairs(path: str | Path) -> list[PreferencePair]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            try:
                pairs.append(
                    PreferencePair(
                        user=int(parts[0]),
                        context=tuple(int(i) for i in parts[1].split()),
                        winner=int(parts[2]),
                        loser=int(parts[3]),
                        source=parts[4],
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return pairs


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class OrpoEpoch:
    epoch: int
    loss: float
    log_odds_gap: float


def orpo_train(
    params: ModelParams,
    pairs: Sequence[PreferencePair],
    config: OrpoConfig,
    on_epoch: Callable[[OrpoEpoch], None] | None = None,
) -> list[OrpoEpoch]:
    """Adam with linear warmup then inverse-sqrt decay; updates ``params`` in place."""
    if not pairs:
        raise ValueError("no preference pairs to train on")
    plist = params.parameters()
    state = adam_init(flatten(plist), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            loss = orpo_loss(params, batch, config.lam)
            g = flatten_grads(ad.backward(loss, plist), plist)
            step += 1
            state = adam_step(state, g, lr=inverse_sqrt_lr(config.lr, step, config.warmup))
            unflatten(state.x, plist)
            total += loss.item() * len(batch)
        record = OrpoEpoch(epoch=epoch, loss=total / len(pairs), log_odds_gap=mean_log_odds_gap(params, pairs))
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history
