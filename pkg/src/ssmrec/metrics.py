"""Full-vocabulary ranking metrics and the metrics report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import EvalCase, InteractionSequence
from .models import PAD_ID, ModelParams, encode, pad_batch

# scores for a batch of histories: list of item tuples -> [B, |V|]
Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass(frozen=True)
class RankingMetrics:
    hr: float
    ndcg: float
    mrr: float
    k: int
    n_users: int


def target_rank(scores: np.ndarray, target: int, history: Sequence[int]) -> int:
    """1-based rank of ``target`` among candidate items.

    Candidates are all real items except those already in the history (the
    target itself always stays).  Equal scores rank the smaller id first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape[0], dtype=bool)
    mask[PAD_ID] = False
    if history:
        mask[np.asarray(history, dtype=np.int64)] = False
    mask[target] = True
    s_t = scores[target]
    ids = np.arange(scores.shape[0])
    ahead = (scores > s_t) | ((scores == s_t) & (ids < target))
    return int(np.count_nonzero(ahead & mask)) + 1


def metrics_from_ranks(ranks: Sequence[int], k: int) -> RankingMetrics:
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = np.asarray(ranks, dtype=np.int64)
    n = len(ranks)
    if n == 0:
        return RankingMetrics(0.0, 0.0, 0.0, k, 0)
    hit = ranks <= k
    ndcg = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    mrr = np.where(hit, 1.0 / ranks, 0.0)
    # fsum is exactly rounded, so user order cannot change the result
    return RankingMetrics(
        hr=float(hit.sum()) / n,
        ndcg=math.fsum(ndcg) / n,
        mrr=math.fsum(mrr) / n,
        k=k,
        n_users=n,
    )


def evaluate(scorer: Scorer, cases: Sequence[EvalCase], k: int = 10, batch_size: int = 256) -> RankingMetrics:
    """HR@k, NDCG@k and MRR@k of each case's target under ``scorer``."""
    ranks = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        scores = scorer([c.history for c in chunk])
        ranks.extend(target_rank(s, c.target, c.history) for s, c in zip(scores, chunk))
    return metrics_from_ranks(ranks, k)


def model_scorer(params: ModelParams) -> Scorer:
    """Logits ``h_last @ E^T``; ranking by logits equals ranking by softmax."""

    def score(histories):
        ids = pad_batch(histories, params.config.max_len)
        with ad.no_grad():
            return encode(ids, params).value @ params.embedding.value.T

    return score


def popularity_scorer(train: Sequence[InteractionSequence], vocab_size: int) -> Scorer:
    counts = np.zeros(vocab_size, dtype=np.float64)
    for s in train:
        np.add.at(counts, np.asarray(s.items, dtype=np.int64), 1.0)

    def score(histories):
        return np.broadcast_to(counts, (len(histories), vocab_size))

    return score


@dataclass
class MetricsReport:
    hr: float
    ndcg: float
    mrr: float
    k: int
    n_users: int
    model_tag: str
    params_total: int
    params_excl_embedding: int
    latency_mean: float | None = None
    latency_ci: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("hr", "ndcg", "mrr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.latency_ci is not None:
            lo, hi = self.latency_ci
            if not lo <= self.latency_mean <= hi:
                raise ValueError("latency mean must lie inside its confidence interval")

    @classmethod
    def from_metrics(cls, m: RankingMetrics, model_tag: str, counts: tuple[int, int]) -> "MetricsReport":
        return cls(
            hr=m.hr,
            ndcg=m.ndcg,
            mrr=m.mrr,
            k=m.k,
            n_users=m.n_users,
            model_tag=model_tag,
            params_total=counts[0],
            params_excl_embedding=counts[1],
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.latency_ci is not None:
            d["latency_ci"] = list(self.latency_ci)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
