import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmrec import models as m
from ssmrec import orpo
from ssmrec.data import InteractionSequence
from ssmrec.gradcheck import IDENTITY_TOL, TOY_MODEL, random_pair


def seq(user, items, ratings):
    return InteractionSequence(user, list(items), list(ratings), list(range(len(items))))


def toy_params(seed=0, **kw):
    cfg = m.ModelConfig(**{**TOY_MODEL.__dict__, **kw})
    return m.init_params(cfg, seed)


def test_uniform_model_log_likelihood():
    params = toy_params(n_items=3)
    params.embedding.value[...] = 0.0
    assert orpo.avg_log_likelihood(params, [1, 2], [3]).item() == pytest.approx(math.log(0.25), abs=1e-14)


def test_avg_log_likelihood_is_mean_of_traced_steps():
    params = toy_params(1, n_items=3)
    ctx = [2, 1]
    p1 = m.model_forward(ctx, params).value[3]
    p2 = m.model_forward(ctx + [3], params).value[1]
    got = orpo.avg_log_likelihood(params, ctx, [3, 1]).item()
    assert got == pytest.approx((math.log(p1) + math.log(p2)) / 2, abs=1e-13)
    single = orpo.avg_log_likelihood(params, ctx, [3]).item()
    assert single == pytest.approx(math.log(p1), abs=1e-14)


def test_avg_log_likelihood_errors():
    params = toy_params()
    with pytest.raises(ValueError):
        orpo.avg_log_likelihood(params, [1], [])
    with pytest.raises(KeyError):
        orpo.avg_log_likelihood(params, [1], [99])


def test_odds_examples():
    assert orpo.odds(math.log(0.5)) == pytest.approx(1.0, abs=1e-15)
    assert orpo.odds(math.log(0.8)) == pytest.approx(4.0, rel=1e-14)
    with pytest.raises(orpo.SaturationError):
        orpo.odds(math.log1p(-1e-13))


def test_log_odds_matches_naive_formula():
    p = np.concatenate([np.geomspace(1e-6, 0.5, 40), 1 - np.geomspace(1e-6, 0.5, 40)])
    got = orpo.log_odds(np.log(p)).value
    np.testing.assert_allclose(got, np.log(p / (1 - p)), rtol=1e-10, atol=1e-10)


def test_or_loss_examples():
    assert orpo.or_loss(-1.3, -1.3).item() == pytest.approx(math.log(2), abs=1e-12)
    assert orpo.or_loss(math.log(0.8), math.log(0.5)).item() == pytest.approx(math.log(1.25), abs=1e-14)
    assert orpo.or_loss(math.log1p(-1e-11), math.log(1e-12)).item() < 1e-20


def test_penalty_weight_limits():
    assert orpo.penalty_weight(-0.7, -0.7) == 0.5
    assert orpo.penalty_weight(math.log1p(-1e-10), math.log(1e-10)) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, -1e-6), st.floats(-20, -1e-6), st.floats(1e-3, 1.0))
def test_or_loss_monotone_and_nonnegative(lw, ll, eps):
    base = orpo.or_loss(lw, ll).item()
    assert base >= 0
    # clamp so the shifted winner stays a valid log-probability
    up = min(lw + eps, -1e-7)
    if up > lw:
        assert orpo.or_loss(up, ll).item() < base
    assert orpo.or_loss(lw, ll - eps).item() < base
    if lw != ll:
        assert orpo.or_loss(lw, ll).item() != math.log(2)


def pairs2():
    return [
        orpo.PreferencePair(0, (1, 2), 3, 4, "rating-pair"),
        orpo.PreferencePair(1, (5,), 2, 6, "negative-sampled"),
    ]


def test_orpo_loss_matches_hand_sum():
    params = toy_params(2)
    lam = 0.3
    parts = []
    for p in pairs2():
        probs = m.model_forward(list(p.context), params).value
        pw, pl = probs[p.winner], probs[p.loser]
        ratio = (pw / (1 - pw)) / (pl / (1 - pl))
        parts.append(-math.log(pw) + lam * -math.log(1 / (1 + 1 / ratio)))
    assert orpo.orpo_loss(params, pairs2(), lam).item() == pytest.approx(np.mean(parts), abs=1e-12)


def test_lambda_zero_is_winner_cross_entropy():
    params = toy_params(3)
    ids = m.pad_batch([p.context for p in pairs2()], params.config.max_len)
    ce = m.next_item_loss(ids, np.array([p.winner for p in pairs2()]), params).item()
    assert orpo.orpo_loss(params, pairs2(), 0.0).item() == pytest.approx(ce, abs=1e-13)


def test_symmetric_pair_contributes_log2():
    params = toy_params(4)
    params.embedding.value[...] = 0.0  # all items equally likely
    pair = [orpo.PreferencePair(0, (1,), 2, 3, "rating-pair")]
    diff = orpo.orpo_loss(params, pair, 1.0).item() - orpo.orpo_loss(params, pair, 0.0).item()
    assert diff == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_identity_three_way(seed):
    rng = np.random.default_rng(seed)
    report = orpo.or_gradient_identity_check(m.init_params(TOY_MODEL, seed), random_pair(rng))
    assert report.max_error < IDENTITY_TOL
    assert report.literal_sign_error == pytest.approx(2.0)


def test_pair_validation():
    with pytest.raises(ValueError):
        orpo.PreferencePair(0, (1,), 2, 2, "rating-pair")
    with pytest.raises(ValueError):
        orpo.PreferencePair(0, (), 2, 3, "rating-pair")
    with pytest.raises(ValueError):
        orpo.PreferencePair(0, (1,), 2, 3, "other")
    with pytest.raises(ValueError):
        orpo.OrpoConfig(lam=-1)


def test_rating_decides_winner_not_order():
    pairs, _ = orpo.build_preference_pairs([seq(1, [7, 8, 9], [4, 5, 3])], mode="rating")
    assert (pairs[0].winner, pairs[0].loser, pairs[0].context) == (8, 9, (7,))
    pairs, _ = orpo.build_preference_pairs([seq(1, [7, 8, 9], [4, 3, 5])], mode="rating")
    assert (pairs[0].winner, pairs[0].loser) == (9, 8)


def test_tied_ratings_emit_no_rating_pair():
    pairs, report = orpo.build_preference_pairs([seq(1, [1, 2, 3], [4, 4, 4])], mode="rating")
    assert pairs == [] and report.rating_ties == 1


def test_three_user_toy_with_popularity_sampler():
    users = [
        seq(1, [1, 2, 3], [4, 5, 3]),
        seq(2, [2, 4, 5, 1], [3, 3, 2, 2]),
        seq(3, [6, 4], [1, 2]),
    ]
    # popularity: 1:2 2:2 3:1 4:2 5:1 6:1
    sampler = orpo.PopularitySampler(users, vocab_size=7)
    pairs, report = orpo.build_preference_pairs(users, "both", sampler=sampler)
    assert pairs == [
        orpo.PreferencePair(1, (1,), 2, 3, "rating-pair"),
        orpo.PreferencePair(1, (1, 2), 3, 5, "negative-sampled"),  # 5 and 6 tie
        orpo.PreferencePair(2, (2, 4, 5), 1, 3, "negative-sampled"),  # 3 and 6 tie
    ]
    assert (report.users, report.too_short, report.rating_ties) == (3, 1, 1)


def test_cooccurrence_scores():
    users = [seq(1, [1, 2, 3], [1] * 3), seq(2, [1, 3], [1] * 2), seq(3, [2, 4], [1] * 2)]
    sampler = orpo.CooccurrenceSampler(users, 5)
    # item i scores the number of users sharing it with each context item
    np.testing.assert_array_equal(sampler.scores([1]), [0, 2, 1, 2, 0])
    np.testing.assert_array_equal(sampler.scores([1, 2]), [0, 3, 3, 3, 1])


def test_pairs_file_round_trip(tmp_path):
    path = tmp_path / "pairs.tsv"
    orpo.write_pairs(path, pairs2())
    assert orpo.read_pairs(path) == pairs2()
    path.write_text("1\t2\t3\n")
    with pytest.raises(ValueError, match=":1:"):
        orpo.read_pairs(path)


def test_training_on_planted_preferences_widens_gap():
    params = toy_params(5)
    rng = np.random.default_rng(0)
    pairs = [
        orpo.PreferencePair(0, tuple(int(i) for i in rng.integers(1, 7, size=3)), 1, 2, "rating-pair")
        for _ in range(24)
    ]
    gap0 = orpo.mean_log_odds_gap(params, pairs)
    history = orpo.orpo_train(params, pairs, orpo.OrpoConfig(lam=1.0, lr=1e-2, warmup=2, epochs=5, batch_size=8))
    gaps = [gap0] + [e.log_odds_gap for e in history]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))
