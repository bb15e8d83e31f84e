"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 7 trains two models on MovieLens-100k (about ten minutes on one
CPU core) and criterion 8 needs the MovieLens-1M ratings file; both look for
data under ``data/`` or the paths in ``SSMREC_ML100K`` / ``SSMREC_ML1M``.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ssmrec import gradcheck
from ssmrec import models as m
from ssmrec.batching import BatchController, wls_fit
from ssmrec.bench import latency_bootstrap
from ssmrec.cli import main
from ssmrec.data import load_dataset, summary
from ssmrec.metrics import metrics_from_ranks
from ssmrec.optim import BetaObservation, update_H, usgm_init, usgm_step
from ssmrec.orpo import or_loss
from ssmrec.train import load_config, train
from test_models import rand_ssm, unrolled_scan

ROOT = Path(__file__).resolve().parents[1]


def data_file(env, relative):
    path = Path(os.environ.get(env, ROOT / relative))
    return path if path.is_file() else None


# ---------------------------------------------------------------- 1


def test_c01_gradient_correctness(criterion):
    start = time.perf_counter()
    prim = gradcheck.check_primitives(0)
    model = gradcheck.check_model(0)
    elapsed = time.perf_counter() - start
    worst = max(prim, key=prim.get)
    ok = max(prim.values()) < gradcheck.PRIMITIVE_TOL and model < gradcheck.MODEL_TOL and elapsed < 60
    criterion(
        1,
        ok,
        f"{len(prim)} primitives max rel err {prim[worst]:.2e} ({worst}); "
        f"full model {model:.2e} over {sum(t.value.size for t in m.init_params(gradcheck.TOY_MODEL).parameters())} "
        f"params; {elapsed:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- 2


def test_c02_scan_oracle(criterion):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        T, D, N = int(rng.integers(1, 33)), int(rng.integers(1, 6)), int(rng.integers(1, 9))
        p = rand_ssm(rng, D, N)
        x = rng.normal(size=(T, D))
        worst = max(worst, float(np.abs(m.selective_scan(x, p).value - unrolled_scan(x, p)).max()))
    ok = worst < 1e-10
    criterion(2, ok, f"50 seeds, T<=32, N<=8: max abs deviation {worst:.2e}")
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_usgm_mechanics(criterion):
    hand = (
        update_H(2.0, 0.5, 1.0, 1.0) == 2.0,
        update_H(0.0, 1.0, 1.0, 1.0) == 1.0 / 1.5,
        update_H(2.0, 3.0, 1.0, 1.0) == 2.0 + 2.0 / 1.5,
    )
    rng = np.random.default_rng(0)
    s = usgm_init(rng.normal(size=8), rng.normal(size=8), diameter=1.0, lr0=0.1)
    monotone = True
    for _ in range(10_000):
        H = s.H
        s, _ = usgm_step(s, lambda x: 3 * rng.normal(size=8) + x)
        monotone &= s.H >= H
    A = np.diag(np.linspace(0.2, 5.0, 10))
    x0 = rng.normal(size=10)
    s = usgm_init(x0, A @ x0, diameter=np.linalg.norm(x0), lr0=1.0)
    reached = None
    for k in range(1, 5001):
        s, _ = usgm_step(s, lambda x: A @ x)
        if 0.5 * s.x @ A @ s.x < 1e-6:
            reached = k
            break
    ok = all(hand) and monotone and reached is not None
    criterion(3, ok, f"hand cases {sum(hand)}/3, H monotone over 10k noisy steps: {monotone}, quadratic gap < 1e-6 at step {reached}")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_wls_recovery(criterion):
    c1, c2 = 2.0, 5.0
    sizes = np.arange(32, 1025, 32)
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        B = rng.choice(sizes, size=48)
        y = c1 + c2 / np.sqrt(B) + rng.normal(0.0, 0.01, size=48)
        f1, f2 = wls_fit([BetaObservation(int(b), float(v), k) for k, (b, v) in enumerate(zip(B, y))], 0.01)
        good += abs(f1 - c1) <= 0.05 * c1 and abs(f2 - c2) <= 0.05 * c2
    exact = wls_fit([BetaObservation(int(b), 3 + 5 / math.sqrt(b), 0) for b in (32, 64, 128, 256)], 0.01)
    exact_err = max(abs(exact[0] - 3), abs(exact[1] - 5))
    ok = good >= 95 and exact_err < 1e-9
    criterion(4, ok, f"{good}/100 noisy fits within 5%; exact-line error {exact_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 5
# Stochastic quadratic: one curved coordinate carries the curvature probe,
# many flat coordinates carry gradient noise whose std shrinks as B^-1/4,
# so the expected probe is exactly c1 + c2/sqrt(B).  Constants put the
# plateau near 20 base batches.


def quadratic_run(seed, scope, n_flat=200_000, units=20.5, B0=8, epoch_samples=16_000, epochs=2, tau=0.1):
    rng = np.random.default_rng(seed)
    L, G, lr0, D = 1e-3, 10.0, 1e-2, 1e3
    H0 = 1 / lr0
    c1 = L * G * G / H0**2
    c2 = tau * math.sqrt(units * B0) * c1
    sigma = math.sqrt(c2 * H0 / n_flat)

    def oracle(x, B):
        g = sigma * B**-0.25 * rng.normal(size=n_flat + 1)
        g[0] = L * x[0]
        return g

    x0 = np.zeros(n_flat + 1)
    x0[0] = G / L
    ctl = BatchController(base=B0, tol=tau, history_scope=scope)
    state = usgm_init(x0, oracle(x0, B0), D, lr0, B0)
    batches, stars = [], []
    for _ in range(epochs):
        used, seq = 0, []
        while used < epoch_samples:
            B = ctl.batch
            seq.append(B)
            state, obs = usgm_step(state, lambda x: oracle(x, B), B)
            used += B
            ctl.observe(obs)
            ctl.decide_batch()
        batches.append(seq)
        stars.append(ctl.best_batch)
        ctl.epoch_reset()
    return batches, stars


def lifecycle_ok(batches, stars, B0=8, shrink=2.0):
    if None in stars:
        return False
    for seq, star in zip(batches, stars):
        if any(b > c for b, c in zip(seq, seq[1:])) or seq[-1] != star:
            return False
    grew = batches[0][0] == B0 and stars[0] > B0
    shrunk = batches[1][0] == B0 * max(1, math.floor(stars[0] / B0 / shrink + 0.5))
    return grew and shrunk and abs(stars[1] - stars[0]) <= B0


def stream_agreement(rel, trials=100, B0=8, units=20.5, epoch_samples=16_000, tau=0.1):
    """Epoch-2 plateau agreement of the two scopes on synthetic probe streams."""

    def run(seed, scope):
        rng = np.random.default_rng(seed)
        c1, c2 = 1.0, tau * math.sqrt(units * B0)
        ctl = BatchController(base=B0, tol=tau, history_scope=scope)
        k = 0
        for _ in range(2):
            used = 0
            while used < epoch_samples:
                B = ctl.batch
                k += 1
                ctl.observe(BetaObservation(B, c1 + c2 / math.sqrt(B) * (1 + rel * rng.normal()), k))
                ctl.decide_batch()
                used += B
            star = ctl.best_batch
            ctl.epoch_reset()
        return star

    return sum(
        a is not None and b is not None and abs(a - b) <= B0
        for a, b in ((run(s, "epoch"), run(s, "all")) for s in range(trials))
    )


def test_c05_controller_behaviour(criterion):
    epoch_runs = [quadratic_run(s, "epoch") for s in range(100)]
    all_runs = [quadratic_run(s, "all") for s in range(100)]
    lifecycle = sum(lifecycle_ok(*r) for r in epoch_runs)
    agree = sum(
        a[1][-1] is not None and b[1][-1] is not None and abs(a[1][-1] - b[1][-1]) <= 8
        for a, b in zip(epoch_runs, all_runs)
    )
    stars = [r[1][0] // 8 for r in epoch_runs if r[1][0]]
    # probe noise on the synthetic streams matched to the quadratic (sqrt(3/n)), then larger
    sweep = {rel: stream_agreement(rel) for rel in (0.0039, 0.01, 0.02, 0.05)}
    ok = lifecycle >= 90 and agree >= 90 and sweep[0.0039] >= 90
    criterion(
        5,
        ok,
        f"grow/plateau/shrink/re-plateau {lifecycle}/100 (epoch-1 B* median {np.median(stars):.0f} base batches); "
        f"epoch vs all-history B* agree {agree}/100; synthetic-stream agreement by relative noise "
        + ", ".join(f"{k}: {v}" for k, v in sweep.items()),
    )
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_orpo_identity(criterion):
    reports = gradcheck.check_or_identity(50, 0)
    worst = max(r.max_error for r in reports)
    log2_err = max(abs(or_loss(v, v).item() - math.log(2)) for v in (-1e-6, -0.3, -2.0, -15.0))
    literal = min(r.literal_sign_error for r in reports)
    ok = worst < 1e-6 and log2_err < 1e-12
    criterion(
        6,
        ok,
        f"50 instances: max three-way rel err {worst:.2e}; |L_OR - log 2| {log2_err:.1e} at equal likelihoods; "
        f"literal +delta*h sign gives rel err >= {literal:.2f}",
    )
    assert ok


# ---------------------------------------------------------------- 7
# Budget: every 10th training prefix, histories cut to 20 items, so each
# run fits inside the runtime target on one core.  Each optimizer was tuned
# for lowest final training loss on this budget: Adam lr over {3e-4, 1e-3, 3e-3},
# USGM lr0 over {0.1, 1} and diameter over {1, 10}.

C7_COMMON = {"epochs": "10", "train_stride": "10", "max_len": "20", "valid_users": "300"}
C7_ADAM = {"optimizer": "adam", "lr": "1e-3"}
C7_USGM = {"optimizer": "usgm-adaptive", "lr0": "1.0", "diameter": "10.0"}


def test_c07_optimizer_comparison(criterion, tmp_path):
    path = data_file("SSMREC_ML100K", "data/ml-100k/u.data")
    if path is None:
        criterion(7, False, "MovieLens-100k not found; run scripts/fetch_ml100k.py or set SSMREC_ML100K")
        pytest.fail("MovieLens-100k ratings file missing")
    start = time.perf_counter()
    runs = {}
    for name, opts in (("adam", C7_ADAM), ("usgm", C7_USGM)):
        cfg = load_config(None, {"dataset": str(path), "out_dir": str(tmp_path / name), **C7_COMMON, **opts})
        runs[name] = train(cfg).report
    elapsed = time.perf_counter() - start
    adam_loss, usgm_loss = runs["adam"]["final_train_loss"], runs["usgm"]["final_train_loss"]
    pop = runs["usgm"]["popularity"]["hr"]
    hr = runs["usgm"]["test"]["hr"]
    loss_ok = usgm_loss <= 1.10 * adam_loss
    hr_ok = hr >= 2 * pop
    ok = loss_ok and hr_ok and elapsed < 1800
    criterion(
        7,
        ok,
        f"final train loss usgm-adaptive {usgm_loss:.4f} vs adam {adam_loss:.4f} "
        f"(ratio {usgm_loss / adam_loss:.3f}, need <= 1.10); test HR@10 usgm {hr:.4f}, "
        f"adam {runs['adam']['test']['hr']:.4f}, popularity {pop:.4f} (need usgm >= {2 * pop:.4f}); {elapsed / 60:.1f} min",
    )
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_ml1m_ingestion(criterion, capsys):
    path = data_file("SSMREC_ML1M", "data/ml-1m/ratings.dat")
    if path is None:
        criterion(8, False, "MovieLens-1M ratings.dat not available in this environment; set SSMREC_ML1M")
        pytest.fail("MovieLens-1M ratings file missing")
    counts = summary(load_dataset(path, "movielens-1m"))
    assert main(["ingest", str(path)]) == 0
    printed = capsys.readouterr().out.strip()
    ok = counts == {"users": 6041, "items": 3417, "reviews": 999611} and printed == "users=6041 items=3417 reviews=999611"
    criterion(8, ok, f"ingest printed {printed}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_metrics(criterion):
    r10 = metrics_from_ranks([10], 10)
    r1 = metrics_from_ranks([1], 10)
    r11 = metrics_from_ranks([11], 10)
    checks = {
        "ndcg rank 10": abs(r10.ndcg - 1 / math.log2(11)) < 1e-12,
        "rank 10 hr/mrr": (r10.hr, r10.mrr) == (1.0, 0.1),
        "rank 1": (r1.hr, r1.ndcg, r1.mrr) == (1.0, 1.0, 1.0),
        "rank 11": (r11.hr, r11.ndcg, r11.mrr) == (0.0, 0.0, 0.0),
    }
    ok = all(checks.values())
    criterion(9, ok, ", ".join(f"{k}: {'ok' if v else 'wrong'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_latency_calibration(criterion):
    covered = 0
    removed = 0
    for trial in range(100):
        rng = np.random.default_rng([trial, 1])
        est = latency_bootstrap(lambda users: rng.normal(0.010, 0.001, size=len(users)), range(5000), seed=trial)
        covered += est.ci_low <= 0.010 <= est.ci_high
        removed += est.removed
    ok = covered >= 90
    criterion(10, ok, f"95% CI covered 10 ms in {covered}/100 trials (30 samples x 1500 users, {removed} samples fenced out)")
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_determinism(criterion, tmp_path):
    path = data_file("SSMREC_ML100K", "data/ml-100k/u.data")
    if path is None:
        from conftest import write_toy_ratings

        path = write_toy_ratings(tmp_path / "toy.data", n_users=40, per_user=25, n_items=30)
    cfg = load_config(
        None,
        {
            "dataset": str(path),
            "out_dir": str(tmp_path / "run"),
            "dim": "16",
            "state_dim": "4",
            "max_len": "10",
            "epochs": "2",
            "train_stride": "40",
            "valid_users": "100",
        },
    )
    names = ("trace.csv", "controller.csv", "model.ckpt", "report.json")
    digests = []
    for _ in range(2):
        train(cfg)
        digests.append({n: (tmp_path / "run" / n).read_bytes() for n in names})
    same = [n for n in names if digests[0][n] == digests[1][n]]
    steps = json.loads(digests[0]["report.json"])["steps"]
    ok = len(same) == len(names)
    criterion(11, ok, f"usgm-adaptive, {steps} steps: bit-identical {', '.join(same) or 'nothing'}")
    assert ok
