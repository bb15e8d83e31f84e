"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 runtime error.  Errors are
written to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import bench, gradcheck
from .data import leave_one_out_split, load_dataset, summary
from .metrics import MetricsReport, evaluate, model_scorer
from .models import ModelConfig, count_parameters, init_params, load_checkpoint, save_checkpoint
from .orpo import OrpoConfig, build_preference_pairs, mean_log_odds_gap, orpo_train, read_pairs, write_pairs
from .train import ConfigError, load_config, parse_overrides, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


@dataclass
class OrpoTrainConfig:
    dataset: str = ""
    format: str = ""
    min_interactions: int = 5
    min_length: int = 3
    pairs: str = ""  # prebuilt pair file; built from the dataset when empty
    pair_mode: str = "both"
    checkpoint: str = ""  # starting weights; fresh model when empty
    dim: int = 64
    state_dim: int = 16
    n_layers: int = 2
    max_len: int = 50
    lam: float = 0.05
    lr: float = 5e-6
    warmup: int = 100
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    eval_k: int = 10
    out_dir: str = "runs/orpo"

    def problems(self) -> list[str]:
        out = []
        if not self.dataset:
            out.append("dataset: required")
        if self.pair_mode not in ("rating", "sampled", "both"):
            out.append("pair_mode: must be rating, sampled or both")
        if self.lam < 0:
            out.append("lam: must be nonnegative")
        if self.lr <= 0:
            out.append("lr: must be positive")
        for name in ("epochs", "batch_size", "eval_k", "dim", "state_dim", "n_layers", "max_len"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be a positive integer")
        if self.warmup < 0:
            out.append("warmup: must be nonnegative")
        return out


def _emit_error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def _option_config(rest: Sequence[str], allowed: dict[str, object]) -> dict:
    """Typed ``--key=value`` options for the non-config subcommands."""
    values = parse_overrides(rest)
    unknown = [f"{k}: unknown option" for k in values if k not in allowed]
    if unknown:
        raise ConfigError(unknown)
    out = dict(allowed)
    problems = []
    for key, raw in values.items():
        try:
            out[key] = type(allowed[key])(raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r}")
    if problems:
        raise ConfigError(problems)
    return out


def cmd_train(args, rest) -> int:
    cfg = load_config(args.config, parse_overrides(rest))
    result = train(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(json.dumps({"checkpoint": str(result.checkpoint), "report": str(result.report_path), **result.report["test"]}, sort_keys=True))
    return EXIT_OK


def _load_for_eval(checkpoint: str, dataset: str, fmt: str):
    params, extra = load_checkpoint(checkpoint)
    data = load_dataset(dataset, fmt or extra.get("format") or None, int(extra.get("min_interactions", 5)))
    if data.n_items != params.config.n_items:
        raise ValueError(
            f"dataset has {data.n_items} items but the checkpoint was trained on {params.config.n_items}"
        )
    split = leave_one_out_split(data, int(extra.get("min_length", 3)))
    return params, extra, split


def cmd_eval(args, rest) -> int:
    opts = _option_config(rest, {"k": 10, "format": ""})
    params, extra, split = _load_for_eval(args.checkpoint, args.dataset, opts["format"])
    m = evaluate(model_scorer(params), split.test, opts["k"])
    tag = f"hydra-ssm/{extra.get('optimizer', 'unknown')}"
    print(MetricsReport.from_metrics(m, tag, count_parameters(params)).to_json())
    return EXIT_OK


def cmd_bench(args, rest) -> int:
    opts = _option_config(rest, {"k": 10, "format": "", "n_samples": 30, "sample_size": 1500, "seed": 0})
    params, extra, split = _load_for_eval(args.checkpoint, args.dataset, opts["format"])
    m = evaluate(model_scorer(params), split.test, opts["k"])
    est = bench.latency_bootstrap(
        bench.model_timer(params),
        split.test,
        n_samples=opts["n_samples"],
        sample_size=opts["sample_size"],
        seed=opts["seed"],
    )
    report = MetricsReport.from_metrics(m, f"hydra-ssm/{extra.get('optimizer', 'unknown')}", count_parameters(params))
    report.latency_mean = est.mean
    report.latency_ci = (est.ci_low, est.ci_high)
    print(report.to_json())
    return EXIT_OK


def cmd_pairs(args, rest) -> int:
    opts = _option_config(rest, {"format": "", "mode": "both", "min_interactions": 5})
    data = load_dataset(args.dataset, opts["format"] or None, opts["min_interactions"])
    pairs, report = build_preference_pairs(data.sequences, opts["mode"], vocab_size=data.n_items + 1)
    write_pairs(args.out, pairs)
    print(
        json.dumps(
            {
                "pairs": len(pairs),
                "rating_pairs": report.counts.get("rating-pair", 0),
                "sampled_pairs": report.counts.get("negative-sampled", 0),
                "users": report.users,
                "skipped_short": report.too_short,
                "skipped_ties": report.rating_ties,
                "out": str(args.out),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_orpo_train(args, rest) -> int:
    cfg = load_config(args.config, parse_overrides(rest), cls=OrpoTrainConfig)
    data = load_dataset(cfg.dataset, cfg.format or None, cfg.min_interactions)
    if cfg.checkpoint:
        params, _ = load_checkpoint(cfg.checkpoint)
        if params.config.n_items != data.n_items:
            raise ValueError("checkpoint and dataset item vocabularies differ")
    else:
        params = init_params(
            ModelConfig(
                n_items=data.n_items,
                dim=cfg.dim,
                state_dim=cfg.state_dim,
                n_layers=cfg.n_layers,
                max_len=cfg.max_len,
            ),
            cfg.seed,
        )
    if cfg.pairs:
        pairs = read_pairs(cfg.pairs)
    else:
        # pairs come from the training part only so test targets never leak
        split = leave_one_out_split(data, cfg.min_length)
        pairs, _ = build_preference_pairs(split.train, cfg.pair_mode, vocab_size=data.n_items + 1)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gap0 = mean_log_odds_gap(params, pairs)
    history = orpo_train(
        params,
        pairs,
        OrpoConfig(lam=cfg.lam, lr=cfg.lr, warmup=cfg.warmup, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed),
        on_epoch=lambda e: print(f"epoch {e.epoch}: loss={e.loss:.5f} gap={e.log_odds_gap:.5f}", file=sys.stderr),
    )
    extra = {
        "format": data.format,
        "min_interactions": cfg.min_interactions,
        "min_length": cfg.min_length,
        "optimizer": "orpo",
    }
    save_checkpoint(params, out_dir / "model.ckpt", extra=extra)
    result = {
        "pairs": len(pairs),
        "initial_log_odds_gap": gap0,
        "history": [dataclasses.asdict(e) for e in history],
        "checkpoint": str(out_dir / "model.ckpt"),
    }
    (out_dir / "orpo_report.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args, rest) -> int:
    opts = _option_config(rest, {"seed": 0, "instances": 50})
    results = gradcheck.run_all(opts["seed"], opts["instances"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: max error {r.max_error:.3e} (tol {r.tol:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        _emit_error("runtime", "gradient check failed", suites=failed)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ingest(args, rest) -> int:
    opts = _option_config(rest, {"format": "", "min_interactions": 5})
    data = load_dataset(args.dataset, opts["format"] or None, opts["min_interactions"])
    s = summary(data)
    print(f"users={s['users']} items={s['items']} reviews={s['reviews']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmrec", description="Selective-SSM sequential recommender toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="ranking metrics of a checkpoint on a dataset's test split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("bench", help="bootstrap latency benchmark")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("pairs", help="build preference pairs")
    p.add_argument("dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_pairs)
    p = sub.add_parser("orpo-train", help="odds-ratio preference fine-tuning")
    p.add_argument("config")
    p.set_defaults(func=cmd_orpo_train)
    p = sub.add_parser("grad-check", help="run all finite-difference suites")
    p.set_defaults(func=cmd_grad_check)
    p = sub.add_parser("ingest", help="print dataset counts")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args, rest)
    except ConfigError as exc:
        for problem in exc.problems:
            _emit_error("validation", problem)
        return EXIT_INVALID
    except (FileNotFoundError, OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        _emit_error("runtime", str(exc), type=type(exc).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
