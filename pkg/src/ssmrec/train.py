"""Training driver: flat key-value configs and the optimizer comparison loop.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .batching import CONTROLLER_COLUMNS, BaseBatchLoader, BatchController, make_macrobatch, scaled_epoch_axis
from .data import FORMATS, TrainingSamples, build_training_samples, leave_one_out_split, load_dataset
from .metrics import MetricsReport, evaluate, model_scorer, popularity_scorer
from .models import ModelConfig, ModelParams, count_parameters, init_params, next_item_loss, save_checkpoint
from .optim import (
    TRACE_COLUMNS,
    TraceWriter,
    adam_init,
    adam_step,
    flatten,
    flatten_grads,
    sgd_step,
    unflatten,
    usgm_init,
    usgm_step,
)

OPTIMIZERS = ("usgm-adaptive", "usgm-fixed", "adam", "sgd")


class ConfigError(ValueError):
    """All validation problems of a config at once."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class TrainConfig:
    dataset: str = ""
    format: str = ""
    min_interactions: int = 5
    min_length: int = 3
    max_len: int = 50
    dim: int = 64
    state_dim: int = 16
    n_layers: int = 2
    init_std: float = 0.02
    optimizer: str = "usgm-adaptive"
    seed: int = 0
    epochs: int = 10
    base_batch: int = 32
    batch_size: int = 0  # fixed-batch optimizers; 0 means base_batch
    lr: float = 1e-3  # adam / sgd
    lr0: float = 1e-2  # usgm: H_0 = 1 / lr0
    diameter: float = 10.0
    alpha: float = 0.01
    shrink: float = 2.0
    tau: float = 0.1
    history_scope: str = "epoch"
    min_observations: int = 10
    train_stride: int = 1
    chunk: int = 64  # gradient accumulation chunk, memory only
    eval_k: int = 10
    valid_users: int = 0  # 0 evaluates every user
    out_dir: str = "runs/default"

    def problems(self) -> list[str]:
        out = []
        if not self.dataset:
            out.append("dataset: required")
        if self.format and self.format not in FORMATS:
            out.append(f"format: must be one of {', '.join(FORMATS)}")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer: must be one of {', '.join(OPTIMIZERS)}")
        if self.history_scope not in ("epoch", "all"):
            out.append("history_scope: must be 'epoch' or 'all'")
        for name in ("max_len", "dim", "state_dim", "n_layers", "epochs", "base_batch", "train_stride", "chunk", "eval_k"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be a positive integer")
        for name in ("lr", "lr0", "diameter", "tau", "init_std"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be positive")
        if self.min_length < 3:
            out.append("min_length: must be at least 3")
        if not 0.0 < self.alpha < 1.0:
            out.append("alpha: must lie in (0, 1)")
        if self.shrink <= 1.0:
            out.append("shrink: must exceed 1")
        if self.batch_size < 0:
            out.append("batch_size: must be nonnegative")
        elif self.batch_size and self.batch_size % self.base_batch:
            out.append("batch_size: must be a multiple of base_batch")
        if self.min_observations < 2:
            out.append("min_observations: must be at least 2")
        if self.valid_users < 0:
            out.append("valid_users: must be nonnegative")
        return out


def _coerce(kind, key: str, raw: str):
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{source}:{lineno}: expected 'key = value'"])
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def parse_overrides(args: Sequence[str]) -> dict[str, str]:
    out = {}
    problems = []
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            problems.append(f"{arg}: overrides must look like --key=value")
            continue
        key, value = arg[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    if problems:
        raise ConfigError(problems)
    return out


def build_config(cls, values: dict[str, str]):
    """Instantiate dataclass ``cls`` from string values; collects every error."""
    known = {f.name: f for f in fields(cls)}
    problems = [f"{k}: unknown config key" for k in values if k not in known]
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            continue
        try:
            kwargs[key] = _coerce(known[key].type, key, raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r} as {known[key].type}")
    cfg = cls(**kwargs)
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None, cls=TrainConfig):
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return build_config(cls, values)


# ---------------------------------------------------------------- driver


@dataclass
class TrainResult:
    checkpoint: Path
    trace: Path
    controller_trace: Path | None
    report_path: Path
    report: dict
    params: ModelParams


def make_gradient_oracle(params: ModelParams, samples: TrainingSamples, chunk: int) -> Callable:
    """``oracle(x, idx) -> (mean loss, flat gradient)`` over samples ``idx``."""
    plist = params.parameters()

    def oracle(x: np.ndarray, idx: np.ndarray):
        unflatten(x, plist)
        total_loss = 0.0
        total_grad = np.zeros_like(x)
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            loss = next_item_loss(samples.ids[part], samples.targets[part], params)
            total_grad += len(part) * flatten_grads(ad.backward(loss, plist), plist)
            total_loss += len(part) * loss.item()
        return total_loss / len(idx), total_grad / len(idx)

    return oracle


def mean_training_loss(params: ModelParams, samples: TrainingSamples, chunk: int = 256) -> float:
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            sl = slice(start, start + chunk)
            n = len(samples.targets[sl])
            total += n * next_item_loss(samples.ids[sl], samples.targets[sl], params).item()
    return total / len(samples)


def _metrics_dict(m) -> dict:
    return {"hr": m.hr, "ndcg": m.ndcg, "mrr": m.mrr, "k": m.k, "n_users": m.n_users}


def train(cfg: TrainConfig, log: Callable[[str], None] | None = None) -> TrainResult:
    log = log or (lambda msg: None)
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    data = load_dataset(cfg.dataset, cfg.format or None, cfg.min_interactions)
    split = leave_one_out_split(data, cfg.min_length)
    samples = build_training_samples(split.train, cfg.max_len, cfg.train_stride)
    if len(samples) < cfg.base_batch:
        raise ValueError(f"only {len(samples)} training samples; fewer than one base batch")
    model_cfg = ModelConfig(
        n_items=data.n_items,
        dim=cfg.dim,
        state_dim=cfg.state_dim,
        n_layers=cfg.n_layers,
        max_len=cfg.max_len,
        init_std=cfg.init_std,
    )
    params = init_params(model_cfg, cfg.seed)
    plist = params.parameters()
    oracle = make_gradient_oracle(params, samples, cfg.chunk)
    loader = BaseBatchLoader(len(samples), cfg.base_batch, cfg.seed)
    fixed_batch = cfg.batch_size or cfg.base_batch
    adaptive = cfg.optimizer == "usgm-adaptive"
    controller = (
        BatchController(
            base=cfg.base_batch,
            alpha=cfg.alpha,
            shrink=cfg.shrink,
            tol=cfg.tau,
            history_scope=cfg.history_scope,
            min_observations=cfg.min_observations,
        )
        if adaptive
        else None
    )
    valid_cases = split.valid[: cfg.valid_users] if cfg.valid_users else split.valid

    trace_path = out_dir / "trace.csv"
    ctrl_path = out_dir / "controller.csv" if adaptive else None
    trace = TraceWriter(trace_path, TRACE_COLUMNS)
    ctrl_trace = TraceWriter(ctrl_path, CONTROLLER_COLUMNS) if adaptive else None
    x = flatten(plist)
    usgm = adam = None
    consumed = 0
    step = 0
    valid_history = []
    try:
        for epoch in range(cfg.epochs):
            queue = loader.epoch(epoch)
            while queue:
                want = controller.batch if adaptive else fixed_batch
                idx, _ = make_macrobatch(queue, want, cfg.base_batch)
                consumed += len(idx)
                row = {"step": step, "batch_size": len(idx)}
                if cfg.optimizer.startswith("usgm"):
                    if usgm is None:
                        loss, g = oracle(x, idx)
                        usgm = usgm_init(x, g, cfg.diameter, cfg.lr0, len(idx))
                        row.update(loss=loss, H=usgm.H)
                    else:
                        box = {}

                        def stoch_grad(x_next, idx=idx, box=box):
                            box["loss"], g_next = oracle(x_next, idx)
                            return g_next

                        usgm, obs = usgm_step(usgm, stoch_grad, len(idx))
                        row.update(loss=box["loss"], beta_hat=obs.beta_hat, H=usgm.H, r=obs.r)
                        if adaptive:
                            controller.observe(obs)
                            controller.decide_batch()
                            ctrl_trace.write(
                                step=step,
                                B=controller.batch,
                                c1=controller.c1,
                                c2=controller.c2,
                                plateaued=controller.plateaued,
                                B_star=controller.best_batch,
                                epoch=epoch,
                            )
                    x = usgm.x
                else:
                    loss, g = oracle(x, idx)
                    if cfg.optimizer == "adam":
                        adam = adam or adam_init(x, lr=cfg.lr)
                        adam = adam_step(adam, g)
                        x = adam.x
                    else:
                        x = sgd_step(x, g, cfg.lr)
                    row["loss"] = loss
                row["epoch_scaled_x"] = scaled_epoch_axis(consumed, len(samples))
                trace.write(**row)
                step += 1
            unflatten(x, plist)
            m = evaluate(model_scorer(params), valid_cases, cfg.eval_k)
            valid_history.append({"epoch": epoch, **_metrics_dict(m)})
            log(f"epoch {epoch}: steps={step} valid hr@{cfg.eval_k}={m.hr:.4f}")
            if adaptive:
                controller.epoch_reset()
    finally:
        trace.close()
        if ctrl_trace is not None:
            ctrl_trace.close()

    unflatten(x, plist)
    counts = count_parameters(params)
    test = evaluate(model_scorer(params), split.test, cfg.eval_k)
    pop = evaluate(popularity_scorer(split.train, model_cfg.vocab_size), split.test, cfg.eval_k)
    report = {
        "test": MetricsReport.from_metrics(test, f"hydra-ssm/{cfg.optimizer}", counts).to_dict(),
        "popularity": MetricsReport.from_metrics(pop, "popularity", (0, 0)).to_dict(),
        "valid_history": valid_history,
        "final_train_loss": mean_training_loss(params, samples),
        "steps": step,
        "train_samples": len(samples),
        "dropped_users": split.dropped,
        "config": dataclasses.asdict(cfg),
    }
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(
        params,
        ckpt,
        extra={
            "format": data.format,
            "min_interactions": cfg.min_interactions,
            "min_length": cfg.min_length,
            "optimizer": cfg.optimizer,
        },
    )
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return TrainResult(ckpt, trace_path, ctrl_path, report_path, report, params)
