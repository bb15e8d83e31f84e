"""Selective-SSM sequential recommender: embedding, bidirectional Hydra-style
layers, and a tied-embedding prediction head.

Shapes use ``T`` for sequence length, ``D`` for model width and ``N`` for the
SSM state size.  Every function accepts optional leading batch axes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SSMRECv1"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-8
PAD_ID = 0


@dataclass
class ModelConfig:
    n_items: int
    dim: int = 64
    state_dim: int = 16
    n_layers: int = 2
    max_len: int = 50
    init_std: float = 0.02

    @property
    def vocab_size(self) -> int:
        return self.n_items + 1


@dataclass
class SsmLayerParams:
    a_log: Tensor  # [N]; continuous A = -exp(a_log)
    delta_w: Tensor  # [D, 1]
    delta_b: Tensor  # [1]
    b_proj: Tensor  # [D, N]
    c_proj: Tensor  # [D, N]
    in_proj: Tensor  # [D, D]
    out_proj: Tensor  # [D, D]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("a_log", "delta_w", "delta_b", "b_proj", "c_proj", "in_proj", "out_proj"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class PffnParams:
    w1: Tensor  # [D, 4D]
    b1: Tensor  # [4D]
    w2: Tensor  # [4D, D]
    b2: Tensor  # [D]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class HydraLayerParams:
    forward: SsmLayerParams
    backward: SsmLayerParams
    pffn: PffnParams
    ln_mix_scale: Tensor
    ln_mix_offset: Tensor
    ln_out_scale: Tensor
    ln_out_offset: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.forward.named(f"{prefix}.forward")
        yield from self.backward.named(f"{prefix}.backward")
        yield from self.pffn.named(f"{prefix}.pffn")
        for name in ("ln_mix_scale", "ln_mix_offset", "ln_out_scale", "ln_out_offset"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Tensor  # [|V|, D], row 0 is padding
    emb_ln_scale: Tensor
    emb_ln_offset: Tensor
    layers: list[HydraLayerParams] = field(default_factory=list)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Stable (module, name) ordering; defines the optimizer flattening."""
        out = [
            ("embedding", self.embedding),
            ("emb_ln_scale", self.emb_ln_scale),
            ("emb_ln_offset", self.emb_ln_offset),
        ]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layers.{i}"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def init_ssm_params(dim: int, state_dim: int, rng: np.random.Generator, std: float = 0.02) -> SsmLayerParams:
    return SsmLayerParams(
        a_log=ad.parameter(np.log(np.arange(1, state_dim + 1, dtype=np.float64))),
        delta_w=ad.parameter(rng.normal(0.0, std, (dim, 1))),
        delta_b=ad.parameter(np.zeros(1)),
        b_proj=ad.parameter(rng.normal(0.0, std, (dim, state_dim))),
        c_proj=ad.parameter(rng.normal(0.0, std, (dim, state_dim))),
        in_proj=ad.parameter(rng.normal(0.0, std, (dim, dim))),
        out_proj=ad.parameter(rng.normal(0.0, std, (dim, dim))),
    )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, n, std = config.dim, config.state_dim, config.init_std
    emb = rng.normal(0.0, std, (config.vocab_size, d))
    emb[PAD_ID] = 0.0
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            HydraLayerParams(
                forward=init_ssm_params(d, n, rng, std),
                backward=init_ssm_params(d, n, rng, std),
                pffn=PffnParams(
                    w1=ad.parameter(rng.normal(0.0, std, (d, 4 * d))),
                    b1=ad.parameter(np.zeros(4 * d)),
                    w2=ad.parameter(rng.normal(0.0, std, (4 * d, d))),
                    b2=ad.parameter(np.zeros(d)),
                ),
                ln_mix_scale=ad.parameter(np.ones(d)),
                ln_mix_offset=ad.parameter(np.zeros(d)),
                ln_out_scale=ad.parameter(np.ones(d)),
                ln_out_offset=ad.parameter(np.zeros(d)),
            )
        )
    params = ModelParams(
        config=config,
        embedding=ad.parameter(emb),
        emb_ln_scale=ad.parameter(np.ones(d)),
        emb_ln_offset=ad.parameter(np.zeros(d)),
        layers=layers,
    )
    for name, t in params.named_parameters():
        t.name = name
    return params


def count_parameters(params: ModelParams) -> tuple[int, int]:
    """(total, total excluding the embedding table)."""
    total = sum(t.value.size for t in params.parameters())
    return total, total - params.embedding.value.size


# ---------------------------------------------------------------- SSM core


def discretize(delta, a_log, b_cont) -> tuple[Tensor, Tensor]:
    """Zero-order hold for the diagonal A, Euler for B.

    ``delta`` is ``[..., T]``, ``a_log`` is ``[N]``, ``b_cont`` is
    ``[..., T, N]``.  Returns ``(A_bar, B_bar)``, both ``[..., T, N]``.
    """
    delta = ad.tensor(delta)
    if (delta.value <= 0).any():
        raise ValueError("discretize: step sizes must be strictly positive")
    step = ad.reshape(delta, delta.shape + (1,))
    a_cont = -ad.exp(a_log)
    return ad.exp(step * a_cont), step * b_cont


def selection(x, p: SsmLayerParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size, input matrix and output matrix."""
    delta = ad.softplus(ad.matmul(x, p.delta_w) + p.delta_b)
    delta = ad.reshape(delta, delta.shape[:-1])
    return delta, ad.matmul(x, p.b_proj), ad.matmul(x, p.c_proj)


def selective_scan(x, p: SsmLayerParams) -> Tensor:
    """Selective SSM over ``x`` of shape ``[..., T, D]``.

    Per step t: ``h_t[d] = A_bar_t * h_{t-1}[d] + B_bar_t * x_t[d]`` (state
    ``[D, N]``, ``h_0 = 0``) and ``y_t[d] = <C_t, h_t[d]>``.
    """
    x = ad.tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ValueError("selective_scan: empty sequence")
    delta, b_cont, c = selection(x, p)
    a_bar, b_bar = discretize(delta, p.a_log, b_cont)
    return ad.ssm_scan(a_bar, b_bar, c, x)


def _reverse_time(x: Tensor) -> Tensor:
    return ad.getitem(x, (Ellipsis, slice(None, None, -1), slice(None)))


def directional_mix(h, p: SsmLayerParams) -> Tensor:
    return ad.matmul(selective_scan(ad.matmul(h, p.in_proj), p), p.out_proj)


def bidirectional_mix(h, fwd: SsmLayerParams, bwd: SsmLayerParams) -> Tensor:
    """Forward scan plus time-reversed backward scan (no residual)."""
    h = ad.tensor(h)
    return directional_mix(h, fwd) + _reverse_time(directional_mix(_reverse_time(h), bwd))


def layer_norm(x, scale, offset, eps: float = LN_EPS) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    return centered * ad.power(var + eps, -0.5) * scale + offset


def pffn(h, p: PffnParams) -> Tensor:
    return ad.matmul(ad.gelu(ad.matmul(h, p.w1) + p.b1), p.w2) + p.b2


def hydra_layer(h, p: HydraLayerParams) -> Tensor:
    h = ad.tensor(h)
    mixed = layer_norm(h + bidirectional_mix(h, p.forward, p.backward), p.ln_mix_scale, p.ln_mix_offset)
    # both residual branches start from the layer input
    return layer_norm(h + pffn(mixed, p.pffn), p.ln_out_scale, p.ln_out_offset)


def predict_scores(h_last, embedding) -> Tensor:
    """Softmax over the item vocabulary of ``h_last @ E^T``."""
    return ad.softmax(ad.matmul(h_last, ad.transpose(embedding)))


# ---------------------------------------------------------------- model


def pad_history(items: Sequence[int], max_len: int) -> np.ndarray:
    """Keep the last ``max_len`` items, left-padded with the padding id."""
    items = list(items)[-max_len:]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    if items:
        out[max_len - len(items):] = items
    return out


def pad_batch(histories: Sequence[Sequence[int]], max_len: int) -> np.ndarray:
    return np.stack([pad_history(h, max_len) for h in histories]) if histories else np.zeros((0, max_len), np.int64)


def encode(ids: np.ndarray, params: ModelParams) -> Tensor:
    """Hidden state at the last position for left-padded ids ``[B, L]``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = params.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise KeyError(f"unknown item id {int(bad)} (vocabulary size {vocab})")
    mask = ad.tensor((ids != PAD_ID).astype(np.float64)[..., None])
    h = layer_norm(ad.take(params.embedding, ids), params.emb_ln_scale, params.emb_ln_offset) * mask
    for layer in params.layers:
        h = hydra_layer(h, layer) * mask
    return ad.getitem(h, (Ellipsis, -1, slice(None)))


def logits(ids: np.ndarray, params: ModelParams) -> Tensor:
    return ad.matmul(encode(ids, params), ad.transpose(params.embedding))


def model_forward(items: Sequence[int], params: ModelParams) -> Tensor:
    """Next-item distribution ``[|V|]`` for one history."""
    if len(items) == 0:
        raise ValueError("model_forward: empty history")
    ids = pad_history(items, params.config.max_len)[None, :]
    return predict_scores(encode(ids, params)[0], params.embedding)


def next_item_loss(ids: np.ndarray, targets: np.ndarray, params: ModelParams) -> Tensor:
    """Mean cross-entropy of the next item at the final position."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = ad.log_softmax(logits(ids, params))
    picked = ad.getitem(logp, (np.arange(len(targets)), targets))
    return -ad.mean(picked)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header (version, config, tensor index),
    then raw little-endian float64 values in header order."""
    entries = []
    offset = 0
    for name, t in params.named_parameters():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.value.size
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.__dict__,
        "tensors": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in params.named_parameters():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    values = np.frombuffer(data[pos:], dtype="<f8")
    params = init_params(ModelConfig(**header["config"]))
    by_name = dict(params.named_parameters())
    if set(by_name) != {e["name"] for e in header["tensors"]}:
        raise ValueError(f"{path}: parameter names do not match the model layout")
    for e in header["tensors"]:
        t = by_name[e["name"]]
        size = int(np.prod(e["shape"], dtype=np.int64))
        if tuple(e["shape"]) != t.shape:
            raise ValueError(f"{path}: shape mismatch for {e['name']}")
        t.value[...] = values[e["offset"]:e["offset"] + size].reshape(e["shape"])
    return params, header.get("extra", {})
