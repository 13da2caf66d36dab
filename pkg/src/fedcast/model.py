"""Patch-based transformer forecaster for univariate daily series.

Architecture, applied independently per input row (a row is either one
channel of a multichannel series or one window of a training batch;
weights are shared either way):

1. per-instance normalization of the look-back window (mean/std of the
   window itself, restored on the way out),
2. tokenization by strided 1-D convolution: `N = floor(L / S)` tokens of
   width `embed_dim`, with end-replication padding,
3. an additive learnable positional table,
4. a stack of residual blocks, each `x + Mixer(Norm(x))` followed by
   `u + ChannelMlp(Norm(u))`, where the mixer is pluggable: identity,
   a token-axis MLP, or multi-head attention,
5. a single affine readout from the flattened token grid to the horizon,
6. denormalization back to the input scale.

The default block stack is two identity-mixer blocks followed by one
attention block: patch-local feature extraction first, one cheap global
pass at the end.  That is what keeps the parameter count roughly half of
an all-attention stack of the same depth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .optim import AdamState, LrSchedule, adam_step
from .tensor import Tape, Tensor, backward, constant

BLOCK_KINDS = ("id", "time_mlp", "attention")

REVIN_EPS = 1e-8

CHECKPOINT_FORMAT = "fedcast-checkpoint-v1"


@dataclass(frozen=True)
class ForecastConfig:
    """Shape of the forecaster; immutable and hashable."""

    lookback: int = 128
    horizon: int = 4
    patch_len: int = 16
    stride: int = 8
    embed_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    blocks: tuple[str, ...] = ("id", "id", "attention")
    channels: int = 1
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.lookback < 2:
            raise ValueError("lookback must be >= 2")
        if not 1 <= self.patch_len <= self.lookback:
            raise ValueError("patch_len must be in [1, lookback]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.embed_dim < 1 or self.heads < 1 or self.head_dim < 1:
            raise ValueError("embed_dim, heads and head_dim must be >= 1")
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(
                f"heads * head_dim must equal embed_dim "
                f"({self.heads} * {self.head_dim} != {self.embed_dim})"
            )
        for kind in self.blocks:
            if kind not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {kind!r}")
        if self.n_tokens < 1:
            raise ValueError("lookback // stride must be >= 1")

    @property
    def n_tokens(self) -> int:
        return self.lookback // self.stride

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.embed_dim


def attention_twin(config: ForecastConfig) -> ForecastConfig:
    """Same config with every block replaced by an attention block; the
    reference point for parameter-count comparisons."""
    return replace(config, blocks=("attention",) * len(config.blocks))


def param_spec(config: ForecastConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order: name and shape of every learnable
    tensor.  This order defines the flat-vector layout used by the
    optimizer, the federation policies, and checkpoints."""
    d, n = config.embed_dim, config.n_tokens
    spec: list[tuple[str, tuple[int, ...]]] = [
        ("tokenizer.kernel", (d, config.patch_len)),
        ("tokenizer.bias", (d,)),
        ("positional", (n, d)),
    ]
    for i, kind in enumerate(config.blocks):
        p = f"blocks.{i}"
        spec.append((f"{p}.norm1.gamma", (d,)))
        spec.append((f"{p}.norm1.beta", (d,)))
        if kind == "attention":
            for h in range(config.heads):
                spec.append((f"{p}.attn.q{h}", (d, config.head_dim)))
                spec.append((f"{p}.attn.k{h}", (d, config.head_dim)))
                spec.append((f"{p}.attn.v{h}", (d, d)))
            spec.append((f"{p}.attn.proj.weight", (config.heads * d, d)))
            spec.append((f"{p}.attn.proj.bias", (d,)))
        elif kind == "time_mlp":
            spec.append((f"{p}.mix.w1", (n, n)))
            spec.append((f"{p}.mix.b1", (n,)))
            spec.append((f"{p}.mix.w2", (n, n)))
            spec.append((f"{p}.mix.b2", (n,)))
        spec.append((f"{p}.norm2.gamma", (d,)))
        spec.append((f"{p}.norm2.beta", (d,)))
        spec.append((f"{p}.mlp.w1", (d, config.mlp_hidden)))
        spec.append((f"{p}.mlp.b1", (config.mlp_hidden,)))
        spec.append((f"{p}.mlp.w2", (config.mlp_hidden, d)))
        spec.append((f"{p}.mlp.b2", (d,)))
    spec.append(("head.weight", (n * d, config.horizon)))
    spec.append(("head.bias", (config.horizon,)))
    return spec


def param_count(config: ForecastConfig) -> int:
    """Total number of learnable scalars."""
    return _layout(config)[1]


_LAYOUT_CACHE: dict[ForecastConfig, tuple] = {}


def _layout(config: ForecastConfig) -> tuple[list[tuple[str, tuple[int, ...], int, int]], int]:
    """(name, shape, start, stop) per parameter, plus the total size."""
    cached = _LAYOUT_CACHE.get(config)
    if cached is None:
        entries = []
        pos = 0
        for name, shape in param_spec(config):
            size = int(np.prod(shape))
            entries.append((name, shape, pos, pos + size))
            pos += size
        cached = (entries, pos)
        _LAYOUT_CACHE[config] = cached
    return cached


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias") or leaf.startswith("b"):
        return np.zeros(shape)
    if name == "positional":
        return rng.normal(0.0, 0.02, size=shape)
    # weights: uniform in +-1/sqrt(fan_in); the tokenizer kernel reads
    # patch_len inputs, every other weight is stored (fan_in, fan_out)
    fan_in = shape[1] if name == "tokenizer.kernel" else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Ordered named parameter tensors for one config.

    The iteration order is exactly `param_spec(config)`; `as_vector` and
    `from_vector` are inverse bijections under that order.
    """

    def __init__(self, config: ForecastConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ForecastConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {
            name: T.param(_init_array(name, shape, rng))
            for name, shape in param_spec(config)
        }
        return cls(config, tensors)

    @classmethod
    def from_vector(cls, config: ForecastConfig, vec: np.ndarray) -> "ModelParams":
        entries, total = _layout(config)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (total,):
            raise T.ShapeError(f"expected vector of length {total}, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise T.NonFiniteError("parameter vector contains non-finite values")
        tensors: dict[str, Tensor] = {}
        for name, shape, start, stop in entries:
            t = Tensor.__new__(Tensor)
            t.data = vec[start:stop].reshape(shape)
            t.requires_grad = True
            tensors[name] = t
        return cls(config, tensors)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def param_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "config": _config_dict(self.config),
            "param_order": [
                {"name": name, "shape": list(shape)}
                for name, shape in param_spec(self.config)
            ],
            "values": self.as_vector().tolist(),
        }
        with open(path, "w") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a recognized checkpoint: {path}")
        config = config_from_dict(payload["config"])
        vec = np.asarray(payload["values"], dtype=np.float64)
        return cls.from_vector(config, vec)


def _config_dict(config: ForecastConfig) -> dict:
    return {
        "lookback": config.lookback,
        "horizon": config.horizon,
        "patch_len": config.patch_len,
        "stride": config.stride,
        "embed_dim": config.embed_dim,
        "heads": config.heads,
        "head_dim": config.head_dim,
        "blocks": list(config.blocks),
        "channels": config.channels,
        "mlp_ratio": config.mlp_ratio,
    }


def config_from_dict(d: dict) -> ForecastConfig:
    d = dict(d)
    if "blocks" in d:
        d["blocks"] = tuple(d["blocks"])
    return ForecastConfig(**d)


# ---------------------------------------------------------------------------
# instance normalization


@dataclass(frozen=True)
class RevinStats:
    """Per-row mean and guarded std of the look-back window."""

    mean: np.ndarray  # [B, 1]
    std: np.ndarray  # [B, 1], always >= REVIN_EPS


def revin_normalize(x: np.ndarray) -> tuple[np.ndarray, RevinStats]:
    """Standardize each row by its own mean/std.

    A constant row has zero variance; the std is floored at REVIN_EPS so
    the normalized row comes out exactly zero instead of NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise T.ShapeError(f"revin_normalize expects [B, L], got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    std = np.maximum(x.std(axis=1, keepdims=True), REVIN_EPS)
    return (x - mean) / std, RevinStats(mean=mean, std=std)


def revin_denormalize(y: np.ndarray, stats: RevinStats) -> np.ndarray:
    """Restore scale and offset recorded by `revin_normalize`."""
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# forward pieces


def tokenize(x_norm: Tensor, params: ModelParams) -> Tensor:
    """Normalized series [B, L] -> token grid [B, D, N]."""
    return T.conv1d(
        x_norm,
        params.tensors["tokenizer.kernel"],
        params.tensors["tokenizer.bias"],
        params.config.stride,
    )

def add_positional(tokens: Tensor, params: ModelParams) -> Tensor:
    """Token grid [B, D, N] -> [B, N, D] with the positional table added."""
    return T.add_bias(T.transpose(tokens), params.tensors["positional"])


def attention(q: Tensor, k: Tensor, v: Tensor, head_dim: int) -> Tensor:
    """Scaled dot-product attention for one head.

    `q`, `k` are [B, N, head_dim], `v` is [B, N, D]; rows of the score
    matrix are softmax-normalized after scaling by 1/sqrt(head_dim).
    """
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(head_dim))
    return T.matmul(T.softmax_lastaxis(scores), v)


def _mix_attention(x: Tensor, params: ModelParams, block: int) -> Tensor:
    cfg = params.config
    p = f"blocks.{block}.attn"
    heads = []
    for h in range(cfg.heads):
        q = T.matmul(x, params.tensors[f"{p}.q{h}"])
        k = T.matmul(x, params.tensors[f"{p}.k{h}"])
        v = T.matmul(x, params.tensors[f"{p}.v{h}"])
        heads.append(attention(q, k, v, cfg.head_dim))
    cat = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    out = T.matmul(cat, params.tensors[f"{p}.proj.weight"])
    return T.add_bias(out, params.tensors[f"{p}.proj.bias"])


def _mix_time_mlp(x: Tensor, params: ModelParams, block: int) -> Tensor:
    # Mixes along the token axis: two affine N->N layers applied to each
    # embedding row, with a GELU between them.
    p = f"blocks.{block}.mix"
    h = T.transpose(x)  # [B, D, N]
    h = T.add_bias(T.matmul(h, params.tensors[f"{p}.w1"]), params.tensors[f"{p}.b1"])
    h = T.gelu(h)
    h = T.add_bias(T.matmul(h, params.tensors[f"{p}.w2"]), params.tensors[f"{p}.b2"])
    return T.transpose(h)


def mixer_block(x: Tensor, params: ModelParams, block: int) -> Tensor:
    """One residual block: `u = x + Mixer(Norm(x))`, then
    `out = u + ChannelMlp(Norm(u))`.  The identity mixer contributes the
    normed input itself, so `u = x + Norm(x)`."""
    cfg = params.config
    kind = cfg.blocks[block]
    p = f"blocks.{block}"
    normed = T.layernorm(
        x, params.tensors[f"{p}.norm1.gamma"], params.tensors[f"{p}.norm1.beta"]
    )
    if kind == "id":
        mixed = normed
    elif kind == "time_mlp":
        mixed = _mix_time_mlp(normed, params, block)
    else:
        mixed = _mix_attention(normed, params, block)
    u = T.add(x, mixed)
    h = T.layernorm(
        u, params.tensors[f"{p}.norm2.gamma"], params.tensors[f"{p}.norm2.beta"]
    )
    h = T.add_bias(T.matmul(h, params.tensors[f"{p}.mlp.w1"]), params.tensors[f"{p}.mlp.b1"])
    h = T.gelu(h)
    h = T.add_bias(T.matmul(h, params.tensors[f"{p}.mlp.w2"]), params.tensors[f"{p}.mlp.b2"])
    return T.add(u, h)


def detokenize(hidden: Tensor, params: ModelParams) -> Tensor:
    """Token grid [B, N, D] -> horizon [B, T] via one affine layer on the
    flattened grid (token 0's vector first, then token 1's, ...)."""
    b = hidden.shape[0]
    cfg = params.config
    flat = T.reshape(hidden, (b, cfg.n_tokens * cfg.embed_dim))
    out = T.matmul(flat, params.tensors["head.weight"])
    return T.add_bias(out, params.tensors["head.bias"])


def forward(x: np.ndarray, params: ModelParams) -> Tensor:
    """Series rows [B, lookback] -> denormalized predictions [B, horizon].

    Rows are processed independently with shared weights, so the leading
    axis can be channels of one series or windows of a batch.
    """
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.lookback:
        raise T.ShapeError(f"forward expects [B, {cfg.lookback}], got {x.shape}")
    x_norm, stats = revin_normalize(x)
    h = add_positional(tokenize(constant(x_norm), params), params)
    for i in range(len(cfg.blocks)):
        h = mixer_block(h, params, i)
    pred = detokenize(h, params)
    b = x.shape[0]
    std = constant(np.broadcast_to(stats.std, (b, cfg.horizon)).copy())
    mean = constant(np.broadcast_to(stats.mean, (b, cfg.horizon)).copy())
    return T.add(T.mul(pred, std), mean)


def predict(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Forward pass without recording a tape."""
    return forward(x, params).data


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over rows of the summed squared error along the horizon."""
    target = constant(np.asarray(target, dtype=np.float64))
    if target.shape != pred.shape:
        raise T.ShapeError(f"mse_loss: {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, target)
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / pred.shape[0])


def mse_per_step(pred: np.ndarray, target: np.ndarray) -> float:
    """Plain mean squared error over every predicted point; the metric
    variant (not the training loss)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.mean((pred - target) ** 2))


# ---------------------------------------------------------------------------
# training loop for the pooled (non-federated) mode


@dataclass
class TrainResult:
    vector: np.ndarray
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def batch_loss_and_grads(
    vec: np.ndarray, config: ForecastConfig, xb: np.ndarray, yb: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss and flat gradient vector for one batch of windows."""
    params = ModelParams.from_vector(config, vec)
    with Tape() as tape:
        loss = mse_loss(forward(xb, params), yb)
    grads = backward(loss, tape, params.param_list())
    return float(loss.data), np.concatenate([g.ravel() for g in grads])


def train_model(
    x: np.ndarray,
    y: np.ndarray,
    config: ForecastConfig,
    *,
    seed: int,
    lr: float = 1e-3,
    peak_lr: float | None = None,
    schedule: str = "one_cycle",
    max_epochs: int = 100,
    patience: int = 20,
    batch_size: int = 32,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch=None,
) -> TrainResult:
    """Mini-batch Adam over pooled windows with early stopping.

    Monitors validation loss when `val` is given, else the epoch training
    loss; keeps the best-loss parameters.  Deterministic for a fixed seed.
    `on_epoch(epoch, vec, train_loss, monitored)` is called once per epoch
    when given.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("train_model needs at least one window")
    n = len(x)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    sched = LrSchedule(
        kind=schedule,
        base_rate=lr,
        peak_rate=(10.0 * lr if peak_lr is None else peak_lr),
        total_steps=max(1, steps_per_epoch * max_epochs),
    )
    rng = np.random.default_rng(seed)
    vec = ModelParams.init(config, seed).as_vector()
    state = AdamState.zeros(vec.size, lr=lr)
    best_vec, best_loss, best_epoch, stall = vec.copy(), np.inf, -1, 0
    history: list[dict] = []
    step = 0
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, gvec = batch_loss_and_grads(vec, config, x[idx], y[idx])
            vec = adam_step(vec, gvec, state, sched.rate(step))
            epoch_loss += loss * len(idx)
            step += 1
        epoch_loss /= n
        if val is not None:
            params = ModelParams.from_vector(config, vec)
            monitored = float(mse_loss(forward(val[0], params), val[1]).data)
        else:
            monitored = epoch_loss
        history.append({"epoch": epoch, "train_loss": epoch_loss, "monitored": monitored})
        if on_epoch is not None:
            on_epoch(epoch, vec, epoch_loss, monitored)
        if monitored < best_loss:
            best_loss, best_vec, best_epoch, stall = monitored, vec.copy(), epoch, 0
        else:
            stall += 1
            if patience is not None and stall >= patience:
                break
    return TrainResult(vector=best_vec, best_epoch=best_epoch, history=history)


def iter_param_names(config: ForecastConfig) -> Iterable[str]:
    for name, _ in param_spec(config):
        yield name
