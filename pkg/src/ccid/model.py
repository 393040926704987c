"""From-scratch bidirectional GRU classifier with additive attention.

Forward and reverse GRU passes run per layer, their per-step hidden states
are concatenated, dropout sits between stacked layers in training mode, an
additive attention head (``score_t = v . tanh(W a_t)``) pools the last
layer's outputs into a context vector, and a linear head produces the
4-way logits.

Cell equations (update gate ``z``, reset gate ``r``, candidate ``h~``):

    z  = sigmoid(Wz x + Uz h + bz)
    r  = sigmoid(Wr x + Ur h + br)
    h~ = tanh(Wh x + Uh (r o h) + bh)
    h' = (1 - z) o h + z o h~

Gradients are exact reverse-mode derivatives, hand-written against the
forward trace (the architecture is fixed, so no autodiff machinery is
needed). Everything is float64; softmax and log-softmax subtract the row
maximum. Weights initialize uniform in +/- 1/sqrt(hidden) except the
classifier head, which starts at zero so an untrained model is exactly
uniform over the four classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import container
from .protocols import LABEL_ORDER, ProtocolLabel
from .seeds import derive_seed

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1
NUM_CLASSES = 4


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 5
    hidden_size: int = 512
    num_layers: int = 3
    attention_size: int = 0  # 0 means "use hidden_size"
    dropout: float = 0.4
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        if self.input_size < 1 or self.hidden_size < 1 or self.num_layers < 1:
            raise ModelError("input_size, hidden_size, num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def attn_size(self) -> int:
        return self.attention_size or self.hidden_size

    def layer_input_size(self, layer: int) -> int:
        return self.input_size if layer == 0 else 2 * self.hidden_size

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden_size
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.num_layers):
            d_in = self.layer_input_size(i)
            for d in ("fwd", "bwd"):
                shapes[f"layer{i}.{d}.w_in"] = (3 * h, d_in)
                shapes[f"layer{i}.{d}.w_rec"] = (3 * h, h)
                shapes[f"layer{i}.{d}.bias"] = (3 * h,)
        shapes["attention.proj"] = (self.attn_size, 2 * h)
        shapes["attention.score"] = (self.attn_size,)
        shapes["head.weight"] = (self.num_classes, 2 * h)
        shapes["head.bias"] = (self.num_classes,)
        return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(derive_seed(seed, "init"))
    bound = 1.0 / np.sqrt(config.hidden_size)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.startswith("head."):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


def zero_grads(config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in config.tensor_shapes().items()}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_cell(
    x: np.ndarray, h: np.ndarray, w_in: np.ndarray, w_rec: np.ndarray, bias: np.ndarray
) -> np.ndarray:
    """One GRU step for a single input/hidden vector pair.

    Weight rows are stacked gates [update; reset; candidate].
    """
    hidden = w_rec.shape[1]
    if (
        w_in.shape[0] != 3 * hidden
        or w_rec.shape[0] != 3 * hidden
        or bias.shape[0] != 3 * hidden
        or x.shape[-1] != w_in.shape[1]
        or h.shape[-1] != hidden
    ):
        raise ModelError(
            f"dimension mismatch: x{x.shape} h{h.shape} "
            f"w_in{w_in.shape} w_rec{w_rec.shape} bias{bias.shape}"
        )
    z = _sigmoid(w_in[:hidden] @ x + w_rec[:hidden] @ h + bias[:hidden])
    r = _sigmoid(w_in[hidden : 2 * hidden] @ x + w_rec[hidden : 2 * hidden] @ h + bias[hidden : 2 * hidden])
    c = np.tanh(w_in[2 * hidden :] @ x + w_rec[2 * hidden :] @ (r * h) + bias[2 * hidden :])
    return (1.0 - z) * h + z * c


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class _DirectionCache:
    __slots__ = ("x", "z", "r", "c", "h_prev", "reverse")

    def __init__(self, x, z, r, c, h_prev, reverse):
        self.x = x
        self.z = z
        self.r = r
        self.c = c
        self.h_prev = h_prev
        self.reverse = reverse


def _gru_direction(
    x: np.ndarray, w_in: np.ndarray, w_rec: np.ndarray, bias: np.ndarray, reverse: bool
) -> tuple[np.ndarray, _DirectionCache]:
    batch, steps, _ = x.shape
    hidden = w_rec.shape[1]
    wx = x @ w_in.T + bias  # (B, T, 3H)
    u_zr = w_rec[: 2 * hidden]
    u_c = w_rec[2 * hidden :]
    out = np.empty((batch, steps, hidden))
    z_all = np.empty((batch, steps, hidden))
    r_all = np.empty((batch, steps, hidden))
    c_all = np.empty((batch, steps, hidden))
    h_prev_all = np.empty((batch, steps, hidden))
    h = np.zeros((batch, hidden))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        zr = _sigmoid(wx[:, t, : 2 * hidden] + h @ u_zr.T)
        z = zr[:, :hidden]
        r = zr[:, hidden:]
        c = np.tanh(wx[:, t, 2 * hidden :] + (r * h) @ u_c.T)
        h_prev_all[:, t] = h
        h = (1.0 - z) * h + z * c
        out[:, t] = h
        z_all[:, t] = z
        r_all[:, t] = r
        c_all[:, t] = c
    return out, _DirectionCache(x, z_all, r_all, c_all, h_prev_all, reverse)


def _gru_direction_backward(
    dout: np.ndarray,
    cache: _DirectionCache,
    w_in: np.ndarray,
    w_rec: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    batch, steps, hidden = dout.shape
    x = cache.x
    g_w_in = np.zeros_like(w_in)
    g_w_rec = np.zeros_like(w_rec)
    g_bias = np.zeros(3 * hidden)
    dx = np.empty_like(x)
    w_in_zr = w_in[: 2 * hidden]
    w_in_c = w_in[2 * hidden :]
    u_zr = w_rec[: 2 * hidden]
    u_c = w_rec[2 * hidden :]
    dh = np.zeros((batch, hidden))
    # walk steps in reverse processing order
    order = range(steps) if cache.reverse else range(steps - 1, -1, -1)
    for t in order:
        dh = dh + dout[:, t]
        z = cache.z[:, t]
        r = cache.r[:, t]
        c = cache.c[:, t]
        hp = cache.h_prev[:, t]
        x_t = x[:, t]
        dz = dh * (c - hp)
        dc_pre = (dh * z) * (1.0 - c * c)
        dh_next = dh * (1.0 - z)
        g_w_in[2 * hidden :] += dc_pre.T @ x_t
        g_w_rec[2 * hidden :] += dc_pre.T @ (r * hp)
        g_bias[2 * hidden :] += dc_pre.sum(axis=0)
        d_rh = dc_pre @ u_c
        dr = d_rh * hp
        dh_next += d_rh * r
        dzr_pre = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        g_w_in[: 2 * hidden] += dzr_pre.T @ x_t
        g_w_rec[: 2 * hidden] += dzr_pre.T @ hp
        g_bias[: 2 * hidden] += dzr_pre.sum(axis=0)
        dh_next += dzr_pre @ u_zr
        dx[:, t] = dc_pre @ w_in_c + dzr_pre @ w_in_zr
        dh = dh_next
    return dx, g_w_in, g_w_rec, g_bias


@dataclass
class ForwardTrace:
    """Every intermediate needed by the backward pass."""

    x: np.ndarray
    layer_caches: list[tuple[_DirectionCache, _DirectionCache]] = field(default_factory=list)
    dropout_masks: list[np.ndarray | None] = field(default_factory=list)
    last_output: np.ndarray | None = None  # (B, T, 2H)
    attn_tanh: np.ndarray | None = None    # (B, T, A)
    attention_weights: np.ndarray | None = None  # (B, T)
    context: np.ndarray | None = None      # (B, 2H)
    logits: np.ndarray | None = None


def _check_finite(a: np.ndarray, layer: int, what: str) -> None:
    if not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))
        step = int(bad[0][1]) if a.ndim >= 2 else 0
        raise ModelError(f"non-finite {what} at layer {layer}, step {step}")


def forward_batch(
    x: np.ndarray,
    params: ModelParams,
    training: bool = False,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the full network on a (batch, steps, features) array."""
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.input_size:
        raise ModelError(
            f"input shape {x.shape} does not match input_size {cfg.input_size}"
        )
    t = params.tensors
    trace = ForwardTrace(x=x)
    rng = (
        np.random.default_rng(derive_seed(dropout_seed, "dropout"))
        if training and cfg.dropout > 0.0
        else None
    )
    inp = x
    for i in range(cfg.num_layers):
        mask = None
        if i > 0 and rng is not None:
            mask = (rng.random(inp.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            inp = inp * mask
        trace.dropout_masks.append(mask)
        out_f, cache_f = _gru_direction(
            inp, t[f"layer{i}.fwd.w_in"], t[f"layer{i}.fwd.w_rec"], t[f"layer{i}.fwd.bias"], False
        )
        out_b, cache_b = _gru_direction(
            inp, t[f"layer{i}.bwd.w_in"], t[f"layer{i}.bwd.w_rec"], t[f"layer{i}.bwd.bias"], True
        )
        trace.layer_caches.append((cache_f, cache_b))
        inp = np.concatenate([out_f, out_b], axis=2)
        _check_finite(inp, i, "hidden state")

    trace.last_output = inp
    u = np.tanh(inp @ t["attention.proj"].T)  # (B, T, A)
    scores = u @ t["attention.score"]         # (B, T)
    weights = softmax(scores, axis=1)
    context = np.einsum("bt,btk->bk", weights, inp)
    logits = context @ t["head.weight"].T + t["head.bias"]
    trace.attn_tanh = u
    trace.attention_weights = weights
    trace.context = context
    trace.logits = logits
    return logits, trace


def forward(
    sample: np.ndarray,
    params: ModelParams,
    training: bool = False,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, ForwardTrace]:
    """Single-sample forward; returns the 4-vector of logits and the trace."""
    logits, trace = forward_batch(sample[None, :, :], params, training, dropout_seed)
    return logits[0], trace


def backward_batch(
    dlogits: np.ndarray, params: ModelParams, trace: ForwardTrace
) -> dict[str, np.ndarray]:
    """Exact gradients for every tensor given d(loss)/d(logits)."""
    cfg = params.config
    t = params.tensors
    grads = zero_grads(cfg)
    a = trace.last_output
    u = trace.attn_tanh
    w = trace.attention_weights
    context = trace.context

    grads["head.weight"] += dlogits.T @ context
    grads["head.bias"] += dlogits.sum(axis=0)
    dcontext = dlogits @ t["head.weight"]  # (B, 2H)

    dw = np.einsum("bk,btk->bt", dcontext, a)
    da = w[:, :, None] * dcontext[:, None, :]
    de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    grads["attention.score"] += np.einsum("bt,bta->a", de, u)
    du_pre = de[:, :, None] * t["attention.score"][None, None, :] * (1.0 - u * u)
    grads["attention.proj"] += np.einsum("bta,btk->ak", du_pre, a)
    da += du_pre @ t["attention.proj"]

    dout = da
    for i in range(cfg.num_layers - 1, -1, -1):
        cache_f, cache_b = trace.layer_caches[i]
        h = cfg.hidden_size
        dx_f, gwi_f, gwr_f, gb_f = _gru_direction_backward(
            dout[:, :, :h], cache_f, t[f"layer{i}.fwd.w_in"], t[f"layer{i}.fwd.w_rec"]
        )
        dx_b, gwi_b, gwr_b, gb_b = _gru_direction_backward(
            dout[:, :, h:], cache_b, t[f"layer{i}.bwd.w_in"], t[f"layer{i}.bwd.w_rec"]
        )
        grads[f"layer{i}.fwd.w_in"] += gwi_f
        grads[f"layer{i}.fwd.w_rec"] += gwr_f
        grads[f"layer{i}.fwd.bias"] += gb_f
        grads[f"layer{i}.bwd.w_in"] += gwi_b
        grads[f"layer{i}.bwd.w_rec"] += gwr_b
        grads[f"layer{i}.bwd.bias"] += gb_b
        dx = dx_f + dx_b
        mask = trace.dropout_masks[i]
        if mask is not None:
            dx = dx * mask
        dout = dx
    return grads


def loss_and_grads(
    batch_x: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    training: bool = True,
    dropout_seed: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and exact gradients for it."""
    labels = np.asarray(labels, dtype=int)
    if batch_x.shape[0] == 0:
        raise ModelError("empty batch")
    if labels.min() < 0 or labels.max() >= params.config.num_classes:
        raise ModelError(
            f"label out of range: {labels.min()}..{labels.max()} "
            f"for {params.config.num_classes} classes"
        )
    logits, trace = forward_batch(batch_x, params, training, dropout_seed)
    logp = log_softmax(logits, axis=1)
    n = batch_x.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = backward_batch(dlogits, params, trace)
    return loss, grads


def batch_loss(
    batch_x: np.ndarray, labels: np.ndarray, params: ModelParams
) -> tuple[float, np.ndarray]:
    """Evaluation-mode mean loss and predicted class indices."""
    labels = np.asarray(labels, dtype=int)
    logits, _ = forward_batch(batch_x, params, training=False)
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return loss, logp.argmax(axis=1)


def predict(sample: np.ndarray, params: ModelParams) -> tuple[ProtocolLabel, np.ndarray]:
    """Evaluation-mode class and probabilities; ties break to the lowest index."""
    logits, _ = forward(sample, params, training=False)
    probs = softmax(logits)
    return LABEL_ORDER[int(np.argmax(probs))], probs


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    *,
    norm_mean: np.ndarray,
    norm_std: np.ndarray,
    seed: int,
    optimizer: dict | None = None,
    epoch: int | None = None,
) -> None:
    """Write a versioned checkpoint (config, tensors, normalization, seed).

    ``optimizer`` optionally carries Adam state (``m``, ``v`` tensor dicts
    plus ``t`` and ``lr``) so training can resume.
    """
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    arrays["norm_mean"] = norm_mean
    arrays["norm_std"] = norm_std
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "seed": seed,
        "epoch": epoch,
        "optimizer": None,
    }
    if optimizer is not None:
        for k, v in optimizer["m"].items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer["v"].items():
            arrays[f"adam_v/{k}"] = v
        meta["optimizer"] = {"t": optimizer["t"], "lr": optimizer["lr"]}
    container.save(path, CHECKPOINT_KIND, meta, arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    norm_mean: np.ndarray
    norm_std: np.ndarray
    seed: int
    epoch: int | None
    optimizer: dict | None


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        meta, arrays = container.load(path, expect_kind=CHECKPOINT_KIND)
    except container.ContainerError as exc:
        raise CheckpointError(str(exc)) from None
    config = ModelConfig(**meta["config"])
    if expect_config is not None and config != expect_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expect_config}"
        )
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if arrays[key].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[key].shape}, expected {shape}"
            )
        tensors[name] = arrays[key]
    optimizer = None
    if meta.get("optimizer"):
        optimizer = {
            "m": {k: arrays[f"adam_m/{k}"] for k in tensors},
            "v": {k: arrays[f"adam_v/{k}"] for k in tensors},
            "t": int(meta["optimizer"]["t"]),
            "lr": float(meta["optimizer"]["lr"]),
        }
    return Checkpoint(
        params=ModelParams(config, tensors),
        norm_mean=arrays["norm_mean"],
        norm_std=arrays["norm_std"],
        seed=int(meta["seed"]),
        epoch=meta.get("epoch"),
        optimizer=optimizer,
    )
