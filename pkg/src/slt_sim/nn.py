"""Block-level reverse-mode autodiff on dense numpy tensors.

Tensors are NCHW throughout; dense blocks keep a trailing 1x1 spatial extent so
norm and skip code is shared with conv blocks. A forward pass in train mode
returns an :class:`ActivationRecord` holding only what the trainable region
(blocks ``> freeze_below``) needs for the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteGradientError, ShapeError, UsageError
from .topology import TopologySpec

TRAINABLE_KEYS = ("weight", "bias", "gamma", "beta")
STAT_KEYS = ("running_mean", "running_var")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ParameterStore:
    """Per-block parameter arrays; ``blocks[k-1]`` belongs to block k."""

    blocks: list[dict[str, np.ndarray]]

    def copy(self) -> "ParameterStore":
        return ParameterStore([{key: a.copy() for key, a in b.items()} for b in self.blocks])

    def block(self, k: int) -> dict[str, np.ndarray]:
        return self.blocks[k - 1]

    def num_elements(self, blocks=None) -> int:
        ks = range(1, len(self.blocks) + 1) if blocks is None else blocks
        return sum(a.size for k in ks for a in self.blocks[k - 1].values())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for b in self.blocks for a in b.values())

    def equals(self, other: "ParameterStore") -> bool:
        """Bitwise equality (same keys, shapes, dtypes and bytes)."""
        if len(self.blocks) != len(other.blocks):
            return False
        for a, b in zip(self.blocks, other.blocks):
            if a.keys() != b.keys():
                return False
            for key in a:
                if a[key].shape != b[key].shape or a[key].tobytes() != b[key].tobytes():
                    return False
        return True

    def check_shapes(self, topology: TopologySpec):
        for b, p in zip(topology.blocks, self.blocks):
            if p["weight"].shape != b.weight_shape():
                raise ShapeError(b.index, b.weight_shape(), p["weight"].shape)
            for key, a in p.items():
                if key != "weight" and a.shape != (b.out_channels,):
                    raise ShapeError(b.index, (b.out_channels,), a.shape)


def init_params(topology: TopologySpec, rng: np.random.Generator,
                dtype=np.float32) -> ParameterStore:
    """Uniform weights in +-1/sqrt(fan_in), zero biases, identity batch norm.

    This is the usual framework default for conv and linear layers. Its small
    scale matters for subset training: filters that a device never trains stay
    at init, and in full-model evaluation they should perturb the trained
    ones only mildly.
    """
    blocks = []
    for b in topology.blocks:
        fan_in = b.in_channels * b.kernel[0] * b.kernel[1]
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, b.weight_shape())
        p = {"weight": w.astype(dtype), "bias": np.zeros(b.out_channels, dtype)}
        if b.norm == "batch":
            p["gamma"] = np.ones(b.out_channels, dtype)
            p["beta"] = np.zeros(b.out_channels, dtype)
            p["running_mean"] = np.zeros(b.out_channels, dtype)
            p["running_var"] = np.ones(b.out_channels, dtype)
        blocks.append(p)
    return ParameterStore(blocks)


# -- primitive ops -------------------------------------------------------


def _im2col(x, kernel, stride, padding):
    (kh, kw), (ph, pw) = kernel, padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, x.shape, (Ho, Wo)


def conv_forward(x, w, bias, stride, padding):
    cols, padded_shape, (Ho, Wo) = _im2col(x, w.shape[2:], stride, padding)
    out = cols @ w.reshape(w.shape[0], -1).T + bias
    out = out.reshape(x.shape[0], Ho, Wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, padded_shape)


def conv_backward(dout, w, cache, stride, padding, need_dx=True):
    cols, padded_shape = cache
    M, C, kh, kw = w.shape
    B, _, Ho, Wo = dout.shape
    g = dout.transpose(0, 2, 3, 1).reshape(-1, M)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (g @ w.reshape(M, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    ph, pw = padding
    H, W = padded_shape[2] - 2 * ph, padded_shape[3] - 2 * pw
    return dxp[:, :, ph:ph + H, pw:pw + W], dw, db


def bn_train_forward(z, p, update_stats=True):
    mu = z.mean(axis=(0, 2, 3))
    var = z.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * p["gamma"][None, :, None, None] + p["beta"][None, :, None, None]
    if update_stats:
        n = z.shape[0] * z.shape[2] * z.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        p["running_mean"][...] = (1 - BN_MOMENTUM) * p["running_mean"] + BN_MOMENTUM * mu
        p["running_var"][...] = (1 - BN_MOMENTUM) * p["running_var"] + BN_MOMENTUM * unbiased
    return out, (xhat, inv)


def bn_eval_forward(z, p):
    inv = 1.0 / np.sqrt(p["running_var"] + BN_EPS)
    scale = (p["gamma"] * inv)[None, :, None, None]
    return (z - p["running_mean"][None, :, None, None]) * scale + p["beta"][None, :, None, None]


def bn_backward(dout, gamma, cache):
    xhat, inv = cache
    n = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dz = (inv[None, :, None, None] / n) * (
        n * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dz, dgamma, dbeta


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    B = logits.shape[0]
    loss = float(-np.log(p[np.arange(B), labels] + 1e-12).mean())
    grad = p
    grad[np.arange(B), labels] -= 1
    return loss, grad / B


# -- block forward/backward ----------------------------------------------


@dataclass
class ActivationRecord:
    topology: TopologySpec
    params: ParameterStore
    freeze_below: int
    boundary: np.ndarray
    caches: dict[int, dict] = field(default_factory=dict)
    consumed: bool = False

    def retained_arrays(self) -> list[np.ndarray]:
        out = [self.boundary]
        for c in self.caches.values():
            out.extend(v for v in c.values() if isinstance(v, np.ndarray))
        return out


def _block_forward(b, p, x, skip_src, train, keep):
    cache = {}
    if b.is_dense:
        if x.shape[2] * x.shape[3] > 1:
            cache["pool_shape"] = x.shape
            x = x.mean(axis=(2, 3), keepdims=True)
        cols = x.reshape(x.shape[0], -1)
        z = (cols @ p["weight"].reshape(p["weight"].shape[0], -1).T + p["bias"])[:, :, None, None]
        if keep:
            cache["cols"] = cols
    else:
        z, conv_cache = conv_forward(x, p["weight"], p["bias"], b.stride, b.padding)
        if keep:
            cache["conv"] = conv_cache
    if b.norm == "batch":
        if train:
            z, bn_cache = bn_train_forward(z, p)
            if keep:
                cache["bn"] = bn_cache
        else:
            z = bn_eval_forward(z, p)
    if skip_src is not None:
        z = z + skip_src[:, : z.shape[1]]
    if b.activation == "relu":
        z = np.maximum(z, 0)
        if keep:
            cache["relu_mask"] = z > 0
    return z, cache


def forward(params: ParameterStore, topology: TopologySpec, batch: np.ndarray,
            mode: str = "train", freeze_below: int = 0):
    """Run the network; returns ``(logits, record)``.

    Blocks ``<= freeze_below`` run in eval mode (running statistics, no cache) so
    that their parameters stay untouched. In eval mode ``record`` is None.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"unknown mode {mode!r}")
    K = topology.K
    if not 0 <= freeze_below <= K:
        raise UsageError(f"freeze_below must lie in [0, {K}], got {freeze_below}")
    expected = topology.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(0, (batch.shape[0] if batch.ndim else -1, *expected), batch.shape)

    train = mode == "train"
    outputs: dict[int, np.ndarray] = {0: batch}
    # outputs of blocks still needed as skip sources
    needed = {b.skip_from for b in topology.blocks if b.skip_from is not None}
    record = None
    if train and freeze_below == 0:
        record = ActivationRecord(topology, params, 0, batch)
    x = batch
    for b in topology.blocks:
        p = params.blocks[b.index - 1]
        if p["weight"].shape != b.weight_shape():
            raise ShapeError(b.index, b.weight_shape(), p["weight"].shape)
        if x.shape[1] != b.in_channels:
            raise ShapeError(b.index, (x.shape[0], b.in_channels, *x.shape[2:]), x.shape)
        trainable = train and b.index > freeze_below
        skip_src = outputs[b.skip_from] if b.skip_from is not None else None
        x, cache = _block_forward(b, p, x, skip_src, trainable, trainable)
        if b.index in needed:
            outputs[b.index] = x
        if trainable:
            record.caches[b.index] = cache
        if train and b.index == freeze_below:
            record = ActivationRecord(topology, params, freeze_below, x)
    return x[:, :, 0, 0], record


def backward(loss_grad: np.ndarray, record: ActivationRecord | None):
    """Gradients for every block above the freeze point; frozen blocks map to None."""
    if record is None:
        raise UsageError("backward needs the record of a train-mode forward pass")
    if record.consumed:
        raise UsageError("activation record already consumed by a backward pass")
    record.consumed = True
    topo, params, kf = record.topology, record.params, record.freeze_below
    grads: list[dict | None] = [None] * topo.K
    upstream: dict[int, np.ndarray] = {topo.K: loss_grad[:, :, None, None]}
    for k in range(topo.K, kf, -1):
        b = topo.block(k)
        p = params.blocks[k - 1]
        cache = record.caches[k]
        d = upstream.pop(k)
        g = {}
        if b.activation == "relu":
            d = d * cache["relu_mask"]
        if b.skip_from is not None and b.skip_from > kf:
            src = b.skip_from
            m_src = topo.block(src).out_channels
            ds = d if d.shape[1] == m_src else np.pad(
                d, ((0, 0), (0, m_src - d.shape[1]), (0, 0), (0, 0)))
            upstream[src] = upstream[src] + ds if src in upstream else ds
        if b.norm == "batch":
            d, g["gamma"], g["beta"] = bn_backward(d, p["gamma"], cache["bn"])
        need_dx = k - 1 > kf
        if b.is_dense:
            d2 = d[:, :, 0, 0]
            w2 = p["weight"].reshape(p["weight"].shape[0], -1)
            g["weight"] = (d2.T @ cache["cols"]).reshape(p["weight"].shape)
            g["bias"] = d2.sum(axis=0)
            if need_dx:
                dx = d2 @ w2
                if "pool_shape" in cache:
                    B, C, H, W = cache["pool_shape"]
                    dx = np.broadcast_to(dx[:, :, None, None] / (H * W), (B, C, H, W)).copy()
                else:
                    dx = dx[:, :, None, None]
        else:
            dx, g["weight"], g["bias"] = conv_backward(
                d, p["weight"], cache["conv"], b.stride, b.padding, need_dx)
        if need_dx:
            upstream[k - 1] = upstream[k - 1] + dx if k - 1 in upstream else dx
        grads[k - 1] = g
    return grads


# -- optimization --------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise UsageError("learning rate must be non-negative")


def sgd_step(params: ParameterStore, grads, opt: OptimizerState) -> ParameterStore:
    """In-place SGD with momentum: ``v = m*v + g + wd*w; w -= lr*v``."""
    for k, g in enumerate(grads, start=1):
        if g is None:
            continue
        for key, gk in g.items():
            if not np.isfinite(gk).all():
                raise NonFiniteGradientError(k, key)
    for k, g in enumerate(grads, start=1):
        if g is None:
            continue
        p = params.blocks[k - 1]
        for key, gk in g.items():
            w = p[key]
            if gk.shape != w.shape:
                raise ShapeError(k, w.shape, gk.shape)
            step = gk + opt.weight_decay * w if opt.weight_decay else gk
            v = opt.velocity.get((k, key))
            if v is None:
                v = opt.velocity[(k, key)] = np.array(step, dtype=w.dtype)
            else:
                # in place, so velocity buffers may be views into a larger model
                v *= opt.momentum
                v += step
            w -= (opt.learning_rate * v).astype(w.dtype, copy=False)
    return params


def cosine_lr(r: float, R: int, lr0: float = 0.1, lr_min: float = 0.01) -> float:
    if R <= 0:
        raise UsageError("total rounds must be positive")
    if not 0 <= r <= R:
        raise UsageError(f"round {r} outside [0, {R}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * r / R))


def predict(params, topology, x, batch_size=256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward(params, topology, x[i:i + batch_size], mode="eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params, topology, x, y, batch_size=256) -> float:
    """Top-1 accuracy in eval mode."""
    if len(x) == 0:
        raise UsageError("empty test set")
    return float((predict(params, topology, x, batch_size) == y).mean())
