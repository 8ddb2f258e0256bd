"""Encoder-only transformer for multi-label audio classification.

Architecture: two-layer conv stem over the mel axis (kernel 3, second conv
stride 2, GELU after each), additive sinusoidal position table, a stack of
self-attention encoder layers (pre- or post-norm), final layer norm, mean
pooling over time, a linear projector, and a linear six-way classifier.

All parameters live in a ParameterRegistry keyed by name and grouped into
feature_extractor / encoder_layer_k / head so freezing strategies can be
expressed as group predicates. Forward passes are pure reads of the registry;
backward_pass returns gradients for every parameter given the cache recorded
by forward_with_cache.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-5

FEATURE_EXTRACTOR = "feature_extractor"
HEAD = "head"


class ShapeMismatch(Exception):
    """Input tensor shape violates an operation's contract."""


class NonFiniteInput(Exception):
    """NaN or Inf in an operation's input."""


class NonFiniteActivation(Exception):
    """NaN or Inf appeared mid-layer."""


class FreezeSpecError(ValueError):
    """Freeze spec string does not match the UnFrz/Frz grammar."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_layers: int = 6
    n_heads: int = 8
    d_ffn: int = 2048
    n_mels: int = 80
    max_positions: int = 1500
    d_proj: int = 256
    n_classes: int = 6
    norm_placement: str = "pre"  # "pre" | "post"
    ffn_activation: str = "gelu"  # "gelu" | "relu"
    attention_key_bias: bool = False

    def __post_init__(self) -> None:
        if self.attention_key_bias:
            # the parameter accounting (3,151,872 per layer) assumes none
            raise ValueError("a bias on the attention key projection is not supported")
        if self.d_model % self.n_heads:
            raise ShapeMismatch(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ShapeMismatch("d_model must be even for sinusoidal positions")
        if self.n_classes != 6:
            raise ShapeMismatch("the classification head is six-way")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError(f"norm_placement must be 'pre' or 'post', got {self.norm_placement!r}")
        if self.ffn_activation not in ("gelu", "relu"):
            raise ValueError(f"ffn_activation must be 'gelu' or 'relu', got {self.ffn_activation!r}")


def encoder_layer_group(k: int) -> str:
    return f"encoder_layer_{k}"


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, group) for every parameter, in registry order.

    Linear weights are stored [in, out] (y = x @ W + b); conv weights
    [out, in, kernel]. The attention key projection carries no bias.
    """
    d, f, m = cfg.d_model, cfg.d_ffn, cfg.n_mels
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("conv1.w", (d, m, 3), FEATURE_EXTRACTOR),
        ("conv1.b", (d,), FEATURE_EXTRACTOR),
        ("conv2.w", (d, d, 3), FEATURE_EXTRACTOR),
        ("conv2.b", (d,), FEATURE_EXTRACTOR),
        ("embed_positions", (cfg.max_positions, d), FEATURE_EXTRACTOR),
    ]
    for k in range(cfg.n_layers):
        g = encoder_layer_group(k)
        p = f"layers.{k}"
        specs += [
            (f"{p}.attn.q.w", (d, d), g),
            (f"{p}.attn.q.b", (d,), g),
            (f"{p}.attn.k.w", (d, d), g),
            (f"{p}.attn.v.w", (d, d), g),
            (f"{p}.attn.v.b", (d,), g),
            (f"{p}.attn.out.w", (d, d), g),
            (f"{p}.attn.out.b", (d,), g),
            (f"{p}.attn_norm.gamma", (d,), g),
            (f"{p}.attn_norm.beta", (d,), g),
            (f"{p}.ffn.w1", (d, f), g),
            (f"{p}.ffn.b1", (f,), g),
            (f"{p}.ffn.w2", (f, d), g),
            (f"{p}.ffn.b2", (d,), g),
            (f"{p}.ffn_norm.gamma", (d,), g),
            (f"{p}.ffn_norm.beta", (d,), g),
        ]
    specs += [
        ("post_encoder_layernorm.gamma", (d,), HEAD),
        ("post_encoder_layernorm.beta", (d,), HEAD),
        ("projector.w", (d, cfg.d_proj), HEAD),
        ("projector.b", (cfg.d_proj,), HEAD),
        ("classifier.w", (cfg.d_proj, cfg.n_classes), HEAD),
        ("classifier.b", (cfg.n_classes,), HEAD),
    ]
    return specs


@dataclass
class ParamEntry:
    value: np.ndarray
    group: str
    trainable: bool = True


class ParameterRegistry:
    """Ordered name -> (tensor, group, trainable) map for every model parameter."""

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray, group: str, trainable: bool = True) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(np.asarray(value, dtype=DTYPE), group, trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def total_count(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def copy(self) -> "ParameterRegistry":
        out = ParameterRegistry()
        for name, e in self._entries.items():
            out.add(name, e.value.copy(), e.group, e.trainable)
        return out


def sinusoidal_positions(n_pos: int, d: int) -> np.ndarray:
    """[n_pos x d] table: column 2i holds sin(pos / 10000^(2i/d)), column 2i+1 the cosine."""
    if d % 2:
        raise ShapeMismatch("embedding dimension must be even")
    pos = np.arange(n_pos, dtype=DTYPE)[:, None]
    i = np.arange(d // 2, dtype=DTYPE)[None, :]
    angles = pos / 10000.0 ** (2.0 * i / d)
    table = np.empty((n_pos, d), dtype=DTYPE)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def build_registry(cfg: ModelConfig, seed: int = 0) -> ParameterRegistry:
    """Initialize all parameters: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for
    affine maps, ones/zeros for norms, a fixed sinusoid table for positions."""
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    bounds: dict[str, float] = {}
    for name, shape, group in param_specs(cfg):
        if name == "embed_positions":
            value = sinusoidal_positions(cfg.max_positions, cfg.d_model)
        elif name.endswith(".gamma"):
            value = np.ones(shape, dtype=DTYPE)
        elif name.endswith(".beta"):
            value = np.zeros(shape, dtype=DTYPE)
        else:
            stem, leaf = name.rsplit(".", 1)
            if leaf.startswith("w"):
                fan_in = shape[1] * shape[2] if len(shape) == 3 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                bounds[f"{stem}.{leaf.replace('w', 'b')}"] = bound
            else:
                bound = bounds[name]
            value = rng.uniform(-bound, bound, size=shape)
        reg.add(name, value, group)
    return reg


# ---------------------------------------------------------------------------
# Freezing


@dataclass(frozen=True)
class FreezeConfig:
    frozen_layers: frozenset[int] = frozenset()
    freeze_feature_extractor: bool = False


_FREEZE_RE = re.compile(r"^(UnFrz|Frz)(\d+)-(\d+)(\+FrzFE)?$")

FREEZE_GRAMMAR = (
    "freeze specs: 'UnFrz<a>-<b>' (layers a..b trainable, others frozen) or "
    "'Frz<a>-<b>' (layers a..b frozen), optionally followed by '+FrzFE' to "
    "freeze the feature extractor; e.g. UnFrz0-5, Frz0-2, Frz0-4+FrzFE"
)


def parse_freeze_spec(spec: str, n_layers: int = 6) -> FreezeConfig:
    m = _FREEZE_RE.match(spec.strip())
    if not m:
        raise FreezeSpecError(f"bad freeze spec {spec!r}; {FREEZE_GRAMMAR}")
    kind, lo, hi, fe = m.group(1), int(m.group(2)), int(m.group(3)), bool(m.group(4))
    if lo > hi or hi >= n_layers:
        raise FreezeSpecError(
            f"bad freeze spec {spec!r}: layer range {lo}-{hi} outside 0..{n_layers - 1}"
        )
    span = set(range(lo, hi + 1))
    frozen = set(range(n_layers)) - span if kind == "UnFrz" else span
    return FreezeConfig(frozen_layers=frozenset(frozen), freeze_feature_extractor=fe)


def group_trainable(group: str, freeze: FreezeConfig) -> bool:
    """Head is always trainable; other groups follow the freeze config."""
    if group == FEATURE_EXTRACTOR:
        return not freeze.freeze_feature_extractor
    if group.startswith("encoder_layer_"):
        return int(group.rsplit("_", 1)[1]) not in freeze.frozen_layers
    return True


def apply_freeze(registry: ParameterRegistry, freeze: FreezeConfig) -> ParameterRegistry:
    for _, e in registry.items():
        e.trainable = group_trainable(e.group, freeze)
    return registry


def count_trainable(registry: ParameterRegistry, freeze: FreezeConfig | None = None) -> int:
    """Trainable-parameter count under a freeze config (registry flags if None)."""
    if freeze is None:
        return sum(e.value.size for e in dict(registry.items()).values() if e.trainable)
    return sum(
        e.value.size for e in dict(registry.items()).values() if group_trainable(e.group, freeze)
    )


def trainable_parameter_count(cfg: ModelConfig, freeze: FreezeConfig) -> int:
    """Shape-only version of count_trainable; no tensors are allocated."""
    return sum(
        int(np.prod(shape))
        for _, shape, group in param_specs(cfg)
        if group_trainable(group, freeze)
    )


# ---------------------------------------------------------------------------
# Primitive ops (forward + backward pairs)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(DTYPE)


_ACT = {"gelu": (gelu, gelu_grad), "relu": (relu, relu_grad)}


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last (feature) axis, then scale/shift by gamma/beta."""
    y, _ = _layer_norm_fwd(x, gamma, beta, eps)
    return y


def _layer_norm_fwd(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _layer_norm_bwd(dy, cache, gamma):
    xhat, inv_std = cache
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _linear_fwd(x, w, b):
    return x @ w + (0.0 if b is None else b)


def _linear_bwd(dy, x, w, with_bias=True):
    dw = x.T @ dy
    db = dy.sum(axis=0) if with_bias else None
    dx = dy @ w.T
    return dx, dw, db


def _conv1d_fwd(x, w, b, stride, padding):
    """x [C_in, T] -> y [C_out, T_out]; returns (y, cols) with cols the
    unfolded [T_out, C_in*K] patch matrix used by the backward pass."""
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    t_out = (t + 2 * padding - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :][:, :t_out]
    cols = windows.transpose(1, 0, 2).reshape(t_out, c_in * k)
    y = (cols @ w.reshape(c_out, -1).T + b).T
    return y, cols


def _conv1d_bwd(dy, cols, x_shape, w, stride, padding):
    c_in, t = x_shape
    c_out, _, k = w.shape
    t_out = dy.shape[1]
    dy_t = dy.T  # [T_out, C_out]
    dw = (dy_t.T @ cols).reshape(c_out, c_in, k)
    db = dy_t.sum(axis=0)
    dcols = (dy_t @ w.reshape(c_out, -1)).reshape(t_out, c_in, k)
    dxp = np.zeros((c_in, t + 2 * padding))
    offsets = np.arange(t_out) * stride
    for j in range(k):
        dxp[:, offsets + j] += dcols[:, :, j].T
    dx = dxp[:, padding : padding + t] if padding else dxp
    return dx, dw, db


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x3):
    h, t, dk = x3.shape
    return x3.transpose(1, 0, 2).reshape(t, h * dk)


def _attention_core_fwd(q, k, v, n_heads):
    """Scaled dot-product attention per head; heads concatenated (no output
    projection). Each softmax row sums to 1."""
    q3, k3, v3 = (_split_heads(a, n_heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(q3.shape[-1])
    probs = softmax(q3 @ k3.transpose(0, 2, 1) * scale, axis=-1)
    ctx3 = probs @ v3
    return _merge_heads(ctx3), (q3, k3, v3, probs, scale)


def _attention_core_bwd(dctx, cache, n_heads):
    q3, k3, v3, probs, scale = cache
    dctx3 = _split_heads(dctx, n_heads)
    dv3 = probs.transpose(0, 2, 1) @ dctx3
    dprobs = dctx3 @ v3.transpose(0, 2, 1)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dq3 = dscores @ k3 * scale
    dk3 = dscores.transpose(0, 2, 1) @ q3 * scale
    return _merge_heads(dq3), _merge_heads(dk3), _merge_heads(dv3)


# ---------------------------------------------------------------------------
# Public spec-level operations


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    out_w: np.ndarray,
    out_b: np.ndarray,
    n_heads: int,
) -> np.ndarray:
    """Multi-head scaled dot-product attention over pre-projected Q/K/V,
    followed by the output projection."""
    for name, a in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"non-finite values in {name}")
    ctx, _ = _attention_core_fwd(q, k, v, n_heads)
    return _linear_fwd(ctx, out_w, out_b)


def attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    """Attention without the output projection (heads concatenated)."""
    ctx, _ = _attention_core_fwd(q, k, v, n_heads)
    return ctx


def ffn(x: np.ndarray, w1, b1, w2, b2, activation: str = "gelu") -> np.ndarray:
    """Position-wise feed-forward: act(x@W1 + b1) @ W2 + b2."""
    if x.shape[-1] != w1.shape[0]:
        raise ShapeMismatch(f"ffn input width {x.shape[-1]} != {w1.shape[0]}")
    act, _ = _ACT[activation]
    return _linear_fwd(act(_linear_fwd(x, w1, b1)), w2, b2)


def conv_stem(spec_values: np.ndarray, registry: ParameterRegistry, cfg: ModelConfig) -> np.ndarray:
    """[n_mels x T] -> [T/2 x d_model]: conv(k3,s1,p1) + GELU, conv(k3,s2,p1) + GELU."""
    out, _ = _conv_stem_fwd(spec_values, registry, cfg)
    return out


def _conv_stem_fwd(x, registry, cfg):
    if x.ndim != 2 or x.shape[0] != cfg.n_mels:
        raise ShapeMismatch(f"expected [{cfg.n_mels} x T] input, got {x.shape}")
    if x.shape[1] % 2:
        raise ShapeMismatch("frame count must be even (second conv has stride 2)")
    z1, cols1 = _conv1d_fwd(x, registry["conv1.w"], registry["conv1.b"], stride=1, padding=1)
    a1 = gelu(z1)
    z2, cols2 = _conv1d_fwd(a1, registry["conv2.w"], registry["conv2.b"], stride=2, padding=1)
    h = gelu(z2).T  # [T/2, d_model]
    return h, (x.shape, z1, cols1, a1.shape, z2, cols2)


def _conv_stem_bwd(dh, cache, registry):
    x_shape, z1, cols1, a1_shape, z2, cols2 = cache
    dz2 = dh.T * gelu_grad(z2)
    da1, dw2, db2 = _conv1d_bwd(dz2, cols2, a1_shape, registry["conv2.w"], stride=2, padding=1)
    dz1 = da1 * gelu_grad(z1)
    _, dw1, db1 = _conv1d_bwd(dz1, cols1, x_shape, registry["conv1.w"], stride=1, padding=1)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2}


def _layer_tensors(registry: ParameterRegistry, k: int) -> dict[str, np.ndarray]:
    p = f"layers.{k}"
    keys = (
        "attn.q.w", "attn.q.b", "attn.k.w", "attn.v.w", "attn.v.b",
        "attn.out.w", "attn.out.b", "attn_norm.gamma", "attn_norm.beta",
        "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ffn_norm.gamma", "ffn_norm.beta",
    )
    return {key: registry[f"{p}.{key}"] for key in keys}


def _attn_sublayer_fwd(x, p, cfg):
    q = _linear_fwd(x, p["attn.q.w"], p["attn.q.b"])
    k = _linear_fwd(x, p["attn.k.w"], None)
    v = _linear_fwd(x, p["attn.v.w"], p["attn.v.b"])
    ctx, core_cache = _attention_core_fwd(q, k, v, cfg.n_heads)
    out = _linear_fwd(ctx, p["attn.out.w"], p["attn.out.b"])
    return out, (x, ctx, core_cache)


def _attn_sublayer_bwd(dout, cache, p, cfg):
    x, ctx, core_cache = cache
    dctx, dow, dob = _linear_bwd(dout, ctx, p["attn.out.w"])
    dq, dk, dv = _attention_core_bwd(dctx, core_cache, cfg.n_heads)
    dx_q, dqw, dqb = _linear_bwd(dq, x, p["attn.q.w"])
    dx_k, dkw, _ = _linear_bwd(dk, x, p["attn.k.w"], with_bias=False)
    dx_v, dvw, dvb = _linear_bwd(dv, x, p["attn.v.w"])
    grads = {
        "attn.q.w": dqw, "attn.q.b": dqb, "attn.k.w": dkw,
        "attn.v.w": dvw, "attn.v.b": dvb, "attn.out.w": dow, "attn.out.b": dob,
    }
    return dx_q + dx_k + dx_v, grads


def _ffn_sublayer_fwd(x, p, cfg):
    act, _ = _ACT[cfg.ffn_activation]
    z1 = _linear_fwd(x, p["ffn.w1"], p["ffn.b1"])
    a = act(z1)
    out = _linear_fwd(a, p["ffn.w2"], p["ffn.b2"])
    return out, (x, z1, a)


def _ffn_sublayer_bwd(dout, cache, p, cfg):
    x, z1, a = cache
    _, act_grad = _ACT[cfg.ffn_activation]
    da, dw2, db2 = _linear_bwd(dout, a, p["ffn.w2"])
    dz1 = da * act_grad(z1)
    dx, dw1, db1 = _linear_bwd(dz1, x, p["ffn.w1"])
    return dx, {"ffn.w1": dw1, "ffn.b1": db1, "ffn.w2": dw2, "ffn.b2": db2}


def encoder_layer_forward(
    x: np.ndarray, registry: ParameterRegistry, layer: int, cfg: ModelConfig
) -> np.ndarray:
    """One encoder layer. post: z = LN(y + FFN(y)), y = LN(x + Attn(x)).
    pre: z = y + FFN(LN(y)), y = x + Attn(LN(x))."""
    out, _ = _encoder_layer_fwd(x, _layer_tensors(registry, layer), cfg)
    return out


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activation after {where}")


def _encoder_layer_fwd(x, p, cfg):
    if cfg.norm_placement == "pre":
        a_in, ln1 = _layer_norm_fwd(x, p["attn_norm.gamma"], p["attn_norm.beta"])
        attn_out, attn_cache = _attn_sublayer_fwd(a_in, p, cfg)
        _check_finite(attn_out, "attention")
        y = x + attn_out
        f_in, ln2 = _layer_norm_fwd(y, p["ffn_norm.gamma"], p["ffn_norm.beta"])
        ffn_out, ffn_cache = _ffn_sublayer_fwd(f_in, p, cfg)
        _check_finite(ffn_out, "ffn")
        z = y + ffn_out
    else:
        attn_out, attn_cache = _attn_sublayer_fwd(x, p, cfg)
        _check_finite(attn_out, "attention")
        y, ln1 = _layer_norm_fwd(x + attn_out, p["attn_norm.gamma"], p["attn_norm.beta"])
        ffn_out, ffn_cache = _ffn_sublayer_fwd(y, p, cfg)
        _check_finite(ffn_out, "ffn")
        z, ln2 = _layer_norm_fwd(y + ffn_out, p["ffn_norm.gamma"], p["ffn_norm.beta"])
    return z, (ln1, attn_cache, ln2, ffn_cache)


def _encoder_layer_bwd(dz, cache, p, cfg):
    ln1, attn_cache, ln2, ffn_cache = cache
    grads: dict[str, np.ndarray] = {}
    if cfg.norm_placement == "pre":
        d_ffn_in, g = _ffn_sublayer_bwd(dz, ffn_cache, p, cfg)
        grads.update(g)
        dy_branch, dg2, db2 = _layer_norm_bwd(d_ffn_in, ln2, p["ffn_norm.gamma"])
        grads["ffn_norm.gamma"], grads["ffn_norm.beta"] = dg2, db2
        dy = dz + dy_branch
        d_attn_in, g = _attn_sublayer_bwd(dy, attn_cache, p, cfg)
        grads.update(g)
        dx_branch, dg1, db1 = _layer_norm_bwd(d_attn_in, ln1, p["attn_norm.gamma"])
        grads["attn_norm.gamma"], grads["attn_norm.beta"] = dg1, db1
        dx = dy + dx_branch
    else:
        ds2, dg2, db2 = _layer_norm_bwd(dz, ln2, p["ffn_norm.gamma"])
        grads["ffn_norm.gamma"], grads["ffn_norm.beta"] = dg2, db2
        dy_branch, g = _ffn_sublayer_bwd(ds2, ffn_cache, p, cfg)
        grads.update(g)
        dy = ds2 + dy_branch
        ds1, dg1, db1 = _layer_norm_bwd(dy, ln1, p["attn_norm.gamma"])
        grads["attn_norm.gamma"], grads["attn_norm.beta"] = dg1, db1
        dx_branch, g = _attn_sublayer_bwd(ds1, attn_cache, p, cfg)
        grads.update(g)
        dx = ds1 + dx_branch
    return dx, grads


# ---------------------------------------------------------------------------
# Whole-model forward / backward


def forward(spec_values: np.ndarray, registry: ParameterRegistry, cfg: ModelConfig) -> np.ndarray:
    """Normalized [n_mels x T] spectrogram -> 6-vector of pre-sigmoid logits."""
    logits, _ = forward_with_cache(spec_values, registry, cfg)
    return logits


def forward_with_cache(spec_values, registry, cfg):
    x = np.asarray(spec_values, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite values in input spectrogram")
    h, stem_cache = _conv_stem_fwd(x, registry, cfg)
    n_pos = h.shape[0]
    if n_pos > cfg.max_positions:
        raise ShapeMismatch(f"{n_pos} positions exceed max_positions={cfg.max_positions}")
    h = h + registry["embed_positions"][:n_pos]
    layer_caches = []
    for k in range(cfg.n_layers):
        h, cache = _encoder_layer_fwd(h, _layer_tensors(registry, k), cfg)
        layer_caches.append(cache)
    g, ln_cache = _layer_norm_fwd(
        h, registry["post_encoder_layernorm.gamma"], registry["post_encoder_layernorm.beta"]
    )
    pooled = g.mean(axis=0)
    u = _linear_fwd(pooled, registry["projector.w"], registry["projector.b"])
    logits = _linear_fwd(u, registry["classifier.w"], registry["classifier.b"])
    _check_finite(logits, "classifier")
    return logits, (stem_cache, n_pos, layer_caches, ln_cache, g.shape[0], pooled, u)


def backward_pass(dlogits, cache, registry, cfg):
    """Gradients for every parameter given d loss / d logits and a forward cache."""
    stem_cache, n_pos, layer_caches, ln_cache, t_rows, pooled, u = cache
    grads: dict[str, np.ndarray] = {}
    dlogits = np.asarray(dlogits, dtype=DTYPE)
    grads["classifier.w"] = np.outer(u, dlogits)
    grads["classifier.b"] = dlogits
    du = registry["classifier.w"] @ dlogits
    grads["projector.w"] = np.outer(pooled, du)
    grads["projector.b"] = du
    dpooled = registry["projector.w"] @ du
    dg = np.tile(dpooled / t_rows, (t_rows, 1))
    dh, dgam, dbet = _layer_norm_bwd(dg, ln_cache, registry["post_encoder_layernorm.gamma"])
    grads["post_encoder_layernorm.gamma"] = dgam
    grads["post_encoder_layernorm.beta"] = dbet
    for k in range(cfg.n_layers - 1, -1, -1):
        dh, layer_grads = _encoder_layer_bwd(dh, layer_caches[k], _layer_tensors(registry, k), cfg)
        grads.update({f"layers.{k}.{key}": val for key, val in layer_grads.items()})
    dpos = np.zeros_like(registry["embed_positions"])
    dpos[:n_pos] = dh
    grads["embed_positions"] = dpos
    grads.update(_conv_stem_bwd(dh, stem_cache, registry))
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: one-line JSON manifest, then a little-endian f32 blob


def save_checkpoint(path: str | Path, registry: ParameterRegistry, cfg: ModelConfig) -> None:
    descriptors = []
    chunks = []
    offset = 0
    for name, e in registry.items():
        data = np.ascontiguousarray(e.value, dtype="<f4").tobytes()
        descriptors.append(
            {"name": name, "shape": list(e.value.shape), "offset": offset, "trainable": e.trainable}
        )
        chunks.append(data)
        offset += len(data)
    manifest = {"config": asdict(cfg), "tensors": descriptors}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode())
        f.write(b"\n")
        f.write(b"".join(chunks))


def _group_of(name: str) -> str:
    if name.startswith("conv") or name == "embed_positions":
        return FEATURE_EXTRACTOR
    if name.startswith("layers."):
        return encoder_layer_group(int(name.split(".")[1]))
    return HEAD


def load_checkpoint(path: str | Path) -> tuple[ParameterRegistry, ModelConfig]:
    with open(path, "rb") as f:
        manifest = json.loads(f.readline())
        blob = f.read()
    cfg = ModelConfig(**manifest["config"])
    reg = ParameterRegistry()
    for desc in manifest["tensors"]:
        shape = tuple(desc["shape"])
        size = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        start = desc["offset"]
        raw = blob[start : start + size]
        if len(raw) != size:
            raise ValueError(f"checkpoint blob truncated at tensor {desc['name']!r}")
        value = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)
        reg.add(desc["name"], value, _group_of(desc["name"]), desc["trainable"])
    return reg, cfg
