"""Transformer building blocks on top of :mod:`streamfuse.tensor`."""
import math

import numpy as np

from . import tensor as T


class ConfigError(ValueError):
    pass


def xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_linear(params, prefix, rng, fan_in, fan_out, dtype):
    params[prefix + "w"] = T.Tensor(xavier(rng, fan_in, fan_out, dtype), requires_grad=True)
    params[prefix + "b"] = T.Tensor(np.zeros(fan_out, dtype), requires_grad=True)


def init_layer_norm(params, prefix, d, dtype):
    params[prefix + "g"] = T.Tensor(np.ones(d, dtype), requires_grad=True)
    params[prefix + "b"] = T.Tensor(np.zeros(d, dtype), requires_grad=True)


def init_attention(params, prefix, rng, d, dtype, out_dim=None):
    for name in ("q", "k", "v"):
        params[f"{prefix}w{name}"] = T.Tensor(xavier(rng, d, d, dtype), requires_grad=True)
        params[f"{prefix}b{name}"] = T.Tensor(np.zeros(d, dtype), requires_grad=True)
    out_dim = d if out_dim is None else out_dim
    params[prefix + "wo"] = T.Tensor(xavier(rng, d, out_dim, dtype), requires_grad=True)
    params[prefix + "bo"] = T.Tensor(np.zeros(out_dim, dtype), requires_grad=True)


def attention_keys(prefix):
    return [prefix + k for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def layer_norm(params, prefix, x, eps=1e-5):
    return T.layer_norm(x, params[prefix + "g"], params[prefix + "b"], eps)


def multi_head_attention(params, prefix, q_in, kv_in, heads, mask=None):
    """Scaled dot-product attention over ``heads`` heads, then output projection.

    ``mask`` is a boolean array broadcastable to [B, heads, Lq, Lk]; False
    entries are excluded before the softmax.
    """
    B, Lq, d = q_in.shape
    Lk = kv_in.shape[1]
    if d % heads:
        raise ConfigError(f"d_model {d} not divisible by {heads} heads")
    dk = d // heads
    q = T.linear(q_in, params[prefix + "wq"], params[prefix + "bq"])
    k = T.linear(kv_in, params[prefix + "wk"], params[prefix + "bk"])
    v = T.linear(kv_in, params[prefix + "wv"], params[prefix + "bv"])
    q = q.reshape(B, Lq, heads, dk).transpose(0, 2, 1, 3)
    k = k.reshape(B, Lk, heads, dk).transpose(0, 2, 3, 1)
    v = v.reshape(B, Lk, heads, dk).transpose(0, 2, 1, 3)
    scores = T.matmul(q, k) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return T.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def feed_forward(params, prefix, x, drop):
    h = T.relu(T.linear(x, params[prefix + "w1"], params[prefix + "b1"]))
    h = drop(h)
    return T.linear(h, params[prefix + "w2"], params[prefix + "b2"])


def init_feed_forward(params, prefix, rng, d, hidden, dtype):
    params[prefix + "w1"] = T.Tensor(xavier(rng, d, hidden, dtype), requires_grad=True)
    params[prefix + "b1"] = T.Tensor(np.zeros(hidden, dtype), requires_grad=True)
    params[prefix + "w2"] = T.Tensor(xavier(rng, hidden, d, dtype), requires_grad=True)
    params[prefix + "b2"] = T.Tensor(np.zeros(d, dtype), requires_grad=True)


_pe_cache = {}


def positional_table(length, d, dtype):
    key = (d, np.dtype(dtype).str)
    table = _pe_cache.get(key)
    if table is None or table.shape[0] < length:
        n = max(length, 512)
        pos = np.arange(n)[:, None]
        div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
        table = np.zeros((n, d))
        table[:, 0::2] = np.sin(pos * div)
        table[:, 1::2] = np.cos(pos * div[: d // 2])
        table = table.astype(dtype)
        _pe_cache[key] = table
    return table[:length]


def causal_mask(length):
    return np.tril(np.ones((length, length), dtype=bool))
