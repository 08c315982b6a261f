"""Forward/backward primitives for the toy encoder and decoder.

A small fixed operator set (affine, layer norm, relu, masked softmax,
multi-head attention, sinusoidal positions). Every forward returns a cache
consumed by its matching backward; every backward is validated against
finite differences in the tests.
"""
from __future__ import annotations

import numpy as np

# Additive mask value for disallowed attention scores. Large enough that the
# masked probability underflows to exactly 0.0 after max subtraction, finite
# so the backward pass produces no NaNs.
NEG_MASK = -1.0e30


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b for row-major activations x of shape (T, in)."""
    return x @ w + b, (x, w)


def affine_backward(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def relu(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, (x,)


def relu_backward(dout: np.ndarray, cache):
    (x,) = cache
    return dout * (x > 0.0)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Per-row normalization over the feature axis."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv, gain)


def layer_norm_backward(dout: np.ndarray, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    # The mean terms above fold the mu/var chain rules into one expression;
    # note var uses the biased 1/d normalizer, matching x.var().
    assert xhat.shape[-1] == d
    return dx, dgain, dbias


def masked_softmax(scores: np.ndarray, allowed: np.ndarray):
    """Softmax over the last axis; positions where ``allowed`` is False get 0."""
    masked = np.where(allowed, scores, NEG_MASK)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, (p,)


def masked_softmax_backward(dp: np.ndarray, cache):
    (p,) = cache
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Absolute sine/cosine position encodings, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((length, dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def multi_head_attention(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray,
    heads: int,
    allowed: np.ndarray,
):
    """Scaled dot-product attention; ``allowed`` is a (Tq, Tk) boolean mask.

    Keys carry no bias: a constant added to every key shifts each score row
    uniformly and softmax cancels it, so the parameter would be dead weight.
    """
    dh = wq.shape[1] // heads
    scale = 1.0 / np.sqrt(dh)
    q = split_heads(x_q @ wq + bq, heads)
    k = split_heads(x_kv @ wk, heads)
    v = split_heads(x_kv @ wv + bv, heads)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    p, sm_cache = masked_softmax(scores, allowed[None, :, :])
    ctx = merge_heads(p @ v)
    out = ctx @ wo + bo
    cache = (x_q, x_kv, q, k, v, p, sm_cache, ctx, wq, wk, wv, wo, heads, scale)
    return out, cache


def multi_head_attention_backward(dout: np.ndarray, cache):
    """Returns (dx_q, dx_kv, param gradients in declaration order)."""
    x_q, x_kv, q, k, v, p, sm_cache, ctx, wq, wk, wv, wo, heads, scale = cache
    dbo = dout.sum(axis=0)
    dwo = ctx.T @ dout
    dctx = split_heads(dout @ wo.T, heads)
    dp = dctx @ v.transpose(0, 2, 1)
    dv = p.transpose(0, 2, 1) @ dctx
    dscores = masked_softmax_backward(dp, sm_cache) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dq_flat = merge_heads(dq)
    dk_flat = merge_heads(dk)
    dv_flat = merge_heads(dv)
    dx_q = dq_flat @ wq.T
    dwq = x_q.T @ dq_flat
    dbq = dq_flat.sum(axis=0)
    dx_kv = dk_flat @ wk.T + dv_flat @ wv.T
    dwk = x_kv.T @ dk_flat
    dwv = x_kv.T @ dv_flat
    dbv = dv_flat.sum(axis=0)
    return dx_q, dx_kv, (dwq, dbq, dwk, dwv, dbv, dwo, dbo)
