"""Forward/backward primitives for the numpy transformer.

Every forward returns ``(out, cache)``; the matching backward consumes the
cache. Matmuls that belong to attention or feed-forward einsums go through
:func:`matmul` with ``tag="core"`` so a :func:`count_macs` block can tally
them against the analytic FLOPs formula.
"""
import math
from collections import defaultdict
from contextlib import contextmanager

import numpy as np

_COUNTER = None


class MacCounter:
    def __init__(self):
        self.by_tag = defaultdict(int)

    @property
    def core(self) -> int:
        return self.by_tag["core"]

    def add(self, tag, macs):
        self.by_tag[tag] += int(macs)


@contextmanager
def count_macs():
    global _COUNTER
    prev, _COUNTER = _COUNTER, MacCounter()
    try:
        yield _COUNTER
    finally:
        _COUNTER = prev


def matmul(a, b, tag="core"):
    out = np.matmul(a, b)
    if _COUNTER is not None:
        _COUNTER.add(tag, out.size * a.shape[-1])
    return out


# ---------------------------------------------------------------- linear


def linear_fwd(x, w, b=None, tag="core"):
    y = matmul(x, w, tag)
    if b is not None:
        y = y + b
    return y, x


def linear_bwd(dy, x, w, has_bias=False):
    d_in = w.shape[0]
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, dy.shape[-1])
    dx = dy @ w.T
    db = dy.reshape(-1, dy.shape[-1]).sum(0) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------- layer norm

LN_EPS = 1e-5


def layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


# ---------------------------------------------------------------- gelu (tanh form)

_C = math.sqrt(2.0 / math.pi)


def gelu_fwd(x):
    u = _C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# ---------------------------------------------------------------- attention


def _split(x, heads):
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def masked_softmax(s, mask):
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = s.max(-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    z = e.sum(-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def attention_fwd(xq, xkv, p, prefix, heads, mask):
    """Multi-head attention without biases.

    ``mask`` broadcasts to ``[B, h, Lq, Lk]``; True means visible.
    ``xkv is xq`` for self-attention.
    """
    wq, wk, wv, wo = (p[prefix + k] for k in ("wq", "wk", "wv", "wo"))
    q = matmul(xq, wq)
    k = matmul(xkv, wk)
    v = matmul(xkv, wv)
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    P = masked_softmax(s, mask)
    o = _merge(matmul(P, vh))
    out = matmul(o, wo)
    return out, (xq, xkv, qh, kh, vh, P, o, scale)


def attention_bwd(dout, cache, p, prefix, heads, grads):
    xq, xkv, qh, kh, vh, P, o, scale = cache
    wq, wk, wv, wo = (p[prefix + k] for k in ("wq", "wk", "wv", "wo"))
    d = wo.shape[0]
    grads[prefix + "wo"] += o.reshape(-1, d).T @ dout.reshape(-1, d)
    doh = _split(dout @ wo.T, heads)
    dP = doh @ vh.transpose(0, 1, 3, 2)
    dvh = P.transpose(0, 1, 3, 2) @ doh
    dS = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
    dqh = dS @ kh
    dkh = dS.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = _merge(dqh), _merge(dkh), _merge(dvh)
    grads[prefix + "wq"] += xq.reshape(-1, d).T @ dq.reshape(-1, d)
    grads[prefix + "wk"] += xkv.reshape(-1, d).T @ dk.reshape(-1, d)
    grads[prefix + "wv"] += xkv.reshape(-1, d).T @ dv.reshape(-1, d)
    dxq = dq @ wq.T
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv


# ---------------------------------------------------------------- feed-forward


def ffn_fwd(x, p, prefix):
    h, c1 = linear_fwd(x, p[prefix + "w1"])
    a, c2 = gelu_fwd(h)
    y, c3 = linear_fwd(a, p[prefix + "w2"])
    return y, (c1, c2, c3)


def ffn_bwd(dy, cache, p, prefix, grads):
    c1, c2, c3 = cache
    da, dw2, _ = linear_bwd(dy, c3, p[prefix + "w2"])
    grads[prefix + "w2"] += dw2
    dh = gelu_bwd(da, c2)
    dx, dw1, _ = linear_bwd(dh, c1, p[prefix + "w1"])
    grads[prefix + "w1"] += dw1
    return dx


# ---------------------------------------------------------------- loss


def log_softmax(z):
    m = z.max(-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(-1, keepdims=True))


def cross_entropy(logits, targets, weights):
    """Weighted mean CE; returns ``(loss, per-position nll, dlogits)``."""
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = weights.sum()
    loss = float((nll * weights).sum() / total)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (weights / total)[..., None]
    return loss, nll, dlogits
