"""Feature enhancer: cross-modal attention between visual tokens and class-prompt
features, pooled weighted fusion, and the classification head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .functional import conv2d, softmax
from .params import ModelParams
from .tensor import Tensor

PROJECTIONS = ("q_v", "k_v", "v_v", "q_l", "k_l", "v_l")


def init_bima(p: ModelParams, d_v: int, d_l: int, d: int, prefix: str = "feb") -> None:
    for name in PROJECTIONS:
        p.xavier(f"{prefix}.{name}", d_v if name.endswith("_v") else d_l, d)
    p.xavier(f"{prefix}.o_v", d, d_v)
    p.xavier(f"{prefix}.o_l", d, d_l)


def init_cross(p: ModelParams, d_v: int, d_l: int, d: int, prefix: str = "feb") -> None:
    p.xavier(f"{prefix}.q_v", d_v, d)
    p.xavier(f"{prefix}.k_l", d_l, d)
    p.xavier(f"{prefix}.v_l", d_l, d)
    p.xavier(f"{prefix}.o_v", d, d_v)


def init_feb_conv(p: ModelParams, c: int, prefix: str = "feb") -> None:
    p.he_conv(f"{prefix}.conv.w", c, c, 3)
    p.zeros(f"{prefix}.conv.b", (c,))


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor):
    dh = q.shape[-1]
    weights = softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    return T.matmul(weights, v), weights


def bima(v: Tensor, l: Tensor, p: ModelParams, heads: int, prefix: str = "feb"):
    """Two-way multi-head cross attention.

    Visual queries attend over text keys/values and text queries attend over
    visual keys/values. Returns ``(v_hat, l_hat, A_v [B,H,Nv,Nl], A_l [B,H,Nl,Nv])``.
    """
    d = p[f"{prefix}.q_v"].shape[1]
    if d % heads:
        raise ConfigError(f"shared width {d} is not divisible by {heads} heads")
    proj = {name: _heads(T.linear(v if name.endswith("_v") else l, p[f"{prefix}.{name}"]), heads)
            for name in PROJECTIONS}
    o_v, a_v = _attend(proj["q_v"], proj["k_l"], proj["v_l"])
    o_l, a_l = _attend(proj["q_l"], proj["k_v"], proj["v_v"])
    v_hat = T.linear(_merge(o_v), p[f"{prefix}.o_v"])
    l_hat = T.linear(_merge(o_l), p[f"{prefix}.o_l"])
    return v_hat, l_hat, a_v, a_l


def cross_attention(v: Tensor, l: Tensor, p: ModelParams, heads: int, prefix: str = "feb"):
    """One-directional variant: visual queries over text only. Returns ``(v_hat, A_v)``."""
    q = _heads(T.linear(v, p[f"{prefix}.q_v"]), heads)
    k = _heads(T.linear(l, p[f"{prefix}.k_l"]), heads)
    val = _heads(T.linear(l, p[f"{prefix}.v_l"]), heads)
    o_v, a_v = _attend(q, k, val)
    return T.linear(_merge(o_v), p[f"{prefix}.o_v"]), a_v


def conv_enhance(grid: Tensor, p: ModelParams, prefix: str = "feb") -> Tensor:
    """Convolutional stand-in for the attention layer; text is not consulted."""
    y = T.relu(conv2d(grid, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride=1, pad=1))
    b, c, h, w = y.shape
    return T.transpose(T.reshape(y, (b, c, h * w)), (0, 2, 1))


def init_head(p: ModelParams, d_v: int, d_l: int, hidden: int, classes: int,
              prefix: str = "head", with_text: bool = True) -> None:
    """``with_text=False`` skips the text scalar; the text half of the fused
    vector is then all zeros but keeps its width."""
    p.ones(f"{prefix}.w_v", (1,))
    if with_text:
        p.ones(f"{prefix}.w_l", (1,))
    p.xavier(f"{prefix}.fc1.w", d_v + d_l, hidden)
    p.zeros(f"{prefix}.fc1.b", (hidden,))
    p.xavier(f"{prefix}.fc2.w", hidden, classes)
    p.zeros(f"{prefix}.fc2.b", (classes,))


def pool_fuse(v_hat: Tensor, l_hat: Tensor | None, p: ModelParams, d_l: int | None = None,
              prefix: str = "head") -> Tensor:
    """Mean-pool both streams and concatenate them scaled by learned scalars.

    ``l_hat=None`` fills the text half with zeros of width ``d_l``.
    """
    v_bar = T.reduce(v_hat, "mean", 1) * p[f"{prefix}.w_v"]
    if l_hat is None:
        l_bar = Tensor(np.zeros((v_hat.shape[0], d_l), dtype=v_hat.dtype))
    else:
        l_bar = T.reduce(l_hat, "mean", 1) * p[f"{prefix}.w_l"]
    return T.concat([v_bar, l_bar], axis=1)


def head_logits(fused: Tensor, p: ModelParams, prefix: str = "head") -> Tensor:
    h = T.relu(T.linear(fused, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return T.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def classify_head(fused: Tensor, p: ModelParams, prefix: str = "head") -> Tensor:
    return softmax(head_logits(fused, p, prefix), axis=-1)
