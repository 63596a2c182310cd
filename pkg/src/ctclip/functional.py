"""Fused neural-network primitives with hand-written backward passes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError
from .tensor import Tensor, _sigmoid, make_node


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) zeroes the weight of masked
    entries, which is equivalent to a -inf logit without putting inf on the tape.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        shifted = np.where(mask, xd, -np.inf)
        m = np.max(shifted, axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd, 0.0) - m), 0.0)
    else:
        m = np.max(xd, axis=axis, keepdims=True)
        e = np.exp(xd - m)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(xd.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer norm params must have shape ({x.shape[-1]},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_node(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, tracked: np.ndarray, train: bool,
               momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Batch normalization over every axis except 1 (channels).

    In train mode the batch statistics normalize the input and, when
    ``update_stats`` is set, are folded into the running buffers in place
    (biased variance). ``tracked`` is a one-element counter of updates; eval
    mode refuses to run while it is zero.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm params must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(bshape)

    if not train:
        if tracked[0] == 0:
            raise StateError("batch norm running statistics are uninitialized")
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv

        def backward_eval(g):
            dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = g.sum(axis=axes) if beta.requires_grad else None
            return g * gd * inv, dgamma, dbeta

        return make_node(xhat * gd + beta.data.reshape(bshape), (x, gamma, beta),
                         backward_eval, "batch_norm")

    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.size // c

    if update_stats:
        if tracked[0] == 0:
            running_mean[...] = mu.reshape(c)
            running_var[...] = var.reshape(c)
        else:
            running_mean[...] = (1 - momentum) * running_mean + momentum * mu.reshape(c)
            running_var[...] = (1 - momentum) * running_var + momentum * var.reshape(c)
        tracked[0] += 1

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return make_node(xhat * gd + beta.data.reshape(bshape), (x, gamma, beta), backward,
                     "batch_norm")


def norm(x: Tensor, kind: str, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
         mode: str = "train", state: dict | None = None) -> Tensor:
    """Dispatch to :func:`layer_norm` or :func:`batch_norm`.

    ``state`` for batch norm holds ``running_mean``, ``running_var``, ``tracked``
    arrays and an optional ``momentum``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if kind == "layer":
        return layer_norm(x, gamma, beta, eps)
    if kind == "batch":
        if state is None:
            raise StateError("batch norm needs a running-statistics state")
        return batch_norm(x, gamma, beta, state["running_mean"], state["running_var"],
                          state["tracked"], train=(mode == "train"),
                          momentum=state.get("momentum", 0.1), eps=eps)
    raise ValueError(f"unknown norm kind {kind!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[Cout,Cin,kh,kw]")
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            dxp = np.zeros((bsz, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(np.ascontiguousarray(out), parents, backward, "conv2d")


def lstm_scan(xs: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``xs[B, T, D]`` and return every hidden state ``[B, T, H]``.

    Gate layout along the 4H axis is (input, forget, candidate, output). With
    ``reverse`` the scan runs from the last position to the first; outputs stay
    at their original positions. Gradients come from explicit backprop through
    time, so the whole scan is one tape node.
    """
    bsz, steps, _ = xs.shape
    hid = w_h.shape[0]
    if w_x.shape[1] != 4 * hid or w_h.shape != (hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ShapeError("lstm weight shapes are inconsistent")
    dtype = np.result_type(xs.data, w_x.data, w_h.data, bias.data)
    xg = xs.data @ w_x.data + bias.data
    wh = w_h.data
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    hs = np.zeros((bsz, steps, hid), dtype=dtype)
    cs = np.zeros((bsz, steps, hid), dtype=dtype)
    gates = np.zeros((bsz, steps, 4 * hid), dtype=dtype)
    h = np.zeros((bsz, hid), dtype=dtype)
    c = np.zeros((bsz, hid), dtype=dtype)
    for t in order:
        z = xg[:, t] + h @ wh
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid:2 * hid])
        gg = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sigmoid(z[:, 3 * hid:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, gg, o], axis=1)
        cs[:, t] = c
        hs[:, t] = h

    def backward(g):
        dxg = np.zeros_like(xg)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((bsz, hid), dtype=dtype)
        dc_next = np.zeros((bsz, hid), dtype=dtype)
        seq = list(order)
        for k in range(steps - 1, -1, -1):
            t = seq[k]
            prev = seq[k - 1] if k > 0 else None
            h_prev = hs[:, prev] if prev is not None else np.zeros((bsz, hid), dtype=dtype)
            c_prev = cs[:, prev] if prev is not None else np.zeros((bsz, hid), dtype=dtype)
            i, f, gg, o = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * gg * i * (1.0 - i),
                                 dc * c_prev * f * (1.0 - f),
                                 dc * i * (1.0 - gg * gg),
                                 dh * tc * o * (1.0 - o)], axis=1)
            dxg[:, t] = dz
            dwh += h_prev.T @ dz
            dh_next = dz @ wh.T
            dc_next = dc * f
        flat = dxg.reshape(-1, 4 * hid)
        dxs = dxg @ w_x.data.T if xs.requires_grad else None
        dwx = xs.data.reshape(-1, xs.shape[-1]).T @ flat if w_x.requires_grad else None
        db = flat.sum(axis=0) if bias.requires_grad else None
        return dxs, dwx, dwh, db

    return make_node(hs, (xs, w_x, w_h, bias), backward, "lstm_scan")
