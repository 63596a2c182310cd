"""Adaptive feature fusion of the convolutional and patch-attention branches.

The fused map is ``relu(conv(att1 * x_v + att2 * x_c))`` where ``x_v`` comes
from a bidirectional LSTM raster scan, ``x_c`` from a plain convolution and
``(att1, att2)`` is a per-sample softmax pair produced from pooled context.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import init_block, transformer_block
from .errors import ShapeError
from .functional import conv2d, lstm_scan, softmax
from .params import ModelParams
from .tensor import Tensor


def _conv3(p: ModelParams, name: str, cout: int, cin: int) -> None:
    p.he_conv(f"{name}.w", cout, cin, 3)
    p.zeros(f"{name}.b", (cout,))


def conv3_relu(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return T.relu(conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=1))


def init_align(p: ModelParams, c: int, prefix: str = "affm") -> None:
    _conv3(p, f"{prefix}.align", c, 2 * c)


def init_affm(p: ModelParams, c: int, seq: str = "vlstm", dam: bool = True, heads: int = 4,
              prefix: str = "affm") -> None:
    """Create fusion parameters. ``seq`` picks the long-range branch."""
    init_align(p, c, prefix)
    _conv3(p, f"{prefix}.pre", c, c)
    _conv3(p, f"{prefix}.conv_branch", c, c)
    _conv3(p, f"{prefix}.post", c, c)
    if dam:
        p.xavier(f"{prefix}.dam.fc1.w", c, c // 4)
        p.zeros(f"{prefix}.dam.fc1.b", (c // 4,))
        p.xavier(f"{prefix}.dam.fc2.w", c // 4, 2)
        p.zeros(f"{prefix}.dam.fc2.b", (2,))
    if seq == "vlstm":
        for d in ("fwd", "bwd"):
            p.xavier(f"{prefix}.vlstm.{d}.wx", c, 4 * c)
            p.xavier(f"{prefix}.vlstm.{d}.wh", c, 4 * c)
            bias = np.zeros(4 * c)
            bias[c:2 * c] = 1.0  # forget-gate bias
            p.add(f"{prefix}.vlstm.{d}.b", bias)
        p.xavier(f"{prefix}.vlstm.proj.w", 2 * c, c)
        p.zeros(f"{prefix}.vlstm.proj.b", (c,))
    elif seq == "vit":
        init_block(p, f"{prefix}.seq_vit", c, 2, None)


def tokens_to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    """[B,N,C] -> [B,C,H,W] in raster order."""
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot fill a {h}x{w} grid")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, c, h, w))


def grid_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def align_and_concat(global_tokens: Tensor, local_map: Tensor, p: ModelParams,
                     prefix: str = "affm") -> Tensor:
    """Drop the class token, fold patch tokens onto the grid, concat with the local
    map on channels and reduce 2C -> C with conv + relu."""
    _, c, h, w = local_map.shape
    patches = T.slice_axis(global_tokens, 1, 1, global_tokens.shape[1])
    if patches.shape[1] != h * w:
        raise ShapeError(f"{patches.shape[1]} patch tokens do not match the {h}x{w} local grid")
    if patches.shape[2] != c:
        raise ShapeError(f"branch widths differ: {patches.shape[2]} vs {c}")
    x = T.concat([tokens_to_grid(patches, h, w), local_map], axis=1)
    return conv3_relu(x, p, f"{prefix}.align")


def dam(x: Tensor, p: ModelParams, prefix: str = "affm") -> Tensor:
    """Pooled context -> MLP -> softmax pair ``[B, 2]``."""
    pooled = T.reduce(x, "mean", (2, 3))
    h = T.relu(T.linear(pooled, p[f"{prefix}.dam.fc1.w"], p[f"{prefix}.dam.fc1.b"]))
    logits = T.linear(h, p[f"{prefix}.dam.fc2.w"], p[f"{prefix}.dam.fc2.b"])
    return softmax(logits, axis=-1)


def vlstm(x: Tensor, p: ModelParams, prefix: str = "affm") -> Tensor:
    """Bidirectional LSTM over the raster sequence of grid positions, merged 2C -> C."""
    b, c, h, w = x.shape
    seq = grid_to_tokens(x)
    fwd = lstm_scan(seq, p[f"{prefix}.vlstm.fwd.wx"], p[f"{prefix}.vlstm.fwd.wh"],
                    p[f"{prefix}.vlstm.fwd.b"])
    bwd = lstm_scan(seq, p[f"{prefix}.vlstm.bwd.wx"], p[f"{prefix}.vlstm.bwd.wh"],
                    p[f"{prefix}.vlstm.bwd.b"], reverse=True)
    merged = T.linear(T.concat([fwd, bwd], axis=2), p[f"{prefix}.vlstm.proj.w"],
                      p[f"{prefix}.vlstm.proj.b"])
    return tokens_to_grid(merged, h, w)


def seq_vit(x: Tensor, p: ModelParams, heads: int, prefix: str = "affm") -> Tensor:
    _, _, h, w = x.shape
    out, _ = transformer_block(grid_to_tokens(x), p, f"{prefix}.seq_vit", heads)
    return tokens_to_grid(out, h, w)


def fuse(x: Tensor, p: ModelParams, seq: str = "vlstm", use_dam: bool = True, heads: int = 4,
         prefix: str = "affm"):
    """Fusion body applied to an aligned map ``x``. Returns ``(X*, att or None)``."""
    xp = conv3_relu(x, p, f"{prefix}.pre")
    x_c = conv3_relu(xp, p, f"{prefix}.conv_branch")
    att = None
    if seq == "none":
        mixed = x_c
    else:
        x_v = vlstm(xp, p, prefix) if seq == "vlstm" else seq_vit(xp, p, heads, prefix)
        if use_dam:
            att = dam(x, p, prefix)
            b = att.shape[0]
            a1 = T.reshape(T.slice_axis(att, 1, 0, 1), (b, 1, 1, 1))
            a2 = T.reshape(T.slice_axis(att, 1, 1, 2), (b, 1, 1, 1))
            mixed = x_v * a1 + x_c * a2
        else:
            mixed = (x_v + x_c) * 0.5
    return conv3_relu(mixed, p, f"{prefix}.post"), att


def affm_forward(global_tokens: Tensor, local_map: Tensor, p: ModelParams, seq: str = "vlstm",
                 use_dam: bool = True, heads: int = 4, prefix: str = "affm",
                 return_map: bool = False):
    """Full fusion: align, fuse, and flatten to ``[B, N, C]`` tokens.

    With ``return_map`` also returns the fused grid ``X*`` and the attention pair.
    """
    x = align_and_concat(global_tokens, local_map, p, prefix)
    fused, att = fuse(x, p, seq, use_dam, heads, prefix)
    tokens = grid_to_tokens(fused)
    return (tokens, fused, att) if return_map else tokens
