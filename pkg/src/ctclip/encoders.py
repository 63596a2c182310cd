"""Image and text encoders: convolutional local branch, patch-attention global
branch with bottleneck adapters, and a small prompt text encoder."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, DataError, ShapeError
from .functional import batch_norm, conv2d, layer_norm, softmax
from .params import ModelParams
from .tensor import Tensor

LOCAL_CHANNELS = (16, 32)
SPECIALS = ("[PAD]", "[CLS]", "[UNK]")
PAD, CLS, UNK = 0, 1, 2


# -- local (convolutional) branch -------------------------------------------

def init_local(p: ModelParams, channels: int, momentum: float = 0.1, prefix: str = "local") -> None:
    widths = (3,) + LOCAL_CHANNELS + (channels,)
    for s in range(3):
        # no conv bias: batch norm subtracts any per-channel shift anyway
        p.he_conv(f"{prefix}.conv{s}.w", widths[s + 1], widths[s], 3)
        p.bn_state(f"{prefix}.bn{s}", widths[s + 1], momentum)


def conv_bn_relu(x: Tensor, p: ModelParams, conv: str, bn: str, train: bool,
                 stride: int = 1) -> Tensor:
    """Conv, batch norm, relu. A frozen stage (gamma not trainable) always
    normalizes with its stored statistics and never updates them."""
    y = conv2d(x, p[f"{conv}.w"], None, stride=stride, pad=1)
    state = p.bn(bn)
    gamma = p[f"{bn}.gamma"]
    y = batch_norm(y, gamma, p[f"{bn}.beta"], state["running_mean"], state["running_var"],
                   state["tracked"], train=train and gamma.requires_grad,
                   momentum=state["momentum"])
    return T.relu(y)


def encode_local(images: Tensor, p: ModelParams, train: bool = False,
                 prefix: str = "local") -> Tensor:
    """Three stride-2 conv/batch-norm/relu stages: [B,3,H,W] -> [B,C,H/8,W/8]."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected images [B,3,H,W], got {images.shape}")
    if images.shape[2] % 8 or images.shape[3] % 8:
        raise ShapeError(f"image size {images.shape[2:]} is not divisible by 8")
    x = images
    for s in range(3):
        x = conv_bn_relu(x, p, f"{prefix}.conv{s}", f"{prefix}.bn{s}", train, stride=2)
    return x


# -- adapters -----------------------------------------------------------------

def init_adapter(p: ModelParams, prefix: str, d: int, r: int) -> None:
    # zero up-projection: the adapter starts as a pure (1 - alpha) rescale
    p.normal(f"{prefix}.w1", (d, r), 1e-2)
    p.zeros(f"{prefix}.b1", (r,))
    p.zeros(f"{prefix}.w2", (r, d))
    p.zeros(f"{prefix}.b2", (d,))


def adapter_param_count(d: int, r: int, with_bias: bool = True) -> int:
    if d < 1 or r < 1:
        raise ValueError("d and r must be >= 1")
    return 2 * d * r + (r + d if with_bias else 0)


def adapter_apply(f: Tensor, p: ModelParams, prefix: str, alpha: float) -> Tensor:
    """Blend a bottleneck MLP of ``f`` with ``f`` itself by the residual ratio."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"residual ratio must lie in [0, 1], got {alpha}")
    hidden = T.relu(T.linear(f, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    a = T.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return a * alpha + f * (1.0 - alpha)


# -- transformer blocks -------------------------------------------------------

def init_block(p: ModelParams, prefix: str, c: int, mlp_ratio: int, adapter_r: int | None) -> None:
    for ln in ("ln1", "ln2"):
        p.ones(f"{prefix}.{ln}.g", (c,))
        p.zeros(f"{prefix}.{ln}.b", (c,))
    p.xavier(f"{prefix}.attn.qkv.w", c, 3 * c)
    # keys carry no bias: softmax over keys is invariant to it
    p.zeros(f"{prefix}.attn.q.b", (c,))
    p.zeros(f"{prefix}.attn.v.b", (c,))
    p.xavier(f"{prefix}.attn.out.w", c, c)
    p.zeros(f"{prefix}.attn.out.b", (c,))
    p.xavier(f"{prefix}.mlp.fc1.w", c, mlp_ratio * c)
    p.zeros(f"{prefix}.mlp.fc1.b", (mlp_ratio * c,))
    p.xavier(f"{prefix}.mlp.fc2.w", mlp_ratio * c, c)
    p.zeros(f"{prefix}.mlp.fc2.b", (c,))
    if adapter_r:
        init_adapter(p, f"{prefix}.adapter_attn", c, adapter_r)
        init_adapter(p, f"{prefix}.adapter_mlp", c, adapter_r)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def self_attention(x: Tensor, p: ModelParams, prefix: str, heads: int,
                   key_mask: np.ndarray | None = None):
    """Multi-head self-attention. Returns (projected output, weights [B,H,T,T])."""
    b, n, c = x.shape
    if c % heads:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    bq, bv = p[f"{prefix}.q.b"], p[f"{prefix}.v.b"]
    bias = T.concat([bq, np.zeros(c, dtype=bq.dtype), bv], axis=0)
    qkv = T.linear(x, p[f"{prefix}.qkv.w"], bias)
    q, k, v = (split_heads(part, heads) for part in T.split(qkv, [c, c, c], axis=2))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(c // heads))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    weights = softmax(scores, axis=-1, mask=mask)
    out = merge_heads(T.matmul(weights, v))
    return T.linear(out, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"]), weights


def transformer_block(tokens: Tensor, p: ModelParams, prefix: str, heads: int,
                      adapter_enabled: bool = False, alpha: float = 0.2,
                      key_mask: np.ndarray | None = None):
    """Pre-norm attention and MLP sublayers; adapters sit before each residual add.

    Returns ``(tokens, attention_weights)``.
    """
    h = layer_norm(tokens, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    attn_out, weights = self_attention(h, p, f"{prefix}.attn", heads, key_mask)
    if adapter_enabled:
        attn_out = adapter_apply(attn_out, p, f"{prefix}.adapter_attn", alpha)
    x = tokens + attn_out
    h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = T.relu(T.linear(h, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"]))
    h = T.linear(h, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"])
    if adapter_enabled:
        h = adapter_apply(h, p, f"{prefix}.adapter_mlp", alpha)
    return x + h, weights


# -- global (patch attention) branch -----------------------------------------

def init_global(p: ModelParams, cfg: ModelConfig, with_adapters: bool = True,
                prefix: str = "global") -> None:
    c, n = cfg.channels, cfg.num_patches
    p.xavier(f"{prefix}.patch.w", 3 * cfg.patch * cfg.patch, c)
    p.zeros(f"{prefix}.patch.b", (c,))
    p.normal(f"{prefix}.cls", (1, 1, c), 0.02)
    p.normal(f"{prefix}.pos", (1, n + 1, c), 0.02)
    for i in range(cfg.vit_depth):
        init_block(p, f"{prefix}.block{i}", c, cfg.mlp_ratio,
                   cfg.adapter_r if with_adapters else None)


def is_adapter(name: str) -> bool:
    return ".adapter_" in name


def freeze_global_backbone(p: ModelParams, prefix: str = "global") -> None:
    p.freeze(prefix + ".", keep=is_adapter)


def freeze_backbone(p: ModelParams) -> None:
    """Freeze all three encoders except the adapters.

    Frozen batch-norm stages keep their stored statistics as fixed values, so
    they are marked initialized here.
    """
    for prefix in ("local.", "global.", "text."):
        p.freeze(prefix, keep=is_adapter)
    for name, arr in p.buffers.items():
        if name.startswith("local.") and name.endswith(".tracked"):
            arr[0] = max(int(arr[0]), 1)


def patchify(images: Tensor, patch: int) -> Tensor:
    """[B,3,H,W] -> [B,N,3*P*P] with patches in raster order."""
    b, ch, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {(h, w)} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(images, (b, ch, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, ch * patch * patch))


def patch_embed(images: Tensor, p: ModelParams, cfg: ModelConfig, prefix: str = "global") -> Tensor:
    patches = patchify(images, cfg.patch)
    b, n, _ = patches.shape
    tokens = T.linear(patches, p[f"{prefix}.patch.w"], p[f"{prefix}.patch.b"])
    cls = T.broadcast_to(p[f"{prefix}.cls"], (b, 1, cfg.channels))
    pos = p[f"{prefix}.pos"]
    if pos.shape[1] != n + 1:
        raise ShapeError(f"positional table has {pos.shape[1]} rows, need {n + 1}")
    return T.concat([cls, tokens], axis=1) + pos


def encode_global(images: Tensor, p: ModelParams, cfg: ModelConfig, adapter_enabled: bool = True,
                  prefix: str = "global"):
    """Patch embedding followed by the transformer stack.

    Returns ``(tokens [B,N+1,C], per-block attention maps)``.
    """
    x = patch_embed(images, p, cfg, prefix)
    maps = []
    for i in range(cfg.vit_depth):
        x, w = transformer_block(x, p, f"{prefix}.block{i}", cfg.heads,
                                 adapter_enabled=adapter_enabled, alpha=cfg.adapter_alpha)
        maps.append(w)
    return x, maps


# -- text side ----------------------------------------------------------------

@dataclass
class PromptSet:
    template: str
    class_names: list
    prompts: list


_PLACEHOLDER = re.compile(r"\{class\}", re.IGNORECASE)


def build_prompts(class_names, template: str) -> PromptSet:
    """Render one lowercase prompt per class, preserving class order."""
    if len(_PLACEHOLDER.findall(template)) != 1:
        raise ConfigError("prompt template must contain the {Class} placeholder exactly once")
    names = list(class_names)
    if not names or any(not str(n).strip() for n in names):
        raise ConfigError("class names must be non-empty")
    prompts = [_PLACEHOLDER.sub(lambda _: str(n), template).lower() for n in names]
    return PromptSet(template, names, prompts)


def words(text: str) -> list:
    return [w for w in re.split(r"[^0-9a-z]+", text.lower()) if w]


def build_vocab(texts) -> dict:
    vocab = {tok: i for i, tok in enumerate(SPECIALS)}
    for text in texts:
        for w in words(text):
            vocab.setdefault(w, len(vocab))
    return vocab


def tokenize(text: str, vocab: dict, length: int = 12) -> list:
    ids = [CLS] + [vocab.get(w, UNK) for w in words(text)]
    ids = ids[:length]
    return ids + [PAD] * (length - len(ids))


def init_text(p: ModelParams, cfg: ModelConfig, vocab_size: int, max_len: int | None = None,
              prefix: str = "text") -> None:
    c = cfg.channels
    p.normal(f"{prefix}.embed", (vocab_size, c), 0.02)
    p.normal(f"{prefix}.pos", (max_len or cfg.text_len, c), 0.02)
    for i in range(cfg.text_depth):
        init_block(p, f"{prefix}.block{i}", c, cfg.mlp_ratio, None)


def encode_text(prompt_ids, p: ModelParams, cfg: ModelConfig, prefix: str = "text",
                return_attention: bool = False):
    """Encode ``[K,L]`` token ids and return the [CLS] feature of each row ``[K,C]``."""
    ids = np.asarray(prompt_ids.data if isinstance(prompt_ids, Tensor) else prompt_ids)
    ids = ids.astype(np.int64)
    embed = p[f"{prefix}.embed"]
    if ids.min() < 0 or ids.max() >= embed.shape[0]:
        raise DataError(f"token id out of range [0, {embed.shape[0]})")
    k, length = ids.shape
    pos = p[f"{prefix}.pos"]
    if length > pos.shape[0]:
        raise ShapeError(f"sequence length {length} exceeds the positional table ({pos.shape[0]})")
    x = T.getitem(embed, ids) + T.slice_axis(pos, 0, 0, length)
    key_mask = ids != PAD
    maps = []
    for i in range(cfg.text_depth):
        x, w = transformer_block(x, p, f"{prefix}.block{i}", cfg.heads, key_mask=key_mask)
        maps.append(w)
    cls = T.reshape(T.slice_axis(x, 1, 0, 1), (k, cfg.channels))
    return (cls, maps) if return_attention else cls
