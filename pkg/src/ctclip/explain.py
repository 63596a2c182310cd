"""Attention and Grad-CAM heatmaps plus PPM overlay export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import resize_bilinear, write_ppm
from .errors import ConfigError
from .model import CTClip


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    source: str  # "attention" or "gradcam"
    class_index: int | None = None
    raw: np.ndarray | None = None  # pre-normalization grid at feature resolution


def normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]. An all-zero map stays zero; any other constant map becomes ones."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw) if hi == 0 else np.ones_like(raw)


def _single(image) -> np.ndarray:
    image = np.asarray(image)
    return image[None] if image.ndim == 3 else image


def class_token_scores(model: CTClip, image) -> np.ndarray:
    """Head-averaged attention of the class token over the patch tokens in the
    last global block, shaped onto the patch grid."""
    if not model.toggles.vit:
        raise ConfigError("attention heatmaps need the global (vit) branch")
    with T.no_grad():
        _, diag = model.forward(_single(image).astype(model.dtype))
    weights = diag.vit_attention[-1].data[0]  # [H, T, T]
    scores = weights[:, 0, 1:].mean(axis=0)
    g = model.mcfg.image_size // model.mcfg.patch
    return scores.reshape(g, g).astype(np.float64)


def attention_heatmap(model: CTClip, image) -> Heatmap:
    raw = class_token_scores(model, image)
    size = np.asarray(image).shape[-1]
    return Heatmap(normalize(resize_bilinear(raw, size, size)), "attention", None, raw)


def gradcam_heatmap(model: CTClip, image, class_index: int) -> Heatmap:
    """Gradient-weighted map over the fused feature grid for one class logit."""
    k = len(model.class_names)
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} outside [0, {k})")
    _, diag = model.forward(_single(image).astype(model.dtype), capture_fusion=True)
    fmap = diag.fusion_map
    logit = T.getitem(diag.logits, (0, class_index))
    grads = np.zeros_like(fmap.data)
    if logit.requires_grad:
        logit.backward()
        grads = fmap.grad
    model.params.zero_grad()
    weights = grads[0].mean(axis=(1, 2))  # [C]
    raw = np.maximum((weights[:, None, None] * fmap.data[0]).sum(axis=0), 0.0)
    size = np.asarray(image).shape[-1]
    return Heatmap(normalize(resize_bilinear(raw.astype(np.float64), size, size)),
                   "gradcam", class_index, raw)


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow ramp, ``[3, H, W]``."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.minimum(1.0, 2 * v), np.clip(2 * v - 1, 0.0, 1.0), np.zeros_like(v)])


def overlay(h: Heatmap, image) -> np.ndarray:
    return 0.5 * np.asarray(image, dtype=np.float64) + 0.5 * heat_colors(h.values)


def export_heatmap(h: Heatmap, image, path) -> tuple:
    """Write ``<stem>_heat.ppm`` and ``<stem>_overlay.ppm``; returns both paths."""
    path = Path(path)
    stem = path.with_suffix("")
    heat_path = stem.parent / f"{stem.name}_heat.ppm"
    over_path = stem.parent / f"{stem.name}_overlay.ppm"
    image = np.asarray(image)
    if image.shape[-2:] != h.values.shape:
        raise ValueError(f"heatmap {h.values.shape} does not match image {image.shape[-2:]}")
    write_ppm(heat_path, heat_colors(h.values))
    write_ppm(over_path, overlay(h, image))
    return heat_path, over_path
