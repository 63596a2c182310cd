"""End-to-end composition of encoders, fusion and the feature enhancer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import affm as A
from . import encoders as E
from . import feb as F
from . import tensor as T
from .config import ModelConfig, Toggles
from .errors import ConfigError
from .functional import softmax
from .params import ModelParams
from .tensor import Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class Diagnostics:
    logits: Tensor | None = None
    fusion_map: Tensor | None = None
    dam: Tensor | None = None
    vit_attention: list = field(default_factory=list)
    text_attention: list = field(default_factory=list)
    feb_attention: tuple = ()


def init_params(mcfg: ModelConfig, toggles: Toggles, num_classes: int, vocab_size: int,
                dtype=np.float32, seed: int = 0) -> ModelParams:
    """Create parameters for exactly the modules the toggles enable."""
    toggles.validate()
    p = ModelParams(dtype, seed)
    c = mcfg.channels
    if toggles.cnn:
        E.init_local(p, c, mcfg.bn_momentum)
    if toggles.vit:
        E.init_global(p, mcfg, with_adapters=toggles.adapter)
    if toggles.cnn and toggles.vit:
        if toggles.affm:
            A.init_affm(p, c, toggles.affm_seq, toggles.affm_dam, mcfg.heads)
        else:
            A.init_align(p, c)
    if toggles.feb:
        if toggles.text:
            E.init_text(p, mcfg, vocab_size)
        else:
            p.normal("null_text", (1, 1, c), 0.02)
        if toggles.feb_kind == "bima":
            F.init_bima(p, c, c, mcfg.feb_dim)
        elif toggles.feb_kind == "cross":
            F.init_cross(p, c, c, mcfg.feb_dim)
        else:
            F.init_feb_conv(p, c)
    F.init_head(p, c, c, mcfg.cls_hidden, num_classes, with_text=toggles.feb)
    if toggles.freeze_backbone:
        E.freeze_backbone(p)
    return p


def visual_map(images: Tensor, p: ModelParams, mcfg: ModelConfig, toggles: Toggles, train: bool,
               diag: Diagnostics) -> Tensor:
    """Run the visual branches and return the fused grid ``[B, C, H, W]``."""
    local = E.encode_local(images, p, train) if toggles.cnn else None
    glob = None
    if toggles.vit:
        glob, diag.vit_attention = E.encode_global(images, p, mcfg, adapter_enabled=toggles.adapter)
    if local is not None and glob is not None:
        if toggles.affm:
            _, fused, diag.dam = A.affm_forward(glob, local, p, toggles.affm_seq, toggles.affm_dam,
                                                mcfg.heads, return_map=True)
            return fused
        return A.align_and_concat(glob, local, p)
    if local is not None:
        return local
    g = mcfg.image_size // mcfg.patch
    return A.tokens_to_grid(T.slice_axis(glob, 1, 1, glob.shape[1]), g, g)


def model_forward(images, prompt_ids, p: ModelParams, mcfg: ModelConfig, toggles: Toggles,
                  train: bool = False, capture_fusion: bool = False):
    """Class probabilities ``[B, K]`` and a :class:`Diagnostics` record.

    ``prompt_ids`` is the ``[K, L]`` id matrix of every class prompt; the same
    text features are shared by every image so no label enters the forward
    pass. ``capture_fusion`` detaches the fused grid into a fresh leaf so its
    gradient can be read back (Grad-CAM).
    """
    if not (toggles.cnn or toggles.vit):
        raise ConfigError("at least one of the cnn / vit branches must be enabled")
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=p.dtype))
    elif images.dtype != p.dtype:
        images = Tensor(images.data.astype(p.dtype))
    diag = Diagnostics()
    fmap = visual_map(images, p, mcfg, toggles, train, diag)
    if capture_fusion:
        fmap = Tensor(fmap.data, requires_grad=True)
    diag.fusion_map = fmap
    tokens = A.grid_to_tokens(fmap)
    b, _, c = tokens.shape

    if toggles.feb:
        if toggles.text:
            text, diag.text_attention = E.encode_text(prompt_ids, p, mcfg, return_attention=True)
            l = T.broadcast_to(T.reshape(text, (1,) + text.shape), (b,) + text.shape)
        else:
            l = T.broadcast_to(p["null_text"], (b, 1, c))
        if toggles.feb_kind == "bima":
            v_hat, l_hat, a_v, a_l = F.bima(tokens, l, p, mcfg.feb_heads)
            diag.feb_attention = (a_v, a_l)
        elif toggles.feb_kind == "cross":
            v_hat, a_v = F.cross_attention(tokens, l, p, mcfg.feb_heads)
            l_hat = l
            diag.feb_attention = (a_v,)
        else:
            v_hat, l_hat = F.conv_enhance(fmap, p), l
        fused = F.pool_fuse(v_hat, l_hat, p)
    else:
        fused = F.pool_fuse(tokens, None, p, d_l=c)

    logits = F.head_logits(fused, p)
    diag.logits = logits
    return softmax(logits, axis=-1), diag


class CTClip:
    """Parameters plus everything needed to run them: dims, toggles, vocabulary
    and the tokenized class prompts."""

    def __init__(self, mcfg: ModelConfig, toggles: Toggles, class_names, template: str,
                 dtype=np.float32, seed: int = 0, params: ModelParams | None = None,
                 vocab: dict | None = None):
        self.mcfg = mcfg
        self.toggles = toggles
        self.class_names = list(class_names)
        self.template = template
        self.prompts = E.build_prompts(self.class_names, template)
        self.vocab = vocab if vocab is not None else E.build_vocab(self.prompts.prompts)
        self.prompt_ids = np.array([E.tokenize(t, self.vocab, mcfg.text_len)
                                    for t in self.prompts.prompts], dtype=np.int64)
        self.params = params if params is not None else init_params(
            mcfg, toggles, len(self.class_names), len(self.vocab), dtype, seed)

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, images, train: bool = False, capture_fusion: bool = False):
        return model_forward(images, self.prompt_ids, self.params, self.mcfg, self.toggles,
                             train=train, capture_fusion=capture_fusion)

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        """Eval-mode probabilities for an image array ``[N,3,H,W]``."""
        images = np.asarray(images)
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                probs, _ = self.forward(images[s:s + batch_size].astype(self.dtype))
                out.append(probs.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(self.class_names)))
