import numpy as np
import pytest

from ctclip import encoders as E
from ctclip import tensor as T
from ctclip.config import ModelConfig, Toggles
from ctclip.errors import ConfigError
from ctclip.gradcheck import finite_diff_check, micro_model
from ctclip.model import CTClip
from ctclip.training import cross_entropy

SMALL = ModelConfig(image_size=16, patch=8, channels=8, heads=2, vit_depth=1, text_depth=1,
                    mlp_ratio=2, adapter_r=4, feb_dim=8, feb_heads=2, cls_hidden=8, text_len=8)
TEMPLATE = "a diseased plant with {class} marks"
NAMES = ["rust", "scab", "mosaic"]


def _small(dtype=np.float64, **toggles):
    return CTClip(SMALL, Toggles(**toggles), NAMES, TEMPLATE, dtype=dtype, seed=3)


def _warm(model, rng):
    """One train-mode pass so batch-norm running stats exist."""
    model.forward(rng.uniform(size=(4, 3, 16, 16)), train=True)


def test_full_model_desk_shapes(rng):
    model = CTClip(ModelConfig(), Toggles(), [f"class{i}" for i in range(7)], TEMPLATE)
    probs, diag = model.forward(rng.uniform(size=(8, 3, 64, 64)).astype(np.float32))
    assert probs.shape == (8, 7)
    np.testing.assert_allclose(probs.data.sum(1), 1.0, atol=1e-6)
    assert diag.dam.shape == (8, 2)
    a_v, a_l = diag.feb_attention
    assert a_v.shape == (8, 4, 64, 7) and a_l.shape == (8, 4, 7, 64)
    assert diag.fusion_map.shape == (8, 64, 8, 8)


def test_all_softmax_outputs_row_stochastic():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = CTClip(SMALL, Toggles(), NAMES, TEMPLATE, dtype=np.float64, seed=seed)
        b = int(rng.integers(1, 4))
        probs, diag = model.forward(rng.uniform(size=(b, 3, 16, 16)), train=True)
        maps = [probs, diag.dam, *diag.feb_attention, *diag.vit_attention, *diag.text_attention]
        for m in maps:
            np.testing.assert_allclose(m.data.sum(-1), 1.0, atol=1e-6)
        assert diag.dam.shape == (b, 2)


def test_duplicate_images_identical_rows_in_eval(rng):
    model = _small(freeze_backbone=False)
    _warm(model, rng)
    img = rng.uniform(size=(1, 3, 16, 16))
    batch = np.concatenate([img, rng.uniform(size=(1, 3, 16, 16)), img])
    probs = model.predict(batch)
    np.testing.assert_array_equal(probs[0], probs[2])


def test_text_off_uses_null_token(rng):
    model = _small(text=False)
    assert "null_text" in model.params
    assert not any(n.startswith("text.") for n in model.params)
    probs, _ = model.forward(rng.uniform(size=(2, 3, 16, 16)))
    assert probs.shape == (2, 3)


def test_no_visual_branch_rejected():
    with pytest.raises(ConfigError):
        _small(cnn=False, vit=False)


def test_text_order_invariance(rng):
    model = _small()
    images = rng.uniform(size=(2, 3, 16, 16))
    before = model.forward(images)[0].data
    model.prompt_ids = model.prompt_ids[[2, 0, 1]]
    after = model.forward(images)[0].data
    np.testing.assert_allclose(after, before, atol=1e-6)


@pytest.mark.parametrize("overrides", [
    dict(cnn=True, vit=False, adapter=False, text=False, feb=False, affm=False),
    dict(cnn=False, vit=True, adapter=False, text=False, feb=False, affm=False),
    dict(affm=False),
    dict(feb=False),
    dict(feb_kind="cross"),
    dict(feb_kind="cnn"),
    dict(affm_seq="vit", affm_dam=False),
    dict(affm_seq="none", affm_dam=False),
])
def test_every_toggle_combination_trains_one_step(overrides, rng):
    model = _small(**overrides)
    probs, _ = model.forward(rng.uniform(size=(2, 3, 16, 16)), train=True)
    assert probs.shape == (2, 3)
    cross_entropy(probs, [0, 1]).backward()
    trainable = set(model.params.trainable_names())
    assert model.params.grad_census() == trainable


def test_frozen_backbone_gradient_census(rng):
    model = _small()
    p = model.params
    probs, _ = model.forward(rng.uniform(size=(2, 3, 16, 16)), train=True)
    cross_entropy(probs, [0, 2]).backward()
    census = p.grad_census()
    encoder = {n for n in census if n.split(".")[0] in ("local", "global", "text")}
    assert encoder == {n for n in p if E.is_adapter(n)}
    downstream = {n for n in p if n.split(".")[0] in ("affm", "feb", "head")}
    assert downstream <= census


def test_frozen_batch_norm_buffers_untouched(rng):
    model = _small()
    before = {k: v.copy() for k, v in model.params.buffers.items()}
    model.forward(rng.uniform(size=(2, 3, 16, 16)), train=True)
    for k, v in model.params.buffers.items():
        np.testing.assert_array_equal(v, before[k])


def test_micro_model_gradient_oracle():
    model, image, labels = micro_model(0)

    def loss(*_):
        probs, _ = model.forward(image, train=True)
        return cross_entropy(probs, labels)

    params = [model.params[n] for n in model.params]
    err = finite_diff_check(loss, params, max_coords=3, rng=np.random.default_rng(0),
                            extended=True)
    assert err < 1e-4


def test_forward_casts_inputs_to_param_dtype(rng):
    model = _small(dtype=np.float32)
    probs, _ = model.forward(rng.uniform(size=(1, 3, 16, 16)))
    assert probs.dtype == np.float32


def test_predict_batches_agree_with_single_pass(rng):
    model = _small(freeze_backbone=False)
    _warm(model, rng)
    images = rng.uniform(size=(5, 3, 16, 16))
    chunked = model.predict(images, batch_size=2)
    with T.no_grad():
        whole = model.forward(images)[0].data
    np.testing.assert_allclose(chunked, whole, atol=1e-12)
