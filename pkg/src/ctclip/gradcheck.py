"""Central finite-difference oracle for checking tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                      mask: Callable[[np.ndarray], np.ndarray] | None = None,
                      max_coords: int | None = None, rng=None,
                      extended: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. ``mask`` optionally selects
    which coordinates to test (e.g. to skip relu kinks); ``max_coords`` caps the
    number of coordinates tested per input, chosen with ``rng``.

    With ``extended`` the tape gradient is still taken at the inputs' own
    precision but the perturbed evaluations run on ``np.longdouble`` copies.
    Coordinates whose true gradient is near the 1e-8 floor are otherwise
    swamped by f64 cancellation noise (roughly 1e-16 / eps).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    saved = [x.data for x in inputs]
    if extended:
        for x in inputs:
            x.data = x.data.astype(np.longdouble)
    try:
        worst = _scan(f, inputs, analytic, eps, mask, max_coords, rng)
    finally:
        for x, data in zip(inputs, saved):
            x.data = data
    return worst


def _scan(f, inputs, analytic, eps, mask, max_coords, rng) -> float:
    worst = 0.0
    with no_grad():
        for x, grad in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            coords = np.arange(flat.size)
            if mask is not None:
                coords = coords[np.asarray(mask(x.data)).reshape(-1)]
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords, size=max_coords, replace=False)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + eps
                up = f(*inputs).data
                flat[k] = orig - eps
                down = f(*inputs).data
                flat[k] = orig
                numeric = float((up - down) / (2 * eps))
                worst = max(worst, float(relative_error(grad.reshape(-1)[k], numeric)))
    return worst


# -- the oracle suite used by `ctclip gradcheck` and the acceptance tests ----------

def _primitive_cases(rng):
    from . import tensor as T
    from .functional import batch_norm, conv2d, layer_norm, lstm_scan, softmax

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def weights(*shape):
        return Tensor(rng.normal(size=shape))

    away_from_kink = lambda a: np.abs(a) > 1e-3  # noqa: E731

    c = weights(3, 4)
    yield "add", lambda a, b: ((a + b) * c).sum(), [leaf(3, 4), leaf(1, 4)], None
    yield "mul", lambda a, b: ((a * b) * c).sum(), [leaf(3, 4), leaf(3, 1)], None
    cm = weights(2, 3, 5)
    yield "matmul", lambda a, b: (T.matmul(a, b) * cm).sum(), \
        [leaf(2, 3, 4), leaf(4, 5)], None
    for kind in ("relu", "sigmoid", "tanh"):
        yield kind, (lambda k: lambda x: (T.activation(x, k) * c).sum())(kind), [leaf(3, 4)], \
            (away_from_kink if kind == "relu" else None)
    yield "softmax", lambda x: (softmax(x, axis=1) * c).sum(), [leaf(3, 4)], None
    yield "softmax_masked", lambda x: (softmax(x, axis=1, mask=np.array([1, 1, 0, 1], bool))
                                       * c).sum(), [leaf(3, 4)], None
    yield "mean", lambda x: (T.reduce(x, "mean", (0, 2)) ** 2).sum(), [leaf(2, 3, 4)], None
    yield "reshape_transpose", lambda x: (T.transpose(T.reshape(x, (4, 3)), (1, 0)) * c).sum(), \
        [leaf(3, 4)], None
    yield "concat_slice", lambda a, b: (T.slice_axis(T.concat([a, b], 1), 1, 1, 5) ** 2).sum(), \
        [leaf(3, 2), leaf(3, 4)], None
    g, b = leaf(4), leaf(4)
    yield "layer_norm", lambda x, g, b: (layer_norm(x, g, b) * c).sum(), [leaf(3, 4), g, b], None
    c4 = weights(3, 2, 4, 4)
    state = (np.zeros(2), np.ones(2), np.zeros(1, np.int64))
    yield "batch_norm", lambda x, g, b: (batch_norm(x, g, b, *state, train=True) * c4).sum(), \
        [leaf(3, 2, 4, 4), leaf(2), leaf(2)], None
    co = weights(1, 3, 3, 3)
    yield "conv2d", lambda x, w, b: (conv2d(x, w, b, stride=2, pad=1) * co).sum(), \
        [leaf(1, 2, 5, 5), leaf(3, 2, 3, 3), leaf(3)], None
    cl = weights(2, 5, 3)
    yield "lstm_scan", lambda x, wx, wh, bb: (lstm_scan(x, wx, wh, bb, reverse=True) * cl).sum(), \
        [leaf(2, 5, 4), leaf(4, 12), leaf(3, 12), leaf(12)], None
    labels = rng.integers(0, 4, size=3)
    yield "softmax_cross_entropy", lambda x: -T.reduce(T.log(T.getitem(
        softmax(x, axis=1), (np.arange(3), labels))), "mean"), [leaf(3, 4)], None


def micro_model(seed: int):
    """Tiny f64 model (B=1, 16x16 image, C=8, 2 heads, K=3) with every
    parameter randomized. Returns (model, image, labels)."""
    from .config import ModelConfig, Toggles
    from .model import CTClip

    mcfg = ModelConfig(image_size=16, patch=8, channels=8, heads=2, vit_depth=1, text_depth=1,
                       mlp_ratio=2, adapter_r=4, feb_dim=8, feb_heads=2, cls_hidden=8,
                       text_len=8)
    toggles = Toggles(freeze_backbone=False)
    model = CTClip(mcfg, toggles, ["rust", "scab", "mosaic"], "a diseased plant with {class} marks",
                   dtype=np.float64, seed=seed)
    rng = np.random.default_rng(seed)
    for _, t in model.params.items():
        t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    image = rng.uniform(0.0, 1.0, size=(1, 3, 16, 16))
    labels = rng.integers(0, 3, size=1)
    return model, image, labels


def run_suite(seeds: int = 10, model_coords: int = 3, eps: float = 1e-6) -> dict:
    """Max relative error per check over ``seeds`` random draws."""
    from .tensor import getitem, log, neg, reduce

    results = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, f, inputs, mask in _primitive_cases(rng):
            err = finite_diff_check(f, inputs, eps=eps, mask=mask, extended=True)
            results[name] = max(results.get(name, 0.0), err)

        model, image, labels = micro_model(seed)
        names = list(model.params)

        def loss(*_):
            probs, _ = model.forward(image, train=True)
            return neg(reduce(log(getitem(probs, (np.arange(1), labels))), "mean"))

        err = finite_diff_check(loss, [model.params[n] for n in names], eps=eps,
                                max_coords=model_coords, rng=rng, extended=True)
        results["micro_model"] = max(results.get("micro_model", 0.0), err)
    return results
