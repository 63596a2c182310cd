"""Loss, Adam, learning-rate schedules, splitting, the epoch loop, evaluation
and the ablation harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .config import RunConfig, TrainConfig, Toggles
from .data import Dataset
from .errors import ConfigError, DataError, StateError
from .metrics import MetricsReport, compute_metrics
from .model import DTYPES, CTClip
from .params import ModelParams
from .tensor import Tensor

log = logging.getLogger(__name__)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class (log clamped at 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise DataError(f"expected {b} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"label outside [0, {k})")
    picked = T.getitem(probs, (np.arange(b), labels))
    return T.neg(T.reduce(T.log(picked, clamp=1e-12), "mean"))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, state: OptimizerState, cfg: TrainConfig, lr: float | None = None,
              names=None) -> None:
    """One bias-corrected Adam update over the trainable parameters, in place.

    Weight decay is added to the gradient as an L2 term. ``names`` restricts the
    update to a subset (all trainable parameters by default).
    """
    lr = cfg.learning_rate if lr is None else lr
    names = params.trainable_names() if names is None else names
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise StateError(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for n in names:
        p = params[n]
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    if cfg.lr_schedule == "step":
        return cfg.learning_rate * cfg.step_gamma ** (epoch // cfg.step_every)
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * (1 + math.cos(math.pi * epoch / max(cfg.epochs, 1))) / 2
    raise ConfigError(f"unknown lr schedule {cfg.lr_schedule!r}")


def split_dataset(ds: Dataset, ratio: float = 0.8, seed: int = 0):
    """Stratified shuffle split; each class keeps round(ratio * n_c) for training."""
    if not 0 < ratio < 1:
        raise ConfigError("split ratio must lie strictly between 0 and 1")
    labels = ds.labels()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx) < 2:
            raise DataError(f"class {ds.class_names[k]!r} has {len(idx)} sample(s); need >= 2")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(math.floor(ratio * len(idx) + 0.5))
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    return ds.subset(sorted(train_idx)), ds.subset(sorted(test_idx))


def evaluate(model: CTClip, ds: Dataset, batch_size: int = 64) -> MetricsReport:
    """Eval-mode argmax predictions scored against the labels."""
    if len(ds) == 0:
        raise DataError("cannot evaluate an empty dataset")
    probs = model.predict(ds.images(model.dtype), batch_size)
    return compute_metrics(ds.labels(), probs.argmax(axis=1), ds.num_classes, ds.class_names)


def build_model(cfg: RunConfig, class_names, toggles: Toggles | None = None) -> CTClip:
    return CTClip(cfg.model, toggles or cfg.toggles, class_names, cfg.template,
                  dtype=DTYPES[cfg.train.precision], seed=cfg.train.seed)


def train_loop(model: CTClip, train_ds: Dataset, test_ds: Dataset | None, cfg: TrainConfig,
               state: OptimizerState | None = None, progress=None):
    """Train in place. Returns ``(history, optimizer state)``.

    ``history`` holds one dict per epoch with ``epoch, lr, train_loss, test_acc``.
    """
    if len(train_ds) == 0:
        raise DataError("training set is empty")
    state = state or OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    images = train_ds.images(model.dtype)
    labels = train_ds.labels()
    names = model.params.trainable_names()
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        t0 = time.perf_counter()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            probs, _ = model.forward(images[idx], train=True)
            loss = cross_entropy(probs, labels[idx])
            if names:
                model.params.zero_grad()
                loss.backward()
                adam_step(model.params, state, cfg, lr, names)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / seen,
               "test_acc": evaluate(model, test_ds).accuracy if test_ds is not None and len(test_ds)
               else float("nan")}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", row["epoch"], row["train_loss"],
                 row["test_acc"], time.perf_counter() - t0)
        if progress is not None:
            progress(row)
    model.params.zero_grad()
    return history, state


# -- ablation ---------------------------------------------------------------------

@dataclass
class AblationSpec:
    name: str
    rows: list  # (row name, dict of toggle overrides)

    def configurations(self, base: Toggles) -> list:
        names = [r[0] for r in self.rows]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"duplicate ablation configuration name(s): {sorted(dupes)}")
        out = []
        for row_name, overrides in self.rows:
            try:
                toggles = replace(base, **overrides)
            except TypeError as exc:
                raise ConfigError(f"{row_name}: {exc}") from None
            try:
                toggles.validate()
            except ConfigError as exc:
                raise ConfigError(f"{row_name}: {exc}") from None
            out.append((row_name, toggles))
        return out


_OFF = dict(text=False, feb=False, affm=False)

MODULE_TABLE = AblationSpec("modules", [
    ("CNN", dict(_OFF, cnn=True, vit=False, adapter=False)),
    ("ViT (w/o Adapter)", dict(_OFF, cnn=False, vit=True, adapter=False)),
    ("ViT", dict(_OFF, cnn=False, vit=True, adapter=True)),
    ("CNN+ViT", dict(_OFF, cnn=True, vit=True, adapter=True)),
    ("CNN+ViT+AFFM", dict(_OFF, cnn=True, vit=True, adapter=True, affm=True)),
    ("Text+CNN+ViT+FEB", dict(text=True, cnn=True, vit=True, adapter=True, feb=True, affm=False)),
    ("CT-CLIP", dict(text=True, cnn=True, vit=True, adapter=True, feb=True, affm=True)),
])

AFFM_TABLE = AblationSpec("affm", [
    ("CNN", dict(affm_seq="none", affm_dam=False)),
    ("CNN+V-LSTM", dict(affm_seq="vlstm", affm_dam=False)),
    ("CNN+ViT", dict(affm_seq="vit", affm_dam=False)),
    ("CNN+V-LSTM+DAM", dict(affm_seq="vlstm", affm_dam=True)),
])

FEB_TABLE = AblationSpec("feb", [
    ("CNN", dict(feb_kind="cnn")),
    ("Cross-Attention", dict(feb_kind="cross")),
    ("Bi-MultiHead Attention", dict(feb_kind="bima")),
])

ABLATIONS = {spec.name: spec for spec in (MODULE_TABLE, AFFM_TABLE, FEB_TABLE)}


def run_ablation(cfg: RunConfig, spec: AblationSpec, train_ds: Dataset, test_ds: Dataset) -> list:
    """Train and score every configuration with the same seed and split.

    Returns rows ``{name, acc, precision, recall, f1}`` (macro P/R/F1).
    """
    configs = spec.configurations(cfg.toggles)  # validates everything before training
    rows = []
    for name, toggles in configs:
        model = build_model(cfg, train_ds.class_names, toggles)
        train_loop(model, train_ds, None, cfg.train)
        rep = evaluate(model, test_ds)
        rows.append({"name": name, "acc": rep.accuracy, "precision": rep.macro_precision,
                     "recall": rep.macro_recall, "f1": rep.macro_f1})
        log.info("ablation %s/%s: acc %.4f", spec.name, name, rep.accuracy)
    return rows
