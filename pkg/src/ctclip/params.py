"""Named parameter collection shared by every branch of the model."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ModelParams:
    """Ordered mapping of dotted names to parameter tensors plus numpy buffers.

    Parameters carry ``requires_grad`` equal to their trainable flag. Buffers
    (batch-norm running statistics) are plain arrays mutated during training
    forward passes and persisted with the checkpoint.
    """

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        arr = np.array(value)
        self.buffers[name] = arr
        return arr

    # -- initializers -------------------------------------------------------
    def normal(self, name: str, shape, std: float, trainable: bool = True) -> Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape), trainable)

    def xavier(self, name: str, fan_in: int, fan_out: int, trainable: bool = True) -> Tensor:
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return self.normal(name, (fan_in, fan_out), std, trainable)

    def he_conv(self, name: str, cout: int, cin: int, k: int, trainable: bool = True) -> Tensor:
        return self.normal(name, (cout, cin, k, k), np.sqrt(2.0 / (cin * k * k)), trainable)

    def zeros(self, name: str, shape, trainable: bool = True) -> Tensor:
        return self.add(name, np.zeros(shape), trainable)

    def ones(self, name: str, shape, trainable: bool = True) -> Tensor:
        return self.add(name, np.ones(shape), trainable)

    def bn_state(self, prefix: str, channels: int, momentum: float = 0.1) -> dict:
        self.ones(f"{prefix}.gamma", (channels,))
        self.zeros(f"{prefix}.beta", (channels,))
        self.add_buffer(f"{prefix}.running_mean", np.zeros(channels, dtype=self.dtype))
        self.add_buffer(f"{prefix}.running_var", np.ones(channels, dtype=self.dtype))
        self.add_buffer(f"{prefix}.tracked", np.zeros(1, dtype=np.int64))
        self.add_buffer(f"{prefix}.momentum", np.array([momentum], dtype=self.dtype))

    def bn(self, prefix: str) -> dict:
        return {
            "running_mean": self.buffers[f"{prefix}.running_mean"],
            "running_var": self.buffers[f"{prefix}.running_var"],
            "tracked": self.buffers[f"{prefix}.tracked"],
            "momentum": float(self.buffers[f"{prefix}.momentum"][0]),
        }

    # -- freezing and census ------------------------------------------------
    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad = bool(flag)

    def freeze(self, prefix: str = "", keep=lambda name: False) -> None:
        """Freeze every parameter starting with ``prefix`` unless ``keep(name)``."""
        for name, t in self._params.items():
            if name.startswith(prefix) and not keep(name):
                t.requires_grad = False

    def trainable_names(self) -> list:
        return [n for n, t in self._params.items() if t.requires_grad]

    def frozen_names(self) -> list:
        return [n for n, t in self._params.items() if not t.requires_grad]

    def grad_census(self) -> set:
        """Names of parameters currently holding a gradient."""
        return {n for n, t in self._params.items() if t.grad is not None}

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._params.items()
                   if n.startswith(prefix) and (t.requires_grad or not trainable_only))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def astype(self, dtype) -> "ModelParams":
        """Copy of the store with parameters cast to ``dtype``."""
        other = ModelParams(dtype)
        other.rng = self.rng
        for name, t in self._params.items():
            other.add(name, t.data, t.requires_grad)
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other
