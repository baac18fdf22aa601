"""Lightweight parameter containers.

Modules register parameters (Tensors with requires_grad) and child modules
in attribute order, yielding stable dotted names for checkpoints and
optimizers. No train/eval modes, no buffers: every block here is a pure
function of its inputs and parameters.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .rng import SplitMix64


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return parameter(np.zeros(shape))


def fan_in_uniform(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(shape, -bound, bound))


def conv_param(rng: SplitMix64, c_out: int, c_in_per_group: int, k: int) -> Tensor:
    return fan_in_uniform(rng, (c_out, c_in_per_group, k, k, k), c_in_per_group * k**3)


def linear_param(rng: SplitMix64, c_out: int, c_in: int) -> Tensor:
    return fan_in_uniform(rng, (c_out, c_in), c_in)
