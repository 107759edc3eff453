"""Parameter containers shared by the encoder, U-Nets and occupancy head."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import grad as G
from .grad import Tensor


class Module:
    """Walks attributes to collect parameters with dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64,
                 zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            self.weight = Tensor(np.zeros((n_out, n_in), dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        else:
            self.weight = _uniform(rng, (n_out, n_in), bound, dtype)
            self.bias = _uniform(rng, (n_out,), bound, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return G.linear(x, self.weight, self.bias)


class Conv(Module):
    """Shape-preserving (stride 1, pad (k-1)/2) convolution over channels-last input."""

    def __init__(self, dims: int, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=np.float64):
        fan_in = c_in * kernel ** dims
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = _uniform(rng, (c_out, c_in) + (kernel,) * dims, bound, dtype)
        self.bias = _uniform(rng, (c_out,), bound, dtype)
        self.pad = (kernel - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return G.conv(x, self.weight, self.bias, stride=1, pad=self.pad)


def set_parameters(module: Module, values: dict[str, np.ndarray], strict: bool = True) -> None:
    params = dict(module.named_parameters())
    if strict:
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params.items():
        if name in values:
            v = np.asarray(values[name])
            if v.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {v.shape} != {p.shape}")
            p.data[...] = v


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter with N(0, scale^2 / fan_in) noise (test helper for random models)."""
    for _, p in module.named_parameters():
        fan = p.data[0].size if p.ndim > 1 else p.size
        p.data[...] = rng.normal(scale=scale / np.sqrt(max(fan, 1)), size=p.shape)


def maybe(x: Optional[Tensor], fn):
    return None if x is None else fn(x)
