"""Parameter containers: a bare-bones Module plus Linear."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, matmul


class Module:
    """Walks attributes (in assignment order) to find parameters and submodules.

    A tensor reachable through several paths (weight sharing) is reported once,
    under the first name found.
    """

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            else:
                yield from value.named_parameters(full + ".", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


def param(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ W + b`` with W stored as (in, out)."""

    def __init__(self, fan_in: int, fan_out: int, gen: np.random.Generator, bias: bool = True,
                 zero: bool = False, dtype=np.float32):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        self.weight = param(w, dtype)
        self.bias = None
        if bias:
            b = np.zeros(fan_out) if zero else gen.uniform(-bound, bound, size=fan_out)
            self.bias = param(b, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y
