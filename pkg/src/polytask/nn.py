"""Small neural-network layer library on top of the autodiff tape.

Modules auto-register parameters and submodules through attribute assignment;
``named_parameters`` yields stable dotted names (dict children contribute
their key, list children their index) which the checkpoint format and the
partial-load name filters rely on.
"""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, ops


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        object.__setattr__(self, name, tensor)
        return tensor

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Module":
        object.__setattr__(self, "training", True)
        for mod in self._modules.values():
            mod.train()
        return self

    def eval(self) -> "Module":
        object.__setattr__(self, "training", False)
        for mod in self._modules.values():
            mod.eval()
        return self

    def to_dtype(self, dtype) -> "Module":
        """Cast every parameter in place (used to drop to 32-bit for training)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()) -> None:
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class ModuleDict(Module):
    def __init__(self, modules: Optional[Dict[str, Module]] = None) -> None:
        super().__init__()
        if modules:
            for k, v in modules.items():
                self[k] = v

    def __setitem__(self, key: str, module: Module) -> None:
        self._modules[key] = module

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __contains__(self, key: str) -> bool:
        return key in self._modules

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()


class Linear(Module):
    """Affine map y = x @ W + b with Glorot-uniform weight init."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        limit = math.sqrt(6.0 / (in_features + out_features))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.ndim > 2
        shape = x.shape
        if flat:
            x = x.reshape(-1, shape[-1])
        elif x.ndim == 1:
            x = x.reshape(1, -1)
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        if flat:
            out = out.reshape(*shape[:-1], self.weight.shape[1])
        elif len(shape) == 1:
            out = out.reshape(self.weight.shape[1])
        return out


class Embedding(Module):
    """Lookup table with N(0, 0.02) init, the usual transformer scale."""

    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(num_embeddings, dim)), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv2d(Module):
    """Channels-last convolution with He-uniform init (fan_in = kh*kw*cin)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        super().__init__()
        fan_in = kernel_size * kernel_size * in_channels
        limit = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(kernel_size, kernel_size, in_channels, out_channels)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
