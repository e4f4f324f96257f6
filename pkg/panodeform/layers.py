# -*- coding: utf-8 -*-
"""Contenedores de parámetros y capas básicas.

Los parámetros se registran en orden de asignación, de modo que
``named_parameters`` (y con él los checkpoints y el estado del
optimizador) tiene un orden estable.

"""
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np

from panodeform.exceptions import StageMismatch
from panodeform.numcore import Tensor
from panodeform.numcore import gelu
from panodeform.numcore import layernorm
from panodeform.numcore import matmul

INIT_STD = 0.02


def trunc_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD
) -> np.ndarray:
    """Normal truncada en ``[-2 std, 2 std]``, re-muestreando el resto."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


class Parameter(Tensor):
    """Hoja entrenable."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base de las capas.

    Example:

        >>> class Affine(Module):
                def __init__(self):
                    super().__init__()
                    self.scale = Parameter(np.ones(3))
        >>> [name for name, _ in Affine().named_parameters()]
        ['scale']

    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(
        self, prefix: str = ""
    ) -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def named_modules(
        self, prefix: str = ""
    ) -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, module in self._modules.items():
            yield from module.named_modules(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            name: param.data.copy() for name, param in self.named_parameters()
        }

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Carga valores por nombre; nombres y formas deben calzar."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise StageMismatch(
                detail="faltan {} / sobran {}".format(missing, unexpected)
            )
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise StageMismatch(
                    detail="{}: {} vs {}".format(
                        name, value.shape, param.shape
                    )
                )
            param.data = value.copy()
            param.grad = None


class ModuleList(Module):
    """Lista indexable de submódulos (``"0"``, ``"1"``, ...)."""

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __getitem__(self, index: int) -> Module:
        return self._modules[str(index)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


class Linear(Module):
    """``y = x W + b`` sobre el último eje de ``x``."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
        zero: bool = False,
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero or rng is None:
            weight = np.zeros((in_features, out_features))
        else:
            weight = trunc_normal(rng, (in_features, out_features))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out = matmul(x.reshape(-1, self.in_features), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(lead + (self.out_features,))


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(
        self,
        in_features: int,
        hidden_features: int,
        out_features: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.fc1 = Linear(in_features, hidden_features, rng)
        self.fc2 = Linear(hidden_features, out_features or in_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
