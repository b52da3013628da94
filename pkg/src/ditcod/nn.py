"""Parameter containers and the basic layers built on :mod:`functional`."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import functional as F
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: parameters, buffers and child modules found by attribute.

    Names follow attribute nesting (``stage1.block1.attn.q.weight``), in
    assignment order. Buffers are plain ndarrays listed in ``_buffers``.
    """

    training: bool = True

    def __init__(self):
        self._buffers: Tuple[str, ...] = ()
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, np.asarray(value, dtype=np.float64))
        self._buffers = self._buffers + (name,)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(params) + list(buffers) if n not in state]
        unexpected = [n for n in state if n not in params and n not in buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(arr):
                raise ShapeError(f"{name}: checkpoint shape {np.shape(arr)} != model shape {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


# -- initialisers ---------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- layers ---------------------------------------------------------------------


class Identity(Module):
    def forward(self, x):
        return x


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        pad: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        exact: bool = True,
    ):
        super().__init__()
        if k % 2 == 0 and pad is None:
            raise ValueError("same padding needs an odd kernel")
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.groups = groups
        self.exact = exact
        fan_in = (c_in // groups) * k * k
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups, self.exact)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int):
        super().__init__()
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class BConv(Module):
    """Convolution, batch normalisation and ReLU."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.conv.weight.shape[1]:
            raise ShapeError(f"BConv expects {self.conv.weight.shape[1]} input channels, got {x.shape[-3]}")
        return F.relu(self.bn(self.conv(x)))


def bconv(x: Tensor, params: BConv) -> Tensor:
    return params(x)
