"""Parameter containers and the small layers the network is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        shape = (out_ch, in_ch, kernel, kernel)
        w = np.zeros(shape, T.default_dtype()) if zero_init else kaiming_uniform(
            rng, shape, in_ch * kernel * kernel
        )
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, T.default_dtype()), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = dilation * (kernel // 2) if padding is None else padding
        self.dilation = dilation

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Linear(Module):
    """Affine map on the last axis: ``x @ W + b`` with W of shape [in, out]."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        self.weight = Tensor(kaiming_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, T.default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two affine layers with a GeLU between them."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int):
        self.fc1 = Linear(rng, in_dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over a [N, L, D] token sequence, with residual."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def forward(self, x):
        n, length, dim = x.shape
        h, d = self.heads, dim // self.heads
        qkv = self.qkv(x).reshape(n, length, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(d)), axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, length, dim)
        return x + self.proj(out)
