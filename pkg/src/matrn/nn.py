"""Layer building blocks on top of the tensor tape (a small torch-like API)."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Parameter, Tensor


class Module:
    """Parameter container; sub-modules and parameters are found by attribute scan."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val._walk(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(_uniform(rng, (d_in, d_out), bound, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True, gain: float = 1.0, dtype=np.float32):
        std = gain * math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter((rng.normal(0.0, std, size=(c_out, c_in, k, k))).astype(dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, eps=self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads.

    ``allowed`` is an optional boolean ``(Nq, Nk)`` matrix; disallowed logits
    are set to ``-inf`` before the softmax. The last attention weights are kept
    in ``last_attn`` (numpy, ``B x heads x Nq x Nk``) for diagnostics.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise DimensionError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, dtype=dtype)
        self._last_attn: np.ndarray | None = None

    @property
    def last_attn(self) -> np.ndarray | None:
        return self._last_attn

    def _split(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return x.reshape(B, N, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x_q: Tensor, x_kv: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        B, Nq, _ = x_q.shape
        q = self._split(self.q(x_q))
        k = self._split(self.k(x_kv))
        v = self._split(self.v(x_kv))
        scores = F.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.d // self.heads))
        if allowed is not None:
            scores = F.masked_fill(scores, ~np.asarray(allowed, dtype=bool), -np.inf)
        attn = F.softmax(scores, axis=-1)
        self._last_attn = attn.data
        ctx = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Nq, self.d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, ffn, rng, dtype=dtype)

    def forward(self, x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, allowed)
        return x + self.ff(self.norm2(x))


class CrossBlock(Module):
    """Pre-norm block whose queries come from ``x`` and keys/values from ``memory``."""

    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator, dtype=np.float32):
        self.norm_q = LayerNorm(d, dtype=dtype)
        self.norm_kv = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, ffn, rng, dtype=dtype)

    def forward(self, x: Tensor, memory: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(memory), allowed)
        return x + self.ff(self.norm2(x))
