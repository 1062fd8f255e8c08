"""Neural building blocks shared by every architecture."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (ContractError, DimensionError, Tensor, _wrap, add_macs, default_dtype,
                     matmul, mul, relu, reshape, silu, swapaxes)


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking attributes in definition order, so
    names are stable across processes (``encoder.layers.0.ffn.fc1.weight``).
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for v in val:
                    if isinstance(v, Module):
                        yield from v.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        pairs = [(own[n], arr, n) for n, arr in state.items() if n in own]
        for p, arr, name in pairs:  # validate everything before touching any weight
            if tuple(arr.shape) != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {p.shape}")
        for p, arr, _ in pairs:
            p.data = np.array(arr, dtype=p.dtype)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype_(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True)


# ------------------------------------------------------------------ linear


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear expects last extent {p.weight.shape[1]}, got {x.shape}")
    if x.ndim == 1:
        return reshape(linear_forward(p, reshape(x, (1, x.shape[0]))), (p.weight.shape[0],))
    y = matmul(x, transpose_last(p.weight))
    return y + p.bias if p.bias is not None else y


def transpose_last(w: Tensor) -> Tensor:
    return swapaxes(w, -1, -2)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = np.sqrt(6.0 / (d_in + d_out))
        self.weight = param(rng.uniform(-bound, bound, (d_out, d_in)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(LinearParams(self.weight, self.bias), x)


# -------------------------------------------------------------- layer norm


def layer_norm_forward(gamma: Tensor, beta: Tensor, x: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer norm params {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd, bd = gamma.data, beta.data
    y = xhat * gd + bd
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxh = g * gd
            gx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True)
                         - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return _wrap(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm_forward(self.gamma, self.beta, x, self.eps)


# --------------------------------------------------------------- embedding


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    bad = ids[(ids < 0) | (ids >= V)]
    if bad.size:
        raise IndexError(f"token id {int(bad[0])} outside vocabulary of size {V}")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _wrap(table.data[ids], (table,), bw)


class Embedding(Module):
    def __init__(self, V: int, d: int, rng: np.random.Generator):
        self.weight = param(rng.normal(0.0, d ** -0.5, (V, d)))

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self.weight, ids)


# ------------------------------------------------------------------ conv1d


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def out_len(self, T: int) -> int:
        return (T + 2 * self.padding - self.kernel) // self.stride + 1


def conv1d_forward(spec: ConvSpec, weight: Tensor, bias: Tensor | None, x: Tensor) -> Tensor:
    """Time convolution over x[B, T, C_in] with weight[C_out, C_in/groups, K]."""
    B, T, Cin = x.shape
    Cout, cpg, K = weight.shape
    G, s, P = spec.groups, spec.stride, spec.padding
    if K != spec.kernel or Cin % G or Cout % G or cpg != Cin // G:
        raise DimensionError(f"conv weight {weight.shape} inconsistent with {spec} and C_in={Cin}")
    if T + 2 * P < K:
        raise DimensionError(f"input too short for conv: T={T}, kernel={K}, padding={P}")
    Tout = spec.out_len(T)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (P, P), (0, 0))) if P else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)[:, ::s][:, :Tout]  # B,T',Cin,K
    add_macs(B * Tout * Cout * cpg * K)
    if G == 1:
        cols = np.ascontiguousarray(win).reshape(B * Tout, Cin * K)
        wmat = wd.reshape(Cout, Cin * K)
        y = (cols @ wmat.T).reshape(B, Tout, Cout)
    else:
        wg = win.reshape(B, Tout, G, cpg, K)
        ww = wd.reshape(G, Cout // G, cpg, K)
        y = np.einsum("btgik,goik->btgo", wg, ww, optimize=True).reshape(B, Tout, Cout)
    if bias is not None:
        y = y + bias.data

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        if G == 1:
            g2 = g.reshape(B * Tout, Cout)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(Cout, Cin, K)
            if x.requires_grad:
                dwin = (g2 @ wmat).reshape(B, Tout, Cin, K)
        else:
            gg = g.reshape(B, Tout, G, Cout // G)
            if weight.requires_grad:
                gw = np.einsum("btgo,btgik->goik", gg, wg, optimize=True).reshape(Cout, cpg, K)
            if x.requires_grad:
                dwin = np.einsum("btgo,goik->btgik", gg, ww, optimize=True).reshape(B, Tout, Cin, K)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for k in range(K):
                gxp[:, k:k + s * (Tout - 1) + 1:s, :] += dwin[..., k]
            gx = gxp[:, P:P + T, :] if P else gxp
        return gx, gw, gb

    return _wrap(y.astype(xd.dtype, copy=False), (x, weight, bias), bw)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, spec: ConvSpec, rng: np.random.Generator, bias: bool = True):
        if c_in % spec.groups or c_out % spec.groups:
            raise ContractError(f"groups={spec.groups} must divide channels {c_in}->{c_out}")
        fan_in = c_in // spec.groups * spec.kernel
        bound = np.sqrt(1.0 / fan_in) * np.sqrt(3.0)
        self.weight = param(rng.uniform(-bound, bound, (c_out, c_in // spec.groups, spec.kernel)))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.spec = spec

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_forward(self.spec, self.weight, self.bias, x)


# ------------------------------------------------------- positional encoding


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    """Interleaved table: even columns sin, odd columns cos."""
    if d % 2:
        raise ContractError(f"sinusoidal encoding needs an even width, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def pe_table(T: int, d: int) -> np.ndarray:
    """Cached float64 table of at least T rows."""
    key = (max(T, 1024), d)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = sinusoidal_pe(*key)
    return _PE_CACHE[key]


# ---------------------------------------------------------------- dropout


def dropout_forward(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) * x.dtype.type(1.0 / (1.0 - rate))
    return mul(x, keep)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0 <= rate < 1:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout_forward(x, self.rate, self.training, self.rng)


# ---------------------------------------------------------------- FFN


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, rng: np.random.Generator, dropout: Dropout,
                 activation: str = "relu"):
        self.fc1 = Linear(d, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d, rng)
        self.drop = dropout
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = relu(h) if self.activation == "relu" else silu(h)
        return self.drop(self.fc2(self.drop(h)))
