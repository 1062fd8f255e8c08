"""Scaled dot-product attention, multi-head attention and mask builders."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .layers import Linear, Module
from .tensor import (ContractError, DimensionError, Tensor, concat, matmul, reshape, softmax,
                     swapaxes, take_rows, transpose)

KINDS = ("none", "causal", "audio_relaxed", "padding", "combined")


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean admissibility pattern; ``m`` gives the additive 0/-inf view.

    ``allowed`` broadcasts against ``[..., Tq, Tk]`` score tensors.
    """

    allowed: np.ndarray
    speech_prefix_len: int = 0
    kind: str = "none"

    @property
    def m(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf)

    @property
    def shape(self) -> tuple:
        return self.allowed.shape

    def combine(self, other: "AttentionMask") -> "AttentionMask":
        # logical and == elementwise min of the additive forms
        return AttentionMask(self.allowed & other.allowed,
                             max(self.speech_prefix_len, other.speech_prefix_len), "combined")

    def __eq__(self, other) -> bool:
        return (isinstance(other, AttentionMask) and self.allowed.shape == other.allowed.shape
                and bool(np.array_equal(self.allowed, other.allowed)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@lru_cache(maxsize=256)
def _causal(T: int) -> np.ndarray:
    return _frozen(np.tril(np.ones((T, T), dtype=bool)))


@lru_cache(maxsize=256)
def _relaxed(T: int, N: int) -> np.ndarray:
    a = np.tril(np.ones((T, T), dtype=bool))
    a[:, :N] = True
    return _frozen(a)


def build_causal_mask(T: int) -> AttentionMask:
    if T < 1:
        raise ContractError(f"mask length must be >= 1, got {T}")
    return AttentionMask(_causal(T), 0, "causal")


def build_audio_relaxed_mask(total: int, N: int) -> AttentionMask:
    """Text positions stay causal; the first N (speech) columns are visible to all."""
    if total < 1:
        raise ContractError(f"mask length must be >= 1, got {total}")
    if not 0 <= N <= total:
        raise ContractError(f"speech prefix N={N} outside [0, {total}]")
    return AttentionMask(_relaxed(total, N), N, "audio_relaxed")


def build_padding_mask(lengths, Tk: int) -> AttentionMask:
    """allowed[b, 0, j] = j < lengths[b]; shape [B, 1, Tk]."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if (lengths > Tk).any() or (lengths < 0).any():
        raise ContractError(f"lengths {lengths.tolist()} exceed key extent {Tk}")
    allowed = np.arange(Tk)[None, :] < lengths[:, None]
    return AttentionMask(allowed[:, None, :], 0, "padding")


def _allowed(mask) -> np.ndarray | None:
    if mask is None:
        return None
    return mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + M) v over the last two axes."""
    dk = q.shape[-1]
    if k.shape[-1] != dk or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"sdpa shape mismatch: q={q.shape} k={k.shape} v={v.shape}")
    Tq, Tk = q.shape[-2], k.shape[-2]
    allowed = _allowed(mask)
    if allowed is not None:
        ms = allowed.shape
        if len(ms) < 2 or ms[-1] not in (1, Tk) or ms[-2] not in (1, Tq):
            raise DimensionError(f"mask shape {ms} does not fit scores [{Tq}, {Tk}]")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    if allowed is not None:
        allowed = np.broadcast_to(allowed, scores.shape)
    w = softmax(scores, allowed)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# ----------------------------------------------------------------- MHA


class MhaParams(Module):
    """Multi-head attention; h must divide d_model."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dropout=None):
        if d_model % heads:
            raise ContractError(f"heads={heads} must divide d_model={d_model}")
        self.heads = heads
        self.d_k = d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.drop = dropout

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return transpose(reshape(x, (B, T, self.heads, self.d_k)), (0, 2, 1, 3))

    def project_q(self, x: Tensor) -> Tensor:
        return self._split(self.q(x))

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(x)), self._split(self.v(x))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray | None) -> Tensor:
        """q/k/v already split into heads; ``allowed`` is [B?, Tq, Tk] (no head axis)."""
        if allowed is not None and allowed.ndim == 3:
            allowed = allowed[:, None]
        ctx = sdpa(q, k, v, allowed)
        B, _, Tq, _ = ctx.shape
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Tq, self.heads * self.d_k))
        out = self.o(merged)
        return self.drop(out) if self.drop is not None else out

    def __call__(self, xq: Tensor, xkv: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        k, v = self.project_kv(xkv)
        return self.attend(self.project_q(xq), k, v, allowed)


def mha_forward(p: MhaParams, query_seq: Tensor, key_value_seq: Tensor, mask=None) -> Tensor:
    """Self-attention when ``query_seq is key_value_seq``, cross-attention otherwise.

    Accepts unbatched [T, d] inputs as well as [B, T, d].
    """
    d = p.heads * p.d_k
    if query_seq.shape[-1] != d or key_value_seq.shape[-1] != d:
        raise DimensionError(f"widths {query_seq.shape[-1]}/{key_value_seq.shape[-1]} != d_model {d}")
    unbatched = query_seq.ndim == 2
    if unbatched:
        query_seq = reshape(query_seq, (1,) + query_seq.shape)
        key_value_seq = reshape(key_value_seq, (1,) + key_value_seq.shape)
    allowed = _allowed(mask)
    if allowed is not None and allowed.ndim == 2:
        allowed = allowed[None]
    out = p(query_seq, key_value_seq, allowed)
    return reshape(out, out.shape[1:]) if unbatched else out


# ------------------------------------------------------------- KV cache


class KVCache:
    """Per-layer self-attention cache for one decode session.

    ``key_allowed[r, j]`` marks which cached keys row r may read (padding in a
    speech prefix is False).
    """

    def __init__(self):
        self.k: Tensor | None = None
        self.v: Tensor | None = None
        self.key_allowed: np.ndarray | None = None

    def append(self, k: Tensor, v: Tensor, allowed: np.ndarray) -> None:
        if self.k is None:
            self.k, self.v, self.key_allowed = k, v, allowed
        else:
            self.k = concat([self.k, k], axis=2)
            self.v = concat([self.v, v], axis=2)
            self.key_allowed = np.concatenate([self.key_allowed, allowed], axis=1)

    def reorder(self, idx: np.ndarray) -> None:
        if self.k is not None:
            self.k = take_rows(self.k, idx)
            self.v = take_rows(self.v, idx)
            self.key_allowed = self.key_allowed[idx]

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]
