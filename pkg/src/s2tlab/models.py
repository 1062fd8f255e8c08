"""Cross-attention encoder-decoder, decoder-only and decoder-prepend models."""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ctc as ctc_mod
from .attention import (KVCache, MhaParams, build_audio_relaxed_mask, build_causal_mask,
                        build_padding_mask)
from .layers import (Conv1d, ConvSpec, Dropout, Embedding, FeedForward, LayerNorm, Linear, Module,
                     pe_table)
from .tensor import (ContractError, DimensionError, Tensor, concat, glu, matmul, mul, no_grad, relu, silu,
                     swapaxes, take_rows)

ARCHS = ("cross_attention", "decoder_only", "decoder_prepend")
ENCODERS = ("transformer", "conformer", "none")
MASKINGS = ("audio_causal", "audio_relaxed")
CTC_MODES = ("off", "aux", "aux_with_compression")

PAD, BOS, EOS, BLANK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    arch: str = "cross_attention"
    encoder_kind: str = "transformer"
    enc_layers: int = 4
    dec_layers: int = 2
    d_model: int = 128
    d_ffn: int = 512
    heads: int = 4
    vocab_size: int = 40
    n_features: int = 16
    masking: str = "audio_causal"
    ctc: str = "off"
    ctc_layer: int = 0  # 0 selects round(2/3 * layers); decoder_only counts decoder layers
    compress_drop_blank: bool = False
    dropout: float = 0.1
    conv_kernel: int = 7
    tie_embeddings: bool = False
    text_positions: str = "restart"  # DFP text position indices: "restart" at 0 or "continue" after the prefix

    @property
    def ctc_at(self) -> int:
        return self.ctc_layer if self.ctc_layer else max(1, round(2 * self.ctc_stack / 3))

    @property
    def ctc_stack(self) -> int:
        """Depth of the stack the CTC head reads from (the speech prefix of the decoder for decoder_only)."""
        return self.dec_layers if self.arch == "decoder_only" else self.enc_layers

    def errors(self) -> list[str]:
        e = []
        if self.arch not in ARCHS:
            e.append(f"model.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.encoder_kind not in ENCODERS:
            e.append(f"model.encoder_kind must be one of {ENCODERS}, got {self.encoder_kind!r}")
        if self.masking not in MASKINGS:
            e.append(f"model.masking must be one of {MASKINGS}, got {self.masking!r}")
        if self.ctc not in CTC_MODES:
            e.append(f"model.ctc must be one of {CTC_MODES}, got {self.ctc!r}")
        if self.arch == "decoder_only":
            if self.encoder_kind != "none" or self.enc_layers != 0:
                e.append("decoder_only requires encoder_kind=none and enc_layers=0")
            if self.ctc == "aux_with_compression":
                e.append("decoder_only supports ctc=aux only (no encoder output to compress)")
        elif self.encoder_kind == "none" and self.enc_layers:
            e.append(f"{self.arch} with enc_layers>0 needs an encoder kind")
        if self.ctc != "off" and not 1 <= self.ctc_at <= self.ctc_stack:
            e.append(f"ctc_layer {self.ctc_at} outside [1, {self.ctc_stack}]")
        if self.d_model % self.heads:
            e.append(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.d_model % 2:
            e.append("d_model must be even (sinusoidal encoding)")
        if self.text_positions not in ("continue", "restart"):
            e.append(f"model.text_positions must be 'continue' or 'restart', got {self.text_positions!r}")
        if self.conv_kernel % 2 == 0:
            e.append("conv_kernel must be odd")
        if self.dec_layers < 1:
            e.append("dec_layers must be >= 1")
        if not 0 <= self.dropout < 1:
            e.append("dropout must be in [0, 1)")
        return e

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ContractError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_config(arch: str, **kw) -> ModelConfig:
    """Desk-scale defaults: 4+2 layers for encoder models, 6 layers for decoder-only, auxiliary CTC for all."""
    base = dict(arch=arch, ctc="aux")
    if arch == "decoder_only":
        base.update(encoder_kind="none", enc_layers=0, dec_layers=6, masking="audio_relaxed")
    base.update(kw)
    return ModelConfig(**base)


@dataclass
class EncoderOutput:
    states: Tensor
    lengths: np.ndarray
    ctc_logits: Tensor | None = None
    ctc_lengths: np.ndarray | None = None


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


def _zero_pad(x: Tensor, lengths: np.ndarray) -> Tensor:
    keep = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(x.dtype)
    return mul(x, keep[:, :, None])


def downsampled_lengths(lengths) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    return -(-(-(-lengths // 2)) // 2)


# ------------------------------------------------------------------ blocks


class Frontend(Module):
    """Two stride-2 convolutions (kernel 5, ReLU between) and sinusoidal positions."""

    def __init__(self, n_features: int, d: int, rng, drop: Dropout):
        spec = ConvSpec(kernel=5, stride=2, padding=2)
        self.conv1 = Conv1d(n_features, d, spec, rng)
        self.conv2 = Conv1d(d, d, spec, rng)
        self.drop = drop

    def __call__(self, features: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        if features.shape[1] == 0:
            raise ContractError("empty input")
        lengths = np.asarray(lengths, dtype=np.int64)
        l1 = -(-lengths // 2)
        h = _zero_pad(relu(self.conv1(_zero_pad(features, lengths))), l1)
        h = self.conv2(h)
        l2 = -(-l1 // 2)
        T = h.shape[1]
        h = h + pe_table(T, h.shape[2])[:T].astype(h.dtype)
        return self.drop(h), l2


class SelfAttnBlock(Module):
    """Pre-norm Transformer layer: used as encoder layer and as DFP decoder layer."""

    def __init__(self, d, d_ffn, heads, rng, drop: Dropout):
        self.norm1 = LayerNorm(d)
        self.attn = MhaParams(d, heads, rng, drop)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng, drop)

    def __call__(self, x: Tensor, allowed, lengths=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, allowed)
        return x + self.ffn(self.norm2(x))

    def step(self, x: Tensor, cache: KVCache, static_allowed_new: np.ndarray | None = None) -> Tensor:
        """Process new positions x[n, t, d] appended after everything in ``cache``.

        The new positions attend to all cached keys plus each other causally
        (or with ``static_allowed_new`` [t, t] when given).
        """
        h = self.norm1(x)
        q = self.attn.project_q(h)
        k, v = self.attn.project_kv(h)
        n, t = x.shape[0], x.shape[1]
        prev = cache.length
        cache.append(k, v, np.ones((n, t), dtype=bool))
        inner = build_causal_mask(t).allowed if static_allowed_new is None else static_allowed_new
        allowed = np.concatenate([np.broadcast_to(cache.key_allowed[:, None, :prev], (n, t, prev)),
                                  np.broadcast_to(inner[None], (n, t, t))], axis=2)
        x = x + self.attn.attend(q, cache.k, cache.v, allowed)
        return x + self.ffn(self.norm2(x))


class ConvModule(Module):
    def __init__(self, d, kernel, rng, drop: Dropout):
        self.norm = LayerNorm(d)
        self.pw1 = Conv1d(d, 2 * d, ConvSpec(1), rng)
        self.dw = Conv1d(d, d, ConvSpec(kernel, 1, (kernel - 1) // 2, groups=d), rng)
        self.dw_norm = LayerNorm(d)
        self.pw2 = Conv1d(d, d, ConvSpec(1), rng)
        self.drop = drop

    def __call__(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        h = glu(self.pw1(self.norm(x)))
        h = self.dw(_zero_pad(h, lengths))
        h = silu(self.dw_norm(h))
        return self.drop(self.pw2(h))


class ConformerBlock(Module):
    def __init__(self, d, d_ffn, heads, kernel, rng, drop: Dropout):
        self.ffn1_norm = LayerNorm(d)
        self.ffn1 = FeedForward(d, d_ffn, rng, drop, activation="silu")
        self.attn_norm = LayerNorm(d)
        self.attn = MhaParams(d, heads, rng, drop)
        self.conv = ConvModule(d, kernel, rng, drop)
        self.ffn2_norm = LayerNorm(d)
        self.ffn2 = FeedForward(d, d_ffn, rng, drop, activation="silu")
        self.out_norm = LayerNorm(d)

    def __call__(self, x: Tensor, allowed, lengths) -> Tensor:
        x = x + 0.5 * self.ffn1(self.ffn1_norm(x))
        h = self.attn_norm(x)
        x = x + self.attn(h, h, allowed)
        x = x + self.conv(x, lengths)
        x = x + 0.5 * self.ffn2(self.ffn2_norm(x))
        return self.out_norm(x)


class CrossAttnBlock(Module):
    def __init__(self, d, d_ffn, heads, rng, drop: Dropout):
        self.norm1 = LayerNorm(d)
        self.self_attn = MhaParams(d, heads, rng, drop)
        self.norm_x = LayerNorm(d)
        self.cross_attn = MhaParams(d, heads, rng, drop)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng, drop)

    def __call__(self, y: Tensor, enc: Tensor, self_allowed, enc_allowed) -> Tensor:
        h = self.norm1(y)
        y = y + self.self_attn(h, h, self_allowed)
        y = y + self.cross_attn(self.norm_x(y), enc, enc_allowed)
        return y + self.ffn(self.norm2(y))

    def step(self, y: Tensor, cache: KVCache, cross_kv: tuple[Tensor, Tensor],
             enc_allowed: np.ndarray) -> Tensor:
        h = self.norm1(y)
        q = self.self_attn.project_q(h)
        k, v = self.self_attn.project_kv(h)
        n = y.shape[0]
        cache.append(k, v, np.ones((n, 1), dtype=bool))
        y = y + self.self_attn.attend(q, cache.k, cache.v, None)
        qx = self.cross_attn.project_q(self.norm_x(y))
        y = y + self.cross_attn.attend(qx, cross_kv[0], cross_kv[1], enc_allowed[:, None, :])
        return y + self.ffn(self.norm2(y))


# ------------------------------------------------------------------ model


class S2TModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        init = _rng(seed, "init")
        self.dropout_rng = _rng(seed, "dropout")
        drop = Dropout(cfg.dropout, self.dropout_rng)
        d = cfg.d_model
        self.frontend = Frontend(cfg.n_features, d, init, drop)
        if cfg.encoder_kind == "conformer":
            self.enc_layers = [ConformerBlock(d, cfg.d_ffn, cfg.heads, cfg.conv_kernel, init, drop)
                               for _ in range(cfg.enc_layers)]
        else:
            self.enc_layers = [SelfAttnBlock(d, cfg.d_ffn, cfg.heads, init, drop)
                               for _ in range(cfg.enc_layers)]
        self.speech_norm = LayerNorm(d)
        # own stream, so adding a CTC head leaves every other initial weight unchanged
        self.ctc_head = Linear(d, cfg.vocab_size, _rng(seed, "init.ctc")) if cfg.ctc != "off" else None
        self.embed = Embedding(cfg.vocab_size, d, init)
        block = CrossAttnBlock if cfg.arch == "cross_attention" else SelfAttnBlock
        self.dec_layers = [block(d, cfg.d_ffn, cfg.heads, init, drop) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.out_proj = None if cfg.tie_embeddings else Linear(d, cfg.vocab_size, init, bias=False)
        self.drop = drop

    # -- speech side
    def speech_states(self, features: Tensor, lengths) -> EncoderOutput:
        """Front-end, encoder stack (possibly empty) and final speech norm."""
        cfg = self.cfg
        x, lens = self.frontend(features, lengths)
        ctc_logits = ctc_lens = None
        for i, layer in enumerate(self.enc_layers, start=1):
            x = layer(x, build_padding_mask(lens, x.shape[1]).allowed, lens)
            if self.ctc_head is not None and i == cfg.ctc_at:
                ctc_logits, ctc_lens = self.ctc_head(x), lens
                if cfg.ctc == "aux_with_compression":
                    path = ctc_logits.data.argmax(axis=-1)
                    x, lens = ctc_mod.compress_batch(x, lens, path, BLANK, cfg.compress_drop_blank)
        return EncoderOutput(self.speech_norm(x), lens, ctc_logits, ctc_lens)

    def encode(self, features: Tensor, lengths) -> EncoderOutput:
        if self.cfg.encoder_kind == "none":
            raise ContractError("encode() needs a speech encoder; decoder_only has none")
        return self.speech_states(features, lengths)

    # -- text side
    def _embed(self, tokens: np.ndarray, offsets: np.ndarray) -> Tensor:
        d = self.cfg.d_model
        e = self.embed(tokens) * float(np.sqrt(d))
        pos = offsets[:, None] + np.arange(tokens.shape[1])[None, :]
        pe = pe_table(int(pos.max()) + 1, d)[pos].astype(e.dtype)
        return self.drop(e + pe)

    def _text_offsets(self, speech_lens: np.ndarray) -> np.ndarray:
        """First position index of the text region of each DFP example."""
        if self.cfg.text_positions == "restart":
            return np.zeros(len(speech_lens), dtype=np.int64)
        return np.asarray(speech_lens, dtype=np.int64).copy()

    def _logits(self, h: Tensor) -> Tensor:
        h = self.dec_norm(h)
        if self.out_proj is not None:
            return self.out_proj(h)
        return matmul(h, swapaxes(self.embed.weight, 0, 1))

    def forward_cross_attention(self, enc: EncoderOutput, tokens: np.ndarray) -> Tensor:
        if self.cfg.arch != "cross_attention":
            raise ContractError("forward_cross_attention needs arch=cross_attention")
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ContractError("target tokens must be a non-empty [B, Tt] array")
        B, Tt = tokens.shape
        y = self._embed(tokens, np.zeros(B, dtype=np.int64))
        causal = build_causal_mask(Tt).allowed
        enc_allowed = build_padding_mask(enc.lengths, enc.states.shape[1]).allowed
        for layer in self.dec_layers:
            y = layer(y, enc.states, causal, enc_allowed)
        return self._logits(y)

    def dfp_mask(self, speech_lens: np.ndarray, N: int, Tt: int) -> np.ndarray:
        total = N + Tt
        if self.cfg.masking == "audio_relaxed":
            base = build_audio_relaxed_mask(total, N).allowed
        else:
            base = build_causal_mask(total).allowed
        keys = np.ones((len(speech_lens), total), dtype=bool)
        keys[:, :N] = np.arange(N)[None, :] < speech_lens[:, None]
        return base[None] & keys[:, None, :]

    def forward_dfp(self, speech: Tensor, speech_lens, tokens: np.ndarray,
                    return_hidden: bool = False):
        """Self-attention over speech || text; logits for the last Tt positions only."""
        if self.cfg.arch == "cross_attention":
            raise ContractError("forward_dfp needs a DFP architecture")
        tokens = np.asarray(tokens)
        speech_lens = np.asarray(speech_lens, dtype=np.int64)
        B, N, _ = speech.shape
        if tokens.ndim != 2 or tokens.shape[0] != B or tokens.shape[1] == 0:
            raise ContractError(f"tokens {tokens.shape} do not match speech batch {B}")
        if len(speech_lens) != B or (speech_lens > N).any():
            raise ContractError(f"speech lengths {speech_lens.tolist()} inconsistent with prefix {N}")
        h = self.dfp_hidden_states(speech, speech_lens, tokens)[-1]
        logits = self._logits(h[:, N:])
        return (logits, h) if return_hidden else logits

    def dfp_hidden_states(self, speech: Tensor, speech_lens, tokens: np.ndarray) -> list[Tensor]:
        """Input to the decoder stack followed by each layer's output, over speech || text."""
        tokens = np.asarray(tokens)
        speech_lens = np.asarray(speech_lens, dtype=np.int64)
        N = speech.shape[1]
        h = concat([speech, self._embed(tokens, self._text_offsets(speech_lens))], axis=1)
        allowed = self.dfp_mask(speech_lens, N, tokens.shape[1])
        out = [h]
        for layer in self.dec_layers:
            h = layer(h, allowed)
            out.append(h)
        return out

    def forward(self, features: Tensor, feat_lens, dec_in: np.ndarray) -> tuple[Tensor, EncoderOutput]:
        sp = self.speech_states(features, feat_lens)
        if self.cfg.arch == "cross_attention":
            return self.forward_cross_attention(sp, dec_in), sp
        if self.cfg.arch == "decoder_only" and self.ctc_head is not None:
            # speech positions never attend to text, so this layer's prefix is text-independent
            N = sp.states.shape[1]
            hs = self.dfp_hidden_states(sp.states, sp.lengths, dec_in)
            sp = EncoderOutput(sp.states, sp.lengths, self.ctc_head(hs[self.cfg.ctc_at][:, :N]), sp.lengths)
            return self._logits(hs[-1][:, N:]), sp
        return self.forward_dfp(sp.states, sp.lengths, dec_in), sp

    def session(self, features: np.ndarray, lengths, banned=(PAD, BOS, BLANK)) -> "DecodeSession":
        return DecodeSession(self, features, lengths, banned)


def build_model(cfg: ModelConfig, seed: int = 0) -> S2TModel:
    return S2TModel(cfg, seed)


# ------------------------------------------------------------ decoding


class DecodeSession:
    """Incremental decoding state over ``rows`` hypotheses.

    ``step(tokens)`` appends one token per row and returns next-token
    log-probabilities [rows, V]; ``reorder(idx)`` selects/duplicates rows.
    The speech side is computed once at construction.  Cross-attention keys
    and values are static and shared by all rows of a single-utterance
    session; a DFP prefix lives in each layer's self-attention cache and is
    copied with its row.
    """

    def __init__(self, model: S2TModel, features, lengths, banned=(PAD, BOS, BLANK)):
        self.model = model
        self.banned = np.array(sorted(set(banned)), dtype=np.int64)
        cfg = model.cfg
        feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
        with no_grad():
            sp = model.speech_states(feats, lengths)
            self.rows = sp.states.shape[0]
            self.caches = [KVCache() for _ in model.dec_layers]
            if cfg.arch == "cross_attention":
                self.offsets = np.zeros(self.rows, dtype=np.int64)
                self.cross_kv = [layer.cross_attn.project_kv(sp.states) for layer in model.dec_layers]
                self.enc_allowed = build_padding_mask(sp.lengths, sp.states.shape[1]).allowed[:, 0, :]
            else:
                self.offsets = model._text_offsets(sp.lengths)
                self._prefill(sp)
            del sp
        self.steps = 0

    def _prefill(self, sp: EncoderOutput) -> None:
        model = self.model
        N = sp.states.shape[1]
        keys = np.arange(N)[None, :] < sp.lengths[:, None]
        if model.cfg.masking == "audio_relaxed":
            inner = np.ones((N, N), dtype=bool)
        else:
            inner = build_causal_mask(N).allowed
        allowed = inner[None] & keys[:, None, :]
        h = sp.states
        for layer, cache in zip(model.dec_layers, self.caches):
            x = layer.norm1(h)
            k, v = layer.attn.project_kv(x)
            cache.append(k, v, keys)
            h = h + layer.attn.attend(layer.attn.project_q(x), k, v, allowed)
            h = h + layer.ffn(layer.norm2(h))

    def step(self, tokens) -> np.ndarray:
        model = self.model
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        if tokens.shape[0] != self.rows:
            raise ContractError(f"{tokens.shape[0]} tokens for {self.rows} rows")
        with no_grad():
            x = model._embed(tokens, self.offsets + self.steps)
            for i, (layer, cache) in enumerate(zip(model.dec_layers, self.caches)):
                if model.cfg.arch == "cross_attention":
                    x = layer.step(x, cache, self.cross_kv[i], self.enc_allowed)
                else:
                    x = layer.step(x, cache)
            logits = model._logits(x)
            z = logits.data[:, 0, :].astype(np.float64)
        z[:, self.banned] = -np.inf
        m = z.max(axis=1, keepdims=True)
        lp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        self.steps += 1
        return lp

    def reorder(self, idx) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        with no_grad():
            for c in self.caches:
                c.reorder(idx)
            if self.model.cfg.arch == "cross_attention" and self.cross_kv[0][0].shape[0] > 1:
                self.cross_kv = [(take_rows(k, idx), take_rows(v, idx)) for k, v in self.cross_kv]
                self.enc_allowed = self.enc_allowed[idx]
            elif self.model.cfg.arch == "cross_attention":
                self.enc_allowed = self.enc_allowed[:1]
        self.offsets = self.offsets[idx]
        self.rows = len(idx)


# ------------------------------------------------------------ param counts


def count_params(cfg: ModelConfig) -> int:
    """Closed-form trainable scalar count (no model is built)."""
    d, f, V, F, k = cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.n_features, cfg.conv_kernel

    def lin(a, b, bias=True):
        return a * b + (b if bias else 0)

    ln = 2 * d
    mha = 4 * lin(d, d)
    ffn = lin(d, f) + lin(f, d)
    self_block = 2 * ln + mha + ffn
    conformer = 6 * ln + 2 * ffn + mha + (lin(d, 2 * d) + (d * k + d) + lin(d, d))
    cross_block = self_block + ln + mha
    total = (F * d * 5 + d) + (d * d * 5 + d)
    total += cfg.enc_layers * (conformer if cfg.encoder_kind == "conformer" else self_block)
    total += ln
    if cfg.ctc != "off":
        total += lin(d, V)
    total += V * d
    total += cfg.dec_layers * (cross_block if cfg.arch == "cross_attention" else self_block)
    total += ln
    if not cfg.tie_embeddings:
        total += lin(d, V, bias=False)
    return total


def cross_attention_block_size(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return 2 * d + 4 * (d * d + d)


# ------------------------------------------------------------ checkpoints

MAGIC = b"S2TLAB1\0"


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(state))]
    total = 0
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
        total += a.size
    out.append(struct.pack("<Q", total))
    return b"".join(out)


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def bad(msg):
        return ContractError(f"{source}: {msg}")

    if buf[:8] != MAGIC:
        raise bad("not an S2TLAB1 checkpoint")
    pos = 8
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state, total = {}, 0
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise bad(f"truncated data for {name}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            total += size
        (check,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as e:
        raise bad(f"truncated ({e})") from None
    if check != total:
        raise bad(f"integrity count {check} != {total} scalars read")
    if pos != len(buf):
        raise bad(f"{len(buf) - pos} trailing bytes")
    return state


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))

