"""Greedy and beam-search decoding over any object with ``step``/``reorder``/``rows``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .tensor import ContractError

EOS = 2


class Session(Protocol):
    rows: int

    def step(self, tokens) -> np.ndarray: ...

    def reorder(self, idx) -> None: ...


@dataclass
class DecodeConfig:
    beam: int = 5
    no_repeat_ngram: int = 5
    max_len_ratio: float = 1.2
    max_len_offset: int = 10
    length_penalty: float = 1.0
    frames_per_token: int = 8  # raw frames per source token, for the length bound

    def errors(self) -> list[str]:
        e = []
        if self.beam < 1:
            e.append(f"decode.beam must be >= 1, got {self.beam}")
        if self.no_repeat_ngram < 0:
            e.append("decode.no_repeat_ngram must be >= 0")
        if self.max_len_ratio <= 0 or self.max_len_offset < 0:
            e.append("decode.max_len_ratio must be > 0 and decode.max_len_offset >= 0")
        if self.length_penalty < 0:
            e.append("decode.length_penalty must be >= 0")
        if self.frames_per_token < 1:
            e.append("decode.frames_per_token must be >= 1")
        return e

    def max_len(self, src_len: int) -> int:
        return int(self.max_len_ratio * src_len) + self.max_len_offset

    def max_len_for_frames(self, n_frames: int) -> int:
        return self.max_len(-(-int(n_frames) // self.frames_per_token))


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    normalized_score: float
    finished: bool

    @property
    def output(self) -> list[int]:
        """Generated ids without the closing EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def normalize(score: float, length: int, alpha: float) -> float:
    return score / (max(length, 1) ** alpha) if alpha else score


def blocked_tokens(tokens: Sequence[int], n: int) -> set[int]:
    """Tokens that would complete an n-gram already present in ``tokens``."""
    if n <= 0 or len(tokens) < n - 1:
        return set()
    if n == 1:
        return set(tokens)
    key = tuple(tokens[len(tokens) - n + 1:])
    out = set()
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i:i + n - 1]) == key:
            out.add(tokens[i + n - 1])
    return out


def _eos_cost(lp_row: np.ndarray) -> float:
    """Log-prob charged for a forced EOS; zero when the session gives EOS no mass."""
    v = float(lp_row[EOS])
    return v if np.isfinite(v) else 0.0


def _feed_prefix(session: Session, prefix) -> np.ndarray:
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim == 1:
        prefix = np.broadcast_to(prefix, (session.rows, prefix.shape[0]))
    if prefix.shape[1] == 0:
        raise ContractError("decoding prefix must hold at least BOS")
    lp = None
    for t in range(prefix.shape[1]):
        lp = session.step(prefix[:, t])
    return lp


def greedy_decode(session: Session, prefix, cfg: DecodeConfig, max_len: int | Sequence[int]) -> list[Hypothesis]:
    """Argmax decoding for every row of ``session``; ties go to the lowest id.

    ``max_len`` counts the closing EOS, as in :func:`beam_search`; a row that
    runs out of room comes back with ``finished=False``.
    """
    rows = session.rows
    lp = _feed_prefix(session, prefix)
    limits = np.broadcast_to(np.asarray(max_len), (rows,))
    toks = [[] for _ in range(rows)]
    score = np.zeros(rows)
    done = np.zeros(rows, dtype=bool)
    for t in range(int(limits.max())):
        nxt = np.full(rows, EOS, dtype=np.int64)
        for r in range(rows):
            if done[r]:
                continue
            row = lp[r].copy()
            if cfg.no_repeat_ngram:
                for b in blocked_tokens(toks[r], cfg.no_repeat_ngram):
                    row[b] = -np.inf
            forced = not np.isfinite(row).any()
            k = EOS if forced else int(np.argmax(row))
            toks[r].append(k)
            score[r] += _eos_cost(lp[r]) if forced else lp[r, k]
            nxt[r] = k
            if k == EOS:
                done[r] = True
            elif len(toks[r]) >= limits[r] - 1:
                done[r] = True  # no room left for EOS: truncated
        if done.all():
            break
        lp = session.step(nxt)
    alpha = cfg.length_penalty
    return [Hypothesis(tk, float(s), normalize(float(s), len(tk), alpha), bool(tk and tk[-1] == EOS))
            for tk, s in zip(toks, score)]


def beam_search(session: Session, prefix, cfg: DecodeConfig, max_len: int) -> Hypothesis:
    """Beam search over a single-row session.

    Finished hypotheses leave the beam for a pool; the result is the pool's
    best score / len^alpha (len counts EOS).  EOS is forced at ``max_len`` and
    whenever blocking leaves a hypothesis no other continuation.
    """
    if cfg.beam < 1:
        raise ContractError(f"beam must be >= 1, got {cfg.beam}")
    if session.rows != 1:
        raise ContractError("beam_search expects a single-row session")
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    K, alpha = cfg.beam, cfg.length_penalty
    lp = _feed_prefix(session, prefix)
    active: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    for t in range(1, max_len + 1):
        V = lp.shape[1]
        cand = np.array([s for _, s in active])[:, None] + lp
        for r, (tk, _) in enumerate(active):
            if cfg.no_repeat_ngram:
                for b in blocked_tokens(tk, cfg.no_repeat_ngram):
                    cand[r, b] = -np.inf
            if t == max_len:
                cand[r] = -np.inf
            if not np.isfinite(cand[r]).any():
                cand[r, EOS] = active[r][1] + _eos_cost(lp[r])
        flat = cand.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        rows_, toks_ = np.divmod(finite, V)
        order = finite[np.lexsort((toks_, rows_, -flat[finite]))]
        new_active, src = [], []
        for rank, f in enumerate(order):
            r, k = divmod(int(f), V)
            tk = active[r][0] + [k]
            s = float(flat[f])
            if k == EOS:
                if rank < K:
                    finished.append(Hypothesis(tk, s, normalize(s, len(tk), alpha), True))
            elif len(new_active) < K:
                new_active.append((tk, s))
                src.append(r)
            if len(new_active) >= K and rank + 1 >= K:
                break
        active = new_active
        if not active:
            break
        if len(finished) >= K:
            top = sorted(h.normalized_score for h in finished)[-K:]
            bound = max(normalize(s, max_len, alpha) if s < 0 else s for _, s in active)
            if bound <= top[0]:
                break
        session.reorder(np.array(src, dtype=np.int64))
        lp = session.step(np.array([tk[-1] for tk, _ in active], dtype=np.int64))
    if not finished:  # unreachable by construction; kept as a guard
        tk, s = max(active, key=lambda a: a[1])
        return Hypothesis(tk, s, normalize(s, len(tk), alpha), False)
    return max(finished, key=lambda h: (h.normalized_score, [-x for x in h.tokens]))


# ------------------------------------------------------------ toy sessions


class TableSession:
    """Session driven by a function ``history -> log-probs`` (for tests and oracles)."""

    def __init__(self, fn, rows: int = 1):
        self.fn = fn
        self.rows = rows
        self.hist: list[list[int]] = [[] for _ in range(rows)]

    def step(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens).reshape(-1)
        for h, t in zip(self.hist, tokens):
            h.append(int(t))
        return np.stack([np.asarray(self.fn(tuple(h)), dtype=np.float64) for h in self.hist])

    def reorder(self, idx) -> None:
        self.hist = [list(self.hist[i]) for i in np.asarray(idx)]
        self.rows = len(self.hist)


def enumerate_best(fn, prefix: Sequence[int], max_len: int, alpha: float, V: int) -> tuple[float, list[int]]:
    """Exhaustive optimum of normalized score over all EOS-terminated paths up to ``max_len``."""
    best = (-np.inf, [])

    def rec(hist, gen, score):
        nonlocal best
        lp = np.asarray(fn(tuple(hist)), dtype=np.float64)
        for k in range(V):
            if not np.isfinite(lp[k]):
                continue
            s = score + lp[k]
            g = gen + [k]
            if k == EOS:
                ns = normalize(s, len(g), alpha)
                if ns > best[0]:
                    best = (ns, g)
            elif len(g) < max_len:
                rec(hist + [k], g, s)

    rec(list(prefix), [], 0.0)
    return best
