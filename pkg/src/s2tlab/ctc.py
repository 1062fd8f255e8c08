"""CTC loss (log-space forward/backward), greedy collapse and CTC compression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, _wrap, reshape


class CtcInfeasibleError(ContractError):
    pass


@dataclass
class CtcOutput:
    log_probs: Tensor
    loss: Tensor
    argmax_path: np.ndarray


def min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _lse(*xs):
    m = np.maximum.reduce(xs)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        return np.where(np.isneginf(m), -np.inf, safe + np.log(sum(np.exp(x - safe) for x in xs)))


def _shift(x: np.ndarray, k: int, fill) -> np.ndarray:
    """Shift along axis 1: k > 0 moves entries right (out[s] = x[s-k]), k < 0 left."""
    out = np.full_like(x, fill)
    S = x.shape[1]
    if abs(k) >= S:
        return out
    if k > 0:
        out[:, k:] = x[:, :S - k]
    else:
        out[:, :S + k] = x[:, -k:]
    return out


def _forward_backward(lp: np.ndarray, lengths: np.ndarray, targets: list, blank: int):
    """Returns (log P per example, d(-log P)/d lp) for lp[B, T, V] in float64."""
    B, T, V = lp.shape
    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    S_b = np.zeros(B, dtype=np.int64)
    for b, tg in enumerate(targets):
        ext[b, 1:2 * len(tg):2] = tg
        S_b[b] = 2 * len(tg) + 1
    valid_s = np.arange(S)[None, :] < S_b[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    e = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    e = np.where(valid_s[:, None, :], e, -np.inf)
    ninf = np.full((B, S), -np.inf)

    alpha = np.full((B, T, S), -np.inf)
    a = ninf.copy()
    a[:, 0] = e[:, 0, 0]
    if S > 1:
        a[:, 1] = np.where(S_b > 1, e[:, 0, 1], -np.inf)
    alpha[:, 0] = a
    for t in range(1, T):
        prev = alpha[:, t - 1]
        s1 = _shift(prev, 1, -np.inf)
        s2 = np.where(skip, _shift(prev, 2, -np.inf), -np.inf)
        alpha[:, t] = np.where((t < lengths)[:, None], _lse(prev, s1, s2) + e[:, t], -np.inf)

    beta = np.full((B, T, S), -np.inf)
    rows = np.arange(B)
    for t in range(T - 1, -1, -1):
        start = t == lengths - 1
        nxt = beta[:, t + 1] if t + 1 < T else ninf
        n1 = _shift(nxt, -1, -np.inf)
        n2 = np.where(_shift(skip, -2, False), _shift(nxt, -2, -np.inf), -np.inf)
        rec = _lse(nxt, n1, n2) + e[:, t]
        init = ninf.copy()
        init[rows, S_b - 1] = e[rows, t, S_b - 1]
        init[rows, np.maximum(S_b - 2, 0)] = np.where(S_b > 1, e[rows, t, np.maximum(S_b - 2, 0)],
                                                      init[rows, np.maximum(S_b - 2, 0)])
        inside = (t < lengths - 1)[:, None]
        beta[:, t] = np.where(start[:, None], init, np.where(inside, rec, -np.inf))

    last = alpha[rows, lengths - 1]
    logp = _lse(last[rows, S_b - 1], np.where(S_b > 1, last[rows, np.maximum(S_b - 2, 0)], -np.inf))
    e_safe = np.where(np.isneginf(e), 0.0, e)
    gam = alpha + beta - e_safe - logp[:, None, None]
    fin = np.isfinite(gam)
    occ = np.where(fin, np.exp(np.where(fin, gam, 0.0)), 0.0)
    grad = np.zeros((B, T, V))
    for b in range(B):
        np.add.at(grad[b].T, ext[b, :S_b[b]], occ[b, :, :S_b[b]].T)
    return logp, -grad


def _check(targets, lengths, blank: int, T: int) -> np.ndarray:
    ok = np.ones(len(targets), dtype=bool)
    for b, tg in enumerate(targets):
        if blank in tg:
            raise ContractError(f"blank id {blank} appears in CTC target {list(tg)}")
        if lengths[b] > T or lengths[b] < 1:
            raise ContractError(f"length {lengths[b]} outside [1, {T}]")
        ok[b] = min_frames(tg) <= lengths[b]
    return ok


def ctc_loss_batch(log_probs: Tensor, lengths, targets: list, blank: int,
                   skip_infeasible: bool = False) -> tuple[Tensor, np.ndarray]:
    """Per-example -log P(target | log_probs[B, T, V]) as a Tensor[B].

    Infeasible examples raise :class:`CtcInfeasibleError` unless
    ``skip_infeasible``; then they contribute 0 and are flagged False in the
    returned mask.
    """
    B, T, _ = log_probs.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = [list(map(int, t)) for t in targets]
    ok = _check(targets, lengths, blank, T)
    if not ok.all() and not skip_infeasible:
        bad = int(np.flatnonzero(~ok)[0])
        raise CtcInfeasibleError(
            f"target of length {len(targets[bad])} needs {min_frames(targets[bad])} frames, "
            f"only {lengths[bad]} available")
    lp = log_probs.data.astype(np.float64)
    use = np.flatnonzero(ok)
    loss = np.zeros(B)
    grad = np.zeros(lp.shape)
    if use.size:
        logp, g = _forward_backward(lp[use], lengths[use], [targets[i] for i in use], blank)
        loss[use] = -logp
        grad[use] = g
    dtype = log_probs.dtype

    def bw(gout):
        return ((grad * gout[:, None, None]).astype(dtype),)

    return _wrap(loss.astype(dtype), (log_probs,), bw), ok


def ctc_loss(log_probs: Tensor, target, blank: int) -> Tensor:
    """-log P(target | log_probs[T', V]) by the forward algorithm."""
    T = log_probs.shape[0]
    lp = reshape(log_probs, (1,) + log_probs.shape)
    loss, _ = ctc_loss_batch(lp, [T], [target], blank)
    return reshape(loss, ())


def collapse(path, blank: int) -> list[int]:
    out, prev = [], None
    for p in map(int, path):
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def ctc_greedy_decode(log_probs, blank: int) -> list[int]:
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse(lp.argmax(axis=-1), blank)


def runs(path) -> list[tuple[int, int]]:
    """[start, end) spans of consecutive equal predictions."""
    path = np.asarray(path)
    if path.size == 0:
        return []
    cuts = np.flatnonzero(path[1:] != path[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [path.size]])
    return list(zip(starts.tolist(), ends.tolist()))


def _keep_spans(path, blank: int, drop_blank: bool) -> list[tuple[int, int]]:
    spans = runs(path)
    if drop_blank:
        kept = [(s, e) for s, e in spans if int(path[s]) != blank]
        spans = kept or spans[:1]
    return spans


def ctc_compress(states: Tensor, argmax_path, blank: int = -1,
                 drop_blank: bool = False) -> tuple[Tensor, list[tuple[int, int]]]:
    """Average runs of frames sharing the same CTC prediction.

    Sums each run in input order and divides by its size.  Blank runs are
    averaged like any other unless ``drop_blank``.
    """
    path = np.asarray(argmax_path)
    if path.shape[0] != states.shape[0]:
        raise ContractError(f"path length {path.shape[0]} != {states.shape[0]} frames")
    spans = _keep_spans(path, blank, drop_blank)
    out, _ = compress_batch(_unsqueeze(states), [states.shape[0]], [path], blank, drop_blank)
    return reshape(out, out.shape[1:]), spans


def _unsqueeze(x: Tensor) -> Tensor:
    return reshape(x, (1,) + x.shape)


def compress_batch(states: Tensor, lengths, paths, blank: int,
                   drop_blank: bool = False) -> tuple[Tensor, np.ndarray]:
    """Batched compression of states[B, T, d]; returns right-padded output and new lengths."""
    B, T, d = states.shape
    x = states.data
    all_spans = [_keep_spans(np.asarray(p)[:n], blank, drop_blank) for p, n in zip(paths, lengths)]
    new_len = np.array([len(s) for s in all_spans], dtype=np.int64)
    Tn = int(new_len.max())
    y = np.zeros((B, Tn, d), dtype=x.dtype)
    for b, spans in enumerate(all_spans):
        starts = np.array([s for s, _ in spans])
        sizes = np.array([e - s for s, e in spans])
        acc = x[b, starts].copy()
        for k in range(1, int(sizes.max())):
            more = sizes > k
            acc[more] += x[b, starts[more] + k]
        y[b, :len(spans)] = acc / sizes[:, None].astype(x.dtype)

    def bw(g):
        gx = np.zeros_like(x)
        for b, spans in enumerate(all_spans):
            for r, (s, e) in enumerate(spans):
                gx[b, s:e] = g[b, r] / (e - s)
        return (gx,)

    return _wrap(y, (states,), bw), new_len
