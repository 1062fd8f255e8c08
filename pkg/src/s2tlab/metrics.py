"""Word error rate, corpus BLEU and token accuracy over token-id sequences."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class EvalResult:
    metric: str
    value: float
    n_examples: int
    per_example: list = field(default_factory=list)


def edit_distance(ref, hyp) -> int:
    """Unit-cost Levenshtein distance, one DP row at a time."""
    ref, hyp = list(ref), list(hyp)
    prev = np.arange(len(hyp) + 1)
    h = np.array(hyp)
    for i, r in enumerate(ref, start=1):
        sub = prev[:-1] + (h != r) if len(hyp) else prev[:0]
        cur = np.empty_like(prev)
        cur[0] = i
        # deletions and substitutions are vectorized; insertions need the running min
        best = np.minimum(prev[1:] + 1, sub)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(best[j - 1], cur[j - 1] + 1)
        prev = cur
    return int(prev[-1])


def wer(refs, hyps) -> float:
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs:
        raise ContractError("empty corpus")
    errs = total = 0
    for r, h in zip(refs, hyps):
        if len(r) == 0:
            raise ContractError("empty reference sequence")
        errs += edit_distance(r, h)
        total += len(r)
    return errs / total


def _ngrams(seq, n) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def bleu(refs, hyps, max_n: int = 4) -> float:
    """Corpus BLEU (0..100) with brevity penalty.

    A zero clipped count for order n becomes 1 / (2 * hyp n-gram count);
    when the hypotheses have no n-grams of that order at all the floor is
    1/2.  Without a single matching unigram the score is 0.
    """
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    hyp_len = sum(len(h) for h in hyps)
    if not hyps or hyp_len == 0:
        return 0.0
    ref_len = sum(len(r) for r in refs)
    match = [0] * max_n
    total = [0] * max_n
    for r, h in zip(refs, hyps):
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += sum(hc.values())
    if match[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(match, total):
        p = m / t if m else 1.0 / (2 * max(t, 1))
        log_p += math.log(p)
    bp = min(1.0, math.exp(1 - ref_len / hyp_len))
    if all(m == t for m, t in zip(match, total)) and ref_len == hyp_len:
        return 100.0
    return 100.0 * bp * math.exp(log_p / max_n)


def lcs_length(a, b) -> int:
    """Longest common subsequence length (tokens matched by the best monotone alignment)."""
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def token_accuracy(refs, hyps) -> float:
    """Aligned matches over the longer of each (ref, hyp) pair, pooled.

    Matches come from the best monotone alignment, so one inserted or
    dropped token costs one position instead of shifting the rest.
    """
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    hit = tot = 0
    for r, h in zip(refs, hyps):
        hit += lcs_length(r, h)
        tot += max(len(r), len(h))
    return hit / tot if tot else 1.0


def evaluate(metric: str, refs, hyps) -> EvalResult:
    if metric == "wer":
        per = [edit_distance(r, h) / len(r) for r, h in zip(refs, hyps)]
        return EvalResult("wer", wer(refs, hyps), len(refs), per)
    if metric == "bleu":
        per = [bleu([r], [h]) for r, h in zip(refs, hyps)]
        return EvalResult("bleu", bleu(refs, hyps), len(refs), per)
    if metric == "acc":
        per = [token_accuracy([r], [h]) for r, h in zip(refs, hyps)]
        return EvalResult("acc", token_accuracy(refs, hyps), len(refs), per)
    raise ContractError(f"unknown metric {metric!r}")
