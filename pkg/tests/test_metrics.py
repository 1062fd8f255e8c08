import itertools
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2tlab.metrics import bleu, edit_distance, evaluate, lcs_length, token_accuracy, wer
from s2tlab.tensor import ContractError

seqs = st.lists(st.integers(0, 4), max_size=8)


def dp_oracle(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        for j in range(len(b) + 1):
            if i == 0 or j == 0:
                d[i][j] = i + j
            else:
                d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_wer_examples():
    assert wer([[1, 2, 3]], [[1, 2, 3]]) == 0.0
    assert wer([[1, 2, 3]], [[1, 9, 3]]) == pytest.approx(1 / 3)
    assert wer([[1, 2, 3]], [[]]) == 1.0
    assert wer([[1, 2], [3, 4, 5, 6]], [[1], [3, 4, 5, 6]]) == pytest.approx(1 / 6)
    with pytest.raises(ContractError):
        wer([[]], [[1]])
    with pytest.raises(ContractError):
        wer([[1]], [])


@given(seqs, seqs)
def test_edit_distance_matches_dp_oracle(a, b):
    assert edit_distance(a, b) == dp_oracle(a, b) == edit_distance(b, a)


@given(seqs, seqs, seqs)
def test_edit_distance_triangle(a, b, c):
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert edit_distance(a, a) == 0


def test_bleu_examples():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8]]
    assert bleu(refs, refs) == 100.0
    # golden value: p1 = p2 = 1, p3 = p4 floored to 1/2, BP = exp(1 - 4/2)
    golden = 100 * math.exp(1 - 2) * math.exp((2 * math.log(0.5)) / 4)
    assert bleu([[1, 2, 3, 4]], [[1, 2]]) == pytest.approx(golden, abs=1e-12)
    assert golden == pytest.approx(26.01300475114445)
    assert bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]]) == 0.0
    assert bleu([[1, 2]], [[]]) == 0.0


@given(st.lists(st.tuples(st.lists(st.integers(0, 5), min_size=1, max_size=7),
                          st.lists(st.integers(0, 5), max_size=7)), min_size=1, max_size=6),
       st.integers(0, 1000))
def test_bleu_order_invariant_and_bounded(pairs, seed):
    refs, hyps = [p[0] for p in pairs], [p[1] for p in pairs]
    b = bleu(refs, hyps)
    random.Random(seed).shuffle(pairs)
    assert bleu([p[0] for p in pairs], [p[1] for p in pairs]) == pytest.approx(b, abs=1e-9)
    assert 0.0 <= b <= 100.0
    assert bleu(refs, refs) == 100.0


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    # a dropped token costs one position, later tokens still count
    assert token_accuracy([[1, 2, 3]], [[1, 3]]) == pytest.approx(2 / 3)
    assert token_accuracy([[1, 2, 3, 4, 5, 6]], [[2, 3, 4, 5, 6]]) == pytest.approx(5 / 6)
    assert token_accuracy([[1, 2]], [[1, 2, 5, 5]]) == pytest.approx(2 / 4)
    assert token_accuracy([[1, 2], [3]], [[1, 2], [4]]) == pytest.approx(2 / 3)
    assert token_accuracy([], []) == 1.0
    with pytest.raises(ContractError):
        token_accuracy([[1]], [])


def subsequence_oracle(a, b):
    """Longest common subsequence by trying every subsequence of a."""
    subs = {tuple(b[i] for i in idx) for k in range(len(b) + 1) for idx in itertools.combinations(range(len(b)), k)}
    return max(k for k in range(len(a) + 1) for idx in itertools.combinations(range(len(a)), k)
               if tuple(a[i] for i in idx) in subs)


@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_lcs_matches_subsequence_oracle(a, b):
    assert lcs_length(a, b) == subsequence_oracle(a, b)


@given(seqs, seqs)
def test_token_accuracy_bounds_and_symmetry(a, b):
    acc = token_accuracy([a], [b])
    assert 0.0 <= acc <= 1.0
    assert acc == token_accuracy([b], [a])
    assert (acc == 1.0) == (a == b)
    # aligned matches never fall below position-wise matches
    if a or b:
        assert acc >= sum(x == y for x, y in zip(a, b)) / max(len(a), len(b))


def test_evaluate_breakdown():
    r = evaluate("wer", [[1, 2], [3]], [[1, 2], [4]])
    assert r.value == pytest.approx(1 / 3) and r.per_example == [0.0, 1.0] and r.n_examples == 2
    with pytest.raises(ContractError):
        evaluate("chrf", [[1]], [[1]])
