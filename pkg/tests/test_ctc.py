import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2tlab import tensor as T
from s2tlab.ctc import (CtcInfeasibleError, collapse, compress_batch, ctc_compress, ctc_greedy_decode,
                        ctc_loss, ctc_loss_batch, min_frames, runs)
from s2tlab.tensor import Tensor, backward, gradcheck


def log_probs(rng, t, v, scale=1.0):
    x = rng.normal(size=(t, v)) * scale
    return x - np.log(np.exp(x).sum(1, keepdims=True))


def brute_force(lp, target, blank):
    t, v = lp.shape
    total = -np.inf
    for path in itertools.product(range(v), repeat=t):
        if collapse(path, blank) == list(target):
            total = np.logaddexp(total, sum(lp[i, s] for i, s in enumerate(path)))
    return -total


def test_min_frames():
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1]) == 3
    assert min_frames([]) == 0


@given(st.integers(1, 5), st.integers(2, 3), st.integers(0, 10_000), st.data())
def test_loss_matches_enumeration(t, v, seed, data):
    rng = np.random.default_rng(seed)
    target = data.draw(st.lists(st.integers(1, v - 1), max_size=t))
    if min_frames(target) > t:
        return
    lp = log_probs(rng, t, v)
    loss = ctc_loss(Tensor(lp, dtype=np.float64), target, blank=0).item()
    assert abs(loss - brute_force(lp, target, 0)) < 1e-6
    assert loss >= 0


def test_loss_examples():
    # one frame, one label, certain prediction
    lp = np.log(np.array([[1e-12, 1.0 - 1e-12]]))
    assert ctc_loss(Tensor(lp, dtype=np.float64), [1], 0).item() < 1e-9
    # two frames, uniform over {blank, a}: paths aa, _a, a_ all collapse to [a]
    lp = np.log(np.full((2, 2), 0.5))
    assert abs(ctc_loss(Tensor(lp, dtype=np.float64), [1], 0).item() - (-np.log(0.75))) < 1e-12


def test_infeasible_target_raises():
    lp = Tensor(log_probs(np.random.default_rng(0), 2, 3), dtype=np.float64)
    with pytest.raises(CtcInfeasibleError):
        ctc_loss(lp, [1, 1], 0)


def test_batch_matches_single(rng):
    lps = [log_probs(rng, 6, 4), log_probs(rng, 4, 4)]
    batch = np.zeros((2, 6, 4))
    batch[0], batch[1, :4] = lps
    targets = [[1, 2, 2], [3]]
    out = ctc_loss_batch(Tensor(batch, dtype=np.float64), [6, 4], targets, 0)
    losses = out[0] if isinstance(out, tuple) else out
    for b in range(2):
        ref = ctc_loss(Tensor(lps[b], dtype=np.float64), targets[b], 0).item()
        assert abs(losses.data[b] - ref) < 1e-9


def test_gradient_against_finite_differences(rng):
    x = Tensor(rng.normal(size=(1, 6, 4)), requires_grad=True, dtype=np.float64)
    f = lambda: T.tsum(ctc_loss_batch(T.log_softmax(x), [6], [[1, 2, 2]], 0)[0])
    assert gradcheck(f, [x]) < 1e-5


def test_collapse_and_greedy():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0], 0) == [1, 1, 2]
    lp = np.log(np.eye(3)[[1, 1, 0, 2]] * 0.9 + 0.05)
    assert ctc_greedy_decode(lp, 0) == [1, 2]


def test_compress_averages_runs(rng):
    states = Tensor(rng.normal(size=(5, 3)))
    out, spans = ctc_compress(states, [4, 4, 0, 7, 7], blank=0)
    assert spans == [(0, 2), (2, 3), (3, 5)]
    ref = np.stack([states.data[0:2].mean(0), states.data[2], states.data[3:5].mean(0)])
    assert np.allclose(out.data, ref, atol=1e-6)


def test_compress_drop_blank(rng):
    states = Tensor(rng.normal(size=(4, 2)))
    out, spans = ctc_compress(states, [0, 5, 5, 0], blank=0, drop_blank=True)
    assert spans == [(1, 3)] and out.shape == (1, 2)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=20))
def test_compress_length_equals_run_count(path):
    states = Tensor(np.random.default_rng(len(path)).normal(size=(len(path), 2)))
    out, spans = ctc_compress(states, path)
    assert out.shape[0] == len(runs(path)) == len(spans) <= len(path)
    assert sum(e - s for s, e in spans) == len(path)


def test_compress_batch_gradcheck(rng):
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True, dtype=np.float64)
    paths = [np.array([1, 1, 0, 2, 2]), np.array([3, 0, 0, 0, 0])]
    proj = Tensor(rng.normal(size=(2, 3, 3)), dtype=np.float64)

    def f():
        y, _ = compress_batch(x, [5, 3], paths, 0)
        return T.tsum(y * proj)

    assert gradcheck(f, [x]) < 1e-6
    y, lens = compress_batch(x, [5, 3], paths, 0)
    assert lens.tolist() == [3, 2]
