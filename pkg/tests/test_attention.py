import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2tlab import tensor as T
from s2tlab.attention import (KVCache, MhaParams, build_audio_relaxed_mask, build_causal_mask,
                              build_padding_mask, mha_forward, sdpa)
from s2tlab.tensor import ContractError, DimensionError, Tensor, gradcheck


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_sdpa_single_position_returns_v(rng):
    v = t(rng.normal(size=(1, 3)))
    assert np.allclose(sdpa(t(rng.normal(size=(1, 2))), t(rng.normal(size=(1, 2))), v).data, v.data)


def test_sdpa_zero_scores_average_values(rng):
    v = t(rng.normal(size=(4, 3)))
    out = sdpa(t(np.zeros((2, 2))), t(rng.normal(size=(4, 2))), v)
    assert np.allclose(out.data, v.data.mean(0, keepdims=True).repeat(2, 0))


def test_sdpa_causal_first_row_is_v0(rng):
    v = t(rng.normal(size=(3, 2)))
    out = sdpa(t(rng.normal(size=(3, 2))), t(rng.normal(size=(3, 2))), v, build_causal_mask(3))
    assert np.allclose(out.data[0], v.data[0])


def test_sdpa_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        sdpa(t(np.ones((2, 2))), t(np.ones((3, 2))), t(np.ones((3, 2))), build_causal_mask(4))


def test_causal_mask_examples():
    m = build_causal_mask(3).m
    assert m[0, 1] == -np.inf and m[2, 0] == 0
    assert (np.diag(m) == 0).all()
    one = build_causal_mask(1)
    assert one.m.shape == (1, 1) and one.m[0, 0] == 0 and one.speech_prefix_len == 0


def test_relaxed_mask_examples():
    m = build_audio_relaxed_mask(4, 2)
    assert m.m[0, 1] == 0 and m.m[2, 3] == -np.inf and m.speech_prefix_len == 2
    assert build_audio_relaxed_mask(4, 4).allowed.all()
    with pytest.raises(ContractError):
        build_audio_relaxed_mask(3, 4)


@given(st.integers(1, 20), st.data())
def test_mask_definitions(total, data):
    n = data.draw(st.integers(0, total))
    i, j = np.meshgrid(np.arange(total), np.arange(total), indexing="ij")
    assert np.array_equal(build_causal_mask(total).allowed, j <= i)
    assert np.array_equal(build_audio_relaxed_mask(total, n).allowed, (j <= i) | (j < n))
    assert build_audio_relaxed_mask(total, 0) == build_causal_mask(total)


def test_padding_mask_examples(rng):
    assert build_padding_mask([3], 3).allowed.all()
    pm = build_padding_mask([1], 3)
    assert pm.m[0, 0].tolist() == [0, -np.inf, -np.inf]
    _, w = sdpa(t(rng.normal(size=(1, 2, 2))), t(rng.normal(size=(1, 3, 2))), t(rng.normal(size=(1, 3, 2))),
                build_padding_mask([2], 3), return_weights=True)
    assert (w.data[..., 2] == 0).all()
    with pytest.raises(ContractError):
        build_padding_mask([4], 3)


def test_combined_is_elementwise_min():
    a, b = build_audio_relaxed_mask(4, 2), build_padding_mask([3], 4)
    c = a.combine(b)
    assert c.kind == "combined"
    assert np.array_equal(np.broadcast_to(c.m, (1, 4, 4)), np.minimum(a.m[None], b.m))


@given(st.integers(2, 7), st.integers(0, 10_000), st.data())
def test_masked_weights_exactly_zero(total, seed, data):
    rng = np.random.default_rng(seed)
    n = data.draw(st.integers(0, total))
    mask = build_audio_relaxed_mask(total, n)
    q = t(rng.normal(size=(total, 4)) * 30)
    _, w = sdpa(q, t(rng.normal(size=(total, 4)) * 30), t(rng.normal(size=(total, 4))), mask,
                return_weights=True)
    assert (w.data[~mask.allowed] == 0).all()
    assert np.allclose(w.data.sum(-1), 1)


@given(st.integers(2, 7), st.integers(0, 10_000), st.data())
def test_future_content_does_not_leak(total, seed, data):
    rng = np.random.default_rng(seed)
    n = data.draw(st.integers(0, total - 1))
    mask = build_audio_relaxed_mask(total, n)
    p = MhaParams(8, 2, rng)
    x = rng.normal(size=(total, 8)).astype(np.float32)
    j = data.draw(st.integers(max(n, 1), total - 1))
    y = x.copy()
    y[j] += rng.normal(size=8).astype(np.float32)
    a = mha_forward(p, Tensor(x), Tensor(x), mask).data
    b = mha_forward(p, Tensor(y), Tensor(y), mask).data
    assert np.array_equal(a[:j], b[:j])


def test_mha_single_head_is_projected_sdpa(rng):
    p = MhaParams(4, 1, rng)
    xq, xkv = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    ref = p.o(sdpa(p.q(xq), p.k(xkv), p.v(xkv)))
    out = mha_forward(p, xq, xkv)
    assert out.shape == (3, 4) and np.allclose(out.data, ref.data, atol=1e-6)


def test_mha_heads_must_divide():
    with pytest.raises(ContractError):
        MhaParams(6, 4, np.random.default_rng(0))


def test_mha_gradcheck(rng):
    with T.wide_precision():
        p = MhaParams(6, 2, rng)
    xq = Tensor(rng.normal(size=(1, 3, 6)), requires_grad=True, dtype=np.float64)
    xkv = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True, dtype=np.float64)
    proj = t(rng.normal(size=(1, 3, 6)))
    mask = build_padding_mask([3], 4)
    f = lambda: T.tsum(mha_forward(p, xq, xkv, mask) * proj)
    assert gradcheck(f, [xq, xkv, p.q.weight, p.k.weight, p.v.weight, p.o.weight]) < 1e-4


def test_incremental_kv_cache_matches_full_causal(rng):
    p = MhaParams(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 6, 8)))
    full = mha_forward(p, x, x, build_causal_mask(6)).data
    cache = KVCache()
    rows = []
    for i in range(6):
        xi = x[:, i:i + 1]
        k, v = p.project_kv(xi)
        cache.append(k, v, np.ones((1, 1), dtype=bool))
        rows.append(p.attend(p.project_q(xi), cache.k, cache.v, cache.key_allowed[:, None, :]).data)
    assert cache.length == 6
    assert np.abs(np.concatenate(rows, axis=1) - full).max() < 1e-5
