import numpy as np
import pytest

from oracles import attention_loop, central_difference, gelu_tanh_ref, rel_err, rmsnorm_ref
from zamba import tensor as tn
from zamba.attention import GsaParams, KVCache, causal_attention, gsa_forward
from zamba.tensor import ShapeError, Tensor


def make_gsa(rng, d=8, heads=2, dtype=np.float64, rope=False, n_sites=2):
    shared = GsaParams.init(d, 4 * d, heads, rng, dtype=dtype, rope=rope)
    sites = [tn.parameter(rng.standard_normal((d, d)).astype(dtype) / np.sqrt(d)) for _ in range(n_sites)]
    return shared, sites


def test_single_token_attention_is_v(rng):
    v = rng.standard_normal((1, 8))
    out = causal_attention(Tensor(v), Tensor(v), Tensor(v), 2).data
    np.testing.assert_allclose(out, v, rtol=1e-15)


def test_uniform_scores_average_prefix(rng):
    q = np.ones((3, 4))
    v = rng.standard_normal((3, 4))
    out = causal_attention(Tensor(q), Tensor(q), Tensor(v), 2).data
    for t in range(3):
        np.testing.assert_allclose(out[t], v[:t + 1].mean(axis=0), rtol=1e-14)


def test_random_T16_matches_naive_loop(rng):
    q, k, v = (rng.standard_normal((16, 12)) for _ in range(3))
    out = causal_attention(Tensor(q), Tensor(k), Tensor(v), 3).data
    assert rel_err(out, attention_loop(q, k, v, 3)) <= 1e-13


def test_offset_queries_match_naive_loop(rng):
    q = rng.standard_normal((3, 8))
    k, v = rng.standard_normal((10, 8)), rng.standard_normal((10, 8))
    out = causal_attention(Tensor(q), Tensor(k), Tensor(v), 2, offset=7).data
    assert rel_err(out, attention_loop(q, k, v, 2, offset=7)) <= 1e-13


@pytest.mark.parametrize("rope", [False, True])
def test_attention_gradient(rope, rng):
    q, k, v = (rng.standard_normal((2, 5, 8)) for _ in range(3))
    w = rng.standard_normal((2, 5, 8))
    arrays = [q, k, v]

    def loss(*ts):
        return tn.sum(tn.mul(causal_attention(*ts, 2, rope=rope), Tensor(w)))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    tn.backward(loss(*ts))
    analytic, numeric = [], []
    for a, t in zip(arrays, ts):
        for idx in np.ndindex(a.shape):
            analytic.append(t.grad[idx])
            numeric.append(central_difference(lambda: float(loss(*[Tensor(x) for x in arrays]).data), a, idx))
    assert rel_err(analytic, numeric) <= 1e-8


def test_attention_width_not_divisible():
    x = Tensor(np.ones((2, 6)))
    with pytest.raises(ShapeError):
        causal_attention(x, x, x, 4)


def test_zero_site_projection_gives_zero(rng):
    shared, sites = make_gsa(rng)
    sites[1].data[:] = 0.0
    x = rng.standard_normal((5, 8)) * 10
    y = gsa_forward(shared, sites, 1, Tensor(x), Tensor(rng.standard_normal((5, 8)))).data
    np.testing.assert_array_equal(y, 0.0)


def test_single_token_pipeline_by_hand(rng):
    d = 8
    shared, sites = make_gsa(rng, d=d)
    xl, x0 = rng.standard_normal((1, d)), rng.standard_normal((1, d))
    h = rmsnorm_ref(np.concatenate([xl, x0], -1), shared.norm_in.data, shared.eps)
    v = (h @ shared.qkv_proj.data)[:, 4 * d:]
    a = rmsnorm_ref(v @ shared.attn_out.data, shared.norm_mlp.data, shared.eps)
    expect = gelu_tanh_ref(a @ shared.mlp_in.data) @ shared.mlp_out.data @ sites[0].data
    got = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(x0)).data
    assert rel_err(got, expect) <= 1e-13


@pytest.mark.parametrize("rope", [False, True])
def test_cached_decode_matches_full_forward(rope, rng):
    shared, sites = make_gsa(rng, d=16, heads=4, dtype=np.float32, rope=rope)
    T = 12
    xl = rng.standard_normal((T, 16)).astype(np.float32)
    x0 = rng.standard_normal((T, 16)).astype(np.float32)
    full = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(x0)).data
    cache = KVCache(T, 32)
    head = gsa_forward(shared, sites, 0, Tensor(xl[:5]), Tensor(x0[:5]), cache=cache).data
    rows = [head]
    for t in range(5, T):
        rows.append(gsa_forward(shared, sites, 0, Tensor(xl[t:t + 1]), Tensor(x0[t:t + 1]), cache=cache).data)
    assert np.abs(np.concatenate(rows) - full).max() <= 1e-5


def test_gsa_causality(rng):
    shared, sites = make_gsa(rng)
    xl, x0 = rng.standard_normal((9, 8)), rng.standard_normal((9, 8))
    y1 = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(x0)).data
    xl[6] += 1.0
    x0[7] -= 1.0
    y2 = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(x0)).data
    np.testing.assert_array_equal(y1[:6], y2[:6])


def test_x0_concatenation_path_is_live(rng):
    shared, sites = make_gsa(rng)
    xl, x0 = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    y1 = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(x0)).data
    y2 = gsa_forward(shared, sites, 0, Tensor(xl), Tensor(np.zeros_like(x0))).data
    assert np.abs(y1 - y2).max() > 1e-3


def test_gsa_errors(rng):
    shared, sites = make_gsa(rng)
    with pytest.raises(ShapeError):
        gsa_forward(shared, sites, 0, Tensor(np.ones((4, 8))), Tensor(np.ones((3, 8))))
    with pytest.raises(IndexError):
        gsa_forward(shared, sites, 2, Tensor(np.ones((4, 8))), Tensor(np.ones((4, 8))))


def test_kv_cache_overflow():
    cache = KVCache(3, 4)
    cache.append(np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(OverflowError):
        cache.append(np.zeros((2, 4)), np.zeros((2, 4)))
    assert cache.nbytes_used == 2 * 2 * 4 * 4


def test_heads_must_divide_width(rng):
    with pytest.raises(ValueError):
        GsaParams.init(6, 24, 5, rng)
