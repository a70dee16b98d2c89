import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, conv1d_loop, gelu_tanh_ref, rel_err, rmsnorm_ref
from zamba import tensor as tn
from zamba.tensor import NonFiniteError, ShapeError, Tensor


def grad_check(fn, arrays, h=1e-5):
    """Norm-wise relative error between backward() and central differences for ``fn(*tensors)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    tn.backward(fn(*ts))
    analytic, numeric = [], []
    for a, t in zip(arrays, ts):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            num[idx] = central_difference(lambda: float(fn(*[Tensor(x) for x in arrays]).data), a, idx, h)
        analytic.append(t.grad.ravel())
        numeric.append(num.ravel())
    return rel_err(np.concatenate(analytic), np.concatenate(numeric), floor=1e-8)


def weighted(out, seed=0):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return tn.sum(tn.mul(out, Tensor(w)))


shapes = st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple)
seeds = st.integers(0, 2**31 - 1)


# --- forward examples -------------------------------------------------------

def test_matmul_identity():
    out = tn.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_softmax_uniform():
    np.testing.assert_array_equal(tn.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4)


def test_causal_conv_hand_unrolled():
    out = tn.conv1d_causal(Tensor([[1.0], [2.0], [3.0]]), Tensor([[1.0, 1.0]]))
    np.testing.assert_array_equal(out.data[:, 0], [1.0, 3.0, 5.0])


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((9, 3))
    k = rng.standard_normal((3, 4))
    np.testing.assert_allclose(tn.conv1d_causal(Tensor(x), Tensor(k)).data, conv1d_loop(x, k), atol=1e-12)


def test_conv_history_continues_series(rng):
    x = rng.standard_normal((10, 2))
    k = rng.standard_normal((2, 3))
    full = tn.conv1d_causal(Tensor(x), Tensor(k)).data
    tail = tn.conv1d_causal(Tensor(x[6:]), Tensor(k), history=x[4:6]).data
    np.testing.assert_allclose(tail, full[6:], atol=1e-12)


def test_rmsnorm_examples(fp64):
    np.testing.assert_array_equal(tn.rmsnorm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)), 0.0).data, [1.0] * 4)
    np.testing.assert_allclose(tn.rmsnorm(Tensor([2.0, 0.0]), Tensor(np.ones(2)), 0.0).data, [np.sqrt(2), 0.0], rtol=1e-15)
    np.testing.assert_array_equal(tn.rmsnorm(Tensor([0.0, 0.0, 0.0]), Tensor(np.ones(3)), 1e-5).data, [0.0] * 3)


def test_rmsnorm_matches_reference(rng):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal(5)
    np.testing.assert_allclose(tn.rmsnorm(Tensor(x), Tensor(w), 1e-5).data, rmsnorm_ref(x, w, 1e-5), rtol=1e-13)


def test_gelu_matches_tanh_form(rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(tn.gelu(Tensor(x)).data, gelu_tanh_ref(x), rtol=1e-12, atol=1e-15)


def test_softplus_large_inputs_stay_finite():
    out = tn.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert np.all(np.isfinite(out))
    assert out[2] == 800.0


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 3, 258)))
    targets = np.zeros((2, 3), dtype=np.int64)
    assert tn.cross_entropy(logits, targets).data == pytest.approx(np.log(258), rel=1e-12)


# --- backward examples ------------------------------------------------------

def test_backward_square():
    w = Tensor([3.0], requires_grad=True)
    tn.backward(tn.sum(tn.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [6.0])


def test_backward_two_sites_sum(rng):
    w = Tensor(rng.standard_normal(4), requires_grad=True)
    x1, x2 = rng.standard_normal(4), rng.standard_normal(4)
    tn.backward(tn.add(tn.sum(tn.mul(w, Tensor(x1))), tn.sum(tn.mul(w, Tensor(x2)))))
    np.testing.assert_allclose(w.grad, x1 + x2, rtol=1e-15)


@pytest.mark.parametrize("m", [1, 2, 5])
def test_m_identical_sites_scale_gradient(m, rng):
    x = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))

    def grad(m):
        w = Tensor(w0.copy(), requires_grad=True)
        total = None
        for _ in range(m):
            term = tn.sum(tn.silu(tn.matmul(Tensor(x), w)))
            total = term if total is None else tn.add(total, term)
        tn.backward(total)
        return w.grad

    np.testing.assert_allclose(grad(m), m * grad(1), rtol=1e-13)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        tn.backward(tn.mul(w, w))


def test_random_200_parameter_graph(rng):
    x = rng.standard_normal((5, 10))
    w1 = rng.standard_normal((10, 12)) * 0.3
    w2 = rng.standard_normal((12, 6)) * 0.3
    b = rng.standard_normal(6)
    g = rng.standard_normal(6)
    targets = rng.integers(0, 6, size=5)

    def f(w1, w2, b, g):
        hdn = tn.gelu(tn.matmul(Tensor(x), w1))
        out = tn.rmsnorm(tn.add(tn.matmul(hdn, w2), b), g)
        return tn.cross_entropy(tn.mul(tn.softplus(out), tn.sigmoid(out)), targets)

    assert w1.size + w2.size + b.size + g.size >= 200
    assert grad_check(f, [w1, w2, b, g]) <= 1e-6


# --- gradient property per primitive ---------------------------------------

UNARY = {
    "exp": tn.exp,
    "sigmoid": tn.sigmoid,
    "silu": tn.silu,
    "softplus": tn.softplus,
    "gelu": tn.gelu,
    "softmax": tn.softmax,
    "neg": tn.neg,
    "sum": tn.sum,
    "mean": tn.mean,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=50)
@given(shape=shapes, seed=seeds)
def test_unary_gradients(name, shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    op = UNARY[name]
    assert grad_check(lambda t: weighted(op(t), seed), [x]) <= 1e-6


@settings(max_examples=50)
@given(shape=shapes, seed=seeds)
def test_log_gradient(shape, seed):
    x = np.random.default_rng(seed).uniform(0.5, 2.0, shape)
    assert grad_check(lambda t: weighted(tn.log(t), seed), [x]) <= 1e-6


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
@settings(max_examples=50)
@given(shape=shapes, lead=st.integers(0, 3), seed=seeds)
def test_binary_gradients_with_leading_broadcast(name, shape, lead, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal(((lead,) if lead else ()) + shape)
    b = r.standard_normal(shape)
    op = getattr(tn, name)
    assert grad_check(lambda s, t: weighted(op(s, t), seed), [a, b]) <= 1e-6


@settings(max_examples=50)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), batch=st.integers(0, 2), seed=seeds)
def test_matmul_gradient(n, k, m, batch, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal(((batch,) if batch else ()) + (n, k))
    b = r.standard_normal((k, m))
    assert grad_check(lambda s, t: weighted(tn.matmul(s, t), seed), [a, b]) <= 1e-6


@settings(max_examples=50)
@given(sizes=st.lists(st.integers(1, 3), min_size=1, max_size=3), rows=st.integers(1, 3), seed=seeds)
def test_concat_split_gradients_and_roundtrip(sizes, rows, seed):
    r = np.random.default_rng(seed)
    parts = [r.standard_normal((rows, s)) for s in sizes]
    joined = tn.concat([Tensor(p) for p in parts])
    for got, want in zip(tn.split(joined, sizes), parts):
        np.testing.assert_array_equal(got.data, want)
    assert grad_check(lambda *ts: weighted(tn.concat(list(ts)), seed), parts) <= 1e-6
    x = np.concatenate(parts, axis=-1)
    assert grad_check(lambda t: weighted(tn.concat(tn.split(t, sizes)[::-1]), seed), [x]) <= 1e-6


@settings(max_examples=50)
@given(shape=st.lists(st.integers(1, 3), min_size=2, max_size=3).map(tuple), seed=seeds)
def test_reshape_swapaxes_gradients(shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    assert grad_check(lambda t: weighted(tn.reshape(t, (-1,)), seed), [x]) <= 1e-6
    assert grad_check(lambda t: weighted(tn.swapaxes(t, 0, -1), seed), [x]) <= 1e-6


@settings(max_examples=50)
@given(T=st.integers(1, 5), ch=st.integers(1, 3), k=st.integers(1, 4), seed=seeds)
def test_conv1d_gradient(T, ch, k, seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((T, ch)), r.standard_normal((ch, k))
    assert grad_check(lambda s, t: weighted(tn.conv1d_causal(s, t), seed), [x, w]) <= 1e-6


@settings(max_examples=50)
@given(V=st.integers(2, 6), dim=st.integers(1, 3), n=st.integers(1, 5), seed=seeds)
def test_embedding_and_cross_entropy_gradients(V, dim, n, seed):
    r = np.random.default_rng(seed)
    table = r.standard_normal((V, dim))
    ids = r.integers(0, V, size=n)
    assert grad_check(lambda t: weighted(tn.embedding(ids, t), seed), [table]) <= 1e-6
    logits = r.standard_normal((n, V))
    assert grad_check(lambda t: tn.cross_entropy(t, ids), [logits]) <= 1e-6


@settings(max_examples=50)
@given(rows=st.integers(1, 3), width=st.integers(1, 5), seed=seeds)
def test_rmsnorm_gradient(rows, width, seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((rows, width)), r.standard_normal(width)
    assert grad_check(lambda s, t: weighted(tn.rmsnorm(s, t, 1e-5), seed), [x, w]) <= 1e-6


# --- invariants and errors --------------------------------------------------

@given(shape=shapes, seed=seeds)
def test_softmax_rows_sum_to_one(shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape) * 10
    s = tn.softmax(Tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_no_trailing_broadcast():
    with pytest.raises(ShapeError):
        tn.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_checked_mode_rejects_non_finite():
    bad = Tensor(np.array([1.0, np.nan]))
    tn.exp(bad)  # unchecked: allowed
    with tn.checked_mode():
        with pytest.raises(NonFiniteError):
            tn.exp(bad)


def test_rmsnorm_weight_mismatch():
    with pytest.raises(ShapeError):
        tn.rmsnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        out = tn.mul(w, w)
    assert not out.requires_grad


def test_default_dtype_switch(fp64):
    assert Tensor([1.0]).dtype == np.float64


def test_float32_default():
    assert Tensor([1.0]).dtype == np.float32
