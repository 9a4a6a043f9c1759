import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exitslow import autodiff as ad
from exitslow.autodiff import (ContractError, DiffTensor, DimensionError, DomainError, GradientTape,
                               NumericError)

from conftest import central_diff, rel_err

mpmath.mp.dps = 50


def mp_softmax(xs):
    e = [mpmath.e ** mpmath.mpf(x) for x in xs]
    s = mpmath.fsum(e)
    return [v / s for v in e]


def grad_of(build, *arrays_):
    """Analytic gradients of scalar build(*tensors) for float64 inputs."""
    ts = [DiffTensor(np.array(a, dtype=np.float64)) for a in arrays_]
    with GradientTape() as tape:
        for t in ts:
            tape.watch(t)
        loss = build(*ts)
        ad.backward(loss)
    return [t.grad for t in ts]


def value_of(build, *arrays_):
    return float(build(*[DiffTensor(np.array(a, dtype=np.float64)) for a in arrays_]).data)


def check_grad(build, *arrays_, tol=1e-3):
    analytic = grad_of(build, *arrays_)
    for k, a in enumerate(arrays_):
        def f(x, k=k):
            args = list(arrays_)
            args[k] = x
            return value_of(build, *args)
        numeric = central_diff(f, a, 1e-4)
        assert rel_err(analytic[k], numeric) < tol, (k, analytic[k], numeric)


# ----------------------------------------------------------------- matmul


def test_matmul_identity():
    out = ad.matmul(DiffTensor([[1.0, 0], [0, 1]]), DiffTensor([[2.0, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_row_col():
    out = ad.matmul(DiffTensor([[1.0, 2]]), DiffTensor([[3.0], [4]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(DiffTensor(np.ones((2, 3))), DiffTensor(np.ones((2, 3))))


def test_matmul_sum_grad_is_ones_times_bT(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    gA, gB = grad_of(lambda a, b: ad.reduce_sum(ad.matmul(a, b)), A, B)
    np.testing.assert_allclose(gA, np.ones((3, 5)) @ B.T, rtol=1e-12)
    check_grad(lambda a, b: ad.reduce_sum(ad.matmul(a, b)), A, B)


def test_matmul_batched_grads(rng):
    A, B = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
    W = rng.normal(size=(2, 3, 2))
    check_grad(lambda a, b: ad.reduce_sum(ad.mul(ad.matmul(a, b), W)), A, B)
    A2, B2 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))
    W2 = rng.normal(size=(2, 3, 3))
    check_grad(lambda a, b: ad.reduce_sum(ad.mul(ad.matmul(a, b), W2)), A2, B2)


# ----------------------------------------------------------------- elementwise and shape


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3, 4), (1, 4))])
def test_add_mul_broadcast_grads(rng, shape_a, shape_b):
    a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
    W = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
    check_grad(lambda x, y: ad.reduce_sum(ad.mul(ad.add(x, y), W)), a, b)
    check_grad(lambda x, y: ad.reduce_sum(ad.mul(ad.mul(x, y), W)), a, b)
    check_grad(lambda x, y: ad.reduce_sum(ad.mul(ad.sub(x, y), W)), a, b)


def test_tanh_gelu_grads(rng):
    x = rng.normal(size=(4, 5)) * 2
    W = rng.normal(size=(4, 5))
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.tanh(t), W)), x)
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.gelu(t), W)), x)


def test_gelu_reference_values():
    xs = [-3.0, -0.5, 0.0, 0.7, 2.5]
    out = ad.gelu(DiffTensor(np.array(xs))).data
    c = mpmath.sqrt(2 / mpmath.pi)
    for x, y in zip(xs, out):
        ref = 0.5 * x * (1 + mpmath.tanh(c * (x + 0.044715 * mpmath.mpf(x) ** 3)))
        assert abs(y - float(ref)) < 1e-12


def test_reshape_transpose_grads(rng):
    x = rng.normal(size=(2, 3, 4))
    W = rng.normal(size=(4, 6))
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.reshape(ad.transpose(t, (2, 0, 1)), (4, 6)), W)), x)


def test_reductions_grads(rng):
    x = rng.normal(size=(3, 4, 2))
    W = rng.normal(size=(3, 2))
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.reduce_sum(t, axis=1), W)), x)
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.reduce_mean(t, axis=1), W)), x)
    check_grad(lambda t: ad.reduce_mean(t), x)


def test_reduce_sum_accumulates_in_float64():
    x = DiffTensor(np.full(10**6, 0.1, dtype=np.float32))
    assert ad.reduce_sum(x).data.dtype == np.float32
    assert abs(float(ad.reduce_sum(x).data) - 1e6 * float(np.float32(0.1))) < 1.0


def test_layer_norm_grads_and_stats(rng):
    x = rng.normal(size=(3, 5)) * 3 + 1
    g, b = rng.normal(size=5), rng.normal(size=5)
    W = rng.normal(size=(3, 5))
    check_grad(lambda t, gg, bb: ad.reduce_sum(ad.mul(ad.layer_norm(t, gg, bb), W)), x, g, b)
    y = ad.layer_norm(DiffTensor(x), DiffTensor(np.ones(5)), DiffTensor(np.zeros(5))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_embedding_lookup_scatter_adds_repeats(rng):
    table = rng.normal(size=(6, 3))
    ids = np.array([[1, 4, 1], [0, 1, 5]])
    W = rng.normal(size=(2, 3, 3))
    (g,) = grad_of(lambda t: ad.reduce_sum(ad.mul(ad.embedding_lookup(t, ids), W)), table)
    expect = np.zeros_like(table)
    for (i, j), k in np.ndenumerate(ids):
        expect[k] += W[i, j]
    np.testing.assert_allclose(g, expect)
    assert np.all(g[[2, 3]] == 0)
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.embedding_lookup(t, ids), W)), table)


def test_embedding_lookup_bad_id():
    with pytest.raises(DomainError):
        ad.embedding_lookup(DiffTensor(np.zeros((3, 2))), [0, 3])


# ----------------------------------------------------------------- softmax family


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(DiffTensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.softmax(DiffTensor(np.array([1000.0, 1000.0, 1000.0]))).data
    np.testing.assert_allclose(out, [1 / 3] * 3)
    ref = mp_softmax([1, 2, 3])
    out = ad.softmax(DiffTensor(np.array([1.0, 2.0, 3.0]))).data
    for a, b in zip(out, ref):
        assert abs(a - float(b)) < 1e-15


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax(DiffTensor(np.array([0.0, np.nan])))
    with pytest.raises(NumericError):
        ad.log_softmax(DiffTensor(np.array([np.nan, 1.0])))


def test_softmax_bias_masks(rng):
    x = DiffTensor(rng.normal(size=(2, 4)))
    bias = np.array([0.0, 0.0, -1e9, -1e9])
    y = ad.softmax(x, bias=bias).data
    assert np.all(y[:, 2:] < 1e-30)
    np.testing.assert_allclose(y.sum(-1), 1.0)


def test_softmax_and_log_softmax_grads(rng):
    x = rng.normal(size=(3, 4))
    W = rng.normal(size=(3, 4))
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.softmax(t), W)), x)
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.log_softmax(t), W)), x)
    check_grad(lambda t: ad.reduce_sum(ad.mul(ad.softmax(t, axis=0), W)), x)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    y = ad.softmax(DiffTensor(x)).data
    assert abs(y.sum() - 1) < 1e-6
    assert np.all(y >= 0)
    assert np.max(np.abs(ad.softmax(DiffTensor(x + c)).data - y)) < 1e-6


def test_cross_entropy_examples(rng):
    assert abs(float(ad.cross_entropy(DiffTensor([0.0, 0.0]), 0).data) - math.log(2)) < 1e-7
    assert float(ad.cross_entropy(DiffTensor(np.array([50.0, -50.0])), 0).data) < 1e-20
    logits = rng.normal(size=4)
    for k in range(4):
        ref = -mpmath.log(mp_softmax(logits.tolist())[k])
        assert abs(float(ad.cross_entropy(DiffTensor(logits), k).data) - float(ref)) < 1e-12


def test_cross_entropy_out_of_range():
    with pytest.raises(DomainError):
        ad.cross_entropy(DiffTensor([0.0, 0.0]), 2)
    with pytest.raises(DomainError):
        ad.cross_entropy(DiffTensor([0.0, 0.0]), -1)


def test_cross_entropy_reductions_and_grad(rng):
    x = rng.normal(size=(5, 3))
    y = np.array([0, 2, 1, 1, 0])
    per = ad.cross_entropy(DiffTensor(x), y, reduction="none").data
    assert per.shape == (5,)
    assert abs(float(ad.cross_entropy(DiffTensor(x), y).data) - per.sum()) < 1e-12
    assert abs(float(ad.cross_entropy(DiffTensor(x), y, reduction="mean").data) - per.mean()) < 1e-12
    check_grad(lambda t: ad.cross_entropy(t, y), x)


def test_soft_cross_entropy_examples(rng):
    v = float(ad.soft_cross_entropy(DiffTensor([0.0, 0.0]), [0.5, 0.5]).data)
    assert abs(v - math.log(2)) < 1e-7
    ref = -mpmath.fsum(mpmath.log(p) / 3 for p in mp_softmax([1, 2, 3]))
    v = float(ad.soft_cross_entropy(DiffTensor(np.array([1.0, 2.0, 3.0])), np.full(3, 1 / 3)).data)
    assert abs(v - float(ref)) < 1e-12
    x = rng.normal(size=5)
    for k in range(5):
        onehot = np.eye(5)[k]
        a = float(ad.soft_cross_entropy(DiffTensor(x), onehot).data)
        b = float(ad.cross_entropy(DiffTensor(x), k).data)
        assert abs(a - b) < 1e-6


def test_soft_cross_entropy_rejects_unnormalised():
    with pytest.raises(DomainError):
        ad.soft_cross_entropy(DiffTensor([0.0, 0.0]), [0.5, 0.6])
    with pytest.raises(DomainError):
        ad.soft_cross_entropy(DiffTensor([0.0, 0.0]), [1.5, -0.5])


def test_soft_cross_entropy_grad(rng):
    x = rng.normal(size=(2, 4))
    t = rng.dirichlet(np.ones(4), size=2)
    check_grad(lambda z: ad.soft_cross_entropy(z, t), x)


# ----------------------------------------------------------------- backward contract


def test_backward_sum_and_square():
    (g,) = grad_of(lambda x: ad.reduce_sum(x), np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    (g,) = grad_of(lambda x: ad.reduce_sum(ad.mul(x, x)), np.array([3.0]))
    assert g.tolist() == [6.0]


def test_backward_seeds_loss_grad_with_one():
    x = DiffTensor(np.array([1.0, 2.0]))
    with GradientTape() as tape:
        tape.watch(x)
        loss = ad.reduce_sum(x)
        ad.backward(loss)
    assert float(loss.grad) == 1.0


def test_backward_nonscalar_raises():
    x = DiffTensor(np.ones(3))
    with GradientTape() as tape:
        tape.watch(x)
        y = ad.mul(x, 2.0)
        with pytest.raises(ContractError):
            ad.backward(y)


def test_backward_requires_active_tape():
    x = DiffTensor(np.ones(3))
    with GradientTape() as tape:
        tape.watch(x)
        loss = ad.reduce_sum(x)
    with pytest.raises(ContractError):
        ad.backward(loss)
    with GradientTape():
        with pytest.raises(ContractError):
            ad.backward(loss)


def test_every_ancestor_gets_grad(rng):
    x = DiffTensor(rng.normal(size=(2, 3)))
    w = DiffTensor(rng.normal(size=(3, 2)))
    with GradientTape() as tape:
        tape.watch(x)
        tape.watch(w)
        h = ad.tanh(ad.matmul(x, w))
        loss = ad.cross_entropy(h, [0, 1])
        ad.backward(loss)
    for t in (x, w, h):
        assert t.grad is not None and t.grad.shape == t.shape


def test_backward_bit_identical(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    w = rng.normal(size=(8, 3)).astype(np.float32)

    def run():
        a, b = DiffTensor(x.copy()), DiffTensor(w.copy())
        with GradientTape() as tape:
            tape.watch(a)
            tape.watch(b)
            loss = ad.cross_entropy(ad.gelu(ad.matmul(a, b)), [0, 1, 2, 0])
            ad.backward(loss)
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def test_float32_graph_stays_float32():
    x = DiffTensor(np.ones((2, 2), dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert ad.softmax(x).dtype == np.float32


def test_ops_outside_tape_record_nothing():
    x = DiffTensor(np.ones(3), requires_grad=False)
    with GradientTape() as tape:
        ad.reduce_sum(ad.mul(x, 2.0))
    assert tape.nodes == []


def test_entropy_np_zero_log_zero():
    assert ad.entropy_np(np.array([1.0, 0.0])) == 0.0
    assert abs(ad.entropy_np(np.full(4, 0.25)) - math.log(4)) < 1e-15
