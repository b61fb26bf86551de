import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrlf import tensor as T
from ctrlf.tensor import ContractError, ShapeError, Tensor

from oracles import conv2d_loops, numeric_grad, rel_err


def check_grad(fn, *shapes, rng, tol=1e-5, positive=False, project=True):
    """Autodiff vs central differences for ``sum(fn(*xs) * w)``."""
    xs = []
    for s in shapes:
        a = rng.normal(size=s)
        if positive:
            a = np.abs(a) + 0.5
        xs.append(a)
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in xs]
    out = fn(*ts)
    w = rng.normal(size=out.shape) if project else np.ones(out.shape)
    T.tsum(out * w).backward()

    def scalar():
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in xs]).data * w))

    for a, t in zip(xs, ts):
        assert rel_err(t.grad, numeric_grad(scalar, a)) < tol


# -- matmul ----------------------------------------------------------------------------

def test_matmul_identity_and_projector():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    p = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(p.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_matmul_gradient(rng):
    check_grad(T.matmul, (3, 4), (4, 2), rng=rng, tol=1e-6)


def test_batched_matmul_gradient(rng):
    check_grad(T.matmul, (2, 3, 4), (2, 4, 5), rng=rng)


# -- softmax ---------------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    s = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-12)


def test_softmax_gradient(rng):
    check_grad(T.softmax, (5,), rng=rng, tol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


def test_log_softmax_and_cross_entropy(rng):
    check_grad(lambda x: T.log_softmax(x, axis=-1), (3, 5), rng=rng)
    labels = np.array([0, 4, 2])
    logits = rng.normal(size=(3, 5))
    ce = T.cross_entropy(Tensor(logits, dtype=np.float64), labels).item()
    ref = -np.mean(np.log(np.exp(logits)[np.arange(3), labels] / np.exp(logits).sum(1)))
    assert abs(ce - ref) < 1e-12


# -- backward contract -----------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    y = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (T.tsum(y * y) / 2).backward()
    np.testing.assert_allclose(y.grad, y.data)


def test_backward_non_scalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_accumulates_without_zeroing():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = T.tsum(x * 3)
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_two_consumers_sum_contributions(rng):
    a = rng.normal(size=(4,))
    x = Tensor(a, requires_grad=True, dtype=np.float64)
    h = T.exp(x)
    loss = T.tsum(h * h) + T.tsum(h * 3.0)
    loss.backward()
    # d/dx [e^{2x} + 3e^x]
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * a) + 3 * np.exp(a), rtol=1e-12)


def test_every_reachable_tensor_gets_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    h = x * 2.0
    z = T.exp(h)
    T.tsum(z).backward()
    for t in (x, h, z):
        assert t.grad is not None and t.grad.shape == t.shape


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_record_is_topological():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 4)), requires_grad=True)
    with T.record() as tape:
        y = T.tsum(T.gelu(T.matmul(x, w)) + 1.0)
    produced = set()
    leaves = {id(x), id(w)}
    for rec in tape:
        for i in rec.inputs:
            assert i in produced or i not in {r.output for r in tape}
        produced.add(rec.output)
    assert tape[-1].output == id(y)
    assert leaves.isdisjoint({r.output for r in tape})


def test_count_macs_matmul_and_conv():
    with T.count_macs() as macs:
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert macs[0] == 60
    with T.count_macs() as macs:
        T.conv2d(Tensor(np.ones((1, 4, 6, 6))), Tensor(np.ones((4, 1, 3, 3))), stride=1, padding=1, groups=4)
    assert macs[0] == 4 * 36 * 9


# -- elementwise / shape ops -----------------------------------------------------------

@pytest.mark.parametrize("name,fn,shapes,positive", [
    ("add", T.add, [(3, 4), (3, 4)], False),
    ("sub", T.sub, [(3, 4), (3, 4)], False),
    ("mul", T.mul, [(3, 4), (3, 4)], False),
    ("div", T.div, [(3, 4), (3, 4)], True),
    ("broadcast_row", T.add, [(3, 4), (4,)], False),
    ("broadcast_scalar_like", T.mul, [(2, 3, 4), (1, 1, 1)], False),
    ("scalar_ops", lambda a: (a * 2.5 - 1.0) / 3.0 + 0.5, [(4,)], False),
    ("power", lambda a: T.power(a, 3.0), [(5,)], True),
    ("exp", T.exp, [(5,)], False),
    ("log", T.log, [(5,)], True),
    ("sqrt", T.sqrt, [(5,)], True),
    ("sigmoid", T.sigmoid, [(6,)], False),
    ("tanh", T.tanh, [(6,)], False),
    ("gelu", T.gelu, [(6,)], False),
    ("abs", T.tabs, [(6,)], True),
    ("neg", T.neg, [(3,)], False),
    ("sum_axis", lambda a: T.tsum(a, axis=1), [(3, 4)], False),
    ("sum_keepdims", lambda a: T.tsum(a, axis=0, keepdims=True), [(3, 4)], False),
    ("mean", lambda a: T.mean(a, axis=-1), [(3, 4)], False),
    ("max", lambda a: T.tmax(a, axis=-1), [(3, 4)], False),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)], False),
    ("transpose", lambda a: T.transpose(a, (1, 2, 0)), [(2, 3, 4)], False),
    ("broadcast_to", lambda a: T.broadcast_to(a, (3, 4)), [(1, 4)], False),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 5)], False),
    ("slice", lambda a: a[:, 1:3], [(3, 4)], False),
    ("fancy_index", lambda a: T.getitem(a, (np.array([0, 0, 2]),)), [(3, 4)], False),
    ("pad2d", lambda a: T.pad2d(a, 1), [(1, 2, 3, 3)], False),
])
def test_op_gradients(name, fn, shapes, positive, rng):
    check_grad(fn, *shapes, rng=rng, positive=positive)


def test_gelu_is_tanh_approximation():
    x = np.linspace(-4, 4, 33)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x, dtype=np.float64)).data, ref, rtol=1e-12)


def test_concat_shape_mismatch():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_reshape_transpose_round_trip(shape, rnd):
    a = np.arange(int(np.prod(shape)), dtype=np.float64).reshape(shape)
    perm = list(range(len(shape)))
    rnd.shuffle(perm)
    t = T.transpose(Tensor(a, dtype=np.float64), tuple(perm))
    back = T.transpose(t, tuple(np.argsort(perm)))
    np.testing.assert_array_equal(back.data, a)
    np.testing.assert_array_equal(T.reshape(T.reshape(Tensor(a), (-1,)), tuple(shape)).data, a)


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() is np.float32


# -- convolution -----------------------------------------------------------------------

@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [
    (3, 5, 3, 1, 1, 1),
    (4, 4, 3, 2, 1, 4),   # depthwise, strided
    (4, 6, 1, 1, 0, 1),   # pointwise
    (4, 6, 3, 2, 0, 2),   # grouped
])
def test_conv2d_matches_loops_and_gradcheck(cin, cout, k, stride, pad, groups, rng):
    x = rng.normal(size=(2, cin, 6, 6))
    w = rng.normal(size=(cout, cin // groups, k, k))
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad, groups)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, stride, pad, groups), rtol=1e-10, atol=1e-12)
    check_grad(lambda a, b: T.conv2d(a, b, stride, pad, groups), x.shape, w.shape, rng=rng)


def test_conv_output_size_depthwise_stride2():
    assert T.conv_output_size(56, 3, 2, 1) == 28


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), 1, 1, 1)
