import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plab import tensor as T
from plab.tensor import DTYPE, SGD, Tensor, f32_floor, make_rng

from oracles import Ref, close, finite_diff, random_graph


def plab_grads(fn, leaves, labels):
    ts = [Tensor(a, requires_grad=True) for a in leaves]
    loss = fn(T, ts, labels)
    return float(loss.data), T.grad(loss, ts)


def reference(fn, leaves, labels):
    """float64 value, finite-difference gradient and kink margin at float32-rounded leaves."""
    arrs = [np.asarray(a, DTYPE).astype(np.float64) for a in leaves]
    ref = Ref()
    val = float(fn(ref, arrs, labels))
    grads = finite_diff(lambda xs: fn(Ref(), xs, labels), arrs)
    return val, grads, ref.margin


def checked_graphs(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        fam, fn, leaves, labels = random_graph(rng)
        val, grads, margin = reference(fn, leaves, labels)
        if margin < 1e-2:
            continue
        out.append((fam, fn, leaves, labels, val, grads))
    return out


def test_random_graphs_match_finite_differences():
    for fam, fn, leaves, labels, val, ref_grads in checked_graphs(25, seed=1):
        got_val, got = plab_grads(fn, leaves, labels)
        assert abs(got_val - val) <= 1e-4 * max(1.0, abs(val)), fam
        for g, r in zip(got, ref_grads):
            assert close(g, r).all(), (fam, g, r)


def test_backward_accumulates_shared_subexpressions():
    a = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    loss = T.sum_all(T.add(T.mul(a, a), a))
    (g,) = T.grad(loss, [a])
    np.testing.assert_array_equal(g, 2 * a.data + 1)


def test_grad_clears_buffers_and_zero_for_unreachable():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    ga, gb = T.grad(T.sum_all(a), [a, b])
    np.testing.assert_array_equal(ga, np.ones((2, 2)))
    np.testing.assert_array_equal(gb, np.zeros((2, 2)))
    assert a.grad is None and b.grad is None


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.relu(a))


def test_no_broadcasting_in_elementwise_ops():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_values_raise():
    with pytest.raises(T.NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        Tensor(np.array([np.inf]))


def test_float32_storage():
    t = Tensor(np.arange(3, dtype=np.float64))
    assert t.data.dtype == np.float32


def test_cross_entropy_matches_reference_and_uniform_value():
    z = np.zeros((4, 5))
    loss = T.cross_entropy(Tensor(z), np.array([0, 1, 2, 3]))
    assert abs(float(loss.data) - np.log(5)) < 1e-6


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 6))
    w = rng.normal(size=(5, 3, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w)).data
    want = Ref().conv2d(x.astype(DTYPE).astype(np.float64), w.astype(DTYPE).astype(np.float64))
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_maxpool_routes_gradient_to_first_max_on_ties():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    (g,) = T.grad(T.sum_all(T.maxpool2(x)), [x])
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=2, max_size=6))
def test_softmax_rows_are_distributions(row):
    p = T.softmax(Tensor(np.array([row]))).data
    assert np.all(p >= 0)
    assert abs(float(p.sum()) - 1.0) < 1e-5


def test_sgd_matches_hand_update():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    p.grad = np.array([0.5, 0.5], DTYPE)
    opt.step()
    v1 = np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -1.0])
    np.testing.assert_allclose(p.data, [1.0, -1.0] - 0.1 * v1, rtol=1e-6)
    p.grad = np.array([0.0, 0.0], DTYPE)
    before = p.data.copy()
    opt.step()
    v2 = 0.9 * v1 + 0.01 * before
    np.testing.assert_allclose(p.data, before - 0.1 * v2, rtol=1e-6)


def test_sgd_zero_lr_leaves_params_unchanged():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = SGD([p], lr=0.0, momentum=0.9, weight_decay=0.1)
    p.grad = np.ones(2, DTYPE)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_functional_sgd_step_agrees_with_class():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2)).astype(DTYPE)
    g = rng.normal(size=(3, 2)).astype(DTYPE)
    p = Tensor(w.copy(), requires_grad=True)
    opt = SGD([p], 0.05, 0.9, 1e-3)
    p.grad = g.copy()
    opt.step()
    arr, buf = w.copy(), np.zeros_like(w)
    T.sgd_step([arr], [g], [buf], 0.05, 0.9, 1e-3)
    np.testing.assert_allclose(arr, p.data, rtol=1e-6)


def test_make_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, "x", 1).random(4)
    b = make_rng(5, "x", 1).random(4)
    c = make_rng(5, "x", 2).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 10.0, allow_nan=False))
def test_f32_floor_never_exceeds(x):
    y = f32_floor(x)
    assert y.dtype == np.float32
    assert float(y) <= x
    assert float(np.nextafter(y, np.float32(np.inf))) > x


def test_checkpoint_round_trip_and_corruption(tmp_path):
    arrs = [np.arange(6, dtype=DTYPE).reshape(2, 3), np.array(3.5, DTYPE), np.zeros((0, 2), DTYPE)]
    path = tmp_path / "w.plab"
    T.save_tensors(path, arrs)
    back = T.load_tensors(path)
    for a, b in zip(arrs, back):
        assert a.shape == b.shape
        np.testing.assert_array_equal(a, b)
    raw = path.read_bytes()
    (tmp_path / "bad.plab").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        T.load_tensors(tmp_path / "bad.plab")
    (tmp_path / "short.plab").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        T.load_tensors(tmp_path / "short.plab")
    (tmp_path / "long.plab").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        T.load_tensors(tmp_path / "long.plab")
