import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adageo import tensor as T
from adageo.tensor import Tensor


def naive_conv2d(x, w, stride=1, pad=0):
    # plain loops, written independently of the library
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                acc += xp[n, c, i * stride + a, j * stride + b] * w[o, c, a, b]
                    out[n, o, i, j] = acc
    return out


# ---------------------------------------------------------------- forward ops

def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor([0., 0., 0., 0.])).data, [0.25] * 4)


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_conv2d_small_example_matches_sliding_sums():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d(Tensor(x), Tensor(w)).data
    expect = np.array([[[[0 + 2 + 9 + 16, 1 + 4 + 12 + 20], [3 + 8 + 18 + 28, 4 + 10 + 21 + 32]]]])
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(out, naive_conv2d(x, w))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2), (3, 1)])
def test_conv2d_matches_naive_loops(rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, pad), rtol=0, atol=1e-12)


def test_conv2d_direct_and_im2col_agree(rng):
    x, w = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(5, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1, method="im2col").data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1, method="direct").data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv^T(y)>
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    y_shape = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data * y)
    xt = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, pad=1).data
    assert xt.shape == x.shape
    assert lhs == pytest.approx(np.sum(x * xt), rel=1e-12)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_forward_op_dispatch():
    out = T.forward_op("softmax", [Tensor([1.0, 1.0])], {"axis": 0})
    np.testing.assert_array_equal(out.data, [0.5, 0.5])
    with pytest.raises(ValueError, match="unknown op kind"):
        T.forward_op("tanh", [Tensor([1.0])])


def test_non_finite_guard():
    with pytest.raises(FloatingPointError, match="exp"):
        T.exp(Tensor([1000.0]))


def test_recorded_only_when_grad_needed():
    a = Tensor([1.0, 2.0])
    assert T.add(a, a).is_leaf
    b = Tensor([1.0, 2.0], requires_grad=True)
    assert not T.add(b, a).is_leaf
    with T.no_grad():
        assert T.add(b, a).is_leaf


# ---------------------------------------------------------------- GRL

def test_grl_examples():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = T.grl(x, 1.0)
    np.testing.assert_array_equal(y.data, [1.5, -2.0])
    g = T.backward(T.sum_(y))[x]
    np.testing.assert_array_equal(g, [-1.0, -1.0])

    x = Tensor([0.3, 0.7], requires_grad=True)
    g = T.backward(T.sum_(T.mul(T.grl(x, 0.5), Tensor([2.0, 4.0]))))[x]
    np.testing.assert_array_equal(g, [-1.0, -2.0])


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_grl_rejects_nonpositive_lambda(lam):
    with pytest.raises(ValueError):
        T.grl(Tensor([1.0]), lam)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)),
       st.sampled_from([0.1, 0.5, 1.0, 2.5]))
def test_grl_property(x, up, lam):
    up = up[:len(x)]
    xt = Tensor(x, requires_grad=True)
    y = T.grl(xt, lam)
    assert np.array_equal(y.data, x)
    g = T.backward(T.sum_(T.mul(y, Tensor(up))))[xt]
    assert np.array_equal(g, -lam * up)


# ---------------------------------------------------------------- backward

def test_backward_examples():
    x = Tensor(np.zeros(3), requires_grad=True)
    np.testing.assert_array_equal(T.backward(T.sum_(x))[x], [1, 1, 1])
    x = Tensor([2.0, 3.0], requires_grad=True)
    np.testing.assert_array_equal(T.backward(T.sum_(T.mul(x, x)))[x], [4.0, 6.0])


def test_backward_composite_conv_relu_matmul(rng):
    w = rng.normal(size=(3, 2, 3, 3))
    m = rng.normal(size=(3 * 4 * 4, 2))

    def f(x):
        h = T.relu(T.conv2d(x, Tensor(w), stride=1, pad=1))
        return T.sum_(T.mul(T.matmul(T.reshape(h, (2, -1)), Tensor(m)), Tensor([[1.0, -2.0]])))

    rep = T.gradient_check(f, rng.normal(size=(2, 2, 4, 4)))
    assert rep.passed, rep.max_rel_error


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(x, x))


def test_backward_accumulates_additively(rng):
    xv = rng.normal(size=4)
    x = Tensor(xv, requires_grad=True)
    T.backward(T.sum_(T.mul(x, x)))
    T.backward(T.sum_(T.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad, 2 * xv + 3.0)


def test_additivity_of_sum_of_losses(rng):
    xv = rng.normal(size=5)
    a = lambda x: T.sum_(T.exp(x))
    b = lambda x: T.sum_(T.mul(x, x))
    x1 = Tensor(xv, requires_grad=True)
    g_sum = T.backward(T.add(a(x1), b(x1)))[x1]
    x2 = Tensor(xv, requires_grad=True)
    ga = T.backward(a(x2))[x2]
    x3 = Tensor(xv, requires_grad=True)
    gb = T.backward(b(x3))[x3]
    np.testing.assert_allclose(g_sum, ga + gb, rtol=1e-14)


def test_tape_topological_order(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    h = T.relu(T.matmul(x, w))
    loss = T.sum_(T.add(h, T.scale(h, 2.0)))
    tape = T.build_tape(loss)
    produced = {x.uid, w.uid}
    for e in tape:
        assert all(i in produced for i in e.input_ids)
        produced.add(e.output_id)
    assert len({e.output_id for e in tape}) == len(tape)
    assert tape[-1].output_id == loss.uid


def test_diamond_graph_visits_shared_node_once():
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, x)
    g = T.backward(T.add(y, y))[x]
    np.testing.assert_array_equal(g, [12.0])


# ---------------------------------------------------------------- gradient check

def test_gradcheck_l1_passes(rng):
    c = rng.normal(size=6)
    x0 = c + np.sign(rng.normal(size=6)) * rng.uniform(0.1, 1.0, 6)
    assert T.gradient_check(lambda x: T.l1_distance(x, Tensor(c)), x0).passed


def test_gradcheck_cross_entropy_passes(rng):
    labels = np.array([0, 2, 1])
    assert T.gradient_check(lambda z: T.cross_entropy(z, labels), rng.normal(size=(3, 4))).passed


def test_gradcheck_flags_abs_kink():
    rep = T.gradient_check(lambda x: T.l1_distance(x, Tensor([0.0]), "sum"), np.array([0.0]))
    assert rep.kink and not rep.passed


def test_gradcheck_rejects_non_finite_point():
    with pytest.raises(ValueError, match="not finite"):
        T.gradient_check(lambda x: T.sum_(x), np.array([np.inf]))


def test_gradcheck_catches_wrong_gradient():
    def bad(x):
        # forward x**2, backward pretends it is 3x
        return T._make("bad", np.array(np.sum(x.data ** 2)), (x,), lambda g: (g * 3 * x.data,))
    assert not T.gradient_check(bad, np.array([0.7, -1.2])).passed


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    st_ = T.AdamState.for_params([p])
    T.adam_step([p], {p: np.zeros(2)}, st_, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_computed():
    p = Tensor([1.0], requires_grad=True)
    st_ = T.AdamState.for_params([p])
    T.adam_step([p], {p: np.array([1.0])}, st_, 0.1)
    # m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert st_.step == 1


def test_adam_two_steps_decrease_quadratic():
    p = Tensor([3.0, -1.0], requires_grad=True)
    st_ = T.AdamState.for_params([p])
    losses = []
    for _ in range(2):
        loss = T.sum_(T.mul(p, p))
        losses.append(loss.item())
        T.adam_step([p], T.backward(loss), st_, 0.1)
    losses.append(float(np.sum(p.data ** 2)))
    assert st_.step == 2
    assert losses[0] > losses[1] > losses[2]


def test_adam_missing_gradient_rejected():
    p, q = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    st_ = T.AdamState.for_params([p, q])
    with pytest.raises(ValueError, match="missing gradient"):
        T.adam_step([p, q], {p: np.ones(1)}, st_, 0.1)


def test_adam_state_shape_mismatch_rejected():
    p = Tensor([1.0, 2.0], requires_grad=True)
    st_ = T.AdamState.for_params([Tensor([1.0])])
    with pytest.raises(ValueError, match="state"):
        T.adam_step([p], {p: np.ones(2)}, st_, 0.1)


# ---------------------------------------------------------------- properties

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one_and_positive(x):
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)
    assert np.all(s > 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(x):
    y = T.l2_normalize(Tensor(x), axis=1, eps=1e-12).data
    norms = np.linalg.norm(x, axis=1)
    ok = norms > 1e-12
    assert np.all(np.abs(np.linalg.norm(y[ok], axis=1) - 1) <= 1e-10)


@given(st.integers(0, 2 ** 31 - 1))
def test_ops_are_deterministic(seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(1, 2, 5, 5)), r.normal(size=(3, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert a.tobytes() == b.tobytes()
