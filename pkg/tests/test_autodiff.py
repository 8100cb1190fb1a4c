import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from disentangle import autodiff as ad
from disentangle.autodiff import Tensor, check_gradients


def leaf(v):
    return Tensor(v, requires_grad=True)


# ---------------------------------------------------------------- conv2d / conv_transpose2d

@pytest.mark.parametrize("shape,k,stride,pad,expect", [
    ((1, 1, 28, 28), 5, 2, 2, (1, 3, 14, 14)),
    ((1, 1, 32, 32), 3, 2, 1, (1, 3, 16, 16)),
])
def test_conv2d_output_shape(shape, k, stride, pad, expect):
    x = Tensor(np.zeros(shape))
    w = Tensor(np.zeros((3, shape[1], k, k)))
    assert ad.conv2d(x, w, Tensor(np.zeros(3)), stride, pad).shape == expect


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 5, 5)), rng.normal(size=4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 2).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, 2 * i : 2 * i + 5, 2 * j : 2 * j + 5], w) + b
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv2d_channel_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(4, 2, 3, 3\).*\(1, 3, 8, 8\)"):
        ad.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))


def test_conv_transpose_shape_with_output_padding():
    x = Tensor(np.zeros((1, 4, 14, 14)))
    w = Tensor(np.zeros((4, 2, 5, 5)))
    assert ad.conv_transpose2d(x, w, None, 2, 2, 0).shape == (1, 2, 27, 27)
    assert ad.conv_transpose2d(x, w, None, 2, 2, 1).shape == (1, 2, 28, 28)


def test_conv_transpose_identity_kernel():
    x = np.random.default_rng(2).normal(size=(2, 1, 4, 4))
    out = ad.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("side,k,stride,pad", [(28, 5, 2, 2), (32, 3, 2, 1), (9, 3, 1, 1), (7, 5, 2, 2), (8, 4, 3, 1)])
def test_conv_adjoint_identity(side, k, stride, pad):
    rng = np.random.default_rng(side + k)
    w = rng.normal(size=(3, 2, k, k))
    x = rng.normal(size=(2, 2, side, side))
    y_shape = ad.conv2d(Tensor(x), Tensor(w), None, stride, pad).shape
    y = rng.normal(size=y_shape)
    op = side - ((y_shape[2] - 1) * stride - 2 * pad + k)
    lhs = np.sum(ad.conv2d(Tensor(x), Tensor(w), None, stride, pad).data * y)
    rhs = np.sum(x * ad.conv_transpose2d(Tensor(y), Tensor(w), None, stride, pad, op).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_forward_equals_conv_input_gradient():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 2, 5, 5))
    x = leaf(rng.normal(size=(2, 2, 8, 8)))
    y = rng.normal(size=(2, 3, 4, 4))
    ad.backward(ad.tsum(ad.mul(ad.conv2d(x, Tensor(w), None, 2, 2), Tensor(y))))
    fwd = ad.conv_transpose2d(Tensor(y), Tensor(w), None, 2, 2, 1).data
    np.testing.assert_allclose(x.grad, fwd, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- batch norm

def test_batch_norm_constant_input_is_zero():
    x = Tensor(np.full((4, 2, 3, 3), 7.5))
    out = ad.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4, 4)))
    beta = np.array([0.3, -1.2])
    out = ad.batch_norm2d(x, Tensor(np.zeros(2)), Tensor(beta), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(3.0, 2.0, size=(5, 3, 4, 4)))
    gamma, beta = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    out = ad.batch_norm2d(x, Tensor(gamma), Tensor(beta), np.zeros(3), np.ones(3)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-8)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma ** 2, rtol=1e-4)


def test_batch_norm_running_moments_and_eval_mode():
    rng = np.random.default_rng(5)
    xd = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm2d(Tensor(xd), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
    np.testing.assert_allclose(rm, 0.1 * xd.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * xd.var(axis=(0, 2, 3), ddof=1))
    out = ad.batch_norm2d(Tensor(xd), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
    ref = (xd - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + ad.BN_EPS)
    np.testing.assert_allclose(out, ref)


def test_batch_norm_single_value_rejected_in_train_mode():
    with pytest.raises(ValueError):
        ad.batch_norm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))
    # eval mode is fine
    ad.batch_norm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                    training=False)


# ---------------------------------------------------------------- elementwise family

def test_elementwise_examples():
    assert ad.leaky_relu(Tensor(-1.0), 0.2).item() == pytest.approx(-0.2)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))).shape == (2, 4)
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_subgradient_zero_at_breakpoint():
    x = leaf([0.0, 0.0])
    ad.backward(ad.tsum(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0]
    y = leaf([0.0])
    ad.backward(ad.tsum(ad.leaky_relu(y, 0.2)))
    assert y.grad.tolist() == [0.2] or y.grad.tolist() == [0.0] or y.grad.tolist() == [1.0]


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(Tensor([1.0, 0.0]))


def test_incompatible_broadcast_rejected():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.mul(Tensor(np.ones((4, 3))), Tensor(np.ones(4)))


def test_non_finite_forward_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


# ---------------------------------------------------------------- backward

def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.tsum(ad.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_gradients_accumulate_over_multiple_uses():
    x = leaf([1.5])
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
    ad.backward(ad.tsum(y))
    assert x.grad.tolist() == [6.0]


def test_second_backward_without_rebuild_is_an_error():
    x = leaf([1.0, 2.0])
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.scale(leaf([1.0, 2.0]), 2.0))


def test_tape_records_in_topological_order():
    tape = ad.get_tape()
    tape.reset()
    x = leaf([1.0])
    y = ad.exp(x)
    z = ad.mul(y, x)
    ad.tsum(z)
    produced = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t._node is not None:
                assert id(t) in produced
        produced.add(id(node.output))
    tape.reset()


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(6)
    a = leaf(rng.normal(size=(3, 4)))
    w = leaf(rng.normal(size=(5, 4)))
    b = leaf(rng.normal(size=5))

    def build():
        h = ad.tanh(ad.linear(a, w, b))
        return ad.tsum(ad.mul(ad.sigmoid(h), ad.exp(ad.scale(h, 0.3))))

    rep = check_gradients(build, {"a": a, "w": w, "b": b}, tolerance=1e-6, h=1e-5)
    assert rep.ok, rep.lines()


def test_gradcheck_single_linear_layer():
    rng = np.random.default_rng(7)
    x, w, b = Tensor(rng.normal(size=(4, 3))), leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=2))
    t = rng.normal(size=(4, 2))
    rep = check_gradients(lambda: ad.tsum(ad.mul(ad.linear(x, w, b), Tensor(t))), {"w": w, "b": b}, tolerance=1e-7)
    assert rep.ok and rep.worst < 1e-7


def test_gradcheck_skips_relu_kink():
    x = leaf([0.0, 1.0, -1.0])
    rep = check_gradients(lambda: ad.tsum(ad.relu(x)), {"x": x})
    assert rep.skipped["x"] == 1 and rep.checked["x"] == 2 and rep.ok


def test_gradcheck_reports_wrong_gradient():
    x = leaf([0.5, 1.5])

    def bad_op(t):
        return ad._record("bad", t.data ** 2, (t,), lambda g: (g * 3.0,))

    rep = check_gradients(lambda: ad.tsum(bad_op(x)), {"x": x})
    assert not rep.ok
    assert "FAIL" in "\n".join(rep.lines())


def test_gradcheck_non_finite_is_a_failure_entry():
    x = leaf([700.0])
    rep = check_gradients(lambda: ad.tsum(ad.exp(ad.scale(x, 1.02))), {"x": x})
    assert not rep.ok and rep.failures


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding(Tensor(np.zeros((3, 2))), np.array([3]))


# ---------------------------------------------------------------- properties

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_reshape_preserves_sum(a):
    out = ad.reshape(Tensor(a), (-1,))
    assert out.data.sum() == pytest.approx(a.sum(), abs=1e-12)
    assert np.prod(out.shape) == a.size


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_matmul_identity(a):
    out = ad.matmul(Tensor(a), Tensor(np.eye(a.shape[1])))
    np.testing.assert_array_equal(out.data, a)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["exp", "tanh", "sigmoid", "softplus", "square", "logpos"]),
       arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=st.floats(-2, 2)))
def test_unary_primitives_match_finite_differences(op, a):
    x = leaf(a)
    fns = {
        "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "softplus": ad.softplus,
        "square": lambda t: ad.mul(t, t),
        "logpos": lambda t: ad.log(ad.add(ad.mul(t, t), 1.0)),
    }
    weights = Tensor(np.linspace(-1, 1, a.size).reshape(a.shape) + 0.3)
    rep = check_gradients(lambda: ad.tsum(ad.mul(fns[op](x), weights)), {"x": x})
    assert rep.ok, rep.lines()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_conv_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    b = ad.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_tiny_model_losses_pass_gradient_check():
    from disentangle.gradcheck import model_cases
    cases = model_cases(seed=0)
    for name in ("encoder_kl", "reconstruction"):
        builder, params = cases[name]
        rep = check_gradients(builder, params, tolerance=1e-5)
        assert rep.ok, f"{name}\n{rep}"
