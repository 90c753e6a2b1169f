import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualseg.autodiff import (
    BatchNormState,
    ComputeGraph,
    GraphError,
    ShapeError,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_output_size,
    global_avg_pool,
    gradcheck,
    maxpool2d,
    no_grad,
    precision,
    relative_error,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_nearest2x,
)
from dualseg.autodiff.tensor import default_dtype, is_grad_enabled, unbroadcast
from dualseg.gradcheck import OP_CASES, run_op_suite


def conv_reference(x, w, b, stride, pad):
    # direct six-loop cross-correlation
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + K, j * stride:j * stride + K]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (0 if b is None else b[o])
    return out


def maxpool_reference(x, k=3, s=2, p=1):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    Ho, Wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
    out = np.empty((B, C, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            out[:, :, i, j] = xp[:, :, i * s:i * s + k, j * s:j * s + k].max(axis=(2, 3))
    return out


# ---------------------------------------------------------------------------
# forward values against independent references
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)])
def test_conv2d_matches_loop_reference(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 9, 10))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    with precision("float64"):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv_reference(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((2, 5, 12, 16))
    w = rng.standard_normal((6, 5, 3, 3))
    b = rng.standard_normal(6)
    with precision("float64"):
        xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
        out = conv2d(xt, wt, bt, stride=2, padding=1)
        g = rng.standard_normal(out.shape)
        backward((out * Tensor(g)).sum())
    tx = torch.tensor(x, requires_grad=True)
    tw = torch.tensor(w, requires_grad=True)
    tb = torch.tensor(b, requires_grad=True)
    tout = torch.nn.functional.conv2d(tx, tw, tb, stride=2, padding=1)
    (tout * torch.tensor(g)).sum().backward()
    np.testing.assert_allclose(out.data, tout.detach().numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(xt.grad, tx.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(wt.grad, tw.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(bt.grad, tb.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_conv2d_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))


@pytest.mark.parametrize("size,k,s,p,expected", [(64, 7, 2, 3, 32), (32, 3, 2, 1, 16), (7, 1, 2, 0, 4), (5, 3, 1, 1, 5)])
def test_conv_output_size(size, k, s, p, expected):
    assert conv_output_size(size, k, s, p) == expected


def test_batchnorm_training_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 6)) * 3 + 2
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    state = BatchNormState.create(3, np.float64)
    with precision("float64"):
        out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), state).data
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)  # biased
    ref = gamma[None, :, None, None] * (x - mu) / np.sqrt(var + 1e-5) + beta[None, :, None, None]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    # running = 0.99 * running + 0.01 * batch, from zeros / ones
    np.testing.assert_allclose(state.running_mean, 0.01 * mu.ravel(), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.99 + 0.01 * var.ravel(), rtol=1e-12)


def test_batchnorm_inference_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    state = BatchNormState(np.array([0.5, -1.0]), np.array([4.0, 0.25]))
    with precision("float64"):
        out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False).data
    ref = (x - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    np.testing.assert_array_equal(state.running_mean, [0.5, -1.0])


def test_batchnorm_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((3, 4, 5, 5))
    with precision("float64"):
        xt = Tensor(x, requires_grad=True)
        gt, bt = Tensor(np.full(4, 1.5), requires_grad=True), Tensor(np.full(4, 0.2), requires_grad=True)
        out = batchnorm2d(xt, gt, bt, BatchNormState.create(4, np.float64))
        g = rng.standard_normal(out.shape)
        backward((out * Tensor(g)).sum())
    tx = torch.tensor(x, requires_grad=True)
    bn = torch.nn.BatchNorm2d(4, eps=1e-5, momentum=0.01).double()
    with torch.no_grad():
        bn.weight.fill_(1.5)
        bn.bias.fill_(0.2)
    tout = bn(tx)
    (tout * torch.tensor(g)).sum().backward()
    np.testing.assert_allclose(out.data, tout.detach().numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(xt.grad, tx.grad.numpy(), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(gt.grad, bn.weight.grad.numpy(), rtol=1e-10)


def test_batchnorm_rejects_single_value_per_channel():
    with pytest.raises(ValueError):
        batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    BatchNormState.create(2))


def test_maxpool_matches_reference(rng):
    x = rng.standard_normal((2, 3, 9, 8))
    with precision("float64"):
        out = maxpool2d(Tensor(x), 3, 2, 1).data
    np.testing.assert_array_equal(out, maxpool_reference(x))


def test_maxpool_padding_never_wins():
    x = -np.ones((1, 1, 4, 4)) * 5
    out = maxpool2d(Tensor(x), 3, 2, 1).data
    assert np.all(out == -5)


def test_upsample_nearest_duplicates_blocks():
    x = np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3)
    out = upsample_nearest2x(Tensor(x, dtype=np.float64)).data
    assert out.shape == (1, 1, 4, 6)
    np.testing.assert_array_equal(out[0, 0], np.kron(x[0, 0], np.ones((2, 2))))


@pytest.mark.parametrize("scale", [2, 4])
def test_upsample_bilinear_matches_torch(rng, scale):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((2, 3, 4, 5))
    with precision("float64"):
        out = upsample_bilinear(Tensor(x), scale).data
    ref = torch.nn.functional.interpolate(torch.tensor(x), scale_factor=scale, mode="bilinear",
                                          align_corners=False).numpy()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_upsample_bilinear_preserves_constants():
    out = upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 0.7)), 4).data
    np.testing.assert_allclose(out, 0.7, rtol=1e-6)


def test_concat_and_global_pool(rng):
    a, b = rng.standard_normal((2, 1, 3, 4)), rng.standard_normal((2, 2, 3, 4))
    with precision("float64"):
        out = concat_channels(Tensor(a), Tensor(b))
        pooled = global_avg_pool(out).data
    np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))
    np.testing.assert_allclose(pooled, np.concatenate([a, b], axis=1).mean(axis=(2, 3), keepdims=True))
    with pytest.raises(ShapeError):
        concat_channels(Tensor(a), Tensor(np.zeros((2, 1, 3, 5))))


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# graph semantics
# ---------------------------------------------------------------------------

def test_backward_accumulates_fanout():
    # y = x*x + x uses x three times
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
    backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_grads_accumulate_across_calls_until_zeroed():
    x = Tensor(np.array(1.5), requires_grad=True, dtype=np.float64)
    backward(x * 3.0)
    backward(x * 3.0)
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert y.is_leaf and not y.requires_grad


def test_graph_is_recorded_in_execution_order():
    x = Tensor(np.ones(2), requires_grad=True)
    y = relu(x * 2.0 + 1.0).sum()
    ops = [n.op for n in ComputeGraph.of(y)]
    assert ops == ["mul", "add", "relu", "sum"]


def test_precision_context_is_thread_local():
    seen = {}

    def worker():
        seen["dtype"] = default_dtype()

    with precision("float64"):
        assert default_dtype() == np.float64
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["dtype"] == np.float32
    assert default_dtype() == np.float32


@given(hnp.array_shapes(min_dims=1, max_dims=4, max_side=4), st.data())
@settings(max_examples=50, deadline=None)
def test_unbroadcast_inverts_broadcasting(shape, data):
    # drop or shrink some leading/inner dims to build a broadcastable source shape
    n_drop = data.draw(st.integers(0, len(shape) - 1))
    src = tuple(1 if data.draw(st.booleans()) else s for s in shape[n_drop:])
    grad = np.ones(shape)
    out = unbroadcast(grad, src)
    assert out.shape == src
    # each source entry receives one unit per output element it was copied to
    assert out.sum() == pytest.approx(grad.size)
    np.testing.assert_allclose(out, grad.size / max(1, int(np.prod(src))))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-10, 10)))
@settings(max_examples=50, deadline=None)
def test_relu_gradient_is_indicator(x):
    t = Tensor(x, requires_grad=True, dtype=np.float64)
    backward(relu(t).sum())
    np.testing.assert_array_equal(t.grad, (x > 0).astype(np.float64))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_conv2d_is_linear_in_input(cin, cout, size, seed):
    r = np.random.default_rng(seed)
    w = Tensor(r.standard_normal((cout, cin, 3, 3)), dtype=np.float64)
    a, b = r.standard_normal((2, 1, cin, size, size))
    lhs = conv2d(Tensor(a + 2 * b, dtype=np.float64), w, padding=1).data
    rhs = conv2d(Tensor(a, dtype=np.float64), w, padding=1).data + 2 * conv2d(Tensor(b, dtype=np.float64), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_relative_error_floor_handles_zero_entries():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-5
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_gradcheck_detects_wrong_gradient():
    from dualseg.autodiff.tensor import Tensor as T

    def bad_square(x):
        # forward x^2, backward claims 3x
        return T._from_op(x.data ** 2, "bad_square", (x,), lambda g: (3 * g * x.data,))

    assert gradcheck(bad_square, [np.array([0.5, 1.0, 2.0])]) > 0.1


def test_op_suite_passes_on_three_seeds():
    results = run_op_suite(range(3))
    assert {r.name for r in results} == set(OP_CASES)
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad
