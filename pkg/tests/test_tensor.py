import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bers.errors import ConfigurationError, ContractError, DegenerateBatchError, DimensionError, LabelError
from bers.gradcheck import check_gradients, numerical_grad, relative_error
from bers.tensor import (
    SGD,
    RunningStats,
    Tape,
    Tensor,
    backward,
    batch_norm,
    concat,
    conv3d,
    feature_distance,
    fully_connected,
    global_avg_pool,
    mse_distance,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def reference_conv(x, w, b, stride, pad, groups):
    """Direct nested-loop convolution, independent of the im2col kernel."""
    n, c, t, h, wd = x.shape
    co, cg, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    to = (t + 2 * pad[0] - kt) // stride[0] + 1
    ho = (h + 2 * pad[1] - kh) // stride[1] + 1
    wo = (wd + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((n, co, to, ho, wo))
    per = co // groups
    for o in range(co):
        g = o // per
        for i in range(to):
            for j in range(ho):
                for k in range(wo):
                    patch = xp[:, g * cg : (g + 1) * cg,
                               i * stride[0] : i * stride[0] + kt,
                               j * stride[1] : j * stride[1] + kh,
                               k * stride[2] : k * stride[2] + kw]
                    out[:, o, i, j, k] = np.tensordot(patch, w[o], axes=4)
    if b is not None:
        out += b[None, :, None, None, None]
    return out


# --------------------------------------------------------------------- conv3d


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 4, 5, 5))
    w = np.zeros((3, 3, 1, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_identity_kernel_single_channel(rng):
    x = rng.standard_normal((1, 1, 3, 4, 2))
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_center_is_27():
    out = conv3d(Tensor(np.ones((1, 1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
    assert out.shape == (1, 1, 5, 5, 5)
    assert out.data[0, 0, 2, 2, 2] == 27.0
    assert out.data[0, 0, 0, 0, 0] == 8.0


@given(
    n=st.integers(1, 2), g=st.integers(1, 3), cpg=st.integers(1, 2), opg=st.integers(1, 2),
    t=st.integers(1, 5), h=st.integers(1, 6), w=st.integers(1, 6),
    k=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    s=st.tuples(st.integers(1, 2), st.integers(1, 2), st.integers(1, 2)),
    p=st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loop_reference(n, g, cpg, opg, t, h, w, k, s, p, seed):
    if any(dim + 2 * pp < kk for dim, pp, kk in zip((t, h, w), p, k)):
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, g * cpg, t, h, w))
    wt = r.standard_normal((g * opg, cpg, *k))
    b = r.standard_normal(g * opg)
    out = conv3d(Tensor(x), Tensor(wt), Tensor(b), s, p, g)
    ref = reference_conv(x, wt, b, s, p, g)
    assert out.shape == ref.shape
    for axis, (dim, kk, ss, pp) in enumerate(zip((t, h, w), k, s, p)):
        assert out.shape[2 + axis] == (dim + 2 * pp - kk) // ss + 1
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_grouped_conv_equals_sliced_convs(rng):
    x = rng.standard_normal((2, 6, 3, 4, 4))
    w = rng.standard_normal((9, 2, 3, 3, 3))
    b = rng.standard_normal(9)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 1, groups=3)
    parts = [
        conv3d(Tensor(x[:, 2 * i : 2 * i + 2]), Tensor(w[3 * i : 3 * i + 3]), Tensor(b[3 * i : 3 * i + 3]), 1, 1)
        for i in range(3)
    ]
    np.testing.assert_allclose(out.data, np.concatenate([q.data for q in parts], axis=1), rtol=1e-13, atol=1e-13)


def test_conv_gradient_example():
    r = np.random.default_rng(7)
    x, w, b = T(r.standard_normal((2, 4, 3, 4, 4))), T(r.standard_normal((4, 2, 3, 3, 3))), T(r.standard_normal(4))
    err = check_gradients(lambda x, w, b: conv3d(x, w, b, (1, 2, 1), 1, 2), [x, w, b])
    assert err < 1e-6


def test_conv_errors(rng):
    x = Tensor(rng.standard_normal((1, 4, 3, 3, 3)))
    with pytest.raises(ConfigurationError):
        conv3d(x, Tensor(np.ones((3, 4, 1, 1, 1))), groups=2)
    with pytest.raises(DimensionError, match="channel"):
        conv3d(x, Tensor(np.ones((2, 3, 1, 1, 1))))
    with pytest.raises(DimensionError, match="H axis"):
        conv3d(x, Tensor(np.ones((2, 4, 1, 5, 1))), padding=(0, 0, 0))
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.ones((4, 3, 3))), Tensor(np.ones((2, 4, 1, 1, 1))))


# ----------------------------------------------------------------------- relu


def test_relu_values_and_zero_subgradient():
    x = T([-1.0, 0.0, 2.0])
    with Tape() as tape:
        y = relu(x)
        loss = y.sum()
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_relu_all_negative(rng):
    x = T(-np.abs(rng.standard_normal((3, 4))) - 0.1)
    with Tape() as tape:
        loss = (relu(x) * Tensor(rng.standard_normal((3, 4)))).sum()
    backward(loss, tape)
    assert not relu(x).data.any()
    np.testing.assert_array_equal(x.grad, np.zeros((3, 4)))


def test_relu_gradient(rng):
    a = rng.standard_normal((4, 5))
    a[np.abs(a) < 1e-3] = 0.5
    assert check_gradients(relu, [T(a)]) < 1e-6


# ------------------------------------------------------------------ batch_norm


def test_batch_norm_train_statistics(rng):
    x = Tensor(rng.standard_normal((4, 3, 2, 5, 5)) * 4 + 7)
    y = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(3), train=True)
    axes = (0, 2, 3, 4)
    assert np.abs(y.data.mean(axis=axes)).max() < 1e-9
    assert np.abs(y.data.var(axis=axes) - 1).max() < 1e-6


def test_batch_norm_eval_identity(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    y = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(3), train=False)
    np.testing.assert_allclose(y.data, x, atol=1e-5 * np.abs(x).max())
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), rtol=1e-14)


def test_batch_norm_running_stats(rng):
    x = rng.standard_normal((3, 2, 2, 2, 2)) * 2 + 1
    stats = RunningStats(2)
    batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, train=True)
    axes = (0, 2, 3, 4)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=axes), rtol=1e-13)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=axes, ddof=1), rtol=1e-13)


def test_batch_norm_degenerate():
    with pytest.raises(DegenerateBatchError):
        batch_norm(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats(2), True)
    # eval mode has no such constraint
    batch_norm(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats(2), False)


def test_batch_norm_gradient(rng):
    x, g, b = T(rng.standard_normal((4, 3, 2, 2, 2))), T(rng.standard_normal(3)), T(rng.standard_normal(3))
    err = check_gradients(lambda x, g, b: batch_norm(x, g, b, RunningStats(3), True), [x, g, b])
    assert err < 1e-5


# ------------------------------------------------------------- pool, fc, loss


def test_global_avg_pool():
    assert np.all(global_avg_pool(Tensor(np.full((2, 3, 2, 2, 2), 1.75))).data == 1.75)
    assert global_avg_pool(Tensor(np.arange(1.0, 5.0).reshape(1, 1, 1, 1, 4))).data[0, 0] == 2.5
    x = T(np.zeros((2, 3, 2, 3, 4)))
    up = np.random.default_rng(0).standard_normal((2, 3))
    with Tape() as tape:
        loss = (global_avg_pool(x) * Tensor(up)).sum()
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, np.broadcast_to(up[:, :, None, None, None] / 24, x.shape), rtol=1e-15)


def test_fully_connected(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    assert fully_connected(Tensor(np.ones((1, 6))), Tensor(np.ones((1, 6))), Tensor(np.zeros(1))).data[0, 0] == 6
    with pytest.raises(DimensionError):
        fully_connected(Tensor(x), Tensor(np.ones((2, 5))))
    err = check_gradients(fully_connected, [T(x), T(rng.standard_normal((5, 4))), T(rng.standard_normal(5))])
    assert err < 1e-8


def test_cross_entropy_values():
    assert softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((2, 5))
    logits[[0, 1], [2, 4]] = 1000.0
    assert softmax_cross_entropy(Tensor(logits), [2, 4]).item() < 1e-9


def test_cross_entropy_gradient(rng):
    logits = T(rng.standard_normal((5, 4)) * 3)
    labels = np.array([0, 3, 1, 1, 2])
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, labels)
    backward(loss, tape)
    expected = (softmax(logits.data) - np.eye(4)[labels]) / 5
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-12, atol=1e-15)
    arr = logits.data.copy()
    num = numerical_grad(lambda: softmax_cross_entropy(Tensor(arr), labels).item(), arr)
    assert relative_error(logits.grad, num) < 1e-7


def test_cross_entropy_label_errors():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, -1])
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0.5, 1])


@given(st.integers(1, 6), st.integers(2, 9), st.floats(0.1, 300), st.integers(0, 2**16))
def test_softmax_rows_sum_to_one(n, k, scale, seed):
    p = softmax(np.random.default_rng(seed).standard_normal((n, k)) * scale)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12
    assert np.all(np.isfinite(p))


def test_mse_distance(rng):
    a = rng.standard_normal((2, 3))
    assert mse_distance(Tensor(a), Tensor(a.copy())).item() == 0.0
    assert mse_distance(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == 2.5
    with pytest.raises(DimensionError):
        mse_distance(Tensor(a), Tensor(np.ones((3, 2))))
    assert check_gradients(mse_distance, [T(a), T(rng.standard_normal((2, 3)))]) < 1e-8


def test_feature_distance_kinds(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    d = a - b
    assert feature_distance(Tensor(a), Tensor(b), "mse").item() == pytest.approx(np.mean(d * d), rel=1e-14)
    # per-sample norms, averaged over the batch
    per = [np.sum(d[i] ** 2) for i in range(2)]
    assert feature_distance(Tensor(a), Tensor(b), "sq_l2").item() == pytest.approx(np.mean(per), rel=1e-14)
    assert feature_distance(Tensor(a), Tensor(b), "l2").item() == pytest.approx(np.mean(np.sqrt(per)), rel=1e-14)
    for kind in ("mse", "sq_l2", "l2"):
        assert check_gradients(lambda x, y: feature_distance(x, y, kind), [T(a), T(b)]) < 1e-7
    with pytest.raises(ConfigurationError):
        feature_distance(Tensor(a), Tensor(b), "l1")


# ------------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = T(rng.standard_normal((3, 2)))
    with Tape() as tape:
        loss = x.sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_mse_at_target_is_zero():
    c = np.full((2, 2), 3.0)
    x = T(c.copy())
    with Tape() as tape:
        loss = mse_distance(x, Tensor(c))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_backward_accumulates(rng):
    x = T(rng.standard_normal(4))
    for _ in range(3):
        with Tape() as tape:
            loss = (x * 2.0).sum()
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.full(4, 6.0))


def test_backward_contract_errors(rng):
    x = T(rng.standard_normal(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)
    with pytest.raises(ContractError):
        backward(Tensor(1.0), tape)
    with Tape() as other:
        pass
    with Tape() as tape2:
        loss = x.sum()
    with pytest.raises(ContractError):
        backward(loss, other)


def test_tape_replayed_once_in_reverse(rng):
    x = T(rng.standard_normal((2, 3)))
    w = T(rng.standard_normal((4, 3)))
    with Tape() as tape:
        h = relu(fully_connected(x, w))
        loss = softmax_cross_entropy(concat([h, h * 0.5], axis=1), [1, 2])
    visited = []

    def wrap(i, rec):
        def bwd(g):
            visited.append(i)
            return rec.backward(g)
        return rec._replace(backward=bwd)

    tape.records[:] = [wrap(i, r) for i, r in enumerate(tape.records)]
    backward(loss, tape)
    assert visited == list(range(len(tape.records)))[::-1]
    assert x.grad is not None and w.grad is not None


def test_no_recording_without_grad_or_tape(rng):
    x = Tensor(rng.standard_normal((1, 2, 2, 3, 3)))
    w = Tensor(rng.standard_normal((2, 2, 1, 1, 1)))
    with Tape() as tape:
        relu(conv3d(x, w))
    assert len(tape) == 0
    y = relu(conv3d(x, Tensor(w.data, requires_grad=True)))
    assert y.is_leaf and not y.requires_grad


def test_composite_network_gradient():
    r = np.random.default_rng(3)
    x = T(r.standard_normal((2, 2, 3, 4, 4)))
    w = T(r.standard_normal((4, 1, 3, 3, 3)) * 0.3)
    fc = T(r.standard_normal((3, 4)))
    bias = T(r.standard_normal(3))
    labels = np.array([2, 0])

    def net(x, w, fc, bias):
        return softmax_cross_entropy(fully_connected(global_avg_pool(relu(conv3d(x, w, None, 1, 1, 2))), fc, bias), labels)

    assert check_gradients(net, [x, w, fc, bias]) < 1e-5


def test_forward_bit_deterministic(rng):
    x = rng.standard_normal((2, 4, 3, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    a = conv3d(Tensor(x), Tensor(w), None, 2, 1, 2).data
    b = conv3d(Tensor(x.copy()), Tensor(w.copy()), None, 2, 1, 2).data
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 2**16))
def test_finite_forward_and_backward(seed):
    r = np.random.default_rng(seed)
    x = T(r.standard_normal((2, 2, 2, 3, 3)) * 50)
    w = T(r.standard_normal((2, 2, 2, 2, 2)))
    with Tape() as tape:
        y = batch_norm(relu(conv3d(x, w, padding=1)), T(np.ones(2)), T(np.zeros(2)), RunningStats(2), True)
        loss = softmax_cross_entropy(fully_connected(global_avg_pool(y), T(r.standard_normal((3, 2)))), [0, 2])
    backward(loss, tape)
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(w.grad))
    assert x.grad.shape == x.shape


# ------------------------------------------------------------------------ sgd


def test_sgd_examples():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([0.5])
    sgd_step({"w": w}, 0.1, 0.0, {})
    assert w.data[0] == pytest.approx(0.95, abs=1e-15)

    w = Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.array([0.0])
    sgd_step({"w": w}, 0.1, 0.9, {})
    assert w.data[0] == 2.0

    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = SGD({"w": w}, lr=0.1, momentum=0.9)
    w.grad = np.array([1.0])
    opt.step()
    assert w.data[0] == pytest.approx(-0.1, abs=1e-15)
    opt.step()
    assert w.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_rejects_bad_hyperparameters():
    w = Tensor(np.ones(1), requires_grad=True)
    w.grad = np.ones(1)
    with pytest.raises(ConfigurationError):
        sgd_step({"w": w}, 0.0, 0.5, {})
    with pytest.raises(ConfigurationError):
        sgd_step({"w": w}, 0.1, 1.0, {})
