import math

import numpy as np
import pytest

from src import tensor as T
from src.errors import DimensionError, DomainError
from src.tensor import Tensor


def test_matmul_identity_and_basis_selection():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)
    out = Tensor([[1.0, 0.0]]) @ Tensor([[5.0], [7.0]])
    assert out.data.tolist() == [[5.0]]


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_closed_form():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)
    dc = rng.normal(size=(3, 2))
    T.matmul(a, b).backward(dc)
    assert np.allclose(a.grad, dc @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ dc)


def test_conv2d_ones_with_unit_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.full((1, 1, 1, 1), 2.0))
    out = T.conv2d(x, k, stride=1, pad=0)
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 2.0)


def test_conv2d_delta_impulse_matches_direct_loop():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data

    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expected[i, j] = np.sum(x[0, 0, i : i + 3, j : j + 3] * k[0, 0])
    assert np.array_equal(out[0, 0], expected)
    assert np.array_equal(out[0, 0], k[0, 0, ::-1, ::-1])


def test_conv2d_stride_and_padding_geometry():
    x = Tensor(np.ones((2, 3, 7, 7)))
    k = Tensor(np.ones((4, 3, 3, 3)))
    assert T.conv2d(x, k, stride=2, pad=1).shape == (2, 4, 4, 4)


@pytest.mark.parametrize(
    "x_shape,k_shape,stride,pad",
    [
        ((1, 2, 5, 5), (1, 3, 3, 3), 1, 0),
        ((1, 1, 2, 2), (1, 1, 3, 3), 1, 0),
        ((1, 1, 5, 5), (1, 1, 3, 3), 0, 0),
        ((1, 5, 5), (1, 1, 3, 3), 1, 0),
    ],
)
def test_conv2d_invalid_geometry_raises(x_shape, k_shape, stride, pad):
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones(x_shape)), Tensor(np.ones(k_shape)), stride=stride, pad=pad)


def test_relu_values_and_derivative():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    T.sum(y).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_broadcasting_limited_to_documented_cases():
    a = Tensor(np.ones((4, 3)))
    assert (a + Tensor(np.ones(3))).shape == (4, 3)
    assert (a + Tensor(np.ones(1))).shape == (4, 3)
    assert (a * Tensor(np.ones((4, 3)))).shape == (4, 3)
    with pytest.raises(DimensionError):
        a + Tensor(np.ones(4))
    with pytest.raises(DimensionError):
        a - Tensor(np.ones((4, 1)))


def test_bias_broadcast_gradient_sums_rows():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    T.sum(x + b).backward()
    assert b.grad.tolist() == [4.0, 4.0, 4.0]


def test_softmax_symmetric_and_analytic_cases():
    for tau in (0.5, 1.0, 7.0):
        p = T.softmax_with_temperature(Tensor([[0.0, 0.0]]), tau)
        assert np.allclose(p.data, [[0.5, 0.5]])
    p = T.softmax_with_temperature(Tensor([[math.log(3.0), 0.0]], dtype=np.float64), 1.0)
    assert p.data == pytest.approx(np.array([[0.75, 0.25]]))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(1)
    z = rng.normal(scale=20.0, size=(50, 10))
    p = T.softmax_with_temperature(Tensor(z, dtype=np.float64), 1.5).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-6)
    shifted = T.softmax_with_temperature(Tensor(z + 123.0, dtype=np.float64), 1.5).data
    assert np.allclose(p, shifted, atol=1e-12)


def test_softmax_higher_temperature_has_higher_entropy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.normal(size=(1, 6))
        p1 = T.softmax_array(z, 1.0)
        p10 = T.softmax_array(z, 10.0)
        h = lambda p: -np.sum(p * np.log(p))  # noqa: E731
        assert h(p10) > h(p1)


@pytest.mark.parametrize("tau", [0.0, -1.0, float("nan")])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(DomainError):
        T.softmax_with_temperature(Tensor([[1.0, 2.0]]), tau)


def test_cross_entropy_examples():
    target = Tensor([[0.0, 1.0, 0.0]])
    certain = Tensor([[0.0, 1.0, 0.0]])
    assert T.cross_entropy(target, certain).item() == pytest.approx(0.0, abs=1e-12)
    c = 5
    uniform = Tensor(np.full((2, c), 1.0 / c), dtype=np.float64)
    assert T.cross_entropy(uniform, uniform).item() == pytest.approx(math.log(c))


def test_cross_entropy_log_floor_keeps_loss_finite():
    target = Tensor([[1.0, 0.0]], dtype=np.float64)
    model = Tensor([[0.0, 1.0]], dtype=np.float64)
    loss = T.cross_entropy(target, model).item()
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_non_distributions():
    with pytest.raises(DomainError):
        T.cross_entropy(Tensor([[0.5, 0.6]]), Tensor([[0.5, 0.5]]))
    with pytest.raises(DomainError):
        T.cross_entropy(Tensor([[1.0, 0.0]]), Tensor([[1.5, -0.5]]))
    with pytest.raises(DimensionError):
        T.cross_entropy(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0, 0.0]]))


def test_cross_entropy_of_softmax_gradient_is_p_minus_target():
    z = Tensor([[0.3, -1.2, 2.0, 0.1]], requires_grad=True, dtype=np.float64)
    target = T.one_hot([2], 4, dtype=np.float64)
    p = T.softmax_with_temperature(z, 1.0)
    T.cross_entropy(target, p).backward()
    assert np.allclose(z.grad, p.data - target.data, atol=1e-12)


def test_gradient_accumulation_is_additive():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    T.sum(x * x).backward()
    first = x.grad.copy()
    T.sum(x * x).backward()
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpressions_accumulate_against_scalar_oracle():
    value = 1.7
    x = Tensor([value], requires_grad=True, dtype=np.float64)
    b = x * x
    c = b + x
    d = b * c
    T.sum(d).backward()
    # d = x^2 (x^2 + x) = x^4 + x^3
    assert x.grad[0] == pytest.approx(4 * value**3 + 3 * value**2)


def test_tape_orders_nodes_after_their_inputs():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    z = y + x
    tape = T.Tape.from_output(z)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    assert position[id(x)] < position[id(y)] < position[id(z)]
    assert len(tape.nodes) == len({id(n) for n in tape.nodes})


def test_backward_requires_seed_for_non_scalar():
    y = Tensor(np.ones(3), requires_grad=True) * 2.0
    with pytest.raises(DimensionError):
        y.backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.is_leaf


def test_batch_norm_training_updates_running_stats_and_eval_uses_them():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(loc=2.0, size=(8, 3, 2, 2)), dtype=np.float64)
    gamma = Tensor(np.ones(3), dtype=np.float64)
    beta = Tensor(np.zeros(3), dtype=np.float64)
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm(x, gamma, beta, rm, rv, training=True)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    assert np.allclose(rm, 0.1 * batch_mean)
    frozen = T.batch_norm(x, gamma, beta, rm, rv, training=False)
    expected = (x.data - rm.reshape(1, -1, 1, 1)) / np.sqrt(rv.reshape(1, -1, 1, 1) + 1e-5)
    assert np.allclose(frozen.data, expected)


def test_sgd_step_examples():
    w = [np.array([0.5, -1.0])]
    g = [np.array([3.0, 4.0])]
    same, _ = T.sgd_step(w, g, lr=0.0)
    assert np.array_equal(same[0], w[0])

    (p,), _ = T.sgd_step([np.array([1.0])], [np.array([1.0])], lr=0.1)
    assert p[0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps_match_hand_computation():
    w = [np.array([1.0])]
    w1, v1 = T.sgd_step(w, [np.array([1.0])], lr=0.1, momentum=0.9)
    assert v1[0][0] == pytest.approx(1.0)
    w2, v2 = T.sgd_step(w1, [np.array([2.0])], lr=0.1, momentum=0.9, velocities=v1)
    assert v2[0][0] == pytest.approx(0.9 * 1.0 + 2.0)
    assert w2[0][0] == pytest.approx(1.0 - 0.1 * 1.0 - 0.1 * 2.9)


def test_sgd_weight_decay_and_shape_check():
    (p,), _ = T.sgd_step([np.array([2.0])], [np.array([0.0])], lr=0.5, weight_decay=0.1)
    assert p[0] == pytest.approx(2.0 - 0.5 * 0.2)
    with pytest.raises(DimensionError):
        T.sgd_step([np.ones(2)], [np.ones(3)], lr=0.1)


def test_sgd_optimizer_updates_in_place():
    w = Tensor([1.0, 1.0], requires_grad=True, dtype=np.float64)
    opt = T.SGD({"w": w}, lr=0.1, momentum=0.9)
    w.grad = np.array([1.0, -1.0])
    opt.step()
    assert w.data.tolist() == pytest.approx([0.9, 1.1])


def test_cosine_lr_schedule():
    assert T.cosine_lr(0.05, 0, 10) == pytest.approx(0.05)
    assert T.cosine_lr(0.05, 5, 10) == pytest.approx(0.025)
    assert T.lr_for_epoch("constant", 0.05, 7, 10) == 0.05
    with pytest.raises(DomainError):
        T.lr_for_epoch("step", 0.05, 0, 10)


def test_one_hot_rejects_out_of_range():
    assert T.one_hot([0, 2], 3).data.tolist() == [[1, 0, 0], [0, 0, 1]]
    with pytest.raises(DomainError):
        T.one_hot([3], 3)
