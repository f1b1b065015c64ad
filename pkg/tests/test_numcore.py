import numpy as np
import pytest

from latent_cascade.numcore import (
    AdamState,
    DetachedNodeError,
    NonFiniteError,
    NonScalarLossError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    log_softmax,
    matmul,
    numerical_gradient,
    parameter,
    sample_standard_normal,
    tanh,
)


def test_matmul_identity_and_oracle():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_constructor_rejects_nan():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])


def test_square_gradient():
    x = parameter(3.0, name="x")
    with Tape() as tape:
        loss = x * x
    grads = backward(tape, loss, [x])
    assert grads[x] == pytest.approx(6.0)


def test_constant_loss_has_zero_gradients():
    w = parameter(np.ones((2, 2)), name="w")
    with Tape() as tape:
        loss = Tensor(5.0)
    grads = backward(tape, loss, [w])
    assert np.array_equal(grads[w], np.zeros((2, 2)))


def test_backward_rejects_non_scalar_loss():
    w = parameter(np.ones(3))
    with Tape() as tape:
        loss = w * 2.0
    with pytest.raises(NonScalarLossError):
        backward(tape, loss)


def test_backward_rejects_loss_from_other_tape():
    w = parameter(np.ones(2))
    with Tape():
        loss = (w * w).sum()
    with pytest.raises(DetachedNodeError):
        backward(Tape(), loss)


def test_gradients_match_finite_differences():
    rng = Rng(3)
    w = parameter(rng.normal((3, 2)), name="w")
    x = Tensor(rng.normal((4, 3)))
    target = rng.normal((4, 2))

    def fn():
        out = tanh(x @ w) - target
        return (out * out).sum() + log_softmax(x @ w, axis=-1).sum()

    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, [w])[w]
    numeric = numerical_gradient(fn, w)
    assert np.allclose(analytic, numeric, atol=1e-6)


def test_broadcast_add_gradient_is_summed():
    b = parameter(np.zeros(3), name="b")
    x = Tensor(np.ones((5, 3)))
    with Tape() as tape:
        loss = (x + b).sum()
    assert np.array_equal(backward(tape, loss)[b], np.full(3, 5.0))


def test_adam_first_step_is_lr_times_sign():
    p = parameter(np.zeros(4))
    grads = [np.array([0.5, -2.0, 1e-3, -7.0])]
    state = AdamState.for_params([p], lr=0.01)
    adam_step(state, [p], grads)
    assert np.allclose(p.data, -0.01 * np.sign(grads[0]), atol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = parameter(np.array([1.0, -1.0]))
    adam_step(AdamState.for_params([p]), [p], [np.zeros(2)])
    assert p.data.tolist() == [1.0, -1.0]


def test_adam_is_deterministic():
    def trajectory():
        rng = Rng(11)
        p = parameter(rng.normal(5))
        state = AdamState.for_params([p], lr=0.1)
        for _ in range(20):
            adam_step(state, [p], [2.0 * p.data])
        return p.data.copy()

    assert np.array_equal(trajectory(), trajectory())


def test_adam_shape_mismatch():
    p = parameter(np.zeros(3))
    with pytest.raises(ShapeError):
        adam_step(AdamState.for_params([p]), [p], [np.zeros(2)])


def test_adam_rejects_non_finite_gradient():
    p = parameter(np.zeros(2))
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.for_params([p]), [p], [np.array([1.0, np.inf])])


def test_standard_normal_moments():
    z = sample_standard_normal(Rng(0), (100_000,)).data
    assert -0.02 <= z.mean() <= 0.02
    assert 0.97 <= z.var() <= 1.03


def test_standard_normal_reproducible_and_empty():
    a = sample_standard_normal(Rng(5), (3, 4)).data
    b = sample_standard_normal(Rng(5), (3, 4)).data
    assert np.array_equal(a, b)
    assert sample_standard_normal(Rng(5), (0,)).shape == (0,)


def test_rng_children_are_independent_of_parent_draws():
    parent = Rng(9)
    first = parent.child(4).uniform(3)
    parent.uniform(100)
    assert np.array_equal(first, parent.child(4).uniform(3))
    assert not np.array_equal(Rng(9).child(0).uniform(3), Rng(9).child(1).uniform(3))
    assert not np.array_equal(Rng(9).child(1).uniform(3), Rng(9).child(1).child(0).uniform(3))


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        Rng(-1)
