import threading

import numpy as np
import pytest

from shotfusion.autodiff import (
    ContractError,
    DomainError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat,
    exp,
    finite_diff_grad,
    getitem,
    log,
    matmul,
    mul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    sigmoid,
    stack,
    tanh,
    transpose,
)
from shotfusion.autodiff.tensor import current_tape


def grad_of(f, x):
    x = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(f(x))
    return x.grad


def check(f, x, tol=1e-6):
    x0 = np.array(x, dtype=np.float64)
    analytic = grad_of(f, x0)
    numeric = finite_diff_grad(f, Tensor(x0))
    err = np.max(np.abs(analytic - numeric) / np.maximum(1, np.abs(numeric)))
    assert err < tol, err


def test_matmul_identity():
    x = np.array([1.5, -2.0, 3.25])
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_reduce_mean_of_constant():
    assert reduce_mean(Tensor(np.full((4, 3), 2.5)), axis=0).data.tolist() == [2.5] * 3


def test_square_grad():
    assert grad_of(lambda x: x * x, 3.0) == 6.0


def test_sum_grad_is_ones():
    g = grad_of(lambda x: reduce_sum(x), np.zeros((2, 3, 4)))
    assert np.array_equal(g, np.ones((2, 3, 4)))


def test_finite_diff_examples():
    assert abs(finite_diff_grad(lambda x: x * x, Tensor(3.0)) - 6.0) < 1e-9
    assert abs(finite_diff_grad(lambda x: 2 * power(x, 3), Tensor(1.0)) - 6.0) < 1e-8


def test_matmul_weight_grad_outer_product(rng):
    x = rng.normal(size=4)
    W = rng.normal(size=(3, 4))
    g = grad_of(lambda w: reduce_sum(matmul(w, Tensor(x))), W)
    assert np.allclose(g, np.outer(np.ones(3), x), atol=0, rtol=1e-15)
    check(lambda w: reduce_sum(tanh(matmul(w, Tensor(x)))), W)


@pytest.mark.parametrize("f", [
    lambda x: reduce_sum(exp(x) * sigmoid(x)),
    lambda x: reduce_sum(log(x * x + 1.0) / (x + 3.0)),
    lambda x: reduce_sum(power(x + 3.0, 2.5)),
    lambda x: reduce_sum(tanh(reshape(x, (3, 2))) @ Tensor(np.ones((2, 2)))),
    lambda x: reduce_sum(getitem(x, (slice(1, None),)) - getitem(x, (slice(None, -1),))) ** 2,
    lambda x: reduce_mean(concat([x, mul(x, x)], axis=0) * reshape(stack([x, x], 0), (12,))),
    lambda x: reduce_sum(transpose(reshape(x, (2, 3))) * Tensor(np.arange(6.0).reshape(3, 2))),
])
def test_composite_grads(f, rng):
    check(f, rng.uniform(-1, 1, size=6))


def test_broadcast_grad_sums_to_shape(rng):
    b = rng.normal(size=3)
    a = rng.normal(size=(4, 3))
    g = grad_of(lambda t: reduce_sum(Tensor(a) * t), b)
    assert np.allclose(g, a.sum(axis=0))


def test_grad_accumulates_over_reuse():
    assert grad_of(lambda x: x * x + x * 2.0 + x, 1.0) == 5.0


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_domain_errors():
    with pytest.raises(DomainError):
        log(Tensor(np.array([1.0, -1.0])))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_rejected():
    x = Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        backward(reduce_sum(x * 10.0))


def test_tapes_are_thread_local():
    seen = []

    def worker():
        seen.append(current_tape())

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert seen[0] is not current_tape()
