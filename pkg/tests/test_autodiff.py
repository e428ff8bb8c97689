import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlrbfn import autodiff as ad
from mlrbfn.autodiff import Tape, Tensor
from mlrbfn.errors import DimensionError, DomainError, UsageError

from conftest import assert_gradients_match, central_difference


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ a).data, a.data)


def test_matmul_dot_product():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert (a @ b).item() == 11.0


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_of_sum_is_column_sums(rng):
    # d/dA sum(A @ B) = row-broadcast of the column sums of B.
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    assert_gradients_match(
        lambda ta, tb: ad.sum_all(ta @ tb),
        lambda na, nb: float((na @ nb).sum()),
        [a, b],
    )
    analytic = np.tile(b.sum(axis=1), (3, 1))
    numeric = central_difference(lambda na: float((na @ b).sum()), [a])[0]
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-7)


def test_cdist_pow_345_triangle():
    d = ad.cdist_pow(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]]), 2)
    assert d.item() == 25.0


def test_cdist_pow_zero_diagonal_exact(rng):
    x = rng.standard_normal((7, 3))
    for k in (1, 2, 3):
        d = ad.cdist_pow(Tensor(x), Tensor(x.copy()), k)
        assert np.all(np.diag(d.data) == 0.0)


def test_cdist_pow_manhattan():
    d = ad.cdist_pow(Tensor([[1.0, 2.0]]), Tensor([[4.0, 6.0]]), 1)
    assert d.item() == 7.0


def test_cdist_pow_feature_mismatch():
    with pytest.raises(DimensionError):
        ad.cdist_pow(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 2)


def test_cdist_pow_rejects_small_norm_order():
    with pytest.raises(DomainError):
        ad.cdist_pow(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), 0.5)


@pytest.mark.parametrize("k", [1, 2, 3, 1.5])
def test_cdist_pow_gradients(rng, k):
    # Random points keep coordinates apart, away from the k=1 kink.
    x = rng.standard_normal((4, 3))
    c = rng.standard_normal((5, 3)) + 3.0

    def dist_pow_np(nx, nc):
        diff = np.abs(nx[:, None, :] - nc[None, :, :]) ** k
        return float(diff.sum() * 0.137)  # scale injects a nontrivial upstream grad

    assert_gradients_match(
        lambda tx, tc: ad.sum_all(ad.cdist_pow(tx, tc, k) * 0.137),
        dist_pow_np,
        [x, c],
    )


def test_softplus_at_zero():
    assert ad.softplus(Tensor([[0.0]])).item() == pytest.approx(math.log(2.0))


def test_softplus_asymptote():
    assert ad.softplus(Tensor([[100.0]])).item() == pytest.approx(100.0, abs=1e-12)


def test_softplus_inversion_identity():
    y = ad.softplus(Tensor([[3.0]])).item()
    assert ad.inverse_softplus(y) == pytest.approx(3.0, abs=1e-9)


def test_softplus_gradient(rng):
    x = rng.standard_normal((3, 4)) * 3.0
    assert_gradients_match(
        lambda t: ad.sum_all(ad.softplus(t)),
        lambda n: float(np.log1p(np.exp(n)).sum()),
        [x],
    )


def test_inverse_softplus_values():
    assert ad.inverse_softplus(4.0) == pytest.approx(math.log(math.expm1(4.0)))
    assert ad.inverse_softplus(math.log(2.0)) == pytest.approx(0.0, abs=1e-12)
    assert ad.inverse_softplus(7.0) == 7.0  # large-value passthrough


def test_inverse_softplus_domain():
    with pytest.raises(DomainError):
        ad.inverse_softplus(0.0)
    with pytest.raises(DomainError):
        ad.inverse_softplus(-1.0)


def test_log_sub_exp_half():
    out = ad.log_sub_exp(Tensor([[0.0]]), Tensor([[math.log(0.5)]]))
    assert out.item() == pytest.approx(math.log(0.5))


def test_log_sub_exp_large_shift():
    out = ad.log_sub_exp(Tensor([[1000.0]]), Tensor([[999.0]]))
    assert out.item() == pytest.approx(999.0 + math.log(math.e - 1.0))


def test_log_sub_exp_equal_is_domain_error():
    with pytest.raises(DomainError):
        ad.log_sub_exp(Tensor([[1.0]]), Tensor([[1.0]]))


@given(
    a=st.floats(min_value=-20, max_value=20),
    gap=st.floats(min_value=1e-3, max_value=30),
)
@settings(max_examples=200, deadline=None)
def test_log_sub_exp_matches_naive(a, gap):
    b = a - gap
    out = ad.log_sub_exp(Tensor([[a]]), Tensor([[b]])).item()
    naive = math.log(math.exp(a) - math.exp(b))
    assert out == pytest.approx(naive, abs=1e-12, rel=1e-12)


def test_log_sub_exp_gradient(rng):
    a = rng.standard_normal((3, 3))
    b = a - rng.uniform(0.5, 2.0, size=(3, 3))
    assert_gradients_match(
        lambda ta, tb: ad.sum_all(ad.log_sub_exp(ta, tb)),
        lambda na, nb: float(np.log(np.exp(na) - np.exp(nb)).sum()),
        [a, b],
    )


def test_min_const_values():
    out = ad.min_const(Tensor([[0.5, 2.0]]), 1.0)
    np.testing.assert_array_equal(out.data, [[0.5, 1.0]])


def test_min_const_gradient_zero_at_tie():
    x = Tensor([[1.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.min_const(x, 1.0))
    tape.backward(loss)
    assert x.grad[0, 0] == 0.0


def test_max_over_cols_values():
    out = ad.max_over_cols(Tensor([[1.0, 3.0, 2.0]]))
    assert out.item() == 3.0


def test_max_over_cols_tie_routes_to_lowest_index():
    x = Tensor([[2.0, 2.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.max_over_cols(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_min_const_max_over_cols_gradients(rng):
    x = rng.standard_normal((4, 5))

    def f_np(n):
        return float(np.minimum(n, 0.3).sum() + n.max(axis=1).sum())

    assert_gradients_match(
        lambda t: ad.sum_all(ad.min_const(t, 0.3)) + ad.sum_all(ad.max_over_cols(t)),
        f_np,
        [x],
    )


def test_broadcast_mul_gradients(rng):
    a = rng.standard_normal((4, 5))
    row = rng.standard_normal((1, 5))
    col = rng.standard_normal((4, 1))
    assert_gradients_match(
        lambda ta, tr, tc: ad.sum_all(ta * tr * tc),
        lambda na, nr, nc: float((na * nr * nc).sum()),
        [a, row, col],
    )


def test_exp_log_gradients(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    assert_gradients_match(
        lambda t: ad.mean_all(ad.log(ad.exp(t) + 1.0)),
        lambda n: float(np.mean(np.log(np.exp(n) + 1.0))),
        [x],
    )


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([[0.0]]))


def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_softplus_at_zero_is_half():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.softplus(x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.full((2, 3), 0.5))


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.softplus(x)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_backward_foreign_tape_rejected():
    x = Tensor([[1.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(x)
    other = Tape()
    with pytest.raises(UsageError):
        other.backward(y)


def test_repeated_backward_accumulates():
    x = Tensor([[2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x * x)
    tape.backward(loss)
    tape.backward(loss)
    assert x.grad[0, 0] == pytest.approx(8.0)  # 2 * (2x at x=2)


def test_backward_on_independent_subgraphs_concatenates(rng):
    # Joint backward over a sum of disjoint graphs equals separate runs.
    xa = rng.standard_normal((2, 3))
    xb = rng.standard_normal((3, 2))

    def separate(arr, builder):
        t = Tensor(arr, requires_grad=True)
        with Tape() as tape:
            loss = builder(t)
        tape.backward(loss)
        return t.grad

    ga = separate(xa, lambda t: ad.sum_all(ad.softplus(t)))
    gb = separate(xb, lambda t: ad.mean_all(ad.exp(t)))

    ta = Tensor(xa, requires_grad=True)
    tb = Tensor(xb, requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.softplus(ta)) + ad.mean_all(ad.exp(tb))
    tape.backward(loss)
    np.testing.assert_array_equal(ta.grad, ga)
    np.testing.assert_array_equal(tb.grad, gb)


def test_detached_tensor_gets_no_gradient(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    frozen = x.detach()
    with Tape() as tape:
        loss = ad.sum_all(x * frozen)
    tape.backward(loss)
    assert frozen.grad is None
    np.testing.assert_array_equal(x.grad, frozen.data)


def test_no_recording_outside_tape(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    y = ad.softplus(x)
    assert y.tape is None and y.tape_id is None and not y.requires_grad


def test_tensor_rejects_3d():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 2, 2)))


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6))
@settings(max_examples=30, deadline=None)
def test_random_composite_gradcheck(m, n):
    # Differentiable composite touching most of the op set at once.
    rng = np.random.default_rng(m * 7 + n)
    x = rng.standard_normal((m, n))
    w = rng.standard_normal((n, 3))

    def f_t(tx, tw):
        h = ad.softplus(tx @ tw)
        gated = ad.min_const(h, 0.8) * ad.exp(-h)
        return ad.mean_all(gated) + ad.sum_all(ad.max_over_cols(h))

    def f_n(nx, nw):
        h = np.log1p(np.exp(nx @ nw))
        gated = np.minimum(h, 0.8) * np.exp(-h)
        return float(gated.mean() + h.max(axis=1).sum())

    assert_gradients_match(f_t, f_n, [x, w])
