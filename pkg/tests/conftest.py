"""Shared numerical oracles for the test suite."""

import numpy as np
import pytest

from mlrbfn.autodiff import Tape, Tensor


def central_difference(f, arrays, h=1e-4):
    """Gradients of scalar f(*arrays) by central differences, in float64.

    ``f`` receives plain numpy arrays and returns a float.  This stays
    independent of the tape: it only ever calls ``f`` on perturbed
    copies.
    """
    grads = []
    for which in range(len(arrays)):
        base = arrays[which].astype(np.float64)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[which][idx] += h
            minus[which][idx] -= h
            grad[idx] = (f(*plus) - f(*minus)) / (2.0 * h)
        grads.append(grad)
    return grads


def tape_gradients(f, arrays):
    """Analytic gradients of scalar f(*tensors) via one backward pass."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def assert_gradients_match(f_tensor, f_numpy, arrays, rtol=1e-4, h=1e-4):
    analytic = tape_gradients(f_tensor, arrays)
    numeric = central_difference(f_numpy, arrays, h=h)
    for got, want in zip(analytic, numeric):
        err = np.abs(got - want) / np.maximum(1.0, np.abs(want))
        assert np.max(err) < rtol, f"gradient mismatch: max rel err {np.max(err)}"


def model_gradcheck(params, loss_value, loss_grad_pass, h=1e-4, rtol=1e-4):
    """Check every trainable tensor of a model against central differences.

    ``loss_value()`` evaluates the scalar loss with no tape (used for
    the perturbed evaluations); ``loss_grad_pass()`` runs one tape
    backward and must populate ``grad`` on every tensor in ``params``.
    Returns the worst relative error seen.
    """
    for p in params:
        p.zero_grad()
    loss_grad_pass()
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter missing gradient"
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + h
            up = loss_value()
            p.data[idx] = keep - h
            down = loss_value()
            p.data[idx] = keep
            numeric = (up - down) / (2.0 * h)
            err = abs(p.grad[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            assert err < rtol, (
                f"param {p.shape} entry {idx}: analytic {p.grad[idx]!r} "
                f"vs numeric {numeric!r} (rel err {err:.3g})"
            )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
