import numpy as np
import pytest

from conftest import NonSmoothPoint, grad_check
from gradcases import ALL_CASES, INSTANCES, run_case
from oseg import ops
from oseg.tensor import Tensor


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_central_difference(name):
    worst, _ = run_case(name, seed=2024, instances=INSTANCES)
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def _bad_square(x: Tensor) -> Tensor:
    # forward x^2, backward deliberately off by a factor of 2
    return Tensor.from_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")


def test_checker_catches_wrong_backward(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(1, 1, 3, 3)), requires_grad=True)
    assert grad_check(lambda: _bad_square(x), [x], rng) > 0.1


def test_checker_flags_kink_inside_stencil(rng):
    x = Tensor(np.array([[[[3e-6, 1.0]]]]), requires_grad=True)
    with pytest.raises(NonSmoothPoint):
        grad_check(lambda: ops.relu(x), [x], rng)
