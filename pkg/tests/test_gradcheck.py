import numpy as np
import torch

from dualres.gradcheck import (FLOOR, TOLERANCE, central_difference, check_gradients, model_case, op_cases,
                               relative_error)


def test_stencils_exact_on_polynomials():
    x = torch.tensor([0.7], dtype=torch.float64)
    f = lambda: x[0] ** 3  # noqa: E731
    # a cubic has zero 4th-order truncation error; the 2-point stencil is off by eps^2
    assert abs(central_difference(f, x, 0, 1e-2, order=4) - 3 * 0.49) < 1e-12
    assert abs(central_difference(f, x, 0, 1e-2, order=2) - 3 * 0.49 - 1e-4) < 1e-12
    assert x.item() == 0.7


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-13)) == 1e-13 / FLOOR
    assert relative_error(np.zeros(3), np.full(3, 1e-13), scale=1.0) == 1e-13
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_detects_wrong_gradient():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4, dtype=torch.float64)

    rep = check_gradients(lambda: Wrong.apply(w), [("w", w)])
    assert not rep.ok()


def test_each_op_passes():
    for name, (f, named) in op_cases(0).items():
        rep = check_gradients(f, named)
        assert rep.max_error < TOLERANCE, name


def test_joint_loss_passes():
    f, named = model_case(1)
    assert check_gradients(f, named, max_coords=3, seed=1).max_error < TOLERANCE
