"""Finite-difference checks for every differentiable op, module and loss."""

import numpy as np
import pytest

from grad_cases import CASES, SEEDS, TOLERANCE, run_case
from spsnet import autograd as ag
from spsnet.autograd import Tensor
from spsnet.gradcheck import directional_check, finite_diff_check


@pytest.mark.parametrize("name", list(CASES))
def test_gradient_case(name):
    worst = max(run_case(name, seed) for seed in SEEDS)
    assert worst < TOLERANCE, f"{name}: max relative error {worst:.2e}"


class TestChecker:
    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def f():
            # forward is x^2, backward claims 3x
            return ag.make_op((x.data ** 2).sum(), (x,), lambda g: (3.0 * g * x.data,))
        assert finite_diff_check(f, [x]) > 0.1
        assert directional_check(f, [x], np.random.default_rng(0)) > 0.1

    def test_kink_is_skipped_not_hidden(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        skipped = []
        err = finite_diff_check(lambda: ag.leaky_relu(x).sum(), [x], skipped=skipped)
        assert skipped == [(0, 0)]
        assert err < 1e-8

    def test_leaves_parameters_unchanged(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        before = x.data.copy()
        finite_diff_check(lambda: (x * x).sum(), [x])
        directional_check(lambda: (x * x).sum(), [x], rng)
        np.testing.assert_array_equal(x.data, before)
