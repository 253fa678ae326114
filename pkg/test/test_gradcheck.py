import numpy as np

import transpillars
from transpillars.tensor import Tensor


###############################################################################
# Test finite-difference oracle
###############################################################################


def test_correct_gradient(rng, double):
    """A correct gradient passes at double precision"""
    x = Tensor(rng.standard_normal(8), requires_grad=True)
    error = transpillars.gradcheck.finite_diff_check(
        lambda x: (x * x * x).sum(), x)
    assert error < 1e-6


def test_wrong_gradient(rng, double):
    """A gradient off by a factor of two is caught"""
    x = Tensor(rng.uniform(1., 2., 5), requires_grad=True)

    def square(x):
        # Backward claims d/dx x^2 = x
        return transpillars.tensor._record(
            'square', x.data ** 2, (x,), lambda g: (g * x.data,))

    error = transpillars.gradcheck.finite_diff_check(lambda x: square(x).sum(), x)
    assert error > .4


def test_subset_of_indices(rng, double):
    """Only the requested entries are checked and data is restored"""
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=False)
    original = x.data.copy()
    error = transpillars.gradcheck.finite_diff_check(
        lambda x: (x.exp() * 2.).sum(), x, indices=[0, 5, 15])
    assert error < 1e-6
    np.testing.assert_array_equal(x.data, original)
    assert not x.requires_grad


def test_zero_gradient(double):
    """Entries with zero gradient do not divide by zero"""
    x = Tensor(np.array([-1., 2.]), requires_grad=True)
    error = transpillars.gradcheck.finite_diff_check(lambda x: x.relu().sum(), x)
    assert error < 1e-6


def test_independent_function(rng, double):
    """A function that ignores its input has a zero gradient"""
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    other = Tensor(rng.standard_normal(3), requires_grad=True)
    error = transpillars.gradcheck.finite_diff_check(
        lambda x: (other * other).sum(), x)
    assert error == 0.
    other.zero_grad()
