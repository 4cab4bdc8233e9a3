import numpy as np
import pytest
import tensorflow as tf

from headfuse.errors import NumericalError
from headfuse.eyes.solver import LeastSquares, block_slices, \
    finite_difference_jacobian, frozen_blocks, gauss_newton, jacobian


class Exponential(LeastSquares):
  """Fits `y = a exp(b t)` to samples."""

  def __init__(self, t, y, params, frozen=None):
    self.t = tf.constant(t)
    self.y = tf.constant(y)
    self.params = np.asarray(params, dtype=np.float64)
    self._frozen = (np.zeros(2, dtype=bool) if frozen is None
                    else np.asarray(frozen))

  @property
  def n_params(self):
    return 2

  def residuals(self, delta):
    a = self.params[0] + delta[0]
    b = self.params[1] + delta[1]
    return a * tf.exp(b * self.t) - self.y

  def update(self, delta):
    return Exponential(self.t, self.y, self.params + delta, self._frozen)

  def frozen(self):
    return self._frozen


@pytest.fixture
def samples():
  t = np.linspace(0., 1., 20)
  return t, 2. * np.exp(-1.5 * t)


def test_recovers_parameters(samples):
  t, y = samples
  result = gauss_newton(Exponential(t, y, [1., 0.]), max_iters=100,
                        tolerance=1e-14)
  np.testing.assert_allclose(result.problem.params, [2., -1.5], atol=1e-6)
  assert result.cost < 1e-12
  costs = result.history.series('cost')
  assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_frozen_parameters_stay_put(samples):
  t, y = samples
  result = gauss_newton(Exponential(t, y, [2., 0.], frozen=[True, False]),
                        max_iters=100, tolerance=1e-14)
  assert result.problem.params[0] == 2.
  assert result.problem.params[1] == pytest.approx(-1.5, abs=1e-6)


def test_jacobian_matches_finite_differences(samples):
  t, y = samples
  problem = Exponential(t, y, [1.3, -0.7])
  _, jac = jacobian(problem)
  np.testing.assert_allclose(jac, finite_difference_jacobian(problem),
                             atol=1e-6)


def test_non_finite_cost(samples):
  t, y = samples
  with pytest.raises(NumericalError):
    gauss_newton(Exponential(t, y * np.nan, [1., 0.]))


def test_block_helpers():
  np.testing.assert_array_equal(frozen_blocks([2, 1, 3], [False, True, False]),
                                [0, 0, 1, 0, 0, 0])
  assert block_slices([2, 1]) == [slice(0, 2), slice(2, 3)]
