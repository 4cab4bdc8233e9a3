"""Damped Gauss-Newton on TensorFlow residual functions."""

import abc
import logging
import numpy as np
import scipy.linalg
import tensorflow as tf
from typing import List, NamedTuple, Optional

from headfuse.errors import NumericalError, ValidationError
from headfuse.utils import Callback, History, run_callbacks

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 3
# Costs below this, or below `STALL_RATIO` times the initial cost, are at
# the rounding floor of the residuals.
COST_FLOOR = 1e-20
STALL_RATIO = 1e-16


class LeastSquares(abc.ABC):
  """A least-squares problem frozen at one state.

  The residual is a function of a tangent update `delta` at that state, so
  manifold parameters (quaternions) are handled by `update`.
  """

  @abc.abstractproperty
  def n_params(self) -> int:
    return NotImplemented

  @abc.abstractmethod
  def residuals(self, delta: tf.Tensor) -> tf.Tensor:
    return NotImplemented

  @abc.abstractmethod
  def update(self, delta: np.ndarray) -> 'LeastSquares':
    return NotImplemented

  def frozen(self) -> np.ndarray:
    return np.zeros(self.n_params, dtype=bool)


def evaluate(problem: LeastSquares) -> np.ndarray:
  delta = tf.zeros([problem.n_params], dtype=tf.float64)
  return problem.residuals(delta).numpy()


def jacobian(problem: LeastSquares):
  """Residuals and their Jacobian with respect to the tangent update."""
  delta = tf.zeros([problem.n_params], dtype=tf.float64)
  with tf.GradientTape() as tape:
    tape.watch(delta)
    r = problem.residuals(delta)
  return r.numpy(), tape.jacobian(r, delta).numpy()


def _cost(r: np.ndarray) -> float:
  return float(r @ r)


class SolverResult(NamedTuple):
  problem: LeastSquares
  cost: float
  converged: bool
  iterations: int
  history: History


def gauss_newton(problem: LeastSquares,
                 max_iters: int = 50,
                 tolerance: float = 1e-6,
                 damping: float = 1e-3,
                 callbacks: List[Callback] = None) -> SolverResult:
  """Levenberg-Marquardt damped Gauss-Newton.

  Each iteration solves `(J^T J + mu diag(J^T J)) delta = -J^T r` for the
  free parameters. A step is accepted only if it does not increase the
  cost, so accepted costs are nonincreasing; a rejected step raises `mu`
  tenfold. Stops when an accepted step lowers the cost by less than
  `tolerance` relative, when the cost reaches `COST_FLOOR`, or after
  `max_iters` iterations.

  Raises
  ------
  NumericalError
    The cost is not finite, or `MAX_REJECTIONS` consecutive
    damped steps all increase a cost that could still decrease.
  """
  history = History()
  r = evaluate(problem)
  cost = _cost(r)
  if not np.isfinite(cost):
    raise NumericalError('Cost is not finite at the initial state.')
  initial_cost = cost
  free = ~problem.frozen()
  mu = damping
  converged = False
  iteration = 0

  for iteration in range(max_iters):
    if cost <= COST_FLOOR or not np.any(free):
      converged = True
      break
    r, jac = jacobian(problem)
    jac = jac[:, free]
    hess = jac.T @ jac
    grad = jac.T @ r
    scale = np.diag(hess) + 1e-12 * max(np.max(np.diag(hess)), 1.)

    rejections = 0
    while True:
      try:
        step = scipy.linalg.solve(hess + mu * np.diag(scale), -grad,
                                  assume_a='sym')
      except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f'Gauss-Newton system is singular: {e}') from e
      delta = np.zeros(problem.n_params)
      delta[free] = step
      predicted = -(2 * grad @ step + step @ hess @ step)
      try:
        candidate = problem.update(delta)
        new_cost = _cost(evaluate(candidate))
      except ValidationError:
        new_cost = np.inf
      if np.isfinite(new_cost) and new_cost <= cost:
        mu = max(mu / 10, 1e-15)
        break
      if predicted <= tolerance * cost * 1e-3 or (
          rejections + 1 >= MAX_REJECTIONS
          and cost <= STALL_RATIO * initial_cost):
        # No meaningful decrease is left; the current state is a minimum.
        candidate, new_cost = problem, cost
        break
      rejections += 1
      mu *= 10
      if rejections >= MAX_REJECTIONS:
        raise NumericalError(
            f'Gauss-Newton diverged: {rejections} consecutive damped steps '
            f'increased the cost {cost:.6g}.')

    decrease = cost - new_cost
    problem, cost = candidate, new_cost
    history.log(iteration, 'cost', cost)
    history.log(iteration, 'damping', mu)
    run_callbacks(callbacks, iteration, history)
    if decrease <= tolerance * (cost + decrease):
      converged = True
      iteration += 1
      break
  else:
    iteration = max_iters

  if not converged and max_iters > 0:
    logger.warning(f'Gauss-Newton stopped after {max_iters} iterations '
                   f'(cost {cost:.6g}).')
  return SolverResult(problem, cost, converged, iteration, history)


def frozen_blocks(sizes: List[int], frozen: List[bool]) -> np.ndarray:
  return np.concatenate(
      [np.full(n, f, dtype=bool) for n, f in zip(sizes, frozen)]
      or [np.zeros(0, dtype=bool)])


def block_slices(sizes: List[int]) -> List[slice]:
  bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
  return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def finite_difference_jacobian(problem: LeastSquares,
                               step: Optional[float] = 1e-6) -> np.ndarray:
  """Central differences of the residuals in each tangent direction."""
  columns = []
  for k in range(problem.n_params):
    e = np.zeros(problem.n_params)
    e[k] = step
    plus = problem.residuals(tf.constant(e)).numpy()
    minus = problem.residuals(tf.constant(-e)).numpy()
    columns.append((plus - minus) / (2 * step))
  return np.stack(columns, axis=1)
