"""Gaussian-process regression on top of a template kernel."""

import logging
import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from typing import List, NamedTuple

from headfuse.errors import NumericalError, ValidationError
from headfuse.fusion.base import GaussianProcess
from headfuse.fusion.kernel import TemplateKernel
from headfuse.shape.mesh import LandmarkSet, TriMesh
from headfuse.shape.surface import SurfaceIndex
from headfuse.utils import Callback, History, run_callbacks

logger = logging.getLogger(__name__)


def _points(points) -> np.ndarray:
  return np.asarray(points, dtype=np.float64).reshape(-1, 3)


class KernelFunction:
  """`k(x, y)`: the kernel block at the template vertices closest to `x` and
  `y`."""

  def __init__(self, kernel: TemplateKernel):
    self.kernel = kernel
    self._tree = cKDTree(kernel.template.vertices)

  def indices(self, points: np.ndarray) -> np.ndarray:
    _, idx = self._tree.query(_points(points))
    return np.asarray(idx, dtype=np.int64)

  def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    i, j = self.indices(x)[0], self.indices(y)[0]
    return self.kernel.block(i, j)

  def matrix(self, points: np.ndarray, others: np.ndarray) -> np.ndarray:
    return self.kernel.submatrix(self.indices(points), self.indices(others))


def kernel_function(kernel: TemplateKernel, x: np.ndarray,
                    y: np.ndarray) -> np.ndarray:
  return KernelFunction(kernel)(x, y)


class PriorProcess(GaussianProcess):
  """Zero-mean process whose covariance is the template kernel."""

  def __init__(self, kernel: TemplateKernel):
    self.kernel = kernel
    self.function = KernelFunction(kernel)

  @property
  def template(self) -> TriMesh:
    return self.kernel.template

  def mean(self, points: np.ndarray) -> np.ndarray:
    return np.zeros_like(_points(points))

  def covariance(self, points: np.ndarray, others: np.ndarray) -> np.ndarray:
    return self.function.matrix(points, others)


class DeformationObservations(NamedTuple):
  """Observed deformations at template-frame points, with noise `sigma2`
  (mm^2)."""
  points: np.ndarray        # [M, 3]
  deformations: np.ndarray  # [M, 3]
  sigma2: float


def check_observations(observations: DeformationObservations):
  points = _points(observations.points)
  if len(points) == 0:
    raise ValidationError('Posterior needs at least one observation.')
  if _points(observations.deformations).shape != points.shape:
    raise ValidationError('One deformation per observed point is required.')
  if observations.sigma2 < 0 or not np.isfinite(observations.sigma2):
    raise ValidationError('Observation noise must be a nonnegative number.')


class PosteriorModel(GaussianProcess):
  """A process conditioned on noisy deformation observations.

  `mean(x) = mu(x) + k(x, X) (k(X, X) + sigma2 I)^-1 (y - mu(X))` and
  `cov(x, y) = k(x, y) - k(x, X) (k(X, X) + sigma2 I)^-1 k(X, y)`, with one
  Cholesky factorization shared by both.
  """

  def __init__(self, prior: GaussianProcess,
               observations: DeformationObservations):
    check_observations(observations)
    self.prior = prior
    self.observations = observations
    self._x = _points(observations.points)
    gram = prior.covariance(self._x, self._x)
    gram = 0.5 * (gram + gram.T) + observations.sigma2 * np.eye(len(gram))
    try:
      self._factor = scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as e:
      raise NumericalError(
          f'Observation covariance is singular: {e}') from e
    residual = _points(observations.deformations) - prior.mean(self._x)
    self._alpha = scipy.linalg.cho_solve(self._factor, residual.reshape(-1))

  @property
  def template(self) -> TriMesh:
    return self.prior.template

  def mean(self, points: np.ndarray) -> np.ndarray:
    points = _points(points)
    cross = self.prior.covariance(points, self._x)
    return self.prior.mean(points) + (cross @ self._alpha).reshape(-1, 3)

  def covariance(self, points: np.ndarray, others: np.ndarray) -> np.ndarray:
    points, others = _points(points), _points(others)
    left = self.prior.covariance(points, self._x)
    right = self.prior.covariance(self._x, others)
    return (self.prior.covariance(points, others)
            - left @ scipy.linalg.cho_solve(self._factor, right))

  def mean_shape(self) -> TriMesh:
    template = self.template
    return template.with_vertices(
        template.vertices + self.mean(template.vertices))


def posterior(process: GaussianProcess,
              observations: DeformationObservations) -> PosteriorModel:
  return PosteriorModel(process, observations)


def landmark_posterior(process: GaussianProcess,
                       template_landmarks: LandmarkSet,
                       scan_landmarks: LandmarkSet,
                       sigma2: float = 1.) -> PosteriorModel:
  """Conditions on the deformations `scan - template` at the template
  landmarks."""
  if set(template_landmarks.names) != set(scan_landmarks.names):
    missing = sorted(set(template_landmarks.names) ^ set(scan_landmarks.names))
    raise ValidationError(f'Landmark names differ: {missing}.')
  scan = scan_landmarks.ordered(template_landmarks.names)
  observations = DeformationObservations(
      template_landmarks.points, scan.points - template_landmarks.points,
      sigma2)
  return posterior(process, observations)


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
  """Greedy farthest-point subsample starting from the first point."""
  points = _points(points)
  if count >= len(points):
    return np.arange(len(points))
  chosen = np.zeros(count, dtype=np.int64)
  dist = np.linalg.norm(points - points[0], axis=1)
  for k in range(1, count):
    chosen[k] = int(np.argmax(dist))
    dist = np.minimum(dist, np.linalg.norm(points - points[chosen[k]], axis=1))
  return chosen


class RefineResult(NamedTuple):
  mesh: TriMesh
  posterior: PosteriorModel
  converged: bool
  history: History


def icp_refine(initial: PosteriorModel,
               scan: TriMesh,
               max_iters: int = 5,
               reject_factor: float = 3.,
               max_points: int = 1500,
               sigma2: float = 0.25,
               tolerance: float = 1e-6,
               callbacks: List[Callback] = None) -> RefineResult:
  """ICP refinement of a posterior model against a scan.

  Every iteration deforms the template by the current posterior mean, finds
  the closest scan points `U`, and conditions `initial` on the deformations
  `U - template` at the accepted template points. Pairs on the scan boundary
  or farther than `reject_factor` times the median distance are rejected.
  The energy is the mean distance of the accepted pairs; the iterate with
  the lowest energy is returned.
  """
  template = initial.template
  index = SurfaceIndex(scan)
  history = History()
  current = initial
  best, best_energy = None, np.inf
  converged = False
  previous = None

  for step in range(max_iters + 1):
    shape = template.vertices + current.mean(template.vertices)
    cp = index.query(shape)
    accepted = ~cp.on_boundary
    if np.any(accepted) and np.isfinite(reject_factor):
      cutoff = max(reject_factor * np.median(cp.distances[accepted]), 1e-9)
      accepted &= cp.distances <= cutoff
    if not np.any(accepted):
      raise NumericalError('ICP refinement: every correspondence rejected.')
    energy = float(np.mean(cp.distances[accepted]))
    history.log(step, 'energy', energy)
    history.log(step, 'accepted', int(np.sum(accepted)))
    history.log(step, 'boundary', int(np.sum(cp.on_boundary)))
    run_callbacks(callbacks, step, history)
    if energy < best_energy:
      best, best_energy = current, energy
    if energy <= tolerance or (previous is not None and abs(previous - energy)
                               <= tolerance * max(previous, 1.)):
      converged = True
      break
    if step == max_iters:
      break
    previous = energy

    idx = np.nonzero(accepted)[0]
    idx = idx[farthest_point_indices(template.vertices[idx], max_points)]
    observations = DeformationObservations(
        template.vertices[idx], cp.points[idx] - template.vertices[idx],
        sigma2)
    current = posterior(initial, observations)

  if not converged:
    logger.warning('ICP refinement stopped at the iteration limit.')
  return RefineResult(best.mean_shape(), best, converged, history)


def truncate_kernel(kernel: TemplateKernel, keep: int) -> TemplateKernel:
  """Rebuilds the kernel from its top-`keep` eigenpairs."""
  if keep <= 0:
    raise ValidationError(f'Cannot keep {keep} components.')
  return kernel.truncated(keep)


def variance_count(kernel: TemplateKernel, fraction: float) -> int:
  """Components explaining `fraction` of the kernel's positive spectrum."""
  if not 0 < fraction <= 1:
    raise ValidationError(
        f'Variance fraction must lie in (0, 1], got {fraction}.')
  w = np.clip(kernel.eigenvalues(), 0., None)
  if w.sum() <= 0:
    raise NumericalError('Kernel has no positive eigenvalue.')
  ratio = np.cumsum(w) / w.sum()
  return int(np.searchsorted(ratio, fraction - 1e-12) + 1)
