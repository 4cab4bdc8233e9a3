"""Similarity Procrustes and generalized Procrustes analysis (GPA)."""

import logging
import numpy as np
import scipy.linalg
from typing import List, NamedTuple, Optional, Sequence, Tuple

from headfuse.errors import NumericalError, ValidationError
from headfuse.shape.mesh import TriMesh, check_topology
from headfuse.utils import Callback, History, run_callbacks

logger = logging.getLogger(__name__)


class SimilarityTransform(NamedTuple):
  """`x -> scale * rotation @ x + translation`."""
  rotation: np.ndarray
  scale: float
  translation: np.ndarray

  def apply(self, points: np.ndarray) -> np.ndarray:
    return self.scale * np.asarray(points) @ self.rotation.T + self.translation

  def inverse(self) -> 'SimilarityTransform':
    rotation = self.rotation.T
    return SimilarityTransform(rotation, 1. / self.scale,
                               -rotation @ self.translation / self.scale)

  @classmethod
  def identity(cls):
    return cls(np.eye(3), 1., np.zeros(3))


def similarity_procrustes(source: np.ndarray,
                          target: np.ndarray,
                          scale: bool = True,
                          weights: Optional[np.ndarray] = None
                          ) -> SimilarityTransform:
  """Least-squares similarity mapping `source` points onto `target` points
  (Kabsch-Umeyama), never a reflection."""
  source = np.asarray(source, dtype=np.float64)
  target = np.asarray(target, dtype=np.float64)
  if source.shape != target.shape or source.ndim != 2:
    raise ValidationError(
        f'Point sets differ in shape: {source.shape} vs {target.shape}.')
  if len(source) < 3:
    raise ValidationError('Procrustes needs at least 3 point pairs.')
  w = np.ones(len(source)) if weights is None else np.asarray(weights, float)
  w = w / w.sum()

  mu_s = w @ source
  mu_t = w @ target
  x = source - mu_s
  y = target - mu_t
  var_s = float(w @ np.sum(x ** 2, axis=1))
  if var_s <= 1e-300:
    raise NumericalError('Source points are coincident.')

  cov = (y * w[:, None]).T @ x
  u, d, vt = scipy.linalg.svd(cov)
  s = np.ones(3)
  if np.linalg.det(u) * np.linalg.det(vt) < 0:
    s[-1] = -1.
  rotation = (u * s) @ vt
  c = float(np.sum(d * s) / var_s) if scale else 1.
  return SimilarityTransform(rotation, c, mu_t - c * rotation @ mu_s)


def _size(points: np.ndarray) -> float:
  return float(np.linalg.norm(points - points.mean(axis=0)))


def gpa_align(meshes: Sequence[TriMesh],
              scale: bool = True,
              tolerance: float = 1e-12,
              max_iter: int = 100,
              callbacks: List[Callback] = None
              ) -> Tuple[List[TriMesh], TriMesh]:
  """Generalized Procrustes analysis.

  Every mesh is aligned by a similarity (rigid if `scale` is false) to the
  running mean until the mean moves less than `tolerance` relative to its
  extent. The returned set is expressed in the frame of the inputs: its
  centroid, orientation and size match the average of the inputs, so
  aligning an already aligned set leaves it unchanged.

  Returns
  -------
  The aligned meshes and their mean."""
  if len(meshes) < 2:
    raise ValidationError(f'GPA needs at least 2 meshes, got {len(meshes)}.')
  n = meshes[0].n_vertices
  for mesh in meshes:
    check_topology(mesh, n)
  triangles = meshes[0].triangles

  inputs = [m.vertices for m in meshes]
  sizes = np.array([_size(v) for v in inputs])
  if np.any(sizes <= 0):
    raise NumericalError('A mesh collapses to a single point.')

  current = [v - v.mean(axis=0) for v in inputs]
  if scale:
    current = [v / s for v, s in zip(current, sizes)]
  mean = current[0]

  history = History()
  converged = False
  for step in range(max_iter):
    current = [
        similarity_procrustes(v, mean, scale=scale).apply(v) for v in current]
    new_mean = np.mean(current, axis=0)
    new_mean -= new_mean.mean(axis=0)
    if scale:
      new_mean /= _size(new_mean)
    movement = float(
        np.max(np.abs(new_mean - mean)) / np.max(np.abs(new_mean)))
    mean = new_mean
    history.log(step, 'movement', movement)
    run_callbacks(callbacks, step, history)
    if movement < tolerance:
      converged = True
      break
  if not converged:
    logger.warning(f'GPA did not converge within {max_iter} iterations.')

  # Map the internal frame back onto the average input frame.
  internal_mean = np.mean(current, axis=0)
  centred_inputs = np.mean([v - v.mean(axis=0) for v in inputs], axis=0)
  try:
    rotation = similarity_procrustes(
        internal_mean, centred_inputs, scale=False).rotation
  except NumericalError:
    rotation = np.eye(3)
  c = 1.
  if scale:
    c = float(np.mean(sizes) / np.mean([_size(v) for v in current]))
  offset = np.mean([v.mean(axis=0) for v in inputs], axis=0)
  aligned = [c * v @ rotation.T + offset for v in current]
  mean_vertices = np.mean(aligned, axis=0)
  logger.debug(f'GPA finished after {len(history.steps())} iterations.')
  return ([TriMesh(v, triangles) for v in aligned],
          TriMesh(mean_vertices, triangles))
