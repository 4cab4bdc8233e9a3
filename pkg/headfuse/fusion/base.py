"""Defines interfaces of covariance fields and Gaussian processes."""

import abc
import numpy as np


def coordinate_index(indices: np.ndarray) -> np.ndarray:
  """Point indices to the rows of the flattened `[x1, y1, z1, ...]` layout."""
  indices = np.asarray(indices, dtype=np.int64).reshape(-1)
  return (3 * indices[:, None] + np.arange(3)).reshape(-1)


class Covariance(abc.ABC):
  """Matrix-valued covariance over a fixed set of points."""

  @abc.abstractproperty
  def n_points(self) -> int:
    return NotImplemented

  @abc.abstractmethod
  def block(self, i: int, j: int) -> np.ndarray:
    """The 3 x 3 covariance between points `i` and `j`."""
    return NotImplemented


class GaussianProcess(abc.ABC):
  """Vector-valued Gaussian process of deformations on 3D points."""

  @abc.abstractmethod
  def mean(self, points: np.ndarray) -> np.ndarray:
    return NotImplemented

  @abc.abstractmethod
  def covariance(self, points: np.ndarray, others: np.ndarray) -> np.ndarray:
    return NotImplemented

  def marginal_trace(self, points: np.ndarray) -> np.ndarray:
    """Trace of the 3 x 3 marginal covariance at each point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.array([np.trace(self.covariance(p[None], p[None]))
                     for p in points])
