"""PCA model construction, sampling and projection."""

import logging
import numpy as np
import scipy.linalg
from typing import List, Sequence, Union

from headfuse.errors import NumericalError, ValidationError
from headfuse.shape.mesh import TriMesh, check_topology
from headfuse.shape.model import ShapeModel
from headfuse.utils import deterministic, get_rng

logger = logging.getLogger(__name__)

# Singular values below `RANK_TOLERANCE * s_max` count as zero.
RANK_TOLERANCE = 1e-10


def data_matrix(meshes: Sequence[TriMesh]) -> np.ndarray:
  """Stacks the flattened meshes as rows, checking the shared topology."""
  if not meshes:
    raise ValidationError('No meshes given.')
  n = meshes[0].n_vertices
  for mesh in meshes:
    check_topology(mesh, n)
  return np.stack([m.vector for m in meshes])


def _fix_signs(basis: np.ndarray) -> np.ndarray:
  """Makes the largest-magnitude entry of every column positive."""
  if basis.size == 0:
    return basis
  rows = np.argmax(np.abs(basis), axis=0)
  signs = np.sign(basis[rows, np.arange(basis.shape[1])])
  signs[signs == 0] = 1
  return basis * signs


def _count_to_keep(eigenvalues: np.ndarray,
                   keep: Union[int, float]) -> int:
  if isinstance(keep, (int, np.integer)) and not isinstance(keep, bool):
    if keep < 0:
      raise ValidationError(f'Cannot keep {keep} components.')
    return int(keep)
  keep = float(keep)
  if not 0 < keep <= 1:
    raise ValidationError(
        f'Variance fraction must lie in (0, 1], got {keep}.')
  ratio = np.cumsum(eigenvalues) / np.sum(eigenvalues)
  return int(np.searchsorted(ratio, keep - 1e-12) + 1)


def pca_from_matrix(data: np.ndarray,
                    triangles: np.ndarray,
                    keep: Union[int, float] = 0.997,
                    name: str = 'model',
                    metadata=None) -> ShapeModel:
  """PCA of the rows of `data` by thin SVD of the centered matrix.

  Eigenvalues are unbiased sample variances `s^2 / (m - 1)`.
  """
  m = len(data)
  if m < 2:
    raise ValidationError(f'PCA needs at least 2 samples, got {m}.')
  mean = data.mean(axis=0)
  centered = data - mean
  _, s, vt = scipy.linalg.svd(centered, full_matrices=False)
  scale = max(1., float(np.abs(mean).max()))
  if s.size == 0 or s[0] <= 1e-12 * scale:
    rank = 0
  else:
    rank = int(np.sum(s > RANK_TOLERANCE * s[0]))
  if rank == 0:
    raise NumericalError('Training data has zero variance; no components.')
  eigenvalues = s[:rank] ** 2 / (m - 1)
  basis = vt[:rank].T

  n = _count_to_keep(eigenvalues, keep)
  if n > rank:
    logger.warning(
        f'Requested {n} components but the data has rank {rank}; '
        f'keeping {rank}.')
    n = rank
  metadata = dict(metadata or {})
  metadata.setdefault('achieved_rank', rank)
  return ShapeModel(mean, _fix_signs(basis[:, :n]), eigenvalues[:n],
                    triangles, name, metadata)


def build_pca(aligned: Sequence[TriMesh],
              keep: Union[int, float] = 0.997,
              name: str = 'model',
              metadata=None) -> ShapeModel:
  """Builds a PCA model from meshes sharing one topology.

  Parameters
  ----------
  aligned
    At least two meshes, already in a common frame.
  keep
    Either a component count, or a fraction in (0, 1] of the total
    variance to retain.
  name
    Model name.
  metadata
    Extra metadata for the container.

  Raises
  ------
  ValidationError
    Fewer than two meshes, or topology mismatch.
  NumericalError
    The data has zero variance.
  """
  data = data_matrix(aligned)
  return pca_from_matrix(data, aligned[0].triangles, keep, name, metadata)


def _check_latent(model: ShapeModel, p: np.ndarray) -> np.ndarray:
  p = np.asarray(p, dtype=np.float64).reshape(-1)
  if p.size != model.n_components:
    raise ValidationError(
        f'Latent vector has length {p.size}, model has '
        f'{model.n_components} components.')
  return p


def sample_vector(model: ShapeModel, p: np.ndarray) -> np.ndarray:
  return model.mean + model.basis @ _check_latent(model, p)


def sample_instance(model: ShapeModel, p: np.ndarray) -> TriMesh:
  return TriMesh.from_vector(sample_vector(model, p), model.triangles)


def project_vector(model: ShapeModel, vector: np.ndarray) -> np.ndarray:
  return model.basis.T @ (np.asarray(vector, dtype=np.float64) - model.mean)


def project_instance(model: ShapeModel, mesh: TriMesh) -> np.ndarray:
  """Least-squares latent vector of `mesh`."""
  model.check_mesh(mesh)
  return project_vector(model, mesh.vector)


def reconstruct(model: ShapeModel, mesh: TriMesh, k: int = None) -> TriMesh:
  """Projection of `mesh` onto the first `k` components."""
  model = model if k is None else model.truncated(k)
  return sample_instance(model, project_instance(model, mesh))


@deterministic
def draw_random_latents(model: ShapeModel, count: int,
                        seed: int) -> np.ndarray:
  """Rows are latent vectors with coordinate `i ~ Normal(0, lambda_i)`."""
  if count < 0:
    raise ValidationError(f'Cannot draw {count} latents.')
  rng = get_rng(seed)
  z = rng.standard_normal((int(count), model.n_components))
  return z * model.stddevs


def draw_random_instances(model: ShapeModel, count: int,
                          seed: int) -> List[TriMesh]:
  return [sample_instance(model, p)
          for p in draw_random_latents(model, count, seed)]
