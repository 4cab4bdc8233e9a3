"""Eye-region shape model and the eyeball model with pupil blendshape and
iris texture PCA."""

import logging
import numpy as np
from typing import Optional, Sequence

from headfuse.errors import StorageError, ValidationError
from headfuse.shape.io import load_json, save_json
from headfuse.shape.mesh import TriMesh
from headfuse.shape.model import ORTHONORMAL_TOLERANCE, ShapeModel, \
    load_model, save_model

logger = logging.getLogger(__name__)

N_EYELID = 17
N_IRIS = 16


def _indices(indices, count: int, n_vertices: int, what: str) -> np.ndarray:
  indices = np.asarray(indices, dtype=np.int64).reshape(-1)
  if len(indices) != count:
    raise ValidationError(f'Expected {count} {what} indices, got '
                          f'{len(indices)}.')
  if np.any(indices < 0) or np.any(indices >= n_vertices):
    raise ValidationError(f'{what.capitalize()} index out of range.')
  return indices


class EyeRegionModel:
  """Eye-region PCA model whose vertices `eyelid_indices` correspond to the
  17 eyelid landmarks. The parameter prior is `diag(eigenvalues)`."""

  def __init__(self, model: ShapeModel,
               eyelid_indices: Optional[Sequence[int]] = None):
    if eyelid_indices is None:
      eyelid_indices = model.metadata.get('eyelid_indices')
      if eyelid_indices is None:
        raise ValidationError(
            f'Model {model.name!r} carries no eyelid indices.')
    self.model = model
    self.eyelid_indices = _indices(eyelid_indices, N_EYELID,
                                   model.n_vertices, 'eyelid')

  @property
  def n_components(self) -> int:
    return self.model.n_components

  def eyelid_rows(self) -> np.ndarray:
    return (3 * self.eyelid_indices[:, None] + np.arange(3)).reshape(-1)

  def eyelid_points(self, p_el: np.ndarray) -> np.ndarray:
    rows = self.eyelid_rows()
    return (self.model.mean[rows]
            + self.model.basis[rows] @ np.asarray(p_el)).reshape(-1, 3)


def save_eye_region(region: EyeRegionModel, path: str):
  model = region.model
  metadata = dict(model.metadata)
  metadata['eyelid_indices'] = region.eyelid_indices.tolist()
  save_model(ShapeModel(model.mean, model.basis, model.eigenvalues,
                        model.triangles, model.name, metadata, check=False),
             path)


def load_eye_region(path: str) -> EyeRegionModel:
  return EyeRegionModel(load_model(path))


class EyeBallModel:
  """Eyeball mesh `s_eye + p_eye u_eye` with a static lens, rotated about
  `center` by the eye rotation, and a per-vertex RGB texture PCA
  `t + U lambda`.

  Parameters
  ----------
  mesh
    Mean eyeball.
  blendshape
    Pupil dilation direction, length 3N; zero outside the pupil
    ring.
  iris_indices
    Vertices matching the 16 iris and pupil landmarks.
  texture_mean
    Length 3N, colors in [0, 1].
  texture_basis
    3N x M, orthonormal columns.
  texture_eigenvalues
    Positive variances of the M texture components.
  pupil_variance
    Prior variance of `p_eye`.
  lens
    Optional static mesh.
  center
    Rotation centre; defaults to the mesh centroid.
  """

  def __init__(self,
               mesh: TriMesh,
               blendshape: np.ndarray,
               iris_indices: Sequence[int],
               texture_mean: np.ndarray,
               texture_basis: np.ndarray,
               texture_eigenvalues: np.ndarray,
               pupil_variance: float = 1.,
               lens: Optional[TriMesh] = None,
               center: Optional[Sequence[float]] = None,
               name: str = 'eyeball'):
    n = mesh.n_vertices
    blendshape = np.asarray(blendshape, dtype=np.float64).reshape(-1)
    if blendshape.size != 3 * n:
      raise ValidationError(f'Blendshape must have length {3 * n}, got '
                            f'{blendshape.size}.')
    texture_mean = np.asarray(texture_mean, dtype=np.float64).reshape(-1)
    texture_basis = np.asarray(texture_basis, dtype=np.float64).reshape(
        3 * n, -1)
    texture_eigenvalues = np.asarray(texture_eigenvalues,
                                     dtype=np.float64).reshape(-1)
    if texture_mean.size != 3 * n:
      raise ValidationError('Texture mean must hold one RGB per vertex.')
    if texture_basis.shape[1] != texture_eigenvalues.size:
      raise ValidationError('One eigenvalue per texture column is required.')
    if np.any(texture_eigenvalues <= 0) or pupil_variance <= 0:
      raise ValidationError('Prior variances must be positive.')
    gram = texture_basis.T @ texture_basis
    if gram.size and np.max(np.abs(gram - np.eye(len(gram)))) > \
        ORTHONORMAL_TOLERANCE:
      raise ValidationError('Texture basis columns are not orthonormal.')

    self.mesh = mesh
    self.blendshape = blendshape
    self.iris_indices = _indices(iris_indices, N_IRIS, n, 'iris')
    self.texture_mean = texture_mean
    self.texture_basis = texture_basis
    self.texture_eigenvalues = texture_eigenvalues
    self.pupil_variance = float(pupil_variance)
    self.lens = lens
    self.center = (mesh.centroid if center is None
                   else np.asarray(center, dtype=np.float64).reshape(3))
    self.name = name

  @property
  def n_vertices(self) -> int:
    return self.mesh.n_vertices

  @property
  def n_texture_components(self) -> int:
    return self.texture_basis.shape[1]

  def pupil_support(self) -> np.ndarray:
    return np.any(self.blendshape.reshape(-1, 3) != 0, axis=1)

  def shape(self, p_eye: float) -> np.ndarray:
    return (self.mesh.vector + float(p_eye) * self.blendshape).reshape(-1, 3)

  def instance(self, p_eye: float, rotation: Optional[np.ndarray] = None,
               ) -> TriMesh:
    """Posed eyeball; `rotation` is a 3 x 3 matrix about `center`."""
    vertices = self.shape(p_eye)
    if rotation is not None:
      vertices = (vertices - self.center) @ np.asarray(rotation).T + \
          self.center
    return self.mesh.with_vertices(vertices)

  def to_dict(self):
    data = {
        'name': self.name,
        'vertices': self.mesh.vertices.tolist(),
        'triangles': self.mesh.triangles.tolist(),
        'blendshape': self.blendshape.tolist(),
        'iris_indices': self.iris_indices.tolist(),
        'texture_mean': self.texture_mean.tolist(),
        'texture_basis': self.texture_basis.tolist(),
        'texture_variance': self.texture_eigenvalues.tolist(),
        'pupil_variance': self.pupil_variance,
        'center': self.center.tolist(),
    }
    if self.lens is not None:
      data['lens'] = {'vertices': self.lens.vertices.tolist(),
                      'triangles': self.lens.triangles.tolist()}
    return data

  @classmethod
  def from_dict(cls, data) -> 'EyeBallModel':
    try:
      lens = data.get('lens')
      if lens is not None:
        lens = TriMesh(lens['vertices'], lens['triangles'])
      n_texture = len(data['texture_variance'])
      return cls(
          TriMesh(data['vertices'], data['triangles']),
          data['blendshape'], data['iris_indices'], data['texture_mean'],
          np.asarray(data['texture_basis'],
                     dtype=np.float64).reshape(-1, n_texture),
          data['texture_variance'], data['pupil_variance'], lens,
          data['center'], data.get('name', 'eyeball'))
    except (KeyError, TypeError, AttributeError) as e:
      raise StorageError(f'Malformed eyeball model: {e}') from e


def save_eyeball(model: EyeBallModel, path: str):
  save_json(model.to_dict(), path)


def load_eyeball(path: str) -> EyeBallModel:
  return EyeBallModel.from_dict(load_json(path))


def synth_eye_texture(model: EyeBallModel, lam: np.ndarray) -> np.ndarray:
  """Per-vertex RGB `t + U lambda`, clamped to [0, 1].

  Raises
  ------
  ValidationError
    `lam` does not have one entry per texture component.
  """
  lam = np.asarray(lam, dtype=np.float64).reshape(-1)
  if lam.size != model.n_texture_components:
    raise ValidationError(
        f'Expected {model.n_texture_components} texture parameters, got '
        f'{lam.size}.')
  texture = model.texture_mean + model.texture_basis @ lam
  return np.clip(texture, 0., 1.).reshape(-1, 3)


def project_eye_texture(model: EyeBallModel, colors: np.ndarray) -> np.ndarray:
  colors = np.asarray(colors, dtype=np.float64).reshape(-1)
  if colors.size != model.texture_mean.size:
    raise ValidationError('One RGB color per eyeball vertex is required.')
  return model.texture_basis.T @ (colors - model.texture_mean)
