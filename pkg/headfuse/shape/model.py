"""Linear (PCA) shape models and their on-disk container."""

import json
import logging
import struct
import numpy as np
from typing import Dict, Optional

from headfuse.errors import StorageError, ValidationError
from headfuse.shape.mesh import LandmarkSet, TriMesh, _frozen, check_topology

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-8
MAGIC = b'HFSM'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQQQ')  # magic, version, 3N, n, T


class ShapeModel:
  """Mean 3N-vector, column-orthonormal 3N x n basis, and the variance
  (not the standard deviation) along each column.

  Parameters
  ----------
  mean
    Flattened mean shape.
  basis
    Principal directions as columns.
  eigenvalues
    Variances, positive and nonincreasing.
  triangles
    Topology shared by every instance.
  name
    Identifier used in metadata of derived artifacts.
  metadata
    Free-form JSON-serializable mapping. The keys `scale`,
    `sagittal_axis` and `landmarks` are understood by other modules.
  """

  def __init__(self,
               mean: np.ndarray,
               basis: np.ndarray,
               eigenvalues: np.ndarray,
               triangles: np.ndarray,
               name: str = 'model',
               metadata: Optional[Dict] = None,
               check: bool = True):
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    basis = np.asarray(basis, dtype=np.float64)
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if mean.size % 3:
      raise ValidationError('Mean length must be a multiple of 3.')
    if basis.ndim != 2 or basis.shape[0] != mean.size:
      raise ValidationError(
          f'Basis must have shape [{mean.size}, n], got {basis.shape}.')
    if basis.shape[1] != eigenvalues.size:
      raise ValidationError('One eigenvalue per basis column is required.')
    if check:
      if np.any(eigenvalues <= 0):
        raise ValidationError('Eigenvalues must be positive.')
      if np.any(np.diff(eigenvalues) > 0):
        raise ValidationError('Eigenvalues must be nonincreasing.')
      gram = basis.T @ basis
      if gram.size and np.max(np.abs(gram - np.eye(len(gram)))) > \
          ORTHONORMAL_TOLERANCE:
        raise ValidationError('Basis columns are not orthonormal.')

    self.mean = _frozen(mean)
    self.basis = _frozen(basis)
    self.eigenvalues = _frozen(eigenvalues)
    # Validates the triangle indices against the vertex count.
    self.template = TriMesh(mean.reshape(-1, 3), triangles)
    self.triangles = self.template.triangles
    self.name = name
    self.metadata = dict(metadata or {})

  @property
  def n_components(self) -> int:
    return self.basis.shape[1]

  @property
  def n_vertices(self) -> int:
    return self.mean.size // 3

  @property
  def stddevs(self) -> np.ndarray:
    return np.sqrt(self.eigenvalues)

  @property
  def sagittal_axis(self) -> int:
    return int(self.metadata.get('sagittal_axis', 0))

  def landmarks(self) -> Optional[LandmarkSet]:
    """Model-correspondence landmarks stored in the metadata, read off the
    mean shape."""
    entry = self.metadata.get('landmarks')
    if not entry:
      return None
    names = list(entry)
    return LandmarkSet.from_mesh(
        self.template, names, [entry[n] for n in names])

  def truncated(self, n: int) -> 'ShapeModel':
    n = max(0, min(int(n), self.n_components))
    return ShapeModel(self.mean, self.basis[:, :n], self.eigenvalues[:n],
                      self.triangles, self.name, self.metadata, check=False)

  def check_mesh(self, mesh: TriMesh):
    check_topology(mesh, self.n_vertices, f'mesh for model {self.name!r}')

  def __repr__(self):
    return (f'ShapeModel(name={self.name!r}, n_vertices={self.n_vertices}, '
            f'n_components={self.n_components})')


def sidecar_path(path: str) -> str:
  return path + '.json'


def save_model(model: ShapeModel, path: str):
  """Binary container plus a JSON sidecar holding the metadata.

  Layout: header (`HFSM`, version, 3N, n, T), then the mean, the basis
  (row-major) and the eigenvalues as little-endian float64, then the
  triangles as little-endian uint32 triplets.
  """
  header = _HEADER.pack(MAGIC, FORMAT_VERSION, model.mean.size,
                        model.n_components, len(model.triangles))
  payload = b''.join([
      header,
      model.mean.astype('<f8').tobytes(),
      np.ascontiguousarray(model.basis).astype('<f8').tobytes(),
      model.eigenvalues.astype('<f8').tobytes(),
      model.triangles.astype('<u4').tobytes(),
  ])
  meta = {
      'name': model.name,
      'format_version': FORMAT_VERSION,
      'eigenvalues': 'variance',
      'scale': model.metadata.get('scale', 'similarity-normalized'),
      'sagittal_axis': model.sagittal_axis,
      'metadata': model.metadata,
  }
  try:
    with open(path, 'wb') as f:
      f.write(payload)
    with open(sidecar_path(path), 'w') as f:
      json.dump(meta, f, indent=2, sort_keys=True)
      f.write('\n')
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e


def load_model(path: str) -> ShapeModel:
  try:
    with open(path, 'rb') as f:
      raw = f.read()
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
  if len(raw) < _HEADER.size:
    raise StorageError(f'{path}: truncated model container.')
  magic, version, size, n, t = _HEADER.unpack_from(raw)
  if magic != MAGIC:
    raise StorageError(f'{path}: not a shape model container.')
  if version != FORMAT_VERSION:
    raise StorageError(f'{path}: unsupported container version {version}.')
  expected = _HEADER.size + 8 * (size + size * n + n) + 4 * 3 * t
  if len(raw) != expected:
    raise StorageError(
        f'{path}: container has {len(raw)} bytes, expected {expected}.')

  offset = _HEADER.size

  def take(dtype, count):
    nonlocal offset
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    offset += arr.nbytes
    return arr

  mean = take('<f8', size).astype(np.float64)
  basis = take('<f8', size * n).astype(np.float64).reshape(size, n)
  eigenvalues = take('<f8', n).astype(np.float64)
  triangles = take('<u4', 3 * t).astype(np.int64).reshape(t, 3)

  name, metadata = 'model', {}
  try:
    with open(sidecar_path(path), 'r') as f:
      meta = json.load(f)
    name = meta.get('name', name)
    metadata = meta.get('metadata', {})
  except FileNotFoundError:
    logger.warning(f'No metadata sidecar for {path}; using defaults.')
  except (OSError, json.JSONDecodeError) as e:
    raise StorageError(f'Cannot read metadata of {path}: {e}') from e
  return ShapeModel(mean, basis, eigenvalues, triangles, name, metadata)
