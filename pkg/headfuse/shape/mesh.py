"""Triangle meshes and landmark sets, the geometric carriers of every model."""

import numpy as np
from typing import Dict, Iterable, List, Optional, Sequence

from headfuse.errors import ValidationError

AXES = {'x': 0, 'y': 1, 'z': 2}


def _frozen(x: np.ndarray) -> np.ndarray:
  x = np.array(x, copy=True)
  x.setflags(write=False)
  return x


def axis_index(axis) -> int:
  if isinstance(axis, str):
    try:
      return AXES[axis]
    except KeyError:
      raise ValidationError(f'Unknown axis {axis!r}.') from None
  if axis not in (0, 1, 2):
    raise ValidationError(f'Unknown axis {axis!r}.')
  return int(axis)


class TriMesh:
  """Vertices (N x 3, millimetres), triangles (T x 3) and optional per-vertex
  colors in [0, 1]. Immutable after construction.

  The flattened view `vector` is the 3N layout `[x1, y1, z1, x2, ...]` used
  by every linear model.
  """

  def __init__(self,
               vertices: np.ndarray,
               triangles: np.ndarray,
               colors: Optional[np.ndarray] = None):
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
      raise ValidationError(
          f'Vertices must have shape [N, 3], got {vertices.shape}.')
    n = len(vertices)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
      raise ValidationError(
          f'Triangle index out of range for {n} vertices.')
    if triangles.size and np.any(
        (triangles[:, 0] == triangles[:, 1])
        & (triangles[:, 1] == triangles[:, 2])):
      raise ValidationError('Degenerate triangle with three equal indices.')
    if colors is not None:
      colors = np.asarray(colors, dtype=np.float64)
      if colors.shape != vertices.shape:
        raise ValidationError(
            f'Colors must have shape {vertices.shape}, got {colors.shape}.')
      colors = _frozen(np.clip(colors, 0., 1.))

    self.vertices = _frozen(vertices)
    self.triangles = _frozen(triangles)
    self.colors = colors

  @classmethod
  def from_vector(cls, vector: np.ndarray, triangles: np.ndarray):
    return cls(np.asarray(vector, dtype=np.float64).reshape(-1, 3), triangles)

  @property
  def n_vertices(self) -> int:
    return len(self.vertices)

  @property
  def vector(self) -> np.ndarray:
    return self.vertices.reshape(-1)

  @property
  def centroid(self) -> np.ndarray:
    return self.vertices.mean(axis=0)

  def with_vertices(self, vertices: np.ndarray) -> 'TriMesh':
    return TriMesh(vertices, self.triangles, self.colors)

  def with_colors(self, colors: np.ndarray) -> 'TriMesh':
    return TriMesh(self.vertices, self.triangles, colors)

  def same_topology(self, other: 'TriMesh') -> bool:
    return (self.n_vertices == other.n_vertices
            and np.array_equal(self.triangles, other.triangles))

  def bounding_radius(self) -> float:
    """Radius of the centroid-centred sphere that encloses every vertex."""
    if self.n_vertices == 0:
      return 0.
    return float(np.max(np.linalg.norm(self.vertices - self.centroid, axis=1)))

  def __repr__(self):
    return (f'TriMesh(n_vertices={self.n_vertices}, '
            f'n_triangles={len(self.triangles)})')


def check_topology(mesh: TriMesh, n_vertices: int, what: str = 'mesh'):
  if mesh.n_vertices != n_vertices:
    raise ValidationError(
        f'Topology mismatch: {what} has {mesh.n_vertices} vertices, '
        f'expected {n_vertices}.')


def crop(mesh: TriMesh, indices: Sequence[int]) -> TriMesh:
  """Sub-mesh on `indices` (in that order), keeping the triangles whose three
  vertices all survive."""
  indices = np.asarray(indices, dtype=np.int64)
  remap = -np.ones(mesh.n_vertices, dtype=np.int64)
  remap[indices] = np.arange(len(indices))
  tris = remap[mesh.triangles]
  tris = tris[np.all(tris >= 0, axis=1)]
  colors = None if mesh.colors is None else mesh.colors[indices]
  return TriMesh(mesh.vertices[indices], tris, colors)


class IndexCrop:
  """Part extractor that crops a whole-topology mesh to fixed indices."""

  def __init__(self, indices: Sequence[int]):
    self.indices = np.asarray(indices, dtype=np.int64)

  def __call__(self, mesh: TriMesh) -> TriMesh:
    return crop(mesh, self.indices)


class LandmarkSet:
  """Named 3D (or 2D image-space) points, optionally tied to vertex indices
  of a model topology."""

  def __init__(self,
               names: Sequence[str],
               points: np.ndarray,
               indices: Optional[Sequence[int]] = None):
    names = [str(n) for n in names]
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] not in (2, 3):
      raise ValidationError(
          f'Landmark points must have shape [K, 2|3], got {points.shape}.')
    if len(names) != len(points):
      raise ValidationError('Landmark names and points differ in length.')
    if len(set(names)) != len(names):
      raise ValidationError('Landmark names must be unique.')
    if indices is not None:
      indices = np.asarray(indices, dtype=np.int64)
      if indices.shape != (len(names),):
        raise ValidationError('One vertex index per landmark is required.')
      indices = _frozen(indices)
    self.names = tuple(names)
    self.points = _frozen(points)
    self.indices = indices

  @classmethod
  def from_dict(cls, mapping: Dict[str, Sequence[float]]):
    names = list(mapping)
    return cls(names, np.array([mapping[n] for n in names], dtype=np.float64))

  @classmethod
  def from_mesh(cls, mesh: TriMesh, names: Sequence[str],
                indices: Sequence[int]):
    """Landmarks read off the vertices of `mesh`."""
    indices = np.asarray(indices, dtype=np.int64)
    return cls(names, mesh.vertices[indices], indices)

  @property
  def dim(self) -> int:
    return self.points.shape[1]

  def __len__(self):
    return len(self.names)

  def __contains__(self, name: str):
    return name in self.names

  def __getitem__(self, name: str) -> np.ndarray:
    return self.points[self.names.index(name)]

  def to_dict(self) -> Dict[str, List[float]]:
    return {n: [float(v) for v in p] for n, p in zip(self.names, self.points)}

  def ordered(self, names: Iterable[str]) -> 'LandmarkSet':
    """Subset in the given order; every name must exist."""
    names = list(names)
    missing = [n for n in names if n not in self.names]
    if missing:
      raise ValidationError(f'Missing landmarks: {missing}.')
    rows = [self.names.index(n) for n in names]
    indices = None if self.indices is None else self.indices[rows]
    return LandmarkSet(names, self.points[rows], indices)

  def check_indices(self, n_vertices: int):
    if self.indices is None:
      raise ValidationError('Landmarks carry no model correspondence indices.')
    if np.any(self.indices < 0) or np.any(self.indices >= n_vertices):
      raise ValidationError(
          f'Landmark index out of range for {n_vertices} vertices.')

  def mirrored(self, axis='z') -> 'LandmarkSet':
    """Negates one coordinate of every point in the canonical frame."""
    k = axis_index(axis)
    if k >= self.dim:
      raise ValidationError(
          f'Cannot mirror {self.dim}D landmarks along {axis}.')
    points = np.array(self.points)
    points[:, k] = -points[:, k]
    return LandmarkSet(self.names, points, self.indices)

  def __repr__(self):
    return f'LandmarkSet(n={len(self)}, dim={self.dim})'
