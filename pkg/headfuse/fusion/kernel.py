"""Universal covariance kernels blended from several PCA models.

Every source model contributes a covariance `K = U diag(lambda) U^T`. Points
of a reference template are anchored on each source surface by barycentric
coordinates, and the local 3 x 3 blocks of the source covariance are blended
over the anchor triangles. Two blend rules exist:

* `sum`: weights `(c_v^i + c_k^j) / 2` over the 9 vertex pairs, whose sum is
  exactly 3 for valid barycentrics.
* `product`: weights `c_v^i c_k^j`, i.e. barycentric interpolation of the
  covariance field. The block is `A_i A_j^T`, so the assembled kernel is PSD.

Both rules are evaluated in factor space: with `F_v` the 3 x n rows of
`U sqrt(lambda)` of vertex `v`, `A_i = sum_v c_v^i F_v` and
`S_i = sum_v F_v`, the `sum` block is `(A_i S_j^T + S_i A_j^T) / 6` and the
`product` block is `A_i A_j^T`. With `D = A - S / 3` the `sum` kernel is
`(S / 3 + D / 2)(S / 3 + D / 2)^T - D D^T / 4`, which can be indefinite, so
`product` is the default rule.
"""

import abc
import json
import logging
import struct
import numpy as np
import scipy.linalg
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple, Union

from headfuse.errors import NumericalError, StorageError, ValidationError
from headfuse.fusion.base import Covariance, coordinate_index
from headfuse.shape.mesh import TriMesh
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import _fix_signs
from headfuse.shape.surface import closest_points
from headfuse.utils import deterministic, get_rng

logger = logging.getLogger(__name__)

BLEND_RULES = ('sum', 'product')
PSD_MODES = ('repair', 'check', 'ignore')
PSD_TOLERANCE = 1e-6
REGIONS = ('head', 'face', 'left-ear', 'right-ear')


class ModelCovariance(Covariance):
  """Lazy block accessor of `U diag(lambda) U^T`."""

  def __init__(self, model: ShapeModel):
    self.model = model
    self.factor = model.basis * model.stddevs

  @property
  def n_points(self) -> int:
    return self.model.n_vertices

  def rows(self, v: int) -> np.ndarray:
    return self.factor[3 * v:3 * v + 3]

  def block(self, i: int, j: int) -> np.ndarray:
    return self.rows(i) @ self.rows(j).T

  def dense(self) -> np.ndarray:
    return self.factor @ self.factor.T


class BarycentricAnchor(NamedTuple):
  triangle: int
  coords: np.ndarray    # [3], nonnegative, sums to one
  vertices: np.ndarray  # [3] vertex indices of the triangle


class AnchorSet:
  """Anchors of many points on one surface, stored as arrays."""

  def __init__(self, triangles: np.ndarray, coords: np.ndarray,
               vertices: np.ndarray):
    self.triangles = np.asarray(triangles, dtype=np.int64)
    self.coords = np.asarray(coords, dtype=np.float64)
    self.vertices = np.asarray(vertices, dtype=np.int64)

  def __len__(self):
    return len(self.triangles)

  def __getitem__(self, i: int) -> BarycentricAnchor:
    return BarycentricAnchor(int(self.triangles[i]), self.coords[i],
                             self.vertices[i])

  def __iter__(self) -> Iterator[BarycentricAnchor]:
    return (self[i] for i in range(len(self)))

  def subset(self, indices: Sequence[int]) -> 'AnchorSet':
    indices = np.asarray(indices, dtype=np.int64)
    return AnchorSet(self.triangles[indices], self.coords[indices],
                     self.vertices[indices])

  def positions(self, surface: TriMesh) -> np.ndarray:
    return np.einsum('mk,mkd->md', self.coords, surface.vertices[self.vertices])


def anchor_points(template: Union[TriMesh, np.ndarray],
                  surface: TriMesh) -> AnchorSet:
  """Closest point on `surface` of every template point, as triangle plus
  barycentric coordinates."""
  points = template.vertices if isinstance(template, TriMesh) else template
  cp = closest_points(surface, points)
  return AnchorSet(cp.triangles, cp.barycentric,
                   surface.triangles[cp.triangles])


def _check_rule(rule: str):
  if rule not in BLEND_RULES:
    raise ValidationError(f'Unknown blend rule {rule!r}.')


def blend_weights(coords_i: np.ndarray, coords_j: np.ndarray,
                  rule: str = 'sum') -> np.ndarray:
  """The 3 x 3 weights `w[v, k]` of one anchor pair."""
  _check_rule(rule)
  if rule == 'sum':
    return 0.5 * (coords_i[:, None] + coords_j[None, :])
  return coords_i[:, None] * coords_j[None, :]


def blend_local_block(anchor_i: BarycentricAnchor,
                      anchor_j: BarycentricAnchor,
                      covariance: Covariance,
                      rule: str = 'sum') -> np.ndarray:
  """`sum_{v,k} w_vk K^{v,k} / sum_{v,k} w_vk` for one pair of anchors."""
  w = blend_weights(anchor_i.coords, anchor_j.coords, rule)
  block = np.zeros((3, 3))
  for a, v in enumerate(anchor_i.vertices):
    for b, k in enumerate(anchor_j.vertices):
      block += w[a, b] * covariance.block(int(v), int(k))
  return block / w.sum()


def blended_factors(covariance: ModelCovariance, anchors: AnchorSet):
  """`A` (barycentric-weighted) and `S` (plain sum) factor rows per anchor,
  each of shape `[3M, n]`."""
  f = covariance.factor.reshape(covariance.n_points, 3, -1)
  corner = f[anchors.vertices]  # [M, 3 corners, 3, n]
  a = np.einsum('mc,mcdn->mdn', anchors.coords, corner)
  s = corner.sum(axis=1)
  n = f.shape[-1]
  return a.reshape(-1, n), s.reshape(-1, n)


def blended_matrix(covariance: ModelCovariance,
                   anchors: AnchorSet,
                   others: Optional[AnchorSet] = None,
                   rule: str = 'sum') -> np.ndarray:
  """Dense `[3M, 3K]` blended covariance between two anchor sets."""
  _check_rule(rule)
  a_i, s_i = blended_factors(covariance, anchors)
  if others is None:
    a_j, s_j = a_i, s_i
  else:
    a_j, s_j = blended_factors(covariance, others)
  if rule == 'product':
    return a_i @ a_j.T
  return (a_i @ s_j.T + s_i @ a_j.T) / 6.


class BlendWeights(NamedTuple):
  """Face/head blend weight per template point."""
  rho: np.ndarray        # [N] in [0, 1]
  face_mask: np.ndarray  # [N] bool
  nose_tip: int
  d_min: float
  d_max: float


def face_head_blend_weights(template: TriMesh,
                            face_mask: np.ndarray,
                            nose_tip: int) -> BlendWeights:
  """Euclidean distance from the nose tip, mapped affinely so that the
  nearest face point gets 0 and the farthest gets 1, clamped to [0, 1]."""
  face_mask = np.asarray(face_mask, dtype=bool).reshape(-1)
  if face_mask.shape != (template.n_vertices,):
    raise ValidationError('Face mask must have one entry per template point.')
  if not np.any(face_mask):
    raise ValidationError('Face region is empty.')
  if not 0 <= nose_tip < template.n_vertices or not face_mask[nose_tip]:
    raise ValidationError('Nose tip must lie inside the face region.')
  d = np.linalg.norm(template.vertices - template.vertices[nose_tip], axis=1)
  d_min = float(d[face_mask].min())
  d_max = float(d[face_mask].max())
  span = d_max - d_min
  rho = np.zeros_like(d) if span <= 0 else (d - d_min) / span
  return BlendWeights(np.clip(rho, 0., 1.), face_mask, int(nose_tip),
                      d_min, d_max)


# Largest `3N` assembled as a dense matrix; bigger kernels stay in factor
# form.
DENSE_LIMIT = 12000

_HEADER = struct.Struct('<4sIQQQ')  # magic, version, N, T, rank (0: dense)
FORMAT_VERSION = 2


def _check_regions(template: TriMesh,
                   regions: Optional[Sequence[str]]) -> Tuple[str, ...]:
  if regions is None:
    regions = ['head'] * template.n_vertices
  regions = tuple(str(r) for r in regions)
  if len(regions) != template.n_vertices:
    raise ValidationError('One region label per template point is needed.')
  unknown = set(regions) - set(REGIONS)
  if unknown:
    raise ValidationError(f'Unknown region labels {sorted(unknown)}.')
  return regions


class TemplateKernel(Covariance):
  """Symmetric `3N x 3N` covariance over the points of a reference template.

  Parameters
  ----------
  template : TriMesh
    The reference surface; point `i` is vertex `i`.
  regions : sequence of str, optional
    Region label per point, one of `head`, `face`, `left-ear`,
    `right-ear`.
  name : str
    Identifier for derived models.
  """

  MAGIC = NotImplemented

  def __init__(self, template: TriMesh,
               regions: Optional[Sequence[str]] = None,
               name: str = 'universal'):
    self.template = template
    self.regions = _check_regions(template, regions)
    self.name = name

  @property
  def n_points(self) -> int:
    return self.template.n_vertices

  def region_indices(self, region: str) -> np.ndarray:
    return np.array([i for i, r in enumerate(self.regions) if r == region],
                    dtype=np.int64)

  @abc.abstractmethod
  def submatrix(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return NotImplemented

  @abc.abstractmethod
  def trace(self) -> float:
    return NotImplemented

  @abc.abstractmethod
  def dense(self) -> np.ndarray:
    return NotImplemented

  @abc.abstractmethod
  def eigenvalues(self) -> np.ndarray:
    """The spectrum in descending order."""
    return NotImplemented

  @abc.abstractmethod
  def spectrum(self, keep: Optional[int] = None):
    """The top-`keep` eigenvalues (descending) and their eigenvectors as the
    columns of a `[3N, keep]` array."""
    return NotImplemented

  @abc.abstractmethod
  def relabelled(self, regions: Optional[Sequence[str]] = None,
                 name: Optional[str] = None) -> 'TemplateKernel':
    return NotImplemented

  @abc.abstractmethod
  def truncated(self, keep: int) -> 'TemplateKernel':
    """The kernel rebuilt from its top-`keep` eigenpairs."""
    return NotImplemented

  @abc.abstractmethod
  def _payload(self):
    return NotImplemented

  def save(self, path: str):
    """Header, template vertices (f8), triangles (u4), then the kernel
    payload (f8); regions go to a JSON sidecar."""
    payload, rank = self._payload()
    n, t = self.n_points, len(self.template.triangles)
    try:
      with open(path, 'wb') as f:
        f.write(_HEADER.pack(self.MAGIC, FORMAT_VERSION, n, t, rank))
        f.write(self.template.vertices.astype('<f8').tobytes())
        f.write(self.template.triangles.astype('<u4').tobytes())
        f.write(payload.astype('<f8').tobytes())
      with open(path + '.json', 'w') as f:
        json.dump({'name': self.name, 'regions': list(self.regions),
                   'format_version': FORMAT_VERSION}, f, indent=2,
                  sort_keys=True)
        f.write('\n')
    except OSError as e:
      raise StorageError(f'Cannot write {path}: {e}') from e

  @classmethod
  def load(cls, path: str) -> 'TemplateKernel':
    kernel = load_kernel(path)
    if not isinstance(kernel, cls):
      raise StorageError(f'{path} holds a {type(kernel).__name__}, not a '
                         f'{cls.__name__}.')
    return kernel


class BlockKernel(TemplateKernel):
  """Kernel held as a dense matrix; the upper triangle is stored."""

  MAGIC = b'HFBK'

  def __init__(self, template: TriMesh, matrix: np.ndarray,
               regions: Optional[Sequence[str]] = None,
               name: str = 'universal'):
    super().__init__(template, regions, name)
    matrix = np.asarray(matrix, dtype=np.float64)
    size = 3 * template.n_vertices
    if matrix.shape != (size, size):
      raise ValidationError(
          f'Kernel must have shape [{size}, {size}], got {matrix.shape}.')
    self.matrix = matrix

  @classmethod
  def from_model(cls, model: ShapeModel,
                 regions: Optional[Sequence[str]] = None) -> 'BlockKernel':
    """Dense `U diag(lambda) U^T` over the model's own mean shape."""
    return cls(model.template, ModelCovariance(model).dense(), regions,
               model.name)

  def block(self, i: int, j: int) -> np.ndarray:
    return self.matrix[3 * i:3 * i + 3, 3 * j:3 * j + 3]

  def submatrix(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return self.matrix[np.ix_(coordinate_index(rows), coordinate_index(cols))]

  def trace(self) -> float:
    return float(np.trace(self.matrix))

  def dense(self) -> np.ndarray:
    return self.matrix

  def eigenvalues(self) -> np.ndarray:
    return scipy.linalg.eigvalsh(self.matrix)[::-1]

  def spectrum(self, keep: Optional[int] = None):
    size = len(self.matrix)
    keep = size if keep is None else min(int(keep), size)
    w, v = scipy.linalg.eigh(self.matrix,
                             subset_by_index=[size - keep, size - 1])
    return w[::-1], v[:, ::-1]

  def with_matrix(self, matrix: np.ndarray,
                  regions: Optional[Sequence[str]] = None) -> 'BlockKernel':
    return BlockKernel(self.template, matrix,
                       self.regions if regions is None else regions,
                       self.name)

  def relabelled(self, regions=None, name=None) -> 'BlockKernel':
    return BlockKernel(self.template, self.matrix,
                       self.regions if regions is None else regions,
                       name or self.name)

  def truncated(self, keep: int) -> 'BlockKernel':
    w, v = self.spectrum(keep)
    matrix = (v * np.maximum(w, 0.)) @ v.T
    return self.with_matrix(0.5 * (matrix + matrix.T))

  def _payload(self):
    return self.matrix[np.triu_indices(len(self.matrix))], 0

  @staticmethod
  def _payload_size(n: int, rank: int) -> int:
    return 3 * n * (3 * n + 1) // 2

  @classmethod
  def _from_payload(cls, template, payload, rank, regions, name):
    m = 3 * template.n_vertices
    matrix = np.zeros((m, m))
    matrix[np.triu_indices(m)] = payload
    matrix = matrix + np.triu(matrix, 1).T
    return cls(template, matrix, regions, name)


class FactorKernel(TemplateKernel):
  """Kernel held as `G G^T` with a `[3N, r]` factor `G`.

  The eigenpairs come from the `r x r` Gram matrix `G^T G`, so the `3N x 3N`
  matrix is never formed.
  """

  MAGIC = b'HFFK'

  def __init__(self, template: TriMesh, factor: np.ndarray,
               regions: Optional[Sequence[str]] = None,
               name: str = 'universal'):
    super().__init__(template, regions, name)
    factor = np.asarray(factor, dtype=np.float64)
    if factor.ndim != 2 or len(factor) != 3 * template.n_vertices:
      raise ValidationError(
          f'Kernel factor must have {3 * template.n_vertices} rows, got '
          f'shape {factor.shape}.')
    self.factor = factor

  @classmethod
  def from_model(cls, model: ShapeModel,
                 regions: Optional[Sequence[str]] = None) -> 'FactorKernel':
    return cls(model.template, ModelCovariance(model).factor, regions,
               model.name)

  @property
  def rank(self) -> int:
    return self.factor.shape[1]

  def block(self, i: int, j: int) -> np.ndarray:
    return self.factor[3 * i:3 * i + 3] @ self.factor[3 * j:3 * j + 3].T

  def submatrix(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return (self.factor[coordinate_index(rows)] @
            self.factor[coordinate_index(cols)].T)

  def trace(self) -> float:
    return float(np.sum(self.factor ** 2))

  def dense(self) -> np.ndarray:
    return self.factor @ self.factor.T

  def eigenvalues(self) -> np.ndarray:
    return scipy.linalg.eigvalsh(self.factor.T @ self.factor)[::-1]

  def spectrum(self, keep: Optional[int] = None):
    w, u = scipy.linalg.eigh(self.factor.T @ self.factor)
    w, u = w[::-1], u[:, ::-1]
    keep = self.rank if keep is None else min(int(keep), self.rank)
    w, u = w[:keep], u[:, :keep]
    top = max(float(w[0]), 0.) if w.size else 0.
    positive = w > max(1e-12 * top, 1e-300)
    v = np.zeros((len(self.factor), keep))
    v[:, positive] = self.factor @ u[:, positive] / np.sqrt(w[positive])
    return np.where(positive, w, 0.), v

  def with_factor(self, factor: np.ndarray) -> 'FactorKernel':
    return FactorKernel(self.template, factor, self.regions, self.name)

  def relabelled(self, regions=None, name=None) -> 'FactorKernel':
    return FactorKernel(self.template, self.factor,
                        self.regions if regions is None else regions,
                        name or self.name)

  def truncated(self, keep: int) -> 'FactorKernel':
    w, v = self.spectrum(keep)
    return self.with_factor(v * np.sqrt(w))

  def _payload(self):
    return self.factor.reshape(-1), self.rank

  @staticmethod
  def _payload_size(n: int, rank: int) -> int:
    return 3 * n * rank

  @classmethod
  def _from_payload(cls, template, payload, rank, regions, name):
    return cls(template, payload.reshape(3 * template.n_vertices, rank),
               regions, name)


KERNEL_TYPES = {cls.MAGIC: cls for cls in (BlockKernel, FactorKernel)}


def load_kernel(path: str) -> TemplateKernel:
  """Reads a dense or factored kernel, dispatching on the file magic."""
  try:
    with open(path, 'rb') as f:
      raw = f.read()
    with open(path + '.json', 'r') as f:
      meta = json.load(f)
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
  except json.JSONDecodeError as e:
    raise StorageError(f'Malformed metadata for {path}: {e}') from e
  if len(raw) < _HEADER.size:
    raise StorageError(f'{path}: truncated kernel file.')
  magic, version, n, t, rank = _HEADER.unpack_from(raw)
  if magic not in KERNEL_TYPES or version != FORMAT_VERSION:
    raise StorageError(f'{path}: not a kernel file of version '
                       f'{FORMAT_VERSION}.')
  cls = KERNEL_TYPES[magic]
  count = cls._payload_size(n, rank)
  expected = _HEADER.size + 8 * 3 * n + 4 * 3 * t + 8 * count
  if len(raw) != expected:
    raise StorageError(f'{path}: kernel payload has the wrong size.')
  offset = _HEADER.size
  vertices = np.frombuffer(raw, '<f8', 3 * n, offset).reshape(n, 3)
  offset += 8 * 3 * n
  triangles = np.frombuffer(raw, '<u4', 3 * t, offset).reshape(t, 3)
  offset += 4 * 3 * t
  payload = np.frombuffer(raw, '<f8', count, offset).astype(np.float64)
  template = TriMesh(vertices.astype(np.float64), triangles.astype(np.int64))
  return cls._from_payload(template, payload, rank, meta.get('regions'),
                           meta.get('name', 'universal'))


def kernel_from_model(model: ShapeModel,
                      regions: Optional[Sequence[str]] = None,
                      dense_limit: int = DENSE_LIMIT) -> TemplateKernel:
  """`U diag(lambda) U^T` of `model`, factored when `3N > dense_limit`."""
  if 3 * model.n_vertices > dense_limit:
    return FactorKernel.from_model(model, regions)
  return BlockKernel.from_model(model, regions)


def repair_psd(matrix: np.ndarray,
               tolerance: float = PSD_TOLERANCE) -> np.ndarray:
  """Clips the negative eigenvalues of the symmetrised `matrix` to zero.

  Parameters
  ----------
  matrix : np.ndarray
  tolerance : float
    The clipped eigenvalue mass must stay below `tolerance * trace`.

  Returns
  -------
  np.ndarray
    A symmetric PSD matrix; `matrix` itself (symmetrised) when nothing is
    negative.
  """
  matrix = 0.5 * (matrix + matrix.T)
  trace = float(np.trace(matrix))
  w, v = scipy.linalg.eigh(matrix)
  if w.size == 0 or w[0] >= 0:
    return matrix
  negative = float(-w[w < 0].sum())
  if negative >= tolerance * abs(trace):
    raise NumericalError(
        f'Kernel is indefinite: negative eigenvalue mass {negative:.3g} '
        f'against trace {trace:.3g}.')
  logger.debug(f'Clipping negative eigenvalue mass {negative:.3g}.')
  w = np.maximum(w, 0.)
  repaired = (v * w) @ v.T
  return 0.5 * (repaired + repaired.T)


def check_psd(matrix: np.ndarray, tolerance: float = PSD_TOLERANCE):
  trace = float(np.trace(matrix))
  w = scipy.linalg.eigvalsh(matrix)
  if w.size and w[0] < -tolerance * abs(trace) / len(w):
    raise NumericalError(
        f'Kernel smallest eigenvalue {w[0]:.3g} is below tolerance.')


def apply_psd_mode(kernel: TemplateKernel, mode: str) -> TemplateKernel:
  """Repairs or checks a dense kernel; factored kernels are PSD already."""
  if mode not in PSD_MODES:
    raise ValidationError(f'Unknown PSD mode {mode!r}.')
  if not isinstance(kernel, BlockKernel) or mode == 'ignore':
    return kernel
  if mode == 'repair':
    return kernel.with_matrix(repair_psd(kernel.matrix))
  check_psd(kernel.matrix)
  return kernel


def blend_region(kernel: TemplateKernel,
                 region: np.ndarray,
                 rho: np.ndarray,
                 covariance: ModelCovariance,
                 anchors: AnchorSet,
                 rule: str = 'product') -> TemplateKernel:
  """Blends the source `covariance`, anchored at the `region` points of
  `kernel`, into the kernel with per-point weights `rho` (1 keeps the
  kernel, 0 takes the source).

  With the `product` rule, block `(i, j)` becomes
  `sqrt(rho_i rho_j) K + sqrt((1 - rho_i)(1 - rho_j)) K_src`, taking
  `rho = 1` outside the region. The result is `[s G, t A]` times its own
  transpose, so it stays PSD, and blocks with both points outside are
  unchanged. With the `sum` rule the region block becomes
  `rho_ij K + (1 - rho_ij) K_src` with `rho_ij = (rho_i + rho_j) / 2` and
  every other block is unchanged; this needs a dense kernel and may be
  indefinite.

  Parameters
  ----------
  kernel : TemplateKernel
  region : np.ndarray
    Template point indices, one per anchor.
  rho : np.ndarray
    Weight in [0, 1] per region point.
  covariance : ModelCovariance
  anchors : AnchorSet
    The region points anchored on the source surface.
  rule : str
  """
  _check_rule(rule)
  region = np.asarray(region, dtype=np.int64).reshape(-1)
  rho = np.asarray(rho, dtype=np.float64).reshape(-1)
  if rho.shape != region.shape or len(anchors) != len(region):
    raise ValidationError('One weight and one anchor per region point are '
                          'needed.')
  if np.any(rho < 0) or np.any(rho > 1):
    raise ValidationError('Blend weights must lie in [0, 1].')
  rows = coordinate_index(region)
  if rule == 'sum':
    if not isinstance(kernel, BlockKernel):
      raise ValidationError('The sum rule needs a dense kernel.')
    k_src = blended_matrix(covariance, anchors, rule='sum')
    p = np.kron(0.5 * (rho[:, None] + rho[None, :]), np.ones((3, 3)))
    matrix = kernel.matrix.copy()
    block = np.ix_(rows, rows)
    matrix[block] = p * matrix[block] + (1. - p) * k_src
    return kernel.with_matrix(matrix)

  weight = np.ones(kernel.n_points)
  weight[region] = rho
  s = np.sqrt(np.repeat(weight, 3))
  source, _ = blended_factors(covariance, anchors)
  source = np.sqrt(np.repeat(1. - rho, 3))[:, None] * source
  if isinstance(kernel, FactorKernel):
    padded = np.zeros((len(s), source.shape[1]))
    padded[rows] = source
    return kernel.with_factor(np.hstack([s[:, None] * kernel.factor, padded]))
  matrix = kernel.matrix * np.outer(s, s)
  matrix[np.ix_(rows, rows)] += source @ source.T
  return kernel.with_matrix(matrix)


class KernelRegistrations(NamedTuple):
  """Surfaces the template is anchored on.

  Attributes
  ----------
  face_surface : TriMesh
    Face mean registered onto the head mean (face topology).
  head_surface : TriMesh, optional
    Head surface (head topology); defaults to the head mean.
  template_on_head : TriMesh, optional
    Template registered onto the head mean; defaults to the template.
  """
  face_surface: Optional[TriMesh]
  head_surface: Optional[TriMesh] = None
  template_on_head: Optional[TriMesh] = None


def build_universal_kernel(head: ShapeModel,
                           face: ShapeModel,
                           template: TriMesh,
                           registrations: KernelRegistrations,
                           weights: BlendWeights,
                           rule: str = 'product',
                           psd: str = 'repair',
                           dense_limit: int = DENSE_LIMIT) -> TemplateKernel:
  """Blends the head and face covariances over `template`.

  The head covariance is anchored everywhere; the face covariance is
  blended into the face region by `blend_region` with weights `rho`. With
  the `product` rule the kernel is kept as a factor once `3N` exceeds
  `dense_limit`.

  Raises
  ------
  ValidationError
    A registration is missing or inconsistent.
  NumericalError
    The assembled kernel is indefinite beyond repair.
  """
  _check_rule(rule)
  if registrations is None or registrations.face_surface is None:
    raise ValidationError('Kernel fusion needs the registered face surface.')
  head_surface = registrations.head_surface or head.template
  placed = registrations.template_on_head or template
  head.check_mesh(head_surface)
  face.check_mesh(registrations.face_surface)
  if placed.n_vertices != template.n_vertices:
    raise ValidationError('Registered template has a different topology.')
  if weights.rho.shape != (template.n_vertices,):
    raise ValidationError('Blend weights do not match the template.')

  head_cov = ModelCovariance(head)
  head_anchors = anchor_points(placed, head_surface)
  size = 3 * template.n_vertices
  if rule == 'product':
    a_head, _ = blended_factors(head_cov, head_anchors)
    if size > dense_limit:
      kernel = FactorKernel(template, a_head)
    else:
      kernel = BlockKernel(template, a_head @ a_head.T)
  else:
    if size > dense_limit:
      logger.warning(f'The sum rule assembles a dense {size} x {size} '
                     'kernel.')
    kernel = BlockKernel(template,
                         blended_matrix(head_cov, head_anchors, rule='sum'))

  face_idx = np.nonzero(weights.face_mask)[0]
  face_anchors = anchor_points(placed.vertices[face_idx],
                               registrations.face_surface)
  kernel = blend_region(kernel, face_idx, weights.rho[face_idx],
                        ModelCovariance(face), face_anchors, rule)
  kernel = apply_psd_mode(kernel, psd)

  regions = np.where(weights.face_mask, 'face', 'head')
  logger.info(f'Assembled a {type(kernel).__name__} over '
              f'{template.n_vertices} points ({len(face_idx)} in the face '
              'region).')
  return kernel.relabelled(regions.tolist())


def kernel_eigenmodel(kernel: TemplateKernel, keep: int,
                      name: Optional[str] = None) -> ShapeModel:
  """Top-`keep` eigenpairs of the kernel as a model whose mean is the
  template.

  Raises
  ------
  ValidationError
    `keep` is not positive.
  NumericalError
    The kernel has no positive eigenvalue.
  """
  if keep <= 0:
    raise ValidationError(f'Cannot keep {keep} components.')
  w, v = kernel.spectrum(keep)
  top = max(float(w[0]), 0.) if w.size else 0.
  positive = w > max(1e-12 * top, 1e-300)
  rank = int(np.sum(positive))
  if rank == 0:
    raise NumericalError('Kernel has no positive eigenvalue.')
  if rank < keep:
    logger.warning(
        f'Requested {keep} components, the kernel supports {rank}.')
  metadata = {'achieved_rank': rank, 'regions': list(kernel.regions)}
  return ShapeModel(kernel.template.vector, _fix_signs(v[:, :rank]),
                    w[:rank], kernel.template.triangles,
                    name or kernel.name, metadata)


@deterministic
def sample_gpmm(model: Union[ShapeModel, TemplateKernel],
                seed: Optional[int] = None,
                alpha: Optional[np.ndarray] = None) -> TriMesh:
  """`template + sum_i sqrt(lambda_i) alpha_i phi_i` with `alpha ~ N(0, I)`.

  A kernel is first decomposed with its full spectrum.
  """
  if isinstance(model, TemplateKernel):
    model = kernel_eigenmodel(model, 3 * model.n_points)
  if alpha is None:
    alpha = get_rng(seed).standard_normal(model.n_components)
  alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
  if alpha.size != model.n_components:
    raise ValidationError('One coefficient per component is required.')
  return TriMesh.from_vector(model.mean + model.basis @ (model.stddevs * alpha),
                             model.triangles)
