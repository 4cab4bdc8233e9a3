"""Ear models: mirroring, disk unwrapping and fusion into a head kernel."""

import logging
import numpy as np
import scipy.sparse.linalg
from typing import Dict, NamedTuple, Optional, Sequence, Union

from headfuse.errors import ValidationError
from headfuse.fusion.kernel import (
    ModelCovariance, TemplateKernel, anchor_points, apply_psd_mode,
    blend_region)
from headfuse.shape.mesh import TriMesh, axis_index
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import build_pca
from headfuse.shape.procrustes import gpa_align
from headfuse.shape.surface import boundary_loops, edges, uniform_laplacian

logger = logging.getLogger(__name__)

SIDES = ('left', 'right')


def _region_label(side: str) -> str:
  if side not in SIDES:
    raise ValidationError(f'Ear side must be left or right, got {side!r}.')
  return f'{side}-ear'


def mirror_model(model: ShapeModel, axis: Union[int, str, None] = None
                 ) -> ShapeModel:
  """Reflects mean and basis in the sagittal plane and flips the triangle
  winding; eigenvalues are unchanged."""
  k = model.sagittal_axis if axis is None else axis_index(axis)
  mean = model.mean.reshape(-1, 3).copy()
  mean[:, k] = -mean[:, k]
  basis = model.basis.reshape(model.n_vertices, 3, -1).copy()
  basis[:, k] = -basis[:, k]
  metadata = dict(model.metadata)
  metadata['sagittal_axis'] = k
  metadata['mirrored'] = not metadata.get('mirrored', False)
  return ShapeModel(mean.reshape(-1), basis.reshape(model.basis.shape),
                    model.eigenvalues, model.triangles[:, [0, 2, 1]],
                    model.name, metadata)


def build_ear_model(meshes: Sequence[TriMesh],
                    keep: Union[int, float] = 0.997,
                    name: str = 'right-ear',
                    sagittal_axis: int = 0,
                    metadata: Optional[Dict] = None) -> ShapeModel:
  """GPA followed by PCA of registered ear meshes. `metadata` may carry the
  `canal_vertex` and `base_loop` used by `unwrap_ear`."""
  aligned, _ = gpa_align(meshes)
  metadata = dict(metadata or {})
  metadata['sagittal_axis'] = sagittal_axis
  return build_pca(aligned, keep, name, metadata)


class EarUnwrap(NamedTuple):
  uv: np.ndarray      # [N, 2] disk coordinates
  canal: int
  radius: np.ndarray  # [N] in [0, 1]; 0 at the canal, 1 on the base loop


def _check_disk(mesh: TriMesh):
  loops = boundary_loops(mesh)
  used = np.unique(mesh.triangles)
  euler = len(used) - len(edges(mesh)) + len(mesh.triangles)
  if len(loops) != 1 or euler != 1 or len(used) != mesh.n_vertices:
    raise ValidationError(
        f'Ear mesh is not a disk ({len(loops)} boundary loops, '
        f'Euler characteristic {euler}).')
  return loops[0]


def unwrap_ear(ear_mean: TriMesh,
               canal_vertex: int,
               base_loop: Optional[Sequence[int]] = None) -> EarUnwrap:
  """Tutte embedding of the ear disk with the base loop on the unit circle
  (by arc length), followed by the disk automorphism
  `z -> (z - a) / (1 - conj(a) z)` that moves the canal to the origin.

  Raises
  ------
  ValidationError
    The mesh is not a disk, the loop is not its boundary,
    or the canal lies on the boundary.
  """
  loop = _check_disk(ear_mean)
  if base_loop is not None:
    base_loop = np.asarray(base_loop, dtype=np.int64)
    if set(base_loop.tolist()) != set(loop.tolist()):
      raise ValidationError('Base loop is not the boundary of the ear mesh.')
    loop = base_loop
  n = ear_mean.n_vertices
  if not 0 <= canal_vertex < n or canal_vertex in set(loop.tolist()):
    raise ValidationError('Canal vertex must be an interior vertex.')

  closed = ear_mean.vertices[np.append(loop, loop[0])]
  arc = np.concatenate(
      [[0.], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
  theta = 2 * np.pi * arc[:-1] / arc[-1]

  uv = np.zeros((n, 2))
  uv[loop] = np.column_stack([np.cos(theta), np.sin(theta)])
  interior = np.setdiff1d(np.arange(n), loop)
  lap = uniform_laplacian(ear_mean).tocsr()
  l_ii = lap[interior][:, interior].tocsc()
  rhs = -lap[interior][:, loop] @ uv[loop]
  uv[interior] = np.column_stack(
      [scipy.sparse.linalg.spsolve(l_ii, rhs[:, k]) for k in range(2)])

  z = uv[:, 0] + 1j * uv[:, 1]
  a = z[canal_vertex]
  w = (z - a) / (1. - np.conj(a) * z)
  w[canal_vertex] = 0.
  uv = np.column_stack([w.real, w.imag])
  radius = np.abs(w)
  radius = np.clip(radius / np.mean(radius[loop]), 0., 1.)
  return EarUnwrap(uv, int(canal_vertex), radius)


def flipped_triangles(mesh: TriMesh, uv: np.ndarray) -> int:
  """Number of triangles whose 2D orientation disagrees with the majority."""
  p = uv[mesh.triangles]
  cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
           - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
  sign = 1. if np.sum(cross > 0) >= np.sum(cross < 0) else -1.
  return int(np.sum(sign * cross <= 0))


class EarRegistration(NamedTuple):
  """Ear mean registered onto the template, and the template points that
  form the ear region."""
  ear_surface: Optional[TriMesh]
  region: Sequence[int]


def ear_blend_weights(unwrap: EarUnwrap, anchors) -> np.ndarray:
  rho = np.einsum('mk,mk->m', anchors.coords,
                  unwrap.radius[anchors.vertices])
  return np.clip(rho, 0., 1.)


def fuse_ear_kernel(universal: TemplateKernel,
                    ear: ShapeModel,
                    side: str,
                    unwrap: EarUnwrap,
                    registration: Optional[EarRegistration],
                    rule: str = 'product',
                    psd: str = 'repair') -> TemplateKernel:
  """Blends an ear covariance into the ear region of `universal`.

  The weight `rho` of a region point is the unwrap radius at its anchor on
  the ear surface, so the ear model dominates near the canal and the head
  kernel at the base loop. See `blend_region` for the two rules; blocks
  with both points outside the region are untouched.

  Raises
  ------
  ValidationError
    The registration is missing, or the region overlaps
    the other ear.
  """
  label = _region_label(side)
  if registration is None or registration.ear_surface is None:
    raise ValidationError(f'Fusing the {side} ear needs its registration.')
  ear.check_mesh(registration.ear_surface)
  if unwrap.radius.shape != (ear.n_vertices,):
    raise ValidationError('Unwrap does not match the ear model topology.')
  region = np.asarray(registration.region, dtype=np.int64)
  if region.size == 0:
    raise ValidationError('Ear region is empty.')
  other = _region_label('left' if side == 'right' else 'right')
  if any(universal.regions[i] == other for i in region):
    raise ValidationError(f'The {side} ear region overlaps the {other}.')

  anchors = anchor_points(universal.template.vertices[region],
                          registration.ear_surface)
  rho = ear_blend_weights(unwrap, anchors)
  kernel = blend_region(universal, region, rho, ModelCovariance(ear),
                        anchors, rule)
  kernel = apply_psd_mode(kernel, psd)

  regions = list(universal.regions)
  for i in region:
    regions[i] = label
  logger.info(f'Fused the {side} ear into {len(region)} template points.')
  return kernel.relabelled(regions)
