"""Stitching a registered inner part into an outer mesh."""

import logging
import numpy as np
from dataclasses import replace
from scipy.sparse.csgraph import dijkstra
from typing import Optional, Sequence

from headfuse.errors import ValidationError
from headfuse.registration.nicp import StiffnessProfile, nicp_register
from headfuse.shape.mesh import LandmarkSet, TriMesh, crop
from headfuse.shape.surface import adjacency_matrix

logger = logging.getLogger(__name__)

DEFAULT_BAND_RINGS = 12
# Landmark weight holding the region and the vertices beyond the band.
PIN_WEIGHT = 10.


def ring_distances(mesh: TriMesh, region: Sequence[int]):
  """Graph distance in edges from every vertex to `region`, and the region
  vertex realising it."""
  dist, _, sources = dijkstra(adjacency_matrix(mesh), directed=False,
                              indices=np.asarray(region), unweighted=True,
                              min_only=True, return_predecessors=True)
  return dist, sources


def _pins(outer: TriMesh, index: np.ndarray, positions: np.ndarray):
  names = [str(i) for i in index]
  return (LandmarkSet.from_mesh(outer, names, index),
          LandmarkSet(names, positions))


def merge_meshes(inner: TriMesh,
                 outer: TriMesh,
                 profile: StiffnessProfile,
                 boundary_map: Optional[Sequence[int]],
                 band_rings: int = DEFAULT_BAND_RINGS,
                 pin_weight: float = PIN_WEIGHT,
                 **nicp_kwargs) -> TriMesh:
  """Replaces the region of `outer` covered by `inner` with the geometry of
  `inner`, deforming the `band_rings` rings around the region to close the
  seam.

  The band comes from a NICP of `outer` onto `inner` with the stiffness of
  `profile`, in which the region vertices are pinned to `inner` and the
  vertices beyond the band to their own positions. With `band_rings = 0`
  the region is stitched in without blending.

  Parameters
  ----------
  inner : TriMesh
  outer : TriMesh
    The whole mesh, whose topology is kept.
  profile : StiffnessProfile
  boundary_map : sequence of int
    For every vertex of `inner`, its index in `outer`.
  band_rings : int
  pin_weight : float
    Landmark weight of the pinned vertices.
  """
  if boundary_map is None:
    raise ValidationError('Merging needs an inner-to-outer vertex map.')
  index = np.asarray(boundary_map, dtype=np.int64)
  if index.shape != (inner.n_vertices,):
    raise ValidationError(
        f'Vertex map has {index.size} entries for {inner.n_vertices} '
        'inner vertices.')
  if np.any(index < 0) or np.any(index >= outer.n_vertices):
    raise ValidationError('Vertex map points outside the outer mesh.')
  if band_rings < 0:
    raise ValidationError('Blend band width must be nonnegative.')
  if pin_weight <= 0:
    raise ValidationError('Pin weight must be positive.')

  vertices = np.array(outer.vertices)
  vertices[index] = inner.vertices
  if band_rings == 0:
    return outer.with_vertices(vertices)
  dist, _ = ring_distances(outer, index)
  band = np.isfinite(dist) & (dist >= 1) & (dist <= band_rings)
  if not np.any(band):
    return outer.with_vertices(vertices)

  fixed = np.concatenate([index, np.nonzero(~band & (dist > 0))[0]])
  result = nicp_register(outer, inner,
                         replace(profile, landmark_weight=pin_weight),
                         landmarks=_pins(outer, fixed, vertices[fixed]),
                         prealign_mode='none', **nicp_kwargs)
  if not result.converged:
    logger.warning('Seam registration did not converge.')
  vertices[band] = result.mesh.vertices[band]
  return outer.with_vertices(vertices)


def seam_gap(mesh: TriMesh, reference: TriMesh) -> float:
  """Largest jump in displacement (w.r.t. `reference`) across any edge."""
  disp = mesh.vertices - reference.vertices
  e = np.nonzero(adjacency_matrix(mesh))
  jumps = np.linalg.norm(disp[e[0]] - disp[e[1]], axis=1)
  return float(jumps.max()) if jumps.size else 0.


def align_face_region(reconstruction: TriMesh,
                      scan: TriMesh,
                      face_indices: Sequence[int],
                      profile: StiffnessProfile,
                      band_rings: int = DEFAULT_BAND_RINGS,
                      **nicp_kwargs) -> TriMesh:
  """Registers the face crop of `reconstruction` onto `scan` and merges it
  back."""
  face = crop(reconstruction, face_indices)
  result = nicp_register(face, scan, profile, prealign_mode='none',
                         **nicp_kwargs)
  if not result.converged:
    logger.warning('Face-region alignment did not converge.')
  return merge_meshes(result.mesh, reconstruction, profile, face_indices,
                      band_rings)
