"""Closest-point queries, boundaries and connectivity of triangle meshes."""

import logging
import numpy as np
import scipy.sparse
import trimesh
from scipy.spatial import cKDTree
from typing import List, NamedTuple

from headfuse.errors import ValidationError
from headfuse.shape.mesh import TriMesh

logger = logging.getLogger(__name__)

# Barycentric coordinates below this count as zero when deciding whether a
# closest point lies on an edge or a vertex.
EDGE_EPS = 1e-9


class ClosestPoints(NamedTuple):
  triangles: np.ndarray    # [M] triangle index
  points: np.ndarray       # [M, 3]
  barycentric: np.ndarray  # [M, 3], nonnegative, rows sum to one
  distances: np.ndarray    # [M]
  on_boundary: np.ndarray  # [M] bool


def edges(mesh: TriMesh) -> np.ndarray:
  """Unique undirected edges as sorted vertex pairs."""
  e = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
  return np.unique(e, axis=0)


def boundary_edges(mesh: TriMesh) -> np.ndarray:
  """Edges used by exactly one triangle."""
  e = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
  if len(e) == 0:
    return np.zeros((0, 2), dtype=np.int64)
  single = trimesh.grouping.group_rows(e, require_count=1)
  return e[np.asarray(single, dtype=np.int64).reshape(-1)]


def boundary_vertices(mesh: TriMesh) -> np.ndarray:
  mask = np.zeros(mesh.n_vertices, dtype=bool)
  mask[boundary_edges(mesh).reshape(-1)] = True
  return mask


def boundary_loops(mesh: TriMesh) -> List[np.ndarray]:
  """Closed boundary loops as ordered vertex lists, longest first."""
  be = boundary_edges(mesh)
  neighbours = {}
  for a, b in be.tolist():
    neighbours.setdefault(a, []).append(b)
    neighbours.setdefault(b, []).append(a)
  if any(len(v) != 2 for v in neighbours.values()):
    raise ValidationError('Boundary has a non-manifold vertex.')

  loops, seen = [], set()
  for start in sorted(neighbours):
    if start in seen:
      continue
    loop = [start]
    seen.add(start)
    prev, cur = start, neighbours[start][0]
    while cur != start:
      loop.append(cur)
      seen.add(cur)
      a, b = neighbours[cur]
      prev, cur = cur, (b if a == prev else a)
    loops.append(np.array(loop, dtype=np.int64))
  loops.sort(key=len, reverse=True)
  return loops


def boundary_loop(mesh: TriMesh) -> np.ndarray:
  """The longest boundary loop, ordered."""
  loops = boundary_loops(mesh)
  if not loops:
    raise ValidationError('Mesh has no boundary.')
  return loops[0]


def adjacency_matrix(mesh: TriMesh) -> scipy.sparse.csr_matrix:
  e = edges(mesh)
  n = mesh.n_vertices
  a = scipy.sparse.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])),
                              shape=(n, n))
  return (a + a.T).tocsr()


def uniform_laplacian(mesh: TriMesh) -> scipy.sparse.csr_matrix:
  """`D - A` with unit edge weights."""
  a = adjacency_matrix(mesh)
  degree = np.asarray(a.sum(axis=1)).reshape(-1)
  return (scipy.sparse.diags(degree) - a).tocsr()


def mean_edge_length(mesh: TriMesh) -> float:
  e = edges(mesh)
  if len(e) == 0:
    return 0.
  return float(np.mean(
      np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)))


def barycentric_coordinates(mesh: TriMesh, triangles: np.ndarray,
                            points: np.ndarray) -> np.ndarray:
  """Barycentrics of `points` in the given triangles, clipped to the
  triangle and renormalized."""
  corners = mesh.vertices[mesh.triangles[triangles]]
  bary = trimesh.triangles.points_to_barycentric(corners, points)
  bary = np.clip(np.nan_to_num(bary, nan=1. / 3.), 0., 1.)
  return bary / bary.sum(axis=1, keepdims=True)


class SurfaceIndex:
  """Spatial index over a mesh answering point-to-surface queries.

  Candidates for each query are the triangles incident to its `k` nearest
  vertices plus the `k` triangles with nearest centroids; the exact
  point-triangle distance is evaluated on all candidates."""

  def __init__(self, surface: TriMesh, k: int = 8):
    if len(surface.triangles) == 0:
      raise ValidationError('Surface has no triangles.')
    self.surface = surface
    self.k_vertices = min(k, surface.n_vertices)
    self.k_triangles = min(k, len(surface.triangles))
    self._vertex_tree = cKDTree(surface.vertices)
    self._corners = surface.vertices[surface.triangles]
    self._centroid_tree = cKDTree(self._corners.mean(axis=1))
    self._vertex_faces = trimesh.Trimesh(
        surface.vertices, surface.triangles, process=False).vertex_faces

    bedges = boundary_edges(surface)
    self._boundary_vertex = np.zeros(surface.n_vertices, dtype=bool)
    self._boundary_vertex[bedges.reshape(-1)] = True
    # Edge k of a triangle is opposite its corner k.
    keys = set(map(tuple, bedges.tolist()))
    tri = surface.triangles
    opposite = [np.sort(tri[:, [1, 2]], axis=1),
                np.sort(tri[:, [2, 0]], axis=1),
                np.sort(tri[:, [0, 1]], axis=1)]
    self._boundary_edge = np.stack([
        np.array([tuple(e) in keys for e in o.tolist()], dtype=bool)
        for o in opposite], axis=1)

  def _candidates(self, points: np.ndarray) -> np.ndarray:
    _, vi = self._vertex_tree.query(points, k=self.k_vertices)
    _, ti = self._centroid_tree.query(points, k=self.k_triangles)
    vi = vi.reshape(len(points), -1)
    ti = ti.reshape(len(points), -1)
    incident = self._vertex_faces[vi].reshape(len(points), -1)
    return np.concatenate([incident, ti], axis=1)

  def query(self, points: np.ndarray) -> ClosestPoints:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    candidates = self._candidates(points)
    valid = candidates >= 0
    safe = np.where(valid, candidates, 0)
    rows = np.repeat(np.arange(m), candidates.shape[1])
    closest = trimesh.triangles.closest_point(
        self._corners[safe.reshape(-1)], points[rows])
    dist = np.linalg.norm(closest - points[rows], axis=1).reshape(m, -1)
    dist[~valid] = np.inf
    best = np.argmin(dist, axis=1)

    tri = safe[np.arange(m), best]
    cp = closest.reshape(m, -1, 3)[np.arange(m), best]
    bary = barycentric_coordinates(self.surface, tri, cp)
    return ClosestPoints(tri, cp, bary, dist[np.arange(m), best],
                         self._on_boundary(tri, bary))

  def _on_boundary(self, tri: np.ndarray, bary: np.ndarray) -> np.ndarray:
    zero = bary < EDGE_EPS
    on_edge = np.any(zero & self._boundary_edge[tri], axis=1)
    corner = np.argmax(bary, axis=1)
    at_vertex = np.sum(zero, axis=1) >= 2
    vertex = self.surface.triangles[tri, corner]
    return on_edge | (at_vertex & self._boundary_vertex[vertex])


def closest_points(surface: TriMesh, points: np.ndarray) -> ClosestPoints:
  return SurfaceIndex(surface).query(points)


def coverage_mask(points: np.ndarray,
                  surface: TriMesh,
                  tolerance: float) -> np.ndarray:
  """True where the closest point on `surface` lies within `tolerance` and
  off the surface boundary."""
  cp = closest_points(surface, points)
  return (cp.distances <= tolerance) & ~cp.on_boundary


def nearest_vertices(surface: TriMesh, points: np.ndarray) -> np.ndarray:
  _, idx = cKDTree(surface.vertices).query(np.asarray(points).reshape(-1, 3))
  return idx
