"""Synthetic shape families with known generating models.

Every family is a linear model `mean + G z` over a fixed topology, so the
true PCA model, the part/whole coupling and the landmark positions are all
known in closed form.
"""

import logging
import numpy as np
import scipy.linalg
import trimesh
from dataclasses import dataclass
from scipy.spatial import Delaunay
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from headfuse.errors import ValidationError
from headfuse.eyes.models import EyeBallModel
from headfuse.shape.mesh import LandmarkSet, TriMesh, crop
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import _fix_signs
from headfuse.utils import deterministic, get_rng

__all__ = (
    'SyntheticFamilySpec',
    'SyntheticFamily',
    'synth_family',
    'KINDS',
)

logger = logging.getLogger(__name__)

KINDS = ('coupled-ellipsoids', 'bumpy-spheres', 'toy-ear', 'toy-eye-region',
         'eyeball')

# Unit directions of the head landmarks; x is left-right, y up, z forward.
HEAD_LANDMARKS = {
    'nose_tip': (0., 0., 1.),
    'forehead': (0., 0.7, 0.7),
    'chin': (0., -0.7, 0.7),
    'right_eye': (0.35, 0.3, 0.88),
    'left_eye': (-0.35, 0.3, 0.88),
    'right_mouth': (0.3, -0.35, 0.88),
    'left_mouth': (-0.3, -0.35, 0.88),
    'right_ear': (1., 0., 0.),
    'left_ear': (-1., 0., 0.),
    'vertex': (0., 1., 0.),
    'occiput': (0., 0., -1.),
}


@dataclass(frozen=True)
class SyntheticFamilySpec:
  """Parameters of one synthetic family.

  Parameters
  ----------
  kind
    One of `KINDS`.
  count
    Number of instances to draw.
  latent_dim
    Dimension of the generating latent `z`.
  coupling
    Optional `d_f x latent_dim` matrix; the face region deforms
    with `C z` (coupled ellipsoids only). Defaults to the identity.
  eigenvalues
    Variances of `z`; defaults to a geometric decay.
  spread
    Standard deviation of the first latent relative to the size.
  noise
    Standard deviation (mm) of i.i.d. vertex noise.
  seed
    Seed of the family structure (generating fields, texture).
  sample_seed
    Seed of the drawn latents and noise; families that share
    `seed` share their generating model.
  moment_match
    Whiten the drawn latents so their sample covariance is
    exactly `diag(eigenvalues)`.
  """
  kind: str = 'coupled-ellipsoids'
  count: int = 20
  latent_dim: int = 8
  coupling: Optional[Tuple[Tuple[float, ...], ...]] = None
  eigenvalues: Optional[Tuple[float, ...]] = None
  spread: float = 0.05
  noise: float = 0.
  seed: int = 0
  sample_seed: int = 0
  moment_match: bool = True
  subdivisions: int = 3
  radius: float = 100.
  face_angle: float = 50.
  ear_angle: float = 25.
  ear_rings: int = 4
  ear_segments: int = 12
  degree: int = 3

  def __post_init__(self):
    if self.kind not in KINDS:
      raise ValidationError(f'Unknown family kind {self.kind!r}.')
    if self.latent_dim < 1:
      raise ValidationError('Latent dimension must be at least 1.')
    if self.noise < 0:
      raise ValidationError('Noise must be nonnegative.')
    if self.count < 0:
      raise ValidationError('Count must be nonnegative.')
    if self.eigenvalues is not None and (
        len(self.eigenvalues) != self.latent_dim
        or min(self.eigenvalues) <= 0):
      raise ValidationError(
          'One positive eigenvalue per latent dimension is required.')
    if self.coupling is not None:
      c = np.asarray(self.coupling, dtype=np.float64)
      if c.ndim != 2 or c.shape[1] != self.latent_dim:
        raise ValidationError(
            f'Coupling must have {self.latent_dim} columns.')
    if self.ear_rings < 2 or self.ear_segments < 3:
      raise ValidationError('Toy ear needs at least 2 rings and 3 segments.')


class SyntheticFamily(NamedTuple):
  kind: str
  meshes: List[TriMesh]
  latents: np.ndarray           # [count, latent_dim] generating latents
  model: ShapeModel             # true model of the whole shape
  part_model: Optional[ShapeModel]
  part_indices: Optional[np.ndarray]
  coupling: Optional[np.ndarray]  # generating latents -> part latents
  landmarks: Optional[LandmarkSet]
  extras: Dict[str, object]


def _eigenvalues(spec: SyntheticFamilySpec, size: float) -> np.ndarray:
  if spec.eigenvalues is not None:
    return np.asarray(spec.eigenvalues, dtype=np.float64)
  return (spec.spread * size) ** 2 * 0.6 ** np.arange(spec.latent_dim)


def _monomials(points: np.ndarray, degree: int) -> np.ndarray:
  powers = [(a, b, c) for a in range(degree + 1) for b in range(degree + 1)
            for c in range(degree + 1) if a + b + c <= degree]
  return np.stack([points[:, 0] ** a * points[:, 1] ** b * points[:, 2] ** c
                   for a, b, c in powers], axis=1)


def smooth_fields(points: np.ndarray, count: int, rng: np.random.Generator,
                  degree: int = 3, scale: float = 1.) -> np.ndarray:
  """`count` orthonormal 3N displacement fields, polynomial in the points.

  Raises
  ------
  ValidationError
    The polynomial space is too small for `count`.
  """
  basis = _monomials(points / scale, degree)
  coeffs = rng.standard_normal((basis.shape[1], 3, count))
  fields = np.einsum('nm,mck->nck', basis, coeffs).reshape(-1, count)
  q, r = scipy.linalg.qr(fields, mode='economic')
  diag = np.abs(np.diag(r))
  if count and diag.min() <= 1e-10 * diag.max():
    raise ValidationError(
        f'Cannot build {count} independent fields of degree {degree} on '
        f'{len(points)} points.')
  return q


def draw_latents(count: int, eigenvalues: np.ndarray,
                 rng: np.random.Generator,
                 moment_match: bool = True) -> np.ndarray:
  """Rows `z` with `z_i ~ Normal(0, eigenvalues_i)`; moment matched when
  there are enough rows."""
  d = len(eigenvalues)
  z = rng.standard_normal((count, d))
  if moment_match and count > d:
    z = z - z.mean(axis=0)
    chol = np.linalg.cholesky(z.T @ z / (count - 1))
    z = scipy.linalg.solve_triangular(chol, z.T, lower=True).T
  return z * np.sqrt(eigenvalues)


def _true_model(mean: np.ndarray, generator: np.ndarray,
                eigenvalues: np.ndarray, triangles: np.ndarray, name: str,
                metadata: Dict) -> ShapeModel:
  """PCA model of `mean + G z` with `z ~ Normal(0, diag(eigenvalues))`."""
  u, s, _ = scipy.linalg.svd(generator * np.sqrt(eigenvalues),
                             full_matrices=False)
  rank = int(np.sum(s > 1e-10 * s[0]))
  return ShapeModel(mean, _fix_signs(u[:, :rank]), s[:rank] ** 2, triangles,
                    name, metadata)


def _instances(mean: np.ndarray, generator: np.ndarray, latents: np.ndarray,
               triangles: np.ndarray, noise: float,
               rng: np.random.Generator) -> List[TriMesh]:
  vectors = mean + latents @ generator.T
  if noise > 0:
    vectors = vectors + noise * rng.standard_normal(vectors.shape)
  return [TriMesh.from_vector(v, triangles) for v in vectors]


def _nearest_indices(vertices: np.ndarray,
                     directions: Dict[str, Tuple[float, float, float]]):
  unit = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
  names = list(directions)
  dirs = np.array([directions[n] for n in names])
  dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
  indices = np.argmax(dirs @ unit.T, axis=1)
  if len(set(indices.tolist())) != len(indices):
    raise ValidationError('Mesh too coarse for distinct head landmarks.')
  return names, indices


def icosphere(subdivisions: int, radius: float) -> TriMesh:
  sphere = trimesh.creation.icosphere(subdivisions=subdivisions,
                                      radius=radius)
  return TriMesh(np.asarray(sphere.vertices), np.asarray(sphere.faces))


def face_indices(template: TriMesh, angle: float) -> np.ndarray:
  """Vertices within `angle` degrees of the forward (+z) direction that
  belong to a triangle lying wholly inside that cone."""
  unit = template.vertices / np.linalg.norm(template.vertices, axis=1,
                                            keepdims=True)
  inside = unit[:, 2] >= np.cos(np.radians(angle))
  kept = template.triangles[np.all(inside[template.triangles], axis=1)]
  covered = np.zeros(template.n_vertices, dtype=bool)
  covered[kept.reshape(-1)] = True
  return np.nonzero(covered)[0]


def _coupled_ellipsoids(spec: SyntheticFamilySpec,
                        rng: np.random.Generator,
                        sample_rng: np.random.Generator) -> SyntheticFamily:
  template = icosphere(spec.subdivisions, spec.radius)
  n = template.n_vertices
  face = face_indices(template, spec.face_angle)
  rest = np.setdiff1d(np.arange(n), face)
  coupling = (np.eye(spec.latent_dim) if spec.coupling is None
              else np.asarray(spec.coupling, dtype=np.float64))
  d_f = len(coupling)
  lam = _eigenvalues(spec, spec.radius)

  b_face = smooth_fields(template.vertices[face], d_f, rng, spec.degree,
                         spec.radius)
  b_rest = smooth_fields(template.vertices[rest], spec.latent_dim, rng,
                         spec.degree, spec.radius)
  generator = np.zeros((3 * n, spec.latent_dim))
  rows = lambda idx: (3 * idx[:, None] + np.arange(3)).reshape(-1)
  generator[rows(face)] = b_face @ coupling
  generator[rows(rest)] = b_rest

  names, lm_idx = _nearest_indices(template.vertices, HEAD_LANDMARKS)
  metadata = {'sagittal_axis': 0,
              'landmarks': {k: int(i) for k, i in zip(names, lm_idx)}}
  model = _true_model(template.vector, generator, lam, template.triangles,
                      'head', metadata)

  w, v = scipy.linalg.eigh((coupling * lam) @ coupling.T)
  w, v = w[::-1], _fix_signs(v[:, ::-1])
  keep = w > 1e-10 * w[0]
  part_template = crop(template, face)
  nose = int(np.argmax(template.vertices[face, 2]))
  part_model = ShapeModel(part_template.vector, b_face @ v[:, keep], w[keep],
                          part_template.triangles, 'face',
                          {'sagittal_axis': 0, 'nose_tip': nose})

  latents = draw_latents(spec.count, lam, sample_rng, spec.moment_match)
  meshes = _instances(template.vector, generator, latents,
                      template.triangles, spec.noise, sample_rng)
  return SyntheticFamily(
      spec.kind, meshes, latents, model, part_model, face,
      v[:, keep].T @ coupling, LandmarkSet.from_mesh(template, names, lm_idx),
      {'generator': generator, 'nose_tip': int(face[nose])})


def _bumpy_spheres(spec: SyntheticFamilySpec,
                   rng: np.random.Generator,
                   sample_rng: np.random.Generator) -> SyntheticFamily:
  template = icosphere(spec.subdivisions, spec.radius)
  lam = _eigenvalues(spec, spec.radius)
  generator = smooth_fields(template.vertices, spec.latent_dim, rng,
                            spec.degree + 1, spec.radius)
  model = _true_model(template.vector, generator, lam, template.triangles,
                      'sphere', {'sagittal_axis': 0})
  latents = draw_latents(spec.count, lam, sample_rng, spec.moment_match)
  meshes = _instances(template.vector, generator, latents,
                      template.triangles, spec.noise, sample_rng)
  return SyntheticFamily(spec.kind, meshes, latents, model, None, None, None,
                         None, {'generator': generator})


def _rings(n_rings: int, n_segments: int) -> np.ndarray:
  """Triangles of a centre vertex plus `n_rings` rings of `n_segments`."""
  tris = []
  ring = lambda r, s: 1 + (r - 1) * n_segments + s % n_segments
  for s in range(n_segments):
    tris.append((0, ring(1, s), ring(1, s + 1)))
  for r in range(1, n_rings):
    for s in range(n_segments):
      a, b = ring(r, s), ring(r, s + 1)
      c, d = ring(r + 1, s), ring(r + 1, s + 1)
      tris.extend([(a, c, d), (a, d, b)])
  return np.array(tris, dtype=np.int64)


def toy_ear_mesh(radius: float, angle: float, n_rings: int,
                 n_segments: int) -> TriMesh:
  """Disk patch around the +x pole of a sphere with a pit at the canal
  (vertex 0); the last ring is the base loop."""
  rho = np.radians(angle) * np.arange(1, n_rings + 1) / n_rings
  theta = 2 * np.pi * np.arange(n_segments) / n_segments
  rho_all = np.concatenate([[0.], np.repeat(rho, n_segments)])
  theta_all = np.concatenate([[0.], np.tile(theta, n_rings)])
  dirs = np.column_stack([
      np.cos(rho_all), np.sin(rho_all) * np.cos(theta_all),
      np.sin(rho_all) * np.sin(theta_all)])
  pit = 0.03 * radius * (1 - (rho_all / rho[-1]) ** 2)
  return TriMesh(dirs * (radius - pit)[:, None], _rings(n_rings, n_segments))


def _toy_ear(spec: SyntheticFamilySpec,
             rng: np.random.Generator,
             sample_rng: np.random.Generator) -> SyntheticFamily:
  mean = toy_ear_mesh(spec.radius, spec.ear_angle, spec.ear_rings,
                      spec.ear_segments)
  size = mean.bounding_radius()
  lam = _eigenvalues(spec, size)
  generator = smooth_fields(mean.vertices - mean.centroid, spec.latent_dim,
                            rng, spec.degree, size)
  base = np.arange(mean.n_vertices - spec.ear_segments, mean.n_vertices)
  metadata = {'sagittal_axis': 0, 'canal_vertex': 0,
              'base_loop': base.tolist()}
  model = _true_model(mean.vector, generator, lam, mean.triangles,
                      'right-ear', metadata)
  latents = draw_latents(spec.count, lam, sample_rng, spec.moment_match)
  meshes = _instances(mean.vector, generator, latents, mean.triangles,
                      spec.noise, sample_rng)
  return SyntheticFamily(spec.kind, meshes, latents, model, None, None, None,
                         None, {'generator': generator, 'canal_vertex': 0,
                                'base_loop': base})


def eye_region_mesh(width: float = 40., height: float = 24.,
                    step: float = 2.) -> Tuple[TriMesh, np.ndarray]:
  """Gently bulging patch with 17 eyelid vertices on an ellipse."""
  upper = np.linspace(0., np.pi, 9)
  lower = np.linspace(np.pi, 2 * np.pi, 10)[1:-1]
  t = np.concatenate([upper, lower])
  lids = np.column_stack([12. * np.cos(t), 5. * np.sin(t)])
  gx, gy = np.meshgrid(np.arange(-width / 2, width / 2 + 1e-9, step),
                       np.arange(-height / 2, height / 2 + 1e-9, step))
  grid = np.column_stack([gx.ravel(), gy.ravel()])
  gap = np.min(np.linalg.norm(grid[:, None] - lids[None], axis=2), axis=1)
  grid = grid[gap > 0.4 * step]
  xy = np.vstack([grid, lids])
  z = 4. * np.exp(-(xy[:, 0] ** 2 / 400. + xy[:, 1] ** 2 / 150.))
  triangles = Delaunay(xy).simplices
  eyelid = np.arange(len(grid), len(xy))
  return TriMesh(np.column_stack([xy, z]), triangles), eyelid


def _toy_eye_region(spec: SyntheticFamilySpec,
                    rng: np.random.Generator,
                    sample_rng: np.random.Generator) -> SyntheticFamily:
  mean, eyelid = eye_region_mesh()
  size = mean.bounding_radius()
  lam = _eigenvalues(spec, size)
  generator = smooth_fields(mean.vertices, spec.latent_dim, rng, spec.degree,
                            size)
  model = _true_model(mean.vector, generator, lam, mean.triangles,
                      'eye-region', {'eyelid_indices': eyelid.tolist()})
  latents = draw_latents(spec.count, lam, sample_rng, spec.moment_match)
  meshes = _instances(mean.vector, generator, latents, mean.triangles,
                      spec.noise, sample_rng)
  return SyntheticFamily(spec.kind, meshes, latents, model, None, None, None,
                         None, {'generator': generator,
                                'eyelid_indices': eyelid})


PUPIL_ANGLE = 10.
IRIS_ANGLE = 30.
_EYE_RINGS = (PUPIL_ANGLE, IRIS_ANGLE, 50., 75., 100., 125., 150.)
_EYE_SEGMENTS = 16


def _sphere_rings(center: np.ndarray, radius: float,
                  angles: Sequence[float]) -> np.ndarray:
  phi = np.radians(np.repeat(angles, _EYE_SEGMENTS))
  theta = np.tile(2 * np.pi * np.arange(_EYE_SEGMENTS) / _EYE_SEGMENTS,
                  len(angles))
  ring = np.column_stack([np.sin(phi) * np.cos(theta),
                          np.sin(phi) * np.sin(theta), np.cos(phi)])
  return center + radius * np.vstack([[0., 0., 1.], ring])


def eyeball_model(rng: np.random.Generator,
                  radius: float = 12.,
                  center: Sequence[float] = (0., 0., -11.),
                  texture_components: int = 3) -> EyeBallModel:
  """Ring-meshed eyeball looking along +z with a dilating pupil ring and
  an iris color model."""
  center = np.asarray(center, dtype=np.float64)
  front = _sphere_rings(center, radius, _EYE_RINGS)
  back = center + radius * np.array([[0., 0., -1.]])
  vertices = np.vstack([front, back])
  tris = _rings(len(_EYE_RINGS), _EYE_SEGMENTS).tolist()
  last = 1 + (len(_EYE_RINGS) - 1) * _EYE_SEGMENTS
  pole = len(vertices) - 1
  for s in range(_EYE_SEGMENTS):
    tris.append((pole, last + (s + 1) % _EYE_SEGMENTS, last + s))
  mesh = TriMesh(vertices, np.array(tris))

  pupil = np.arange(1, 1 + _EYE_SEGMENTS)
  iris = pupil + _EYE_SEGMENTS
  phi = np.radians(PUPIL_ANGLE)
  theta = 2 * np.pi * np.arange(_EYE_SEGMENTS) / _EYE_SEGMENTS
  blend = np.zeros((mesh.n_vertices, 3))
  blend[pupil] = np.column_stack([np.cos(phi) * np.cos(theta),
                                  np.cos(phi) * np.sin(theta),
                                  -np.sin(phi) * np.ones_like(theta)])
  iris_indices = np.concatenate([pupil[::2], iris[::2]])

  colors = np.tile([0.9, 0.9, 0.88], (mesh.n_vertices, 1))
  colors[0] = colors[pupil] = 0.05
  colors[iris] = [0.3, 0.45, 0.6]
  support = np.zeros((mesh.n_vertices, 3), dtype=bool)
  support[iris] = True
  raw = np.zeros((3 * mesh.n_vertices, texture_components))
  raw[support.reshape(-1)] = rng.standard_normal(
      (int(support.sum()), texture_components))
  basis = _fix_signs(scipy.linalg.qr(raw, mode='economic')[0])
  variances = 0.01 * 0.5 ** np.arange(texture_components)

  lens = TriMesh(_sphere_rings(center, radius + 0.5, _EYE_RINGS[:2]),
                 _rings(2, _EYE_SEGMENTS))
  return EyeBallModel(mesh, blend.reshape(-1), iris_indices,
                      colors.reshape(-1), basis, variances, 1., lens, center)


def _eyeball(spec: SyntheticFamilySpec,
             rng: np.random.Generator,
             sample_rng: np.random.Generator) -> SyntheticFamily:
  eyeball = eyeball_model(rng)
  latents = sample_rng.standard_normal((spec.count, 1))
  meshes = [eyeball.instance(p) for p in latents[:, 0]]
  model = ShapeModel(eyeball.mesh.vector,
                     (eyeball.blendshape /
                      np.linalg.norm(eyeball.blendshape))[:, None],
                     [float(eyeball.blendshape @ eyeball.blendshape)],
                     eyeball.mesh.triangles, 'eyeball')
  return SyntheticFamily(spec.kind, meshes, latents, model, None, None, None,
                         None, {'eyeball': eyeball})


_BUILDERS = {
    'coupled-ellipsoids': _coupled_ellipsoids,
    'bumpy-spheres': _bumpy_spheres,
    'toy-ear': _toy_ear,
    'toy-eye-region': _toy_eye_region,
    'eyeball': _eyeball,
}


@deterministic
def synth_family(spec: SyntheticFamilySpec) -> SyntheticFamily:
  """Draws `spec.count` instances of the family `spec.kind`."""
  family = _BUILDERS[spec.kind](
      spec, get_rng(spec.seed), get_rng((spec.seed, spec.sample_seed)))
  logger.debug(f'Synthesized {len(family.meshes)} {spec.kind} instances.')
  return family
