"""Optimal-step non-rigid ICP with a per-vertex stiffness profile."""

import logging
import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

from headfuse.errors import NumericalError, ValidationError
from headfuse.shape.io import load_json
from headfuse.shape.mesh import LandmarkSet, TriMesh
from headfuse.shape.procrustes import similarity_procrustes
from headfuse.shape.surface import SurfaceIndex, edges
from headfuse.utils import Callback, History, infinity_norm, run_callbacks

logger = logging.getLogger(__name__)

DECAYS = ('gaussian', 'linear')
# Lower bound of the linear decay, keeps every weight positive.
LINEAR_FLOOR = 1e-3


@dataclass(frozen=True)
class StiffnessProfile:
  """Radial stiffness weighting around an anchor point.

  The weight of a vertex at distance `d` from `anchor` is
  `weight_at_anchor * exp(-d^2 / (2 L^2))` for the gaussian decay, and
  `weight_at_anchor * max(1 - d / L, 1e-3)` for the linear one. When
  `length_scale` is unset, `L` is half the template bounding radius.
  """
  anchor: Tuple[float, float, float] = (0., 0., 0.)
  weight_at_anchor: float = 1.
  decay: str = 'gaussian'
  length_scale: Optional[float] = None
  landmark_weight: float = 1.

  def __post_init__(self):
    if len(self.anchor) != 3:
      raise ValidationError('Stiffness anchor must be a 3D point.')
    if self.weight_at_anchor <= 0:
      raise ValidationError('Stiffness weight at anchor must be positive.')
    if self.decay not in DECAYS:
      raise ValidationError(f'Unknown stiffness decay {self.decay!r}.')
    if self.length_scale is not None and self.length_scale <= 0:
      raise ValidationError('Stiffness length scale must be positive.')
    if self.landmark_weight < 0:
      raise ValidationError('Landmark weight must be nonnegative.')

  def weights(self, points: np.ndarray,
              default_length: float = 1.) -> np.ndarray:
    length = self.length_scale or default_length
    d = np.linalg.norm(np.asarray(points) - np.asarray(self.anchor), axis=1)
    if self.decay == 'gaussian':
      w = np.exp(-d ** 2 / (2 * length ** 2))
    else:
      w = np.maximum(1. - d / length, LINEAR_FLOOR)
    return self.weight_at_anchor * w

  def to_dict(self):
    return {
        'anchor': [float(a) for a in self.anchor],
        'weight_at_anchor': self.weight_at_anchor,
        'decay': self.decay,
        'length_scale': self.length_scale,
        'landmark_weight': self.landmark_weight,
    }

  @classmethod
  def from_dict(cls, data):
    unknown = set(data) - {f for f in cls.__dataclass_fields__}
    if unknown:
      raise ValidationError(
          f'Unknown stiffness profile keys: {sorted(unknown)}.')
    data = dict(data)
    if 'anchor' in data:
      data['anchor'] = tuple(float(a) for a in data['anchor'])
    return cls(**data)


def load_profile(path: str) -> StiffnessProfile:
  return StiffnessProfile.from_dict(load_json(path))


class NicpResult(NamedTuple):
  mesh: TriMesh
  converged: bool
  history: History


def _incidence(n: int, e: np.ndarray) -> scipy.sparse.csr_matrix:
  rows = np.repeat(np.arange(len(e)), 2)
  data = np.tile([-1., 1.], len(e))
  return scipy.sparse.csr_matrix((data, (rows, e.reshape(-1))),
                                 shape=(len(e), n))


def _vertex_matrix(vertices: np.ndarray) -> scipy.sparse.csr_matrix:
  """Row `i` holds `[x_i, y_i, z_i, 1]` at columns `4i .. 4i + 3`."""
  n = len(vertices)
  data = np.hstack([vertices, np.ones((n, 1))]).reshape(-1)
  rows = np.repeat(np.arange(n), 4)
  cols = np.arange(4 * n)
  return scipy.sparse.csr_matrix((data, (rows, cols)), shape=(n, 4 * n))


def prealign(template: TriMesh,
             target: TriMesh,
             landmarks: Optional[Tuple[LandmarkSet, LandmarkSet]] = None,
             mode: str = 'auto') -> TriMesh:
  """Similarity pre-alignment of `template` onto `target`.

  `mode` is one of `auto` (landmarks when given, else centroid and RMS
  scale), `landmarks`, `centroid` or `none`.
  """
  if mode == 'none':
    return template
  if mode == 'auto':
    mode = 'landmarks' if landmarks is not None else 'centroid'
  if mode == 'landmarks':
    if landmarks is None:
      raise ValidationError('Landmark pre-alignment needs landmarks.')
    source, dest = _paired_landmarks(template, landmarks)
    transform = similarity_procrustes(template.vertices[source], dest)
    return template.with_vertices(transform.apply(template.vertices))
  if mode == 'centroid':
    src = template.vertices - template.centroid
    dst = target.vertices - target.centroid
    scale = np.sqrt(np.mean(np.sum(dst ** 2, axis=1))
                    / max(np.mean(np.sum(src ** 2, axis=1)), 1e-300))
    return template.with_vertices(scale * src + target.centroid)
  raise ValidationError(f'Unknown pre-alignment mode {mode!r}.')


def _paired_landmarks(template: TriMesh,
                      landmarks: Tuple[LandmarkSet, LandmarkSet]):
  template_lms, target_lms = landmarks
  template_lms.check_indices(template.n_vertices)
  target_lms = target_lms.ordered(template_lms.names)
  return template_lms.indices, target_lms.points


def nicp_register(template: TriMesh,
                  target: TriMesh,
                  profile: StiffnessProfile,
                  landmarks: Optional[Tuple[LandmarkSet, LandmarkSet]] = None,
                  stiffness: Tuple[float, float] = (50., 0.5),
                  n_steps: int = 8,
                  inner_iters: int = 5,
                  reject_factor: float = 4.,
                  gamma: float = 1.,
                  tolerance: float = 1e-6,
                  prealign_mode: str = 'auto',
                  callbacks: List[Callback] = None) -> NicpResult:
  """Deforms `template` onto `target` by per-vertex affine transforms.

  For each stiffness on a geometric ladder from `stiffness[0]` down to
  `stiffness[1]`, correspondences and the stacked affine transforms are
  updated alternately until the transforms change less than `tolerance`.
  Correspondences farther than `reject_factor` times the median distance,
  or landing on the target boundary, are dropped. The edge stiffness is
  scaled by the mean profile weight of the edge's endpoints.

  Parameters
  ----------
  template
    Mesh to deform; its topology is kept.
  target
    Surface to register onto.
  profile
    Per-vertex stiffness weighting, evaluated on the template.
  landmarks
    Optional `(template_landmarks, target_landmarks)`; the
    template set must carry vertex indices.

  Returns
  -------
  The registered mesh, whether the last stiffness step converged, and the
  per-iteration history (`data`, `stiffness`, `landmark`, `energy`,
  `accepted`).

  Raises
  ------
  NumericalError
    Every correspondence is rejected.
  """
  n = template.n_vertices
  if n == 0:
    raise ValidationError('Template has no vertices.')
  weights = profile.weights(template.vertices,
                            0.5 * max(template.bounding_radius(), 1e-12))
  moved = prealign(template, target, landmarks, prealign_mode)

  # Work in a frame where the pre-aligned template has unit RMS radius.
  origin = moved.centroid
  unit = float(np.sqrt(np.mean(np.sum((moved.vertices - origin) ** 2, 1))))
  unit = unit if unit > 0 else 1.
  source = (moved.vertices - origin) / unit
  index = SurfaceIndex(target)

  e = edges(template)
  edge_w = 0.5 * (weights[e[:, 0]] + weights[e[:, 1]])
  stiff = scipy.sparse.kron(
      scipy.sparse.diags(edge_w) @ _incidence(n, e),
      scipy.sparse.diags([1., 1., 1., gamma])).tocsr()
  d = _vertex_matrix(source)

  lm_rows, lm_targets = None, None
  if landmarks is not None and profile.landmark_weight > 0:
    lm_idx, lm_points = _paired_landmarks(template, landmarks)
    lm_rows = d[lm_idx]
    lm_targets = (lm_points - origin) / unit

  x = np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1))
  history = History()
  step = 0
  converged = False
  for alpha in np.geomspace(stiffness[0], stiffness[1], n_steps):
    converged = False
    for _ in range(inner_iters):
      deformed = d @ x
      cp = index.query(deformed * unit + origin)
      dist = cp.distances / unit
      keep = ~cp.on_boundary
      if np.any(keep) and np.isfinite(reject_factor):
        cutoff = max(reject_factor * np.median(dist[keep]), 1e-9)
        keep &= dist <= cutoff
      if not np.any(keep):
        raise NumericalError('NICP: every correspondence was rejected.')
      targets = (cp.points - origin) / unit

      w = scipy.sparse.diags(keep.astype(np.float64))
      blocks = [alpha * stiff, w @ d]
      rhs = [np.zeros((stiff.shape[0], 3)), keep[:, None] * targets]
      if lm_rows is not None:
        beta = profile.landmark_weight
        blocks.append(beta * lm_rows)
        rhs.append(beta * lm_targets)
      a = scipy.sparse.vstack(blocks).tocsc()
      b = np.vstack(rhs)
      solve = scipy.sparse.linalg.factorized((a.T @ a).tocsc())
      atb = a.T @ b
      new_x = np.column_stack([solve(atb[:, k]) for k in range(3)])
      if not np.all(np.isfinite(new_x)):
        raise NumericalError('NICP: singular normal equations.')

      change = infinity_norm(new_x - x)
      x = new_x
      residual = (d @ x - targets)[keep]
      data_sum = float(np.sum(residual ** 2))
      data_term = data_sum / len(residual)
      stiff_term = float(np.sum((stiff @ x) ** 2))
      lm_term = 0.
      if lm_rows is not None:
        lm_term = float(np.sum((lm_rows @ x - lm_targets) ** 2))
      history.log(step, 'alpha', float(alpha))
      history.log(step, 'data', data_term * unit ** 2)
      history.log(step, 'stiffness', stiff_term)
      history.log(step, 'landmark', lm_term * unit ** 2)
      history.log(step, 'energy',
                  data_sum + alpha ** 2 * stiff_term
                  + profile.landmark_weight ** 2 * lm_term)
      history.log(step, 'accepted', int(np.sum(keep)))
      run_callbacks(callbacks, step, history)
      step += 1
      if change < tolerance:
        converged = True
        break

  if not converged:
    logger.warning('NICP did not converge at the final stiffness step.')
  registered = template.with_vertices((d @ x) * unit + origin)
  return NicpResult(registered, converged, history)
