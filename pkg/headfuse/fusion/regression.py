"""Latent-space regression between a whole model and a part model."""

import json
import logging
import struct
import numpy as np
import scipy.linalg
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

from headfuse.errors import (
    HeadFuseError, NumericalError, StorageError, ValidationError)
from headfuse.registration.nicp import StiffnessProfile, nicp_register
from headfuse.shape.mesh import TriMesh
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import (
    draw_random_latents, project_instance, sample_instance)
from headfuse.utils import deterministic, parallel_map

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
RIDGE_SCALE = 1e-8
MAX_SKIPPED_FRACTION = 0.1

PartExtractor = Callable[[TriMesh], TriMesh]


class LatentPairSet(NamedTuple):
  """Stacked latents; column `j` of both matrices belongs to sample `j`."""
  c_whole: np.ndarray  # [n_h, n_r]
  c_part: np.ndarray   # [n_f, n_r]
  skipped: int = 0

  @property
  def n_samples(self) -> int:
    return self.c_whole.shape[1]


def check_pairs(pairs: LatentPairSet):
  if pairs.c_whole.ndim != 2 or pairs.c_part.ndim != 2:
    raise ValidationError('Latent pair matrices must be 2D.')
  if pairs.c_whole.shape[1] != pairs.c_part.shape[1]:
    raise ValidationError(
        f'Latent pair matrices have {pairs.c_whole.shape[1]} and '
        f'{pairs.c_part.shape[1]} columns.')
  if pairs.n_samples == 0:
    raise ValidationError('No latent pairs.')
  if pairs.n_samples < max(len(pairs.c_whole), len(pairs.c_part)):
    logger.warning(
        f'Only {pairs.n_samples} latent pairs for {len(pairs.c_whole)} whole '
        f'and {len(pairs.c_part)} part components; the solve is ill-posed.')


class NicpCrop:
  """Part extractor that registers a part template onto each whole instance.

  The template is expected to lie near its counterpart on the whole
  instances (e.g. the part mean placed on the whole mean).
  """

  def __init__(self, part_template: TriMesh, profile: StiffnessProfile,
               **nicp_kwargs):
    self.part_template = part_template
    self.profile = profile
    self.nicp_kwargs = nicp_kwargs

  def __call__(self, mesh: TriMesh) -> TriMesh:
    result = nicp_register(self.part_template, mesh, self.profile,
                           prealign_mode='none', **self.nicp_kwargs)
    if not result.converged:
      logger.debug('Part registration did not converge for one sample.')
    return result.mesh


@deterministic
def generate_pairs(whole: ShapeModel,
                   part: ShapeModel,
                   part_extractor: PartExtractor,
                   count: int,
                   seed: int,
                   threads: Optional[int] = None) -> LatentPairSet:
  """Draws `count` random whole instances, extracts their part and projects
  it onto the part model.

  Samples whose extraction fails are skipped.

  Raises
  ------
  NumericalError
    More than 10% of the samples fail.
  """
  latents = draw_random_latents(whole, count, seed)

  def pair(p_h):
    try:
      p_f = project_instance(part, part_extractor(sample_instance(whole, p_h)))
    except HeadFuseError as e:
      logger.warning(f'Skipping a latent pair: {e}')
      return None
    return p_h, p_f

  results = parallel_map(pair, list(latents), threads)
  kept = [r for r in results if r is not None]
  skipped = len(results) - len(kept)
  if count and skipped > MAX_SKIPPED_FRACTION * count:
    raise NumericalError(
        f'Part extraction failed on {skipped} of {count} samples.')
  if skipped:
    logger.warning(f'Skipped {skipped} of {count} latent pairs.')
  c_whole = np.array([r[0] for r in kept]).T.reshape(whole.n_components, -1)
  c_part = np.array([r[1] for r in kept]).T.reshape(part.n_components, -1)
  return LatentPairSet(c_whole, c_part, skipped)


class LatentRegressor:
  """Linear map `p_whole = W @ p_part` between two registered models."""

  MAGIC = b'HFLR'
  VERSION = 1
  _HEADER = struct.Struct('<4sIQQ')

  def __init__(self, matrix: np.ndarray, source: str, target: str,
               ridge: float = 0.):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
      raise ValidationError('Regression matrix must be 2D.')
    self.matrix = matrix
    self.source = source
    self.target = target
    self.ridge = float(ridge)

  def __call__(self, p_part: np.ndarray) -> np.ndarray:
    return self.matrix @ p_part

  def check_models(self, whole: ShapeModel, part: ShapeModel):
    if self.matrix.shape != (whole.n_components, part.n_components):
      raise ValidationError(
          f'Regressor of shape {self.matrix.shape} does not map '
          f'{part.n_components} part to {whole.n_components} whole '
          'components.')

  def save(self, path: str):
    rows, cols = self.matrix.shape
    meta = {'source': self.source, 'target': self.target,
            'ridge': self.ridge, 'format_version': self.VERSION,
            'shape': [rows, cols]}
    try:
      with open(path, 'wb') as f:
        f.write(self._HEADER.pack(self.MAGIC, self.VERSION, rows, cols))
        f.write(self.matrix.astype('<f8').tobytes())
      with open(path + '.json', 'w') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')
    except OSError as e:
      raise StorageError(f'Cannot write {path}: {e}') from e

  @classmethod
  def load(cls, path: str) -> 'LatentRegressor':
    try:
      with open(path, 'rb') as f:
        raw = f.read()
      with open(path + '.json', 'r') as f:
        meta = json.load(f)
    except OSError as e:
      raise StorageError(f'Cannot read {path}: {e}') from e
    except json.JSONDecodeError as e:
      raise StorageError(f'Malformed metadata for {path}: {e}') from e
    size = cls._HEADER.size
    if len(raw) < size:
      raise StorageError(f'{path}: truncated regressor file.')
    magic, version, rows, cols = cls._HEADER.unpack_from(raw)
    if magic != cls.MAGIC or version != cls.VERSION:
      raise StorageError(f'{path}: not a regressor file of version '
                         f'{cls.VERSION}.')
    if len(raw) != size + 8 * rows * cols:
      raise StorageError(f'{path}: regressor payload has the wrong size.')
    matrix = np.frombuffer(raw, '<f8', rows * cols, size).reshape(rows, cols)
    return cls(matrix.astype(np.float64), meta.get('source', ''),
               meta.get('target', ''), meta.get('ridge', 0.))


def fit_regressor(pairs: LatentPairSet,
                  source: str = 'part',
                  target: str = 'whole',
                  allow_ridge: bool = True) -> LatentRegressor:
  """Least-squares `W = C_h C_f^T (C_f C_f^T)^-1`.

  When the Gram matrix `C_f C_f^T` has a condition number above 1e12, a ridge
  `eps * I` with `eps = 1e-8 * trace / n_f` is added, or, with
  `allow_ridge=False`, `NumericalError` is raised.
  """
  check_pairs(pairs)
  c_h, c_f = pairs.c_whole, pairs.c_part
  gram = c_f @ c_f.T
  n_f = len(gram)
  if n_f == 0:
    return LatentRegressor(np.zeros((len(c_h), 0)), source, target)
  trace = float(np.trace(gram))
  if trace <= 0:
    raise NumericalError('Part latents are all zero; nothing to regress on.')

  ridge = 0.
  cond = np.linalg.cond(gram)
  if not np.isfinite(cond) or cond > CONDITION_LIMIT:
    if not allow_ridge:
      raise NumericalError(
          f'Part latent Gram matrix is rank deficient (cond={cond:.3g}).')
    ridge = RIDGE_SCALE * trace / n_f
    logger.warning(f'Gram matrix condition {cond:.3g}; adding ridge '
                   f'{ridge:.3g}.')
    gram = gram + ridge * np.eye(n_f)
  try:
    w = scipy.linalg.solve(gram, c_f @ c_h.T, assume_a='pos').T
  except (np.linalg.LinAlgError, ValueError) as e:
    raise NumericalError(f'Regression solve failed: {e}') from e
  return LatentRegressor(w, source, target, ridge)


def predict_whole(regressor: LatentRegressor,
                  whole: ShapeModel,
                  part: ShapeModel,
                  part_mesh: TriMesh) -> TriMesh:
  """`S_h = m_h + U_h W U_f^T (S_f - m_f)`."""
  regressor.check_models(whole, part)
  p_f = project_instance(part, part_mesh)
  return sample_instance(whole, regressor(p_f))


def fit_face_ear_to_head(face_ear_model: ShapeModel,
                         head_model: ShapeModel,
                         paired_meshes: Sequence[Tuple[TriMesh, TriMesh]]
                         ) -> LatentRegressor:
  """Regressor from face+ear latents to head latents, fit on paired
  `(part_mesh, head_mesh)` examples."""
  if not paired_meshes:
    raise ValidationError('No paired meshes to fit a regressor on.')
  c_part = np.array(
      [project_instance(face_ear_model, p) for p, _ in paired_meshes]).T
  c_whole = np.array(
      [project_instance(head_model, h) for _, h in paired_meshes]).T
  pairs = LatentPairSet(c_whole.reshape(head_model.n_components, -1),
                        c_part.reshape(face_ear_model.n_components, -1))
  return fit_regressor(pairs, face_ear_model.name, head_model.name)


def held_out_rms(regressor: LatentRegressor,
                 whole: ShapeModel,
                 part: ShapeModel,
                 pairs: Sequence[Tuple[TriMesh, TriMesh]]) -> float:
  """Per-vertex RMS distance of whole predictions from their ground truth."""
  errors: List[float] = []
  for part_mesh, truth in pairs:
    pred = predict_whole(regressor, whole, part, part_mesh)
    errors.append(np.mean(np.sum((pred.vertices - truth.vertices) ** 2, 1)))
  return float(np.sqrt(np.mean(errors)))
