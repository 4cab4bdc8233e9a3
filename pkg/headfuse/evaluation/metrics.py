"""Model quality metrics (compactness, generalization, specificity) and
reconstruction accuracy (cumulative error distributions)."""

import logging
import numpy as np
from typing import List, NamedTuple, Optional, Sequence, Union

from headfuse.errors import ValidationError
from headfuse.shape.mesh import TriMesh
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import data_matrix, draw_random_latents
from headfuse.shape.surface import closest_points
from headfuse.utils import deterministic, parallel_map

logger = logging.getLogger(__name__)

DRAW_CHUNK = 250


class MetricCurve(NamedTuple):
  label: str
  x: np.ndarray
  y: np.ndarray
  std: Optional[np.ndarray] = None


def check_curve(curve: MetricCurve):
  x, y = np.asarray(curve.x, float), np.asarray(curve.y, float)
  if x.shape != y.shape or x.ndim != 1:
    raise ValidationError(f'Curve {curve.label!r}: x and y differ in shape.')
  if np.any(np.diff(x) <= 0):
    raise ValidationError(f'Curve {curve.label!r}: x must increase.')
  if not np.all(np.isfinite(y)):
    raise ValidationError(f'Curve {curve.label!r}: y must be finite.')
  if curve.std is not None and np.shape(curve.std) != y.shape:
    raise ValidationError(f'Curve {curve.label!r}: std differs in shape.')


def _upto(model: ShapeModel, upto: Optional[int]) -> int:
  if upto is None:
    return model.n_components
  if not 0 <= upto <= model.n_components:
    raise ValidationError(
        f'Cannot evaluate {upto} of {model.n_components} components.')
  return int(upto)


def compactness(model: ShapeModel, upto: Optional[int] = None) -> MetricCurve:
  """Fraction of the model variance explained by the first `k` components,
  `k = 1 .. upto`."""
  upto = _upto(model, upto)
  ratio = np.cumsum(model.eigenvalues) / np.sum(model.eigenvalues)
  return MetricCurve('compactness', np.arange(1, upto + 1, dtype=np.float64),
                     ratio[:upto])


def _mean_vertex_distance(residual: np.ndarray) -> np.ndarray:
  """Per-row mean Euclidean distance of flattened 3N residuals."""
  return np.mean(np.linalg.norm(
      residual.reshape(len(residual), -1, 3), axis=2), axis=1)


def generalization(model: ShapeModel,
                   test: Sequence[TriMesh],
                   upto: Optional[int] = None) -> MetricCurve:
  """Mean per-vertex distance between each test mesh and its projection on
  the first `k` components, `k = 0 .. upto`, with the standard deviation
  over test meshes."""
  if not test:
    raise ValidationError('Generalization needs a nonempty test set.')
  for mesh in test:
    model.check_mesh(mesh)
  upto = _upto(model, upto)
  residual = data_matrix(test) - model.mean
  coefficients = residual @ model.basis[:, :upto]
  mean, std = [], []
  for k in range(upto + 1):
    if k:
      residual = residual - np.outer(coefficients[:, k - 1],
                                     model.basis[:, k - 1])
    errors = _mean_vertex_distance(residual)
    mean.append(errors.mean())
    std.append(errors.std())
  return MetricCurve('generalization', np.arange(upto + 1, dtype=np.float64),
                     np.array(mean), np.array(std))


@deterministic
def specificity(model: ShapeModel,
                reference: Sequence[TriMesh],
                draws: int = 5000,
                k: Optional[int] = None,
                seed: int = 0,
                threads: Optional[int] = None) -> MetricCurve:
  """Mean over `draws` random `k`-component instances of the mean
  per-vertex distance to the closest reference mesh."""
  if not reference:
    raise ValidationError('Specificity needs a nonempty reference set.')
  if draws < 1:
    raise ValidationError('Specificity needs at least one draw.')
  for mesh in reference:
    model.check_mesh(mesh)
  k = _upto(model, k)
  truncated = model.truncated(k)
  samples = (truncated.mean
             + draw_random_latents(truncated, draws, seed) @ truncated.basis.T)
  refs = data_matrix(reference).reshape(len(reference), -1, 3)

  def nearest(chunk: np.ndarray) -> np.ndarray:
    chunk = chunk.reshape(len(chunk), 1, -1, 3)
    dist = np.mean(np.linalg.norm(chunk - refs[None], axis=3), axis=2)
    return dist.min(axis=1)

  chunks = [samples[i:i + DRAW_CHUNK] for i in range(0, draws, DRAW_CHUNK)]
  errors = np.concatenate(parallel_map(nearest, chunks, threads))
  return MetricCurve('specificity', np.array([float(k)]),
                     np.array([errors.mean()]), np.array([errors.std()]))


def specificity_curve(model: ShapeModel,
                      reference: Sequence[TriMesh],
                      counts: Sequence[int],
                      draws: int = 5000,
                      seed: int = 0,
                      threads: Optional[int] = None) -> MetricCurve:
  counts = sorted(set(int(c) for c in counts))
  points = [specificity(model, reference, draws, c, seed, threads)
            for c in counts]
  return MetricCurve('specificity', np.array(counts, dtype=np.float64),
                     np.concatenate([p.y for p in points]),
                     np.concatenate([p.std for p in points]))


class CedReport(NamedTuple):
  label: str
  errors: List[np.ndarray]  # per-vertex errors of each sample
  thresholds: np.ndarray
  ced: np.ndarray
  auc: float
  failure_rate: float      # percent of errors above t_max
  bin_failure_rate: float  # percent, averaged over threshold bins
  std: float
  mean: float

  def to_curve(self) -> MetricCurve:
    return MetricCurve(self.label, self.thresholds, self.ced)


def vertex_errors(predicted: TriMesh, truth: TriMesh) -> np.ndarray:
  return closest_points(truth, predicted.vertices).distances


def cumulative_errors(errors: np.ndarray,
                      thresholds: np.ndarray) -> np.ndarray:
  errors = np.sort(np.asarray(errors, dtype=np.float64))
  return np.searchsorted(errors, thresholds, side='right') / len(errors)


def ced_auc(errors: np.ndarray, t_max: float) -> float:
  """Exact area under the step CED over `[0, t_max]`, divided by `t_max`."""
  errors = np.asarray(errors, dtype=np.float64)
  return float(np.mean(np.clip(t_max - errors, 0., t_max)) / t_max)


def ced_report(predicted: Sequence[TriMesh],
               truth: Sequence[TriMesh],
               t_max: float = 10.,
               bins: int = 200,
               thresholds: Optional[Sequence[float]] = None,
               label: str = 'model',
               threads: Optional[int] = None) -> CedReport:
  """Pools the per-vertex errors of every pair into one CED."""
  if len(predicted) != len(truth):
    raise ValidationError(
        f'{len(predicted)} predictions for {len(truth)} ground truths.')
  if not predicted:
    raise ValidationError('CED needs at least one pair.')
  if not t_max > 0 or bins < 1:
    raise ValidationError('CED needs t_max > 0 and at least one bin.')
  if thresholds is None:
    thresholds = np.linspace(0., t_max, bins)
  thresholds = np.unique(np.asarray(thresholds, dtype=np.float64))

  errors = parallel_map(lambda pair: vertex_errors(*pair),
                        list(zip(predicted, truth)), threads)
  pooled = np.concatenate(errors)
  ced = cumulative_errors(pooled, thresholds)
  report = CedReport(
      label, errors, thresholds, ced, ced_auc(pooled, t_max),
      float(100. * np.mean(pooled > t_max)),
      float(100. * np.mean(1. - ced)),
      float(np.std(pooled)), float(np.mean(pooled)))
  logger.info(f'{label}: AUC {report.auc:.3f}, std {report.std:.2f}, '
              f'failure {report.failure_rate:.2f}%')
  return report


TABLE_HEADER = 'Method | AUC | Std | Failure Rate (%)'


def format_table(rows: Sequence[Union[CedReport, tuple]]) -> str:
  """Accuracy table; rows are reports or `(label, auc, std, failure)`."""
  lines = [TABLE_HEADER]
  for row in rows:
    if isinstance(row, CedReport):
      row = (row.label, row.auc, row.std, row.failure_rate)
    label, auc, std, failure = row
    lines.append(f'{label} | {auc:.3f} | {std:.2f} | {failure:.2f}')
  return '\n'.join(lines) + '\n'
