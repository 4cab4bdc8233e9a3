"""Refreshing a universal kernel from GP reconstructions of real scans."""

import logging
import numpy as np
from typing import List, NamedTuple, Optional, Sequence, Tuple

from headfuse.config import RefineConfig
from headfuse.errors import HeadFuseError, NumericalError, ValidationError
from headfuse.fusion.kernel import TemplateKernel
from headfuse.fusion.process import (
    PriorProcess, icp_refine, landmark_posterior, truncate_kernel,
    variance_count)
from headfuse.registration.merge import align_face_region
from headfuse.registration.nicp import StiffnessProfile
from headfuse.shape.mesh import LandmarkSet, TriMesh
from headfuse.shape.model import ShapeModel
from headfuse.shape.pca import build_pca
from headfuse.utils import History, parallel_map

logger = logging.getLogger(__name__)

Scan = Tuple[TriMesh, LandmarkSet]


class RefinementResult(NamedTuple):
  model: ShapeModel
  reconstructions: List[Optional[TriMesh]]
  history: History


def reconstruct_scan(kernel: TemplateKernel,
                     scan: Scan,
                     template_landmarks: LandmarkSet,
                     config: RefineConfig,
                     face_indices: Optional[Sequence[int]] = None,
                     profile: Optional[StiffnessProfile] = None) -> TriMesh:
  """Landmark posterior, ICP refinement and, optionally, a final NICP of the
  face region onto the scan."""
  mesh, scan_landmarks = scan
  prior = PriorProcess(kernel)
  initial = landmark_posterior(prior, template_landmarks, scan_landmarks,
                               config.landmark_sigma2)
  result = icp_refine(initial, mesh, max_iters=config.icp_iters,
                      reject_factor=config.reject_factor,
                      max_points=config.max_points,
                      sigma2=config.dense_sigma2)
  reconstruction = result.mesh
  if config.face_align and face_indices is not None and profile is not None:
    reconstruction = align_face_region(reconstruction, mesh, face_indices,
                                       profile, config.band_rings)
  return reconstruction


def _template_landmarks(kernel: TemplateKernel,
                        landmarks: LandmarkSet) -> LandmarkSet:
  landmarks.check_indices(kernel.n_points)
  return LandmarkSet.from_mesh(kernel.template, landmarks.names,
                               landmarks.indices)


def refine_model(kernel: TemplateKernel,
                 scans: Sequence[Scan],
                 template_landmarks: LandmarkSet,
                 config: RefineConfig = RefineConfig(),
                 face_indices: Optional[Sequence[int]] = None,
                 profile: Optional[StiffnessProfile] = None,
                 threads: Optional[int] = None) -> RefinementResult:
  """Reconstructs every scan with the (truncated) kernel, then rebuilds the
  model by PCA of the reconstructions; repeated `config.iterations` times.

  Each later iteration starts from the kernel of the previous PCA model over
  the mean reconstruction. Template landmarks are tied to template vertex
  indices and re-read from each iteration's template.
  """
  if len(scans) < 2:
    raise ValidationError(f'Refinement needs at least 2 scans, '
                          f'got {len(scans)}.')
  if config.iterations < 1:
    raise ValidationError('Refinement needs at least one iteration.')

  history = History()
  model = None
  reconstructions: List[Optional[TriMesh]] = []
  for iteration in range(config.iterations):
    keep = variance_count(kernel, config.variance)
    truncated = truncate_kernel(kernel, keep)
    landmarks = _template_landmarks(kernel, template_landmarks)

    def reconstruct(scan):
      try:
        return reconstruct_scan(truncated, scan, landmarks, config,
                                face_indices, profile)
      except HeadFuseError as e:
        logger.warning(f'Reconstruction failed: {e}')
        return None

    reconstructions = parallel_map(reconstruct, scans, threads)
    succeeded = [r for r in reconstructions if r is not None]
    if len(succeeded) < 2:
      raise NumericalError(
          f'Only {len(succeeded)} of {len(scans)} scans were reconstructed.')

    residual = float(np.mean([
        np.sqrt(np.mean(np.sum((r.vertices - s[0].vertices) ** 2, axis=1)))
        if r.n_vertices == s[0].n_vertices else np.nan
        for r, s in zip(reconstructions, scans) if r is not None]))
    history.log(iteration, 'components', keep)
    history.log(iteration, 'reconstructed', len(succeeded))
    history.log(iteration, 'rms', residual)
    logger.info(f'refine {history.show(iteration)}')

    model = build_pca(succeeded, keep=config.keep,
                      name=f'{kernel.name}-refined')
    kernel = type(kernel).from_model(model, kernel.regions)
  return RefinementResult(model, reconstructions, history)
