"""End-to-end run over a work directory: synthetic inputs, regression and
kernel fusion, refinement, ear fusion and metrics, plus a manifest of
everything written."""

import dataclasses
import hashlib
import logging
import os
import numpy as np
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import headfuse
from headfuse.config import PipelineConfig, dumps_config
from headfuse.data.synthetic import SyntheticFamilySpec, synth_family
from headfuse.errors import (
    HeadFuseError, StageError, StorageError, ValidationError)
from headfuse.evaluation.metrics import (
    ced_report, compactness, format_table, generalization, specificity_curve)
from headfuse.evaluation.report import emit_report
from headfuse.fusion.ear import (
    EarRegistration, build_ear_model, fuse_ear_kernel, mirror_model,
    unwrap_ear)
from headfuse.fusion.kernel import (
    KernelRegistrations, build_universal_kernel, face_head_blend_weights,
    kernel_eigenmodel, kernel_from_model, load_kernel)
from headfuse.fusion.refine import refine_model
from headfuse.fusion.regression import (
    LatentRegressor, NicpCrop, fit_regressor, generate_pairs, held_out_rms,
    predict_whole)
from headfuse.registration.nicp import StiffnessProfile, load_profile
from headfuse.shape.io import (
    load_json, load_landmarks, load_mesh, save_json, save_landmarks,
    save_mesh)
from headfuse.shape.mesh import IndexCrop, LandmarkSet, TriMesh, crop
from headfuse.shape.model import load_model, save_model
from headfuse.shape.pca import build_pca, reconstruct
from headfuse.shape.surface import coverage_mask, mean_edge_length
from headfuse.utils import resolve_threads

logger = logging.getLogger(__name__)

STAGES = ('synth', 'fuse-regress', 'fuse-gp', 'refine', 'fuse-ear', 'metrics')
# Added to the config seed so every stage draws from its own stream.
STAGE_SEEDS = {stage: i for i, stage in enumerate(STAGES)}
MANIFEST = 'manifest.json'


class PipelineResult(NamedTuple):
  workdir: str
  stages: List[str]
  manifest: Dict


class _Context:
  """Paths and settings shared by the stages of one run."""

  def __init__(self, config: PipelineConfig, workdir: str, threads: int):
    self.config = config
    self.workdir = workdir
    self.threads = threads

  def path(self, *parts: str) -> str:
    return os.path.join(self.workdir, *parts)

  def output(self, *parts: str) -> str:
    path = self.path(*parts)
    try:
      os.makedirs(os.path.dirname(path), exist_ok=True)
    except OSError as e:
      raise StorageError(
          f'Cannot create {os.path.dirname(path)}: {e}') from e
    return path

  def seed(self, stage: str) -> int:
    return self.config.seed + STAGE_SEEDS[stage]

  def listing(self, directory: str, suffix: str) -> List[str]:
    root = self.path(directory)
    if not os.path.isdir(root):
      raise StorageError(f'Missing input directory {root}.')
    names = sorted(n for n in os.listdir(root) if n.endswith(suffix))
    if not names:
      raise StorageError(f'No {suffix} files in {root}.')
    return [os.path.join(root, n) for n in names]

  def profile(self, anchor: np.ndarray) -> StiffnessProfile:
    if self.config.registration.profile:
      return load_profile(self.config.registration.profile)
    return StiffnessProfile(anchor=tuple(float(a) for a in anchor))

  def nicp_kwargs(self) -> Dict:
    reg = self.config.registration
    return {'stiffness': (reg.stiffness_high, reg.stiffness_low),
            'n_steps': reg.steps, 'inner_iters': reg.inner_iters,
            'reject_factor': reg.reject_factor}


def _face_region(ctx: _Context):
  face = load_json(ctx.path('synth', 'face.json'))
  try:
    return np.asarray(face['indices'], dtype=np.int64), int(face['nose_tip'])
  except (KeyError, TypeError) as e:
    raise ValidationError(f'Malformed face region file: {e}') from e


def _meshes(ctx: _Context, directory: str) -> List[TriMesh]:
  return [load_mesh(p) for p in ctx.listing(directory, '.ply')]


def _scans(ctx: _Context):
  scans = []
  for path in ctx.listing('scans', '.ply'):
    scans.append((load_mesh(path), load_landmarks(path[:-4] + '.json')))
  return scans


def _save_meshes(ctx: _Context, meshes: Sequence[TriMesh], directory: str,
                 prefix: str) -> List[str]:
  paths = []
  for i, mesh in enumerate(meshes):
    path = ctx.output(directory, f'{prefix}-{i:03d}.ply')
    save_mesh(mesh, path)
    paths.append(path)
  return paths


def stage_synth(ctx: _Context):
  """Training heads and ears, noisy scans and a held-out test set."""
  synth, seed = ctx.config.synth, ctx.seed('synth')
  head_spec = SyntheticFamilySpec(
      'coupled-ellipsoids', count=synth.n_train,
      latent_dim=synth.head_latent_dim, subdivisions=synth.head_subdivisions,
      face_angle=synth.face_angle, seed=seed)
  family = synth_family(head_spec)
  head = build_pca(family.meshes, synth.head_latent_dim, 'head',
                   family.model.metadata)
  face_idx = family.part_indices
  face = build_pca([crop(m, face_idx) for m in family.meshes],
                   family.part_model.n_components, 'face',
                   family.part_model.metadata)
  save_model(head, ctx.output('synth', 'head.model'))
  save_model(face, ctx.output('synth', 'face.model'))
  save_json({'indices': face_idx.tolist(),
             'nose_tip': family.extras['nose_tip']},
            ctx.output('synth', 'face.json'))
  save_landmarks(head.landmarks(), ctx.output('synth', 'landmarks.json'))
  _save_meshes(ctx, family.meshes, 'train', 'train')

  ears = synth_family(SyntheticFamilySpec(
      'toy-ear', count=synth.n_train, latent_dim=synth.ear_latent_dim,
      ear_angle=synth.ear_angle, ear_rings=synth.ear_rings,
      ear_segments=synth.ear_segments, seed=seed + 1))
  ear = build_ear_model(ears.meshes, synth.ear_latent_dim, 'right-ear',
                        metadata={'canal_vertex': ears.extras['canal_vertex'],
                                  'base_loop': ears.extras['base_loop']
                                  .tolist()})
  save_model(ear, ctx.output('synth', 'right-ear.model'))

  names = list(family.landmarks.names)
  lm_idx = family.landmarks.indices
  # Same generating model as the training heads, fresh latents.
  scans = synth_family(dataclasses.replace(
      head_spec, count=synth.n_scans, sample_seed=1, moment_match=False,
      noise=synth.scan_noise))
  for path, scan in zip(_save_meshes(ctx, scans.meshes, 'scans', 'scan'),
                        scans.meshes):
    save_landmarks(LandmarkSet(names, scan.vertices[lm_idx]),
                   path[:-4] + '.json')
  test = synth_family(dataclasses.replace(
      head_spec, count=synth.n_test, sample_seed=2, moment_match=False))
  _save_meshes(ctx, test.meshes, 'test', 'test')
  logger.info(f'Synthesized {synth.n_train} training heads and ears, '
              f'{synth.n_scans} scans and {synth.n_test} test heads.')


def stage_fuse_regress(ctx: _Context):
  """Face-to-head latent regression, scored on the held-out heads."""
  head = load_model(ctx.path('synth', 'head.model'))
  face = load_model(ctx.path('synth', 'face.model'))
  face_idx, nose_tip = _face_region(ctx)
  settings = ctx.config.regress
  count = settings.count or 10 * head.n_components
  if settings.extractor == 'crop':
    extractor = IndexCrop(face_idx)
  else:
    extractor = NicpCrop(face.template,
                         ctx.profile(head.template.vertices[nose_tip]),
                         **ctx.nicp_kwargs())
  pairs = generate_pairs(head, face, extractor, count,
                         ctx.seed('fuse-regress'), ctx.threads)
  regressor = fit_regressor(pairs, face.name, head.name)
  regressor.save(ctx.output('regress', 'face-to-head.reg'))

  test = _meshes(ctx, 'test')
  rms = held_out_rms(regressor, head, face,
                     [(crop(t, face_idx), t) for t in test])
  scale = head.template.bounding_radius()
  save_json({'count': count, 'skipped': pairs.skipped,
             'ridge': regressor.ridge, 'held_out_rms': rms,
             'relative_rms': rms / scale},
            ctx.output('regress', 'summary.json'))
  logger.info(f'Held-out regression RMS {rms:.4g} mm '
              f'({100 * rms / scale:.3g}% of the head radius).')


def stage_fuse_gp(ctx: _Context):
  """Universal kernel of the head and face models over the head mean."""
  head = load_model(ctx.path('synth', 'head.model'))
  face = load_model(ctx.path('synth', 'face.model'))
  face_idx, nose_tip = _face_region(ctx)
  template = head.template
  mask = np.zeros(template.n_vertices, dtype=bool)
  mask[face_idx] = True
  settings = ctx.config.gaussian
  kernel = build_universal_kernel(
      head, face, template, KernelRegistrations(face.template),
      face_head_blend_weights(template, mask, nose_tip),
      settings.blend_rule, settings.psd, settings.dense_limit)
  kernel.save(ctx.output('gp', 'universal.kernel'))
  model = kernel_eigenmodel(kernel, settings.keep, 'universal')
  save_model(model, ctx.output('gp', 'universal.model'))


def stage_refine(ctx: _Context):
  """GP reconstructions of the scans and PCA of the results."""
  kernel = load_kernel(ctx.path('gp', 'universal.kernel'))
  head = load_model(ctx.path('synth', 'head.model'))
  face_idx, nose_tip = _face_region(ctx)
  landmarks = load_landmarks(ctx.path('synth', 'landmarks.json'))
  result = refine_model(kernel, _scans(ctx), landmarks, ctx.config.refine,
                        face_idx,
                        ctx.profile(head.template.vertices[nose_tip]),
                        ctx.threads)
  save_model(result.model, ctx.output('refine', 'refined.model'))
  saved = []
  paths = ctx.listing('scans', '.ply')
  for path, mesh in zip(paths, result.reconstructions):
    if mesh is not None:
      name = os.path.basename(path)
      save_mesh(mesh, ctx.output('refine', name))
      saved.append(name)
  save_json({'failed': sum(r is None for r in result.reconstructions),
             'reconstructions': saved,
             'iterations': [result.history.logs[s]
                            for s in result.history.steps()]},
            ctx.output('refine', 'summary.json'))


def stage_fuse_ear(ctx: _Context):
  """Ear covariances blended into the refined kernel."""
  refined = load_model(ctx.path('refine', 'refined.model'))
  regions = load_kernel(ctx.path('gp', 'universal.kernel')).regions
  right = load_model(ctx.path('synth', 'right-ear.model'))
  kernel = kernel_from_model(refined, regions,
                             ctx.config.gaussian.dense_limit)
  template = kernel.template
  tolerance = mean_edge_length(template)
  settings = ctx.config.ear
  models = {'right': right, 'left': mirror_model(right)}
  for side in settings.sides:
    ear = models[side]
    try:
      unwrap = unwrap_ear(ear.template, int(ear.metadata['canal_vertex']),
                          ear.metadata.get('base_loop'))
    except KeyError:
      raise ValidationError(
          f'Ear model {ear.name!r} carries no canal vertex.') from None
    region = np.nonzero(
        coverage_mask(template.vertices, ear.template, tolerance))[0]
    kernel = fuse_ear_kernel(kernel, ear, side, unwrap,
                             EarRegistration(ear.template, region),
                             settings.blend_rule, settings.psd)
  kernel = kernel.relabelled(name='fused')
  kernel.save(ctx.output('ear', 'fused.kernel'))
  model = kernel_eigenmodel(kernel, ctx.config.gaussian.keep, 'fused')
  save_model(model, ctx.output('ear', 'fused.model'))


def _specificity_counts(upto: int) -> List[int]:
  counts = [2 ** i for i in range(upto.bit_length()) if 2 ** i <= upto]
  return sorted(set(counts + [upto]))


def stage_metrics(ctx: _Context):
  """Intrinsic metrics of the final model and reconstruction CEDs."""
  settings = ctx.config.metrics
  final = ctx.path('ear', 'fused.model')
  if not os.path.exists(final):
    final = ctx.path('refine', 'refined.model')
  model = load_model(final)
  head = load_model(ctx.path('synth', 'head.model'))
  face = load_model(ctx.path('synth', 'face.model'))
  face_idx, _ = _face_region(ctx)
  regressor = LatentRegressor.load(ctx.path('regress', 'face-to-head.reg'))
  test = _meshes(ctx, 'test')
  reference = test if settings.specificity_reference == 'test' else \
      _meshes(ctx, 'train')
  upto = model.n_components if settings.upto is None else \
      min(settings.upto, model.n_components)

  emit_report([compactness(model, upto)], ctx.output('metrics', 'compactness'),
              'Compactness', ('components', 'explained variance'))
  emit_report([generalization(model, test, upto)],
              ctx.output('metrics', 'generalization'), 'Generalization',
              ('components', 'mean error (mm)'))
  emit_report([specificity_curve(model, reference, _specificity_counts(upto),
                                 settings.draws, ctx.seed('metrics'),
                                 ctx.threads)],
              ctx.output('metrics', 'specificity'), 'Specificity',
              ('components', 'mean distance (mm)'))

  predictions = [predict_whole(regressor, head, face, crop(t, face_idx))
                 for t in test]
  reports = [
      ced_report(predictions, test, settings.t_max, settings.bins,
                 label='regression', threads=ctx.threads),
      ced_report([reconstruct(model, t) for t in test], test, settings.t_max,
                 settings.bins, label=model.name, threads=ctx.threads),
  ]
  emit_report(reports, ctx.output('metrics', 'ced'), 'Per-vertex error',
              ('error (mm)', 'fraction of vertices'))
  table = format_table(reports)
  try:
    with open(ctx.output('metrics', 'table.txt'), 'w') as f:
      f.write(table)
  except OSError as e:
    raise StorageError(f'Cannot write table: {e}') from e
  logger.info('\n' + table)


_RUNNERS: Dict[str, Callable[[_Context], None]] = {
    'synth': stage_synth,
    'fuse-regress': stage_fuse_regress,
    'fuse-gp': stage_fuse_gp,
    'refine': stage_refine,
    'fuse-ear': stage_fuse_ear,
    'metrics': stage_metrics,
}


def sha256_file(path: str) -> str:
  digest = hashlib.sha256()
  with open(path, 'rb') as f:
    for chunk in iter(lambda: f.read(1 << 20), b''):
      digest.update(chunk)
  return digest.hexdigest()


def build_manifest(ctx: _Context, stages: Sequence[str]) -> Dict:
  """Versions, seeds, the config hash and the hash of every file under the
  work directory except the manifest itself."""
  files = {}
  for root, _, names in os.walk(ctx.workdir):
    for name in names:
      path = os.path.join(root, name)
      rel = os.path.relpath(path, ctx.workdir).replace(os.sep, '/')
      if rel != MANIFEST:
        files[rel] = sha256_file(path)
  return {
      'headfuse': headfuse.__version__,
      'numpy': np.__version__,
      'seed': ctx.config.seed,
      'stage_seeds': {s: ctx.seed(s) for s in STAGES},
      'config_sha256': hashlib.sha256(
          dumps_config(ctx.config).encode('utf-8')).hexdigest(),
      'stages': list(stages),
      'files': dict(sorted(files.items())),
  }


def _check_stages(stages: Optional[Sequence[str]]) -> List[str]:
  if stages is None:
    return list(STAGES)
  unknown = [s for s in stages if s not in STAGES]
  if unknown:
    raise ValidationError(f'Unknown stages {unknown}; expected {STAGES}.')
  return [s for s in STAGES if s in set(stages)]


def run_pipeline(config: PipelineConfig,
                 workdir: str,
                 stages: Optional[Sequence[str]] = None,
                 threads: Optional[int] = None) -> PipelineResult:
  """Runs `stages` (all by default) in their fixed order.

  The manifest is rewritten after every finished stage, so the artifacts of
  a failed run stay described up to the last good stage.

  Raises
  ------
  StageError
    A stage failed; wraps the original error.
  """
  stages = _check_stages(stages)
  ctx = _Context(config, workdir, resolve_threads(threads, config.threads))
  try:
    os.makedirs(workdir, exist_ok=True)
    with open(ctx.path('config.json'), 'w') as f:
      f.write(dumps_config(config))
  except OSError as e:
    raise StorageError(f'Cannot prepare {workdir}: {e}') from e

  done: List[str] = []
  manifest = build_manifest(ctx, done)
  for stage in stages:
    logger.info(f'Stage {stage} ({ctx.threads} threads).')
    try:
      _RUNNERS[stage](ctx)
    except HeadFuseError as e:
      logger.error(f'Stage {stage} failed: {e}')
      raise StageError(stage, e) from e
    done.append(stage)
    manifest = build_manifest(ctx, done)
    save_json(manifest, ctx.path(MANIFEST))
  return PipelineResult(workdir, done, manifest)
