"""Command line interface: one subcommand per pipeline step."""

import argparse
import logging
import os
import sys
import numpy as np
from typing import Optional, Sequence

from headfuse import __version__
from headfuse.config import PipelineConfig, load_config
from headfuse.data.synthetic import KINDS, SyntheticFamilySpec, synth_family
from headfuse.errors import (
    INTERNAL_EXIT_CODE, HeadFuseError, StorageError, ValidationError)
from headfuse.evaluation.metrics import (
    ced_report, compactness, format_table, generalization, specificity_curve)
from headfuse.evaluation.report import emit_report
from headfuse.eyes.camera import load_camera, save_camera, solve_head_pnp
from headfuse.eyes.fitting import (
    FitWeights, fit_eye, load_eye_landmarks, load_image, save_fit)
from headfuse.eyes.models import load_eye_region, load_eyeball, save_eyeball
from headfuse.fusion.ear import (
    EarRegistration, fuse_ear_kernel, mirror_model, unwrap_ear)
from headfuse.fusion.kernel import (
    KernelRegistrations, TemplateKernel, build_universal_kernel,
    face_head_blend_weights, kernel_eigenmodel, kernel_from_model,
    load_kernel)
from headfuse.fusion.refine import refine_model
from headfuse.fusion.regression import (
    NicpCrop, fit_regressor, generate_pairs)
from headfuse.pipeline import STAGES, run_pipeline
from headfuse.registration.nicp import (
    StiffnessProfile, load_profile, nicp_register)
from headfuse.shape.io import (
    load_json, load_landmarks, load_mesh, save_json, save_landmarks,
    save_mesh)
from headfuse.shape.mesh import IndexCrop
from headfuse.shape.model import load_model, save_model
from headfuse.shape.pca import build_pca
from headfuse.shape.procrustes import gpa_align
from headfuse.shape.surface import coverage_mask, mean_edge_length
from headfuse.utils import LogProgress, resolve_threads

logger = logging.getLogger('headfuse')

METRICS = ('compact', 'general', 'specific', 'ced')


def _keep(text: str):
  """Component count (`40`) or variance fraction (`0.98`)."""
  try:
    return float(text) if '.' in text or 'e' in text.lower() else int(text)
  except ValueError:
    raise argparse.ArgumentTypeError(
        f'expected a count or a fraction, got {text!r}') from None


def _profile(args, config: PipelineConfig,
             anchor: Optional[np.ndarray] = None) -> StiffnessProfile:
  path = getattr(args, 'profile', None) or config.registration.profile
  if path:
    return load_profile(path)
  if anchor is None:
    return StiffnessProfile()
  return StiffnessProfile(anchor=tuple(float(a) for a in anchor))


def _nicp_kwargs(config: PipelineConfig):
  reg = config.registration
  return {'stiffness': (reg.stiffness_high, reg.stiffness_low),
          'n_steps': reg.steps, 'inner_iters': reg.inner_iters,
          'reject_factor': reg.reject_factor}


def _region(path: str):
  data = load_json(path)
  try:
    indices = np.asarray(data['indices'], dtype=np.int64)
  except (KeyError, TypeError, ValueError) as e:
    raise ValidationError(f'{path}: malformed region file: {e}') from e
  return indices, data.get('nose_tip')


def _mesh_landmarks(path: str):
  return load_landmarks(os.path.splitext(path)[0] + '.json')


def cmd_build_pca(args, config: PipelineConfig):
  meshes = [load_mesh(p) for p in args.meshes]
  if not args.no_align:
    meshes, _ = gpa_align(meshes, scale=not args.rigid)
  model = build_pca(meshes, args.keep, args.name,
                    {'sagittal_axis': args.sagittal_axis})
  save_model(model, args.out)
  logger.info(f'Saved {model} to {args.out}.')


def cmd_register(args, config: PipelineConfig):
  template = load_mesh(args.template)
  target = load_mesh(args.target)
  landmarks = None
  if args.template_landmarks or args.target_landmarks:
    if not (args.template_landmarks and args.target_landmarks):
      raise ValidationError('Both template and target landmarks are needed.')
    landmarks = (load_landmarks(args.template_landmarks),
                 load_landmarks(args.target_landmarks))
  result = nicp_register(
      template, target, _profile(args, config), landmarks,
      callbacks=[LogProgress(verbose=args.verbose, name='nicp')],
      **_nicp_kwargs(config))
  save_mesh(result.mesh, args.out)
  if not result.converged:
    logger.warning('Registration did not converge; the result is kept.')


def cmd_fuse_regress(args, config: PipelineConfig):
  whole = load_model(args.whole)
  part = load_model(args.part)
  indices, _ = _region(args.region)
  if config.regress.extractor == 'crop':
    extractor = IndexCrop(indices)
  else:
    extractor = NicpCrop(part.template, _profile(args, config),
                         **_nicp_kwargs(config))
  count = args.count or config.regress.count or 10 * whole.n_components
  seed = config.seed if args.seed is None else args.seed
  pairs = generate_pairs(whole, part, extractor, count, seed, args.threads)
  regressor = fit_regressor(pairs, part.name, whole.name)
  regressor.save(args.out)
  logger.info(f'Saved a {regressor.matrix.shape} regressor to {args.out}.')


def cmd_fuse_gp(args, config: PipelineConfig):
  head = load_model(args.head)
  face = load_model(args.face)
  indices, nose_tip = _region(args.region)
  if nose_tip is None:
    raise ValidationError(f'{args.region}: the face region names no nose tip.')
  template = load_mesh(args.template) if args.template else head.template
  surface = load_mesh(args.face_surface) if args.face_surface else \
      face.template
  mask = np.zeros(template.n_vertices, dtype=bool)
  mask[indices] = True
  settings = config.gaussian
  kernel = build_universal_kernel(
      head, face, template, KernelRegistrations(surface),
      face_head_blend_weights(template, mask, int(nose_tip)),
      settings.blend_rule, settings.psd, settings.dense_limit)
  kernel.save(args.out)
  if args.model:
    save_model(kernel_eigenmodel(kernel, args.keep or settings.keep),
               args.model)


def cmd_refine(args, config: PipelineConfig):
  kernel = load_kernel(args.kernel)
  scans = [(load_mesh(p), _mesh_landmarks(p)) for p in args.scans]
  face_indices = profile = None
  if args.region:
    face_indices, nose_tip = _region(args.region)
    anchor = None if nose_tip is None else \
        kernel.template.vertices[int(nose_tip)]
    profile = _profile(args, config, anchor)
  directory = args.reconstructions or \
      os.path.dirname(os.path.abspath(args.out))
  targets = [os.path.join(directory, os.path.basename(p)) for p in args.scans]
  for path, target in zip(args.scans, targets):
    if os.path.abspath(target) == os.path.abspath(path):
      raise ValidationError(f'The reconstruction of {path} would overwrite '
                            'the scan; pass --reconstructions.')
  result = refine_model(kernel, scans, load_landmarks(args.landmarks),
                        config.refine, face_indices, profile, args.threads)
  save_model(result.model, args.out)
  os.makedirs(directory, exist_ok=True)
  for target, mesh in zip(targets, result.reconstructions):
    if mesh is not None:
      save_mesh(mesh, target)
  logger.info(f'Saved the reconstructions to {directory}.')


def _base_kernel(path: str, dense_limit: int) -> TemplateKernel:
  if path.endswith('.kernel'):
    return load_kernel(path)
  return kernel_from_model(load_model(path), dense_limit=dense_limit)


def cmd_fuse_ear(args, config: PipelineConfig):
  kernel = _base_kernel(args.base, config.gaussian.dense_limit)
  right = load_model(args.ear)
  models = {'right': right, 'left': mirror_model(right)}
  tolerance = args.tolerance or mean_edge_length(kernel.template)
  settings = config.ear
  for side in args.sides or settings.sides:
    ear = models[side]
    if 'canal_vertex' not in ear.metadata:
      raise ValidationError(f'Ear model {args.ear} carries no canal vertex.')
    unwrap = unwrap_ear(ear.template, int(ear.metadata['canal_vertex']),
                        ear.metadata.get('base_loop'))
    region = np.nonzero(
        coverage_mask(kernel.template.vertices, ear.template, tolerance))[0]
    kernel = fuse_ear_kernel(kernel, ear, side, unwrap,
                             EarRegistration(ear.template, region),
                             settings.blend_rule, settings.psd)
  kernel.save(args.out)
  if args.model:
    save_model(kernel_eigenmodel(kernel, config.gaussian.keep), args.model)


def cmd_fit_eye(args, config: PipelineConfig):
  region = load_eye_region(args.region)
  eyeball = load_eyeball(args.eyeball)
  if args.camera:
    camera = load_camera(args.camera)
  elif args.head_2d and args.head_3d:
    pnp = solve_head_pnp(load_landmarks(args.head_2d),
                         load_landmarks(args.head_3d),
                         tuple(args.principal_point))
    camera = pnp.camera
    logger.info(f'Head camera reprojection RMS {pnp.rms:.4g} px.')
    if args.camera_out:
      save_camera(camera, args.camera_out)
  else:
    raise ValidationError('Give --camera, or --head-2d with --head-3d.')
  eyelid, iris = load_eye_landmarks(args.landmarks)
  image = load_image(args.image) if args.image else None
  settings = config.eye
  fit = fit_eye(region, eyeball, camera, eyelid, iris, image,
                FitWeights.from_config(settings), settings.max_iters,
                settings.tolerance,
                callbacks=[LogProgress(verbose=args.verbose, name='eye')])
  save_fit(fit, args.out)
  if not fit.converged:
    logger.warning('Eye fit did not converge; the last state is kept.')


def cmd_metrics(args, config: PipelineConfig):
  settings = config.metrics
  if args.kind == 'ced':
    if not args.predicted or not args.truth:
      raise ValidationError('CED needs --predicted and --truth meshes.')
    report = ced_report([load_mesh(p) for p in args.predicted],
                        [load_mesh(p) for p in args.truth],
                        settings.t_max, settings.bins,
                        label=args.label or 'model', threads=args.threads)
    emit_report([report], args.out, 'Per-vertex error',
                ('error (mm)', 'fraction of vertices'))
    table = format_table([report])
    try:
      with open(args.out + '.txt', 'w') as f:
        f.write(table)
    except OSError as e:
      raise StorageError(f'Cannot write {args.out}.txt: {e}') from e
    return
  if not args.model:
    raise ValidationError(f'{args.kind} needs --model.')
  model = load_model(args.model)
  upto = args.upto if args.upto is not None else settings.upto
  if args.kind == 'compact':
    curve = compactness(model, upto)
    labels = ('components', 'explained variance')
  else:
    if not args.test:
      raise ValidationError(f'{args.kind} needs --test meshes.')
    test = [load_mesh(p) for p in args.test]
    if args.kind == 'general':
      curve = generalization(model, test, upto)
      labels = ('components', 'mean error (mm)')
    else:
      upto = model.n_components if upto is None else upto
      counts = args.counts or sorted({1, upto} | {
          2 ** i for i in range(upto.bit_length()) if 2 ** i <= upto})
      seed = config.seed if args.seed is None else args.seed
      curve = specificity_curve(model, test, counts,
                                args.draws or settings.draws, seed,
                                args.threads)
      labels = ('components', 'mean distance (mm)')
  emit_report([curve._replace(label=args.label or curve.label)], args.out,
              curve.label.capitalize(), labels)


def cmd_synth(args, config: PipelineConfig):
  spec = SyntheticFamilySpec(
      args.kind, count=args.count, latent_dim=args.latent_dim,
      noise=args.noise, seed=config.seed if args.seed is None else args.seed,
      sample_seed=args.sample_seed)
  family = synth_family(spec)
  try:
    os.makedirs(args.out, exist_ok=True)
  except OSError as e:
    raise StorageError(f'Cannot create {args.out}: {e}') from e
  for i, mesh in enumerate(family.meshes):
    save_mesh(mesh, os.path.join(args.out, f'mesh-{i:03d}.ply'))
  save_model(family.model, os.path.join(args.out, 'true.model'))
  if family.part_model is not None:
    save_model(family.part_model, os.path.join(args.out, 'part.model'))
    region = {'indices': family.part_indices.tolist()}
    if 'nose_tip' in family.extras:
      region['nose_tip'] = family.extras['nose_tip']
    save_json(region, os.path.join(args.out, 'region.json'))
  if family.landmarks is not None:
    save_landmarks(family.landmarks,
                   os.path.join(args.out, 'landmarks.json'))
  if 'eyeball' in family.extras:
    save_eyeball(family.extras['eyeball'],
                 os.path.join(args.out, 'eyeball.json'))
  logger.info(f'Wrote {len(family.meshes)} {args.kind} meshes to {args.out}.')


def cmd_run(args, config: PipelineConfig):
  result = run_pipeline(config, args.workdir, args.stages, args.threads)
  logger.info(f'Finished {", ".join(result.stages)} in {result.workdir}.')


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
      prog='headfuse',
      description='Fuse, refine and evaluate PCA shape models.')
  parser.add_argument('--version', action='version',
                      version=f'%(prog)s {__version__}')
  parser.add_argument('--config', help='JSON pipeline config')
  parser.add_argument('--threads', type=int, default=None,
                      help='worker cap; defaults to $HEADFUSE_THREADS, then '
                      'the config')
  parser.add_argument('-v', '--verbose', action='store_true')
  sub = parser.add_subparsers(dest='command', required=True)

  p = sub.add_parser('build-pca', help='GPA and PCA of registered meshes')
  p.add_argument('meshes', nargs='+')
  p.add_argument('--keep', type=_keep, default=0.997)
  p.add_argument('--name', default='model')
  p.add_argument('--no-align', action='store_true')
  p.add_argument('--rigid', action='store_true', help='align without scale')
  p.add_argument('--sagittal-axis', type=int, default=0)
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_build_pca)

  p = sub.add_parser('register', help='non-rigid ICP of template to target')
  p.add_argument('template')
  p.add_argument('target')
  p.add_argument('--profile')
  p.add_argument('--template-landmarks')
  p.add_argument('--target-landmarks')
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_register)

  p = sub.add_parser('fuse-regress', help='part-to-whole latent regression')
  p.add_argument('--whole', required=True)
  p.add_argument('--part', required=True)
  p.add_argument('--region', required=True,
                 help='JSON with the part vertex "indices" on the whole')
  p.add_argument('--profile')
  p.add_argument('--count', type=int)
  p.add_argument('--seed', type=int)
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_fuse_regress)

  p = sub.add_parser('fuse-gp', help='blend head and face covariances')
  p.add_argument('--head', required=True)
  p.add_argument('--face', required=True)
  p.add_argument('--region', required=True,
                 help='JSON with face "indices" and "nose_tip"')
  p.add_argument('--template')
  p.add_argument('--face-surface')
  p.add_argument('--keep', type=int)
  p.add_argument('--model', help='also save the kernel eigenmodel')
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_fuse_gp)

  p = sub.add_parser('refine', help='refine a kernel with scans')
  p.add_argument('--kernel', required=True)
  p.add_argument('--scans', nargs='+', required=True,
                 help='meshes, each with landmarks in a sibling .json')
  p.add_argument('--landmarks', required=True,
                 help='template landmarks with vertex indices')
  p.add_argument('--region', help='face region for the final alignment')
  p.add_argument('--profile')
  p.add_argument('--out', required=True)
  p.add_argument('--reconstructions',
                 help='directory for the per-scan reconstructions '
                 '(default: next to --out)')
  p.set_defaults(func=cmd_refine)

  p = sub.add_parser('fuse-ear', help='blend ear covariances into a kernel')
  p.add_argument('--base', required=True, help='.kernel or .model file')
  p.add_argument('--ear', required=True, help='right-ear model')
  p.add_argument('--sides', nargs='+', choices=('left', 'right'))
  p.add_argument('--tolerance', type=float)
  p.add_argument('--model', help='also save the kernel eigenmodel')
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_fuse_ear)

  p = sub.add_parser('fit-eye', help='fit eye region and gaze to landmarks')
  p.add_argument('--region', required=True)
  p.add_argument('--eyeball', required=True)
  p.add_argument('--landmarks', required=True)
  p.add_argument('--camera')
  p.add_argument('--head-2d')
  p.add_argument('--head-3d')
  p.add_argument('--principal-point', type=float, nargs=2, default=(0., 0.))
  p.add_argument('--camera-out')
  p.add_argument('--image')
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_fit_eye)

  p = sub.add_parser('metrics', help='model and reconstruction metrics')
  p.add_argument('kind', choices=METRICS)
  p.add_argument('--model')
  p.add_argument('--test', nargs='+')
  p.add_argument('--predicted', nargs='+')
  p.add_argument('--truth', nargs='+')
  p.add_argument('--upto', type=int)
  p.add_argument('--counts', type=int, nargs='+')
  p.add_argument('--draws', type=int)
  p.add_argument('--seed', type=int)
  p.add_argument('--label', default='')
  p.add_argument('--out', required=True, help='output prefix')
  p.set_defaults(func=cmd_metrics)

  p = sub.add_parser('synth', help='synthetic shape family')
  p.add_argument('--kind', choices=KINDS, default='coupled-ellipsoids')
  p.add_argument('--count', type=int, default=20)
  p.add_argument('--latent-dim', type=int, default=8)
  p.add_argument('--noise', type=float, default=0.)
  p.add_argument('--seed', type=int)
  p.add_argument('--sample-seed', type=int, default=0)
  p.add_argument('--out', required=True)
  p.set_defaults(func=cmd_synth)

  p = sub.add_parser('run', help='the whole synthetic pipeline')
  p.add_argument('--workdir', required=True)
  p.add_argument('--stages', nargs='+', choices=STAGES)
  p.set_defaults(func=cmd_run)
  return parser


def setup_logging(verbose: bool):
  logging.basicConfig(
      level=logging.DEBUG if verbose else logging.INFO,
      format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def main(argv: Optional[Sequence[str]] = None) -> int:
  args = build_parser().parse_args(argv)
  setup_logging(args.verbose)
  try:
    config = load_config(args.config) if args.config else PipelineConfig()
    args.threads = resolve_threads(args.threads, config.threads)
    args.func(args, config)
  except HeadFuseError as e:
    logger.error(str(e))
    return e.exit_code
  except Exception:
    logger.exception('Internal error.')
    return INTERNAL_EXIT_CODE
  return 0


if __name__ == '__main__':
  sys.exit(main())
