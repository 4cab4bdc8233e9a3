import glob
import json
import os

import pytest

import headfuse.cli
from headfuse.cli import main
from headfuse.errors import INTERNAL_EXIT_CODE
from headfuse.evaluation.report import load_report
from headfuse.fusion.kernel import BlockKernel
from headfuse.shape.io import load_json, load_landmarks, load_mesh, \
    save_landmarks, save_mesh
from headfuse.shape.mesh import LandmarkSet
from headfuse.shape.model import load_model


@pytest.fixture(scope='module')
def family_dir(tmp_path_factory):
  out = str(tmp_path_factory.mktemp('family'))
  assert main(['synth', '--kind', 'coupled-ellipsoids', '--count', '6',
               '--latent-dim', '3', '--seed', '4', '--out', out]) == 0
  return out


def test_synth_writes_the_family(family_dir):
  assert len(glob.glob(os.path.join(family_dir, 'mesh-*.ply'))) == 6
  assert load_model(os.path.join(family_dir, 'true.model')).n_components == 3
  region = load_json(os.path.join(family_dir, 'region.json'))
  assert 'nose_tip' in region and region['indices']
  assert os.path.exists(os.path.join(family_dir, 'landmarks.json'))


def test_build_pca_and_compactness(family_dir, tmp_path):
  meshes = sorted(glob.glob(os.path.join(family_dir, 'mesh-*.ply')))
  model_path = str(tmp_path / 'head.model')
  assert main(['build-pca', *meshes, '--keep', '2', '--name', 'head',
               '--out', model_path]) == 0
  model = load_model(model_path)
  assert model.n_components == 2
  assert model.name == 'head'

  prefix = str(tmp_path / 'compact')
  assert main(['metrics', 'compact', '--model', model_path,
               '--out', prefix]) == 0
  curve, = load_report(prefix + '.csv')
  assert curve.x.tolist() == [1., 2.]


def test_eyeball_synth(tmp_path):
  out = str(tmp_path / 'eye')
  assert main(['synth', '--kind', 'eyeball', '--count', '2',
               '--out', out]) == 0
  assert os.path.exists(os.path.join(out, 'eyeball.json'))


def test_errors_map_to_exit_codes(family_dir, tmp_path):
  assert main(['build-pca', str(tmp_path / 'missing.ply'),
               '--out', str(tmp_path / 'x.model')]) == 4
  assert main(['metrics', 'general', '--model',
               os.path.join(family_dir, 'true.model'),
               '--out', str(tmp_path / 'g')]) == 2

  config = tmp_path / 'config.json'
  config.write_text(json.dumps({'gaussian': {'blend_rule': 'max'}}))
  assert main(['--config', str(config), 'synth', '--count', '2',
               '--out', str(tmp_path / 'f')]) == 2


def test_usage_errors_exit_through_argparse(capsys):
  with pytest.raises(SystemExit):
    main(['metrics', 'nonsense', '--out', 'x'])
  with pytest.raises(SystemExit) as info:
    main(['--version'])
  assert info.value.code == 0
  assert 'headfuse' in capsys.readouterr().out


def test_unexpected_failures_exit_as_internal_errors(family_dir, tmp_path,
                                                     monkeypatch, caplog):
  def broken(*args, **kwargs):
    raise RuntimeError('eigensolver exploded')

  monkeypatch.setattr(headfuse.cli, 'build_pca', broken)
  meshes = sorted(glob.glob(os.path.join(family_dir, 'mesh-*.ply')))
  assert main(['build-pca', *meshes,
               '--out', str(tmp_path / 'x.model')]) == INTERNAL_EXIT_CODE
  errors = [r for r in caplog.records if r.levelname == 'ERROR']
  assert errors and errors[-1].exc_info is not None
  assert 'eigensolver exploded' in str(errors[-1].exc_info[1])


def test_refine_saves_each_reconstruction(family_dir, tmp_path):
  template_lms = load_landmarks(os.path.join(family_dir, 'landmarks.json'))
  scans = []
  for path in sorted(glob.glob(os.path.join(family_dir, 'mesh-*.ply')))[:3]:
    mesh = load_mesh(path)
    scan = str(tmp_path / 'scans' / os.path.basename(path))
    os.makedirs(os.path.dirname(scan), exist_ok=True)
    save_mesh(mesh, scan)
    save_landmarks(LandmarkSet(template_lms.names,
                               mesh.vertices[template_lms.indices]),
                   scan[:-4] + '.json')
    scans.append(scan)
  kernel = str(tmp_path / 'true.kernel')
  BlockKernel.from_model(
      load_model(os.path.join(family_dir, 'true.model'))).save(kernel)
  config = tmp_path / 'config.json'
  config.write_text(json.dumps({'refine': {
      'icp_iters': 1, 'max_points': 150, 'iterations': 1,
      'face_align': False}}))

  out = str(tmp_path / 'refine' / 'refined.model')
  os.makedirs(os.path.dirname(out))
  assert main(['--config', str(config), 'refine', '--kernel', kernel,
               '--scans', *scans, '--landmarks',
               os.path.join(family_dir, 'landmarks.json'),
               '--out', out]) == 0
  assert os.path.exists(out)
  for scan in scans:
    saved = load_mesh(str(tmp_path / 'refine' / os.path.basename(scan)))
    assert saved.same_topology(load_mesh(scan))

  assert main(['--config', str(config), 'refine', '--kernel', kernel,
               '--scans', *scans, '--landmarks',
               os.path.join(family_dir, 'landmarks.json'),
               '--out', str(tmp_path / 'scans' / 'refined.model')]) == 2
