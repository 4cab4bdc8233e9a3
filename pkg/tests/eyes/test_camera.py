import numpy as np
import pytest

from headfuse.errors import NumericalError, ValidationError
from headfuse.eyes import quaternion as Q
from headfuse.eyes.camera import CameraModel, backproject_landmarks, \
    landmark_depths, load_camera, project, projection_matrix, save_camera, \
    solve_head_pnp
from headfuse.shape.mesh import LandmarkSet


@pytest.fixture
def camera():
  return CameraModel(1200., [5., -3., 400.],
                     Q.normalize([0.2, 0.1, 0.97, -0.05]),
                     principal_point=(320., 240.))


@pytest.fixture
def head_points(rng):
  return rng.uniform(-60., 60., size=(12, 3))


def landmark_pair(camera, points):
  names = [f'lm{i}' for i in range(len(points))]
  return (LandmarkSet(names, project(camera, points)),
          LandmarkSet(names, points))


def test_projection_matrix_agrees_with_project(camera, head_points):
  p = projection_matrix(camera)
  homogeneous = np.column_stack([head_points, np.ones(12)]) @ p.T
  np.testing.assert_allclose(homogeneous[:, :2] / homogeneous[:, 2:],
                             project(camera, head_points), atol=1e-9)


def test_pnp_recovers_camera(camera, head_points):
  lms_2d, lms_3d = landmark_pair(camera, head_points)
  result = solve_head_pnp(lms_2d, lms_3d, principal_point=(320., 240.))
  assert result.rms < 1e-4
  assert result.camera.focal == pytest.approx(1200., rel=1e-4)
  np.testing.assert_allclose(result.camera.rotation_matrix,
                             camera.rotation_matrix, atol=1e-5)


def test_pnp_recovers_camera_from_planar_landmarks(camera, rng):
  xy = rng.uniform(-50., 50., size=(8, 2))
  planar = np.column_stack([xy, 0.6 * xy[:, 0] + 0.3 * xy[:, 1]])
  lms_2d, lms_3d = landmark_pair(camera, planar)
  result = solve_head_pnp(lms_2d, lms_3d, principal_point=(320., 240.))
  assert result.rms < 1e-4
  assert result.camera.focal == pytest.approx(1200., rel=1e-4)
  np.testing.assert_allclose(result.camera.rotation_matrix,
                             camera.rotation_matrix, atol=1e-5)
  np.testing.assert_allclose(result.camera.translation, camera.translation,
                             rtol=1e-4)


def test_pnp_degenerate_configurations(camera, rng):
  axes = camera.rotation_matrix
  xy = rng.uniform(-50., 50., size=(8, 2))
  facing = xy[:, :1] * axes[0] + xy[:, 1:] * axes[1]
  with pytest.raises(NumericalError, match='parallel'):
    solve_head_pnp(*landmark_pair(camera, facing),
                   principal_point=(320., 240.))
  line = np.outer(np.linspace(-1, 1, 8), [30., 10., 5.])
  with pytest.raises(NumericalError, match='collinear'):
    solve_head_pnp(*landmark_pair(camera, line))


def test_pnp_needs_six_landmarks(camera, head_points):
  lms_2d, lms_3d = landmark_pair(camera, head_points[:5])
  with pytest.raises(ValidationError, match='at least 6'):
    solve_head_pnp(lms_2d, lms_3d)


def test_backprojection_inverts_projection(camera, head_points):
  lms_2d, _ = landmark_pair(camera, head_points)
  lifted = backproject_landmarks(camera, lms_2d,
                                 landmark_depths(camera, head_points))
  np.testing.assert_allclose(lifted.points, head_points, atol=1e-9)
  with pytest.raises(ValidationError):
    backproject_landmarks(camera, lms_2d, -np.ones(12))


def test_points_behind_the_camera(camera):
  with pytest.raises(ValidationError, match='behind'):
    project(camera, camera.center[None] - 10. * camera.rotation_matrix[2])


def test_camera_file(camera, tmp_path):
  path = str(tmp_path / 'camera.json')
  save_camera(camera.with_eye_rotation(Q.retract(Q.IDENTITY, [0., .1, 0.])),
              path)
  loaded = load_camera(path)
  assert loaded.focal == camera.focal
  np.testing.assert_allclose(loaded.rotation, camera.rotation)
  assert loaded.eye_rotation[2] > 0
  with pytest.raises(ValidationError, match='Unknown'):
    CameraModel.from_dict({'focal': 1., 'translation': [0, 0, 1], 'k1': 0})
  with pytest.raises(ValidationError):
    CameraModel(-1., [0., 0., 1.])
