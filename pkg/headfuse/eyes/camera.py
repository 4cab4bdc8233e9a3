"""Perspective cameras, the head-camera PnP solve and landmark lifting."""

import logging
import numpy as np
import scipy.linalg
import tensorflow as tf
from typing import List, NamedTuple, Sequence

from headfuse.errors import NumericalError, ValidationError
from headfuse.eyes import quaternion as Q
from headfuse.eyes.solver import LeastSquares, gauss_newton
from headfuse.shape.io import load_json, save_json
from headfuse.shape.mesh import LandmarkSet
from headfuse.utils import Callback, History

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
DEGENERACY_RATIO = 1e-6
# Landmarks thinner than this (relative) are initialised as a plane.
PLANAR_RATIO = 1e-3
_CAMERA_KEYS = {'focal', 'translation', 'rotation', 'principal_point',
                'eye_rotation'}


class CameraModel:
  """Head camera `[f, t, q]` plus the eye rotation `q_r`.

  A model-frame point `X` maps to the camera frame as `R(q) X + t` and to
  the image as `u = f x / z + cx`, `v = f y / z + cy`. Both quaternions are
  renormalized on construction."""

  def __init__(self,
               focal: float,
               translation: Sequence[float],
               rotation: Sequence[float] = Q.IDENTITY,
               principal_point: Sequence[float] = (0., 0.),
               eye_rotation: Sequence[float] = Q.IDENTITY):
    focal = float(focal)
    if not np.isfinite(focal) or focal <= 0:
      raise ValidationError(f'Focal length must be positive, got {focal}.')
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    principal_point = np.asarray(principal_point, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(translation)):
      raise ValidationError('Camera translation must be finite.')
    self.focal = focal
    self.translation = translation
    self.rotation = Q.normalize(rotation)
    self.principal_point = principal_point
    self.eye_rotation = Q.normalize(eye_rotation)

  @property
  def rotation_matrix(self) -> np.ndarray:
    return Q.to_matrix(self.rotation)

  @property
  def center(self) -> np.ndarray:
    return -self.rotation_matrix.T @ self.translation

  @property
  def vector(self) -> np.ndarray:
    return np.concatenate([[self.focal], self.translation, self.rotation])

  def transform(self, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ self.rotation_matrix.T + self.translation

  def with_eye_rotation(self, eye_rotation: Sequence[float]) -> 'CameraModel':
    return CameraModel(self.focal, self.translation, self.rotation,
                       self.principal_point, eye_rotation)

  def to_dict(self):
    return {
        'focal': self.focal,
        'translation': self.translation.tolist(),
        'rotation': self.rotation.tolist(),
        'principal_point': self.principal_point.tolist(),
        'eye_rotation': self.eye_rotation.tolist(),
    }

  @classmethod
  def from_dict(cls, data) -> 'CameraModel':
    if not isinstance(data, dict):
      raise ValidationError('Camera must be a JSON object.')
    unknown = set(data) - _CAMERA_KEYS
    if unknown:
      raise ValidationError(f'Unknown camera keys {sorted(unknown)}.')
    try:
      return cls(**data)
    except (TypeError, ValueError) as e:
      raise ValidationError(f'Malformed camera: {e}') from e

  def __repr__(self):
    return (f'CameraModel(focal={self.focal:.6g}, '
            f'translation={self.translation.tolist()})')


def load_camera(path: str) -> CameraModel:
  return CameraModel.from_dict(load_json(path))


def save_camera(camera: CameraModel, path: str):
  save_json(camera.to_dict(), path)


def projection_matrix(camera: CameraModel) -> np.ndarray:
  """The 3 x 4 matrix `K [R | t]`."""
  cx, cy = camera.principal_point
  k = np.array([[camera.focal, 0., cx], [0., camera.focal, cy], [0., 0., 1.]])
  return k @ np.column_stack([camera.rotation_matrix, camera.translation])


def project(camera: CameraModel, points: np.ndarray) -> np.ndarray:
  """Pinhole projection of model-frame points to pixels."""
  cam = camera.transform(points)
  if np.any(cam[:, 2] <= 0):
    raise ValidationError(
        f'{int(np.sum(cam[:, 2] <= 0))} point(s) on or behind the camera '
        f'plane.')
  return camera.focal * cam[:, :2] / cam[:, 2:] + camera.principal_point


def tf_project(focal: tf.Tensor, translation: tf.Tensor, rotation: tf.Tensor,
               principal_point: np.ndarray, points: tf.Tensor) -> tf.Tensor:
  """Differentiable `project`; `rotation` is a 3 x 3 matrix."""
  cam = tf.linalg.matmul(points, rotation, transpose_b=True) + translation
  return focal * cam[:, :2] / cam[:, 2:] + tf.constant(
      principal_point, dtype=tf.float64)


def landmark_depths(camera: CameraModel, points: np.ndarray) -> np.ndarray:
  return camera.transform(points)[:, 2]


def backproject_landmarks(camera: CameraModel,
                          landmarks_2d: LandmarkSet,
                          depths: Sequence[float]) -> LandmarkSet:
  """Lifts each pixel along its camera ray to the given camera-frame depth,
  expressed in the model frame."""
  if landmarks_2d.dim != 2:
    raise ValidationError('Back-projection needs 2D landmarks.')
  depths = np.asarray(depths, dtype=np.float64).reshape(-1)
  if depths.shape != (len(landmarks_2d),):
    raise ValidationError('One depth per landmark is required.')
  if np.any(~np.isfinite(depths)) or np.any(depths <= 0):
    raise ValidationError('Depths must be positive.')
  rays = np.column_stack([
      (landmarks_2d.points - camera.principal_point) / camera.focal,
      np.ones(len(depths))])
  cam = rays * depths[:, None]
  points = (cam - camera.translation) @ camera.rotation_matrix
  return LandmarkSet(landmarks_2d.names, points, landmarks_2d.indices)


def _hartley(points: np.ndarray):
  """Similarity moving `points` to zero mean and mean norm `sqrt(dim)`."""
  dim = points.shape[1]
  centre = points.mean(axis=0)
  spread = np.mean(np.linalg.norm(points - centre, axis=1))
  s = np.sqrt(dim) / spread
  t = np.eye(dim + 1)
  t[:dim, :dim] *= s
  t[:dim, dim] = -s * centre
  return t


def _homogeneous(points: np.ndarray) -> np.ndarray:
  return np.column_stack([points, np.ones(len(points))])


def direct_linear_transform(points: np.ndarray,
                            pixels: np.ndarray) -> np.ndarray:
  """Normalized DLT estimate of the 3 x 4 projection matrix."""
  t3, t2 = _hartley(points), _hartley(pixels)
  x = _homogeneous(points) @ t3.T
  uv = _homogeneous(pixels) @ t2.T
  zeros = np.zeros_like(x)
  rows_u = np.hstack([x, zeros, -uv[:, :1] * x])
  rows_v = np.hstack([zeros, x, -uv[:, 1:2] * x])
  a = np.vstack([rows_u, rows_v])
  _, _, vt = scipy.linalg.svd(a)
  p = vt[-1].reshape(3, 4)
  return np.linalg.solve(t2, p @ t3)


def decompose_projection(p: np.ndarray, points: np.ndarray):
  """Splits `P = lambda K [R | t]` with `K[2, 2] = 1`, positive focal lengths
  and the points in front of the camera."""
  if np.median(_homogeneous(points) @ p[2]) < 0:
    p = -p
  k, r = scipy.linalg.rq(p[:, :3])
  d = np.diag(np.sign(np.diag(k)))
  k, r = k @ d, d @ r
  if np.linalg.det(r) < 0:
    raise NumericalError('Linear camera estimate is a reflection.')
  lam = k[2, 2]
  k = k / lam
  t = np.linalg.solve(k, p[:, 3]) / lam
  return k, r, t


def planar_homography(plane: np.ndarray, pixels: np.ndarray) -> np.ndarray:
  """Normalized DLT estimate of the 3 x 3 homography from 2D plane
  coordinates to pixels."""
  t1, t2 = _hartley(plane), _hartley(pixels)
  x = _homogeneous(plane) @ t1.T
  uv = _homogeneous(pixels) @ t2.T
  zeros = np.zeros_like(x)
  a = np.vstack([np.hstack([x, zeros, -uv[:, :1] * x]),
                 np.hstack([zeros, x, -uv[:, 1:2] * x])])
  _, _, vt = scipy.linalg.svd(a)
  return np.linalg.solve(t2, vt[-1].reshape(3, 3) @ t1)


def planar_pose(points: np.ndarray, pixels: np.ndarray,
                principal_point: Sequence[float]):
  """Focal length, rotation and translation from coplanar landmarks.

  The homography `H ~ K [r1 r2 t]` of the landmark plane, with the
  principal point known, gives `1 / f^2` from `r1 . r2 = 0` and
  `|r1| = |r2|` in the least-squares sense.

  Raises
  ------
  NumericalError
    The plane is parallel to the image, so the focal length is not
    observable.
  """
  centre = points.mean(axis=0)
  _, _, frame = scipy.linalg.svd(points - centre)
  if np.linalg.det(frame) < 0:
    frame[2] = -frame[2]
  plane = (points - centre) @ frame[:2].T
  h = planar_homography(plane, pixels - np.asarray(principal_point))
  a = np.array([h[0, 0] * h[0, 1] + h[1, 0] * h[1, 1],
                h[0, 0] ** 2 + h[1, 0] ** 2 - h[0, 1] ** 2 - h[1, 1] ** 2])
  b = np.array([h[2, 0] * h[2, 1], h[2, 0] ** 2 - h[2, 1] ** 2])
  denom = float(a @ a)
  inverse_f2 = -float(a @ b) / denom if denom > 0 else 0.
  tilt = np.linalg.norm(h[2, :2]) * np.abs(plane).max() / abs(h[2, 2])
  if tilt < DEGENERACY_RATIO or not inverse_f2 > 0:
    raise NumericalError('PnP landmarks are coplanar and parallel to the '
                         'image plane.')
  focal = 1. / np.sqrt(inverse_f2)
  m = h / np.array([[focal], [focal], [1.]])
  m = m / (0.5 * (np.linalg.norm(m[:, 0]) + np.linalg.norm(m[:, 1])))
  if m[2, 2] < 0:
    m = -m
  r = np.column_stack([m[:, 0], m[:, 1], np.cross(m[:, 0], m[:, 1])])
  u, _, wt = scipy.linalg.svd(r)
  rotation = u @ wt @ frame
  return focal, rotation, m[:, 2] - rotation @ centre


def check_configuration(points: np.ndarray) -> bool:
  """Raises NumericalError for collinear 3D points; returns whether the
  points are coplanar."""
  s = scipy.linalg.svdvals(points - points.mean(axis=0))
  if s[0] <= 0 or s[1] <= DEGENERACY_RATIO * s[0]:
    raise NumericalError('PnP landmarks are (nearly) collinear.')
  return bool(s[2] <= PLANAR_RATIO * s[0])


class _Reprojection(LeastSquares):
  """Reprojection residuals over `[f, t, omega]`."""

  def __init__(self, camera: CameraModel, points: np.ndarray,
               pixels: np.ndarray):
    self.camera = camera
    self.points = tf.convert_to_tensor(points, dtype=tf.float64)
    self.pixels = tf.convert_to_tensor(pixels, dtype=tf.float64)

  @property
  def n_params(self) -> int:
    return 7

  def residuals(self, delta: tf.Tensor) -> tf.Tensor:
    c = self.camera
    focal = c.focal + delta[0]
    translation = tf.constant(c.translation) + delta[1:4]
    rotation = Q.tf_to_matrix(Q.tf_retract(c.rotation, delta[4:7]))
    uv = tf_project(focal, translation, rotation, c.principal_point,
                    self.points)
    return tf.reshape(uv - self.pixels, [-1])

  def update(self, delta: np.ndarray) -> '_Reprojection':
    c = self.camera
    camera = CameraModel(c.focal + delta[0], c.translation + delta[1:4],
                         Q.retract(c.rotation, delta[4:7]),
                         c.principal_point, c.eye_rotation)
    return _Reprojection(camera, self.points, self.pixels)


class PnpResult(NamedTuple):
  camera: CameraModel
  rms: float  # reprojection RMS in pixels
  converged: bool
  history: History


def solve_head_pnp(landmarks_2d: LandmarkSet,
                   landmarks_3d: LandmarkSet,
                   principal_point: Sequence[float] = (0., 0.),
                   max_iters: int = 50,
                   tolerance: float = 1e-14,
                   callbacks: List[Callback] = None) -> PnpResult:
  """Head camera from 2D-3D landmark pairs matched by name.

  A Hartley-normalized DLT gives the initial pose and focal length, or a
  plane homography when the landmarks are coplanar; damped Gauss-Newton
  then minimizes the reprojection error with the principal point held
  fixed."""
  if landmarks_2d.dim != 2 or landmarks_3d.dim != 3:
    raise ValidationError('PnP needs 2D image and 3D model landmarks.')
  names = [n for n in landmarks_3d.names if n in landmarks_2d]
  if len(names) < MIN_CORRESPONDENCES:
    raise ValidationError(
        f'PnP needs at least {MIN_CORRESPONDENCES} correspondences, got '
        f'{len(names)}.')
  points = landmarks_3d.ordered(names).points
  pixels = landmarks_2d.ordered(names).points
  if check_configuration(points):
    focal, r, t = planar_pose(points, pixels, principal_point)
  else:
    k, r, t = decompose_projection(direct_linear_transform(points, pixels),
                                   points)
    focal = 0.5 * (k[0, 0] + k[1, 1])
  camera = CameraModel(focal, t, Q.from_matrix(r), principal_point)
  logger.debug(f'DLT initial focal {focal:.6g}.')

  result = gauss_newton(_Reprojection(camera, points, pixels), max_iters,
                        tolerance, callbacks=callbacks)
  rms = float(np.sqrt(result.cost / len(names)))
  logger.info(f'PnP on {len(names)} landmarks: reprojection RMS {rms:.3g} px.')
  return PnpResult(result.problem.camera, rms, result.converged,
                   result.history)
