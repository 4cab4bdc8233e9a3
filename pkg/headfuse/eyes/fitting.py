"""Joint fit of the eye region and the eyeball to 33 eye landmarks (and
optionally the image) under a fixed head camera."""

import logging
import numpy as np
import tensorflow as tf
from dataclasses import dataclass
from matplotlib import image as mpimg
from typing import Dict, List, NamedTuple, Optional

from headfuse.config import EyeConfig
from headfuse.errors import StorageError, ValidationError
from headfuse.eyes import quaternion as Q
from headfuse.eyes.camera import CameraModel, tf_project
from headfuse.eyes.models import N_EYELID, N_IRIS, EyeBallModel, \
    EyeRegionModel
from headfuse.eyes.solver import LeastSquares, block_slices, frozen_blocks, \
    gauss_newton
from headfuse.shape.io import load_json, save_json
from headfuse.utils import Callback, History

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitWeights:
  """Weights of the iris landmark, texture and prior terms; the eyelid
  landmark term has weight one. An infinite prior weight pins its
  parameters to zero (identity for the rotation)."""
  c_l: float = 1.
  c_t: float = 0.1
  c_el: float = 1e-2
  c_eye_l: float = 1e-2
  c_eye_t: float = 1e-2
  c_rot: float = 0.

  def __post_init__(self):
    for name, value in vars(self).items():
      if np.isnan(value) or value < 0:
        raise ValidationError(f'Weight {name} must be nonnegative.')
    for name in ('c_l', 'c_t'):
      if np.isinf(getattr(self, name)):
        raise ValidationError(f'Weight {name} must be finite.')

  @classmethod
  def from_config(cls, config: EyeConfig) -> 'FitWeights':
    return cls(config.c_l, config.c_t, config.c_el, config.c_eye_l,
               config.c_eye_t, config.c_rot)


class EyeState(NamedTuple):
  p_el: np.ndarray
  p_eye: float
  rotation: np.ndarray  # unit quaternion
  texture: np.ndarray


class EyeFit(NamedTuple):
  state: EyeState
  cost: float
  converged: bool
  iterations: int
  residuals: Dict[str, Optional[float]]  # RMS per data term
  history: History

  def to_dict(self):
    return {
        'p_el': self.state.p_el.tolist(),
        'p_eye': float(self.state.p_eye),
        'eye_rotation': self.state.rotation.tolist(),
        'texture': self.state.texture.tolist(),
        'cost': self.cost,
        'converged': self.converged,
        'iterations': self.iterations,
        'residuals': self.residuals,
    }


def tf_bilinear(image: tf.Tensor, uv: tf.Tensor) -> tf.Tensor:
  """Samples an H x W x C image at pixel positions `(u, v) = (column,
  row)`, clamped to the image."""
  image = tf.convert_to_tensor(image)
  uv = tf.cast(uv, image.dtype)
  h, w = image.shape[0], image.shape[1]
  x = tf.clip_by_value(uv[:, 0], 0., w - 1 - 1e-9)
  y = tf.clip_by_value(uv[:, 1], 0., h - 1 - 1e-9)
  x0, y0 = tf.floor(x), tf.floor(y)
  wx, wy = (x - x0)[:, None], (y - y0)[:, None]
  xi, yi = tf.cast(x0, tf.int32), tf.cast(y0, tf.int32)

  def at(dy, dx):
    return tf.gather_nd(image, tf.stack([yi + dy, xi + dx], axis=1))

  return ((1 - wx) * (1 - wy) * at(0, 0) + wx * (1 - wy) * at(0, 1)
          + (1 - wx) * wy * at(1, 0) + wx * wy * at(1, 1))


def load_image(path: str) -> np.ndarray:
  """RGB raster as float64 in [0, 1]."""
  try:
    raster = np.asarray(mpimg.imread(path))
  except (OSError, ValueError) as e:
    raise StorageError(f'Cannot read image {path}: {e}') from e
  if raster.dtype == np.uint8:
    raster = raster / 255.
  raster = raster.astype(np.float64)
  if raster.ndim == 2:
    raster = np.stack([raster] * 3, axis=-1)
  return raster[..., :3]


def load_eye_landmarks(path: str):
  """`{"eyelid": 17 x [u, v], "iris": 16 x [u, v]}`."""
  data = load_json(path)
  try:
    eyelid = np.asarray(data['eyelid'], dtype=np.float64)
    iris = np.asarray(data['iris'], dtype=np.float64)
  except (KeyError, TypeError, ValueError) as e:
    raise ValidationError(f'{path}: malformed eye landmarks: {e}') from e
  check_eye_landmarks(eyelid, iris)
  return eyelid, iris


def save_eye_landmarks(eyelid: np.ndarray, iris: np.ndarray, path: str):
  check_eye_landmarks(eyelid, iris)
  save_json({'eyelid': np.asarray(eyelid).tolist(),
             'iris': np.asarray(iris).tolist()}, path)


def check_eye_landmarks(eyelid: np.ndarray, iris: np.ndarray):
  if np.shape(eyelid) != (N_EYELID, 2) or np.shape(iris) != (N_IRIS, 2):
    raise ValidationError(
        f'Expected {N_EYELID} eyelid and {N_IRIS} iris 2D landmarks, got '
        f'{np.shape(eyelid)} and {np.shape(iris)}.')


class _EyeProblem(LeastSquares):
  """Residuals over the tangent blocks `[p_el, p_eye, omega, lambda]`."""

  def __init__(self, region: EyeRegionModel, eyeball: EyeBallModel,
               camera: CameraModel, eyelid: np.ndarray, iris: np.ndarray,
               image: Optional[np.ndarray], weights: FitWeights,
               state: EyeState):
    self.region = region
    self.eyeball = eyeball
    self.camera = camera
    self.eyelid = eyelid
    self.iris = iris
    self.image = image
    self.weights = weights
    self.state = state
    self.sizes = [region.n_components, 1, 3,
                  eyeball.n_texture_components]

    rows = region.eyelid_rows()
    self._el_mean = tf.constant(region.model.mean[rows].reshape(-1, 3))
    self._el_basis = tf.constant(region.model.basis[rows])
    self._el_scale = tf.constant(region.model.stddevs)
    self._eye_mean = tf.constant(eyeball.mesh.vertices)
    self._eye_blend = tf.constant(eyeball.blendshape.reshape(-1, 3))
    self._tex_mean = tf.constant(eyeball.texture_mean)
    self._tex_basis = tf.constant(eyeball.texture_basis)
    self._tex_scale = tf.constant(np.sqrt(eyeball.texture_eigenvalues))
    self._image = None if image is None else tf.constant(image)
    self._focal = tf.constant(camera.focal, dtype=tf.float64)
    self._translation = tf.constant(camera.translation)
    self._rotation = tf.constant(camera.rotation_matrix)

  @property
  def n_params(self) -> int:
    return int(sum(self.sizes))

  @property
  def uses_texture(self) -> bool:
    return self._image is not None and self.weights.c_t > 0

  def frozen(self) -> np.ndarray:
    w = self.weights
    return frozen_blocks(self.sizes, [
        np.isinf(w.c_el), np.isinf(w.c_eye_l), np.isinf(w.c_rot),
        np.isinf(w.c_eye_t) or not self.uses_texture])

  def _project(self, points: tf.Tensor) -> tf.Tensor:
    return tf_project(self._focal, self._translation, self._rotation,
                      self.camera.principal_point, points)

  def terms(self, delta: tf.Tensor) -> Dict[str, tf.Tensor]:
    s_el, s_eye, s_rot, s_tex = block_slices(self.sizes)
    p_el = tf.constant(self.state.p_el) + delta[s_el]
    p_eye = self.state.p_eye + delta[s_eye][0]
    q = Q.tf_retract(self.state.rotation, delta[s_rot])
    lam = tf.constant(self.state.texture) + delta[s_tex]

    eyelid = self._el_mean + tf.reshape(
        tf.linalg.matvec(self._el_basis, p_el), [-1, 3])
    center = tf.constant(self.eyeball.center)
    eye = self._eye_mean + p_eye * self._eye_blend
    eye = tf.linalg.matmul(eye - center, Q.tf_to_matrix(q),
                           transpose_b=True) + center

    w = self.weights
    terms = {
        'eyelid': tf.reshape(self._project(eyelid) - self.eyelid, [-1]),
    }
    iris = tf.gather(eye, self.eyeball.iris_indices)
    terms['iris'] = np.sqrt(w.c_l) * tf.reshape(
        self._project(iris) - self.iris, [-1])
    if self.uses_texture:
      sampled = tf_bilinear(self._image, self._project(eye))
      model = self._tex_mean + tf.linalg.matvec(self._tex_basis, lam)
      terms['texture'] = np.sqrt(w.c_t) * (tf.reshape(sampled, [-1]) - model)
    for name, weight, value in (
        ('prior_el', w.c_el, p_el / self._el_scale),
        ('prior_eye', w.c_eye_l,
         tf.reshape(p_eye / np.sqrt(self.eyeball.pupil_variance), [1])),
        ('prior_texture', w.c_eye_t, lam / self._tex_scale),
        ('prior_rotation', w.c_rot, 2. * q[1:])):
      if 0 < weight < np.inf:
        terms[name] = np.sqrt(weight) * value
    return terms

  def residuals(self, delta: tf.Tensor) -> tf.Tensor:
    return tf.concat(list(self.terms(delta).values()), axis=0)

  def update(self, delta: np.ndarray) -> '_EyeProblem':
    s_el, s_eye, s_rot, s_tex = block_slices(self.sizes)
    state = EyeState(self.state.p_el + delta[s_el],
                     float(self.state.p_eye + delta[s_eye][0]),
                     Q.retract(self.state.rotation, delta[s_rot]),
                     self.state.texture + delta[s_tex])
    return _EyeProblem(self.region, self.eyeball, self.camera, self.eyelid,
                       self.iris, self.image, self.weights, state)


def initial_state(region: EyeRegionModel, eyeball: EyeBallModel) -> EyeState:
  return EyeState(np.zeros(region.n_components), 0., Q.IDENTITY.copy(),
                  np.zeros(eyeball.n_texture_components))


def _pinned(state: EyeState, weights: FitWeights) -> EyeState:
  """Zeroes the blocks whose prior weight is infinite."""
  return EyeState(
      np.zeros_like(state.p_el) if np.isinf(weights.c_el) else state.p_el,
      0. if np.isinf(weights.c_eye_l) else state.p_eye,
      Q.IDENTITY.copy() if np.isinf(weights.c_rot) else state.rotation,
      np.zeros_like(state.texture) if np.isinf(weights.c_eye_t)
      else state.texture)


def fit_eye(region: EyeRegionModel,
            eyeball: EyeBallModel,
            camera: CameraModel,
            eyelid: np.ndarray,
            iris: np.ndarray,
            image: Optional[np.ndarray] = None,
            weights: FitWeights = FitWeights(),
            max_iters: int = 50,
            tolerance: float = 1e-6,
            initial: Optional[EyeState] = None,
            callbacks: List[Callback] = None) -> EyeFit:
  """Simultaneous Gauss-Newton over the eye-region shape `p_el`, pupil
  dilation `p_eye`, eye rotation and iris texture `lambda`.

  The cost is the eyelid reprojection error of the region model plus the
  weighted iris reprojection error of the posed eyeball, the weighted
  texture error against the bilinearly sampled image (skipped without an
  image) and Mahalanobis priors on every parameter block. The head camera
  is held fixed.

  Raises
  ------
  ValidationError
    Landmark counts differ from 17 eyelid and 16 iris.
  NumericalError
    The cost is not finite or the iterations diverge.
  """
  eyelid = np.asarray(eyelid, dtype=np.float64)
  iris = np.asarray(iris, dtype=np.float64)
  check_eye_landmarks(eyelid, iris)
  if image is not None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
      raise ValidationError(f'Image must be H x W x 3, got {image.shape}.')
  if initial is None:
    initial = initial_state(region, eyeball)
  state = _pinned(initial, weights)

  problem = _EyeProblem(region, eyeball, camera, eyelid, iris, image,
                        weights, state)
  if image is None:
    logger.debug('No image given; the texture term is skipped.')
  result = gauss_newton(problem, max_iters, tolerance, callbacks=callbacks)

  zero = tf.zeros([result.problem.n_params], dtype=tf.float64)
  terms = result.problem.terms(zero)
  residuals = {
      'eyelid': float(np.sqrt(np.mean(terms['eyelid'].numpy() ** 2) * 2)),
      'iris': (float(np.sqrt(np.mean(terms['iris'].numpy() ** 2) * 2
                             / weights.c_l))
               if weights.c_l > 0 else None),
      'texture': (float(np.sqrt(np.mean(terms['texture'].numpy() ** 2)
                                / weights.c_t))
                  if 'texture' in terms else None),
  }
  logger.info(f'Eye fit: cost {result.cost:.6g} after {result.iterations} '
              f'iterations, eyelid RMS {residuals["eyelid"]:.3g} px.')
  return EyeFit(result.problem.state, result.cost, result.converged,
                result.iterations, residuals, result.history)


def save_fit(fit: EyeFit, path: str):
  save_json(fit.to_dict(), path)
