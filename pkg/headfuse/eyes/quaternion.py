"""Unit quaternions, scalar-first `(w, x, y, z)`, in numpy and TensorFlow.

Rotations are optimised through a 3-parameter tangent update `omega`,
applied as `q <- normalize(q * (1, omega / 2))` and renormalized after every
step.
"""

import numpy as np
import tensorflow as tf
from scipy.spatial.transform import Rotation

from headfuse.errors import ValidationError

IDENTITY = np.array([1., 0., 0., 0.])


def normalize(q: np.ndarray) -> np.ndarray:
  q = np.asarray(q, dtype=np.float64).reshape(4)
  norm = np.linalg.norm(q)
  if not np.isfinite(norm) or norm == 0:
    raise ValidationError(f'Cannot normalize quaternion {q}.')
  return q / norm


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
  w1, x1, y1, z1 = a
  w2, x2, y2, z2 = b
  return np.array([
      w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
      w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
      w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
      w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
  ])


def to_matrix(q: np.ndarray) -> np.ndarray:
  q = normalize(q)
  return Rotation.from_quat(q[[1, 2, 3, 0]]).as_matrix()


def from_matrix(matrix: np.ndarray) -> np.ndarray:
  q = Rotation.from_matrix(matrix).as_quat()[[3, 0, 1, 2]]
  return q if q[0] >= 0 else -q


def retract(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
  delta = np.concatenate([[1.], 0.5 * np.asarray(omega, dtype=np.float64)])
  return normalize(multiply(normalize(q), delta))


def tf_multiply(a: tf.Tensor, b: tf.Tensor) -> tf.Tensor:
  w1, x1, y1, z1 = tf.unstack(a)
  w2, x2, y2, z2 = tf.unstack(b)
  return tf.stack([
      w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
      w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
      w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
      w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
  ])


def tf_retract(q: np.ndarray, omega: tf.Tensor) -> tf.Tensor:
  delta = tf.concat([tf.ones([1], dtype=tf.float64), 0.5 * omega], axis=0)
  p = tf_multiply(tf.constant(q, dtype=tf.float64), delta)
  return p / tf.norm(p)


def tf_to_matrix(q: tf.Tensor) -> tf.Tensor:
  """Rotation matrix of a unit quaternion."""
  w, x, y, z = tf.unstack(q)
  return tf.stack([
      tf.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z),
                2 * (x * z + w * y)]),
      tf.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z),
                2 * (y * z - w * x)]),
      tf.stack([2 * (x * z - w * y), 2 * (y * z + w * x),
                1 - 2 * (x * x + y * y)]),
  ])
