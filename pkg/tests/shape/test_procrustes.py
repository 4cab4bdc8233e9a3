import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from headfuse.errors import NumericalError, ValidationError
from headfuse.shape.procrustes import SimilarityTransform, gpa_align, \
    similarity_procrustes


def random_similarity(rng):
  rotation = Rotation.random(random_state=int(rng.integers(1 << 30)))
  return SimilarityTransform(rotation.as_matrix(),
                             float(rng.uniform(0.5, 2.)),
                             rng.normal(size=3) * 20.)


def test_recovers_similarity(sphere, rng):
  truth = random_similarity(rng)
  target = truth.apply(sphere.vertices)
  fit = similarity_procrustes(sphere.vertices, target)
  np.testing.assert_allclose(fit.rotation, truth.rotation, atol=1e-10)
  assert fit.scale == pytest.approx(truth.scale, rel=1e-10)
  np.testing.assert_allclose(fit.translation, truth.translation, atol=1e-9)


def test_rigid_fit_keeps_unit_scale(sphere, rng):
  target = random_similarity(rng).apply(sphere.vertices)
  fit = similarity_procrustes(sphere.vertices, target, scale=False)
  assert fit.scale == 1.
  assert np.linalg.det(fit.rotation) == pytest.approx(1.)


def test_never_reflects(sphere):
  mirrored = sphere.vertices * [-1., 1., 1.]
  fit = similarity_procrustes(sphere.vertices, mirrored)
  assert np.linalg.det(fit.rotation) == pytest.approx(1.)


def test_inverse(rng):
  t = random_similarity(rng)
  x = rng.normal(size=(10, 3))
  np.testing.assert_allclose(t.inverse().apply(t.apply(x)), x, atol=1e-10)


def test_bad_inputs():
  with pytest.raises(ValidationError):
    similarity_procrustes(np.zeros((2, 3)), np.zeros((2, 3)))
  with pytest.raises(NumericalError):
    similarity_procrustes(np.ones((4, 3)), np.zeros((4, 3)))


def test_gpa_removes_similarities(sphere, rng):
  base = sphere.with_vertices(sphere.vertices + rng.normal(size=(42, 3)))
  copies = [base.with_vertices(random_similarity(rng).apply(base.vertices))
            for _ in range(4)]
  aligned, mean = gpa_align(copies)
  for mesh in aligned[1:]:
    np.testing.assert_allclose(mesh.vertices, aligned[0].vertices,
                               atol=1e-8)
  np.testing.assert_allclose(mean.vertices, aligned[0].vertices, atol=1e-8)


def test_gpa_is_idempotent(sphere, rng):
  meshes = [sphere.with_vertices(
      random_similarity(rng).apply(sphere.vertices
                                   + rng.normal(size=(42, 3))))
            for _ in range(5)]
  aligned, _ = gpa_align(meshes)
  again, _ = gpa_align(aligned)
  for a, b in zip(aligned, again):
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-6)


def test_gpa_needs_two_meshes(sphere):
  with pytest.raises(ValidationError):
    gpa_align([sphere])
