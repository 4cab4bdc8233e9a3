import logging

import numpy as np
import pytest

from headfuse.errors import NumericalError, ValidationError
from headfuse.shape.pca import build_pca, data_matrix, draw_random_instances, \
    draw_random_latents, pca_from_matrix, project_instance, reconstruct, \
    sample_instance


@pytest.fixture
def samples(toy_model):
  return draw_random_instances(toy_model, 40, seed=5)


def test_pca_basics(samples):
  model = build_pca(samples, keep=5, name='fit')
  data = data_matrix(samples)
  np.testing.assert_allclose(model.mean, data.mean(axis=0), atol=1e-12)
  np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(5),
                             atol=1e-10)
  latents = (data - model.mean) @ model.basis
  np.testing.assert_allclose(model.eigenvalues,
                             latents.var(axis=0, ddof=1), rtol=1e-9)
  assert np.all(np.diff(model.eigenvalues) <= 0)
  assert model.metadata['achieved_rank'] == 5


def test_pca_recovers_generating_subspace(toy_model, samples):
  model = build_pca(samples, keep=5)
  overlap = model.basis.T @ toy_model.basis
  np.testing.assert_allclose(singular_values(overlap), np.ones(5),
                             atol=1e-8)


def singular_values(m):
  return np.linalg.svd(m, compute_uv=False)


def test_training_meshes_reconstruct_exactly(samples):
  model = build_pca(samples, keep=1.)
  for mesh in samples[:5]:
    np.testing.assert_allclose(reconstruct(model, mesh).vertices,
                               mesh.vertices, atol=1e-9)


def test_sign_convention(samples):
  model = build_pca(samples, keep=5)
  rows = np.argmax(np.abs(model.basis), axis=0)
  assert np.all(model.basis[rows, np.arange(5)] > 0)


def test_variance_fraction(samples):
  full = build_pca(samples, keep=5)
  ratio = np.cumsum(full.eigenvalues) / full.eigenvalues.sum()
  model = build_pca(samples, keep=0.9)
  assert model.n_components == int(np.searchsorted(ratio, 0.9) + 1)
  assert ratio[model.n_components - 1] >= 0.9 - 1e-12


def test_keep_is_clamped_to_rank(samples, caplog):
  with caplog.at_level(logging.WARNING):
    model = build_pca(samples, keep=20)
  assert model.n_components == 5
  assert 'rank 5' in caplog.text


def test_invalid_inputs(sphere, samples):
  with pytest.raises(ValidationError):
    build_pca(samples[:1])
  with pytest.raises(NumericalError):
    build_pca([sphere, sphere, sphere])
  with pytest.raises(ValidationError):
    build_pca(samples, keep=1.5)
  with pytest.raises(ValidationError):
    pca_from_matrix(np.zeros((1, 6)), np.zeros((0, 3)))


def test_sampling_and_projection(toy_model):
  p = np.array([1., -2., .5, 0., 3.])
  mesh = sample_instance(toy_model, p)
  np.testing.assert_allclose(project_instance(toy_model, mesh), p,
                             atol=1e-10)
  with pytest.raises(ValidationError):
    sample_instance(toy_model, p[:3])


def test_random_latents_are_seeded(toy_model):
  a = draw_random_latents(toy_model, 10, seed=3)
  b = draw_random_latents(toy_model, 10, seed=3)
  np.testing.assert_array_equal(a, b)
  assert a.shape == (10, 5)
  assert not np.array_equal(a, draw_random_latents(toy_model, 10, seed=4))
