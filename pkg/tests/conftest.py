import numpy as np
import pytest
import scipy.linalg

from headfuse.data.synthetic import SyntheticFamilySpec, icosphere, \
    synth_family
from headfuse.shape.model import ShapeModel


@pytest.fixture
def rng():
  return np.random.default_rng(1234)


@pytest.fixture
def sphere():
  """42-vertex icosphere of radius 10."""
  return icosphere(1, 10.)


def random_model(template, n_components, rng, scale=1.):
  """PCA model on `template` with a random orthonormal basis."""
  q, _ = scipy.linalg.qr(rng.standard_normal((3 * template.n_vertices,
                                              n_components)),
                         mode='economic')
  eigenvalues = scale * 0.5 ** np.arange(n_components)
  return ShapeModel(template.vector, q, eigenvalues, template.triangles,
                    'toy')


@pytest.fixture
def make_model():
  return random_model


@pytest.fixture
def toy_model(sphere, rng):
  return random_model(sphere, 5, rng)


@pytest.fixture(scope='session')
def head_family():
  return synth_family(SyntheticFamilySpec(
      kind='coupled-ellipsoids', count=30, latent_dim=4, subdivisions=2,
      seed=3))
