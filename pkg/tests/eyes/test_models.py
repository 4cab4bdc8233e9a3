import numpy as np
import pytest

from headfuse.data.synthetic import SyntheticFamilySpec, eyeball_model, \
    synth_family
from headfuse.errors import StorageError, ValidationError
from headfuse.eyes import quaternion as Q
from headfuse.eyes.models import N_EYELID, EyeBallModel, EyeRegionModel, \
    load_eye_region, load_eyeball, project_eye_texture, save_eye_region, \
    save_eyeball, synth_eye_texture
from headfuse.shape.pca import sample_instance


@pytest.fixture
def eyeball(rng):
  return eyeball_model(rng)


@pytest.fixture(scope='module')
def region():
  family = synth_family(SyntheticFamilySpec(kind='toy-eye-region', count=0,
                                            latent_dim=3, seed=5))
  return EyeRegionModel(family.model)


def test_pupil_blendshape_moves_only_the_pupil_ring(eyeball):
  support = eyeball.pupil_support()
  assert support.sum() == 16
  moved = np.linalg.norm(eyeball.shape(0.5) - eyeball.mesh.vertices, axis=1)
  np.testing.assert_allclose(moved[~support], 0.)
  np.testing.assert_allclose(moved[support], 0.5)


def test_instance_rotates_about_the_center(eyeball):
  rotation = Q.to_matrix(Q.normalize([0.9, 0.1, -0.2, 0.05]))
  posed = eyeball.instance(0., rotation)
  radii = np.linalg.norm(posed.vertices - eyeball.center, axis=1)
  np.testing.assert_allclose(
      radii, np.linalg.norm(eyeball.mesh.vertices - eyeball.center, axis=1))
  np.testing.assert_allclose(eyeball.instance(0.).vertices,
                             eyeball.mesh.vertices)


def test_texture_projection_inverts_synthesis(eyeball):
  lam = np.array([0.05, -0.03, 0.02])
  colors = synth_eye_texture(eyeball, lam)
  assert colors.shape == (eyeball.n_vertices, 3)
  assert colors.min() >= 0. and colors.max() <= 1.
  np.testing.assert_allclose(project_eye_texture(eyeball, colors), lam,
                             atol=1e-12)
  with pytest.raises(ValidationError, match='texture parameters'):
    synth_eye_texture(eyeball, [0.1])


def test_eyeball_file(eyeball, tmp_path):
  path = str(tmp_path / 'eyeball.json')
  save_eyeball(eyeball, path)
  loaded = load_eyeball(path)
  np.testing.assert_allclose(loaded.mesh.vertices, eyeball.mesh.vertices)
  np.testing.assert_allclose(loaded.texture_basis, eyeball.texture_basis)
  np.testing.assert_array_equal(loaded.iris_indices, eyeball.iris_indices)
  np.testing.assert_allclose(loaded.center, eyeball.center)
  assert loaded.lens.n_vertices == eyeball.lens.n_vertices

  with pytest.raises(StorageError, match='Malformed'):
    EyeBallModel.from_dict({'vertices': []})


def test_eyeball_validation(eyeball):
  with pytest.raises(ValidationError, match='iris'):
    EyeBallModel(eyeball.mesh, eyeball.blendshape, [0, 1, 2],
                 eyeball.texture_mean, eyeball.texture_basis,
                 eyeball.texture_eigenvalues)
  with pytest.raises(ValidationError, match='orthonormal'):
    EyeBallModel(eyeball.mesh, eyeball.blendshape, eyeball.iris_indices,
                 eyeball.texture_mean, 2 * eyeball.texture_basis,
                 eyeball.texture_eigenvalues)
  with pytest.raises(ValidationError, match='positive'):
    EyeBallModel(eyeball.mesh, eyeball.blendshape, eyeball.iris_indices,
                 eyeball.texture_mean, eyeball.texture_basis,
                 eyeball.texture_eigenvalues, pupil_variance=0.)


def test_region_eyelid_points(region):
  assert len(region.eyelid_indices) == N_EYELID
  np.testing.assert_allclose(region.eyelid_points(np.zeros(3)),
                             region.model.mean.reshape(-1, 3)[
                                 region.eyelid_indices])
  p = np.array([1., -0.5, 0.2])
  full = sample_instance(region.model, p).vertices
  np.testing.assert_allclose(region.eyelid_points(p),
                             full[region.eyelid_indices], atol=1e-12)


def test_region_needs_eyelid_indices(region, tmp_path):
  path = str(tmp_path / 'region.model')
  save_eye_region(region, path)
  np.testing.assert_array_equal(load_eye_region(path).eyelid_indices,
                                region.eyelid_indices)
  with pytest.raises(ValidationError, match='17 eyelid'):
    EyeRegionModel(region.model, [0, 1])
