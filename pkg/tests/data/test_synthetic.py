import numpy as np
import pytest

from headfuse.data.synthetic import KINDS, SyntheticFamilySpec, \
    draw_latents, face_indices, icosphere, smooth_fields, synth_family
from headfuse.errors import ValidationError
from headfuse.shape.mesh import crop
from headfuse.shape.pca import build_pca
from headfuse.shape.surface import boundary_loop


def test_families_are_reproducible():
  spec = SyntheticFamilySpec(kind='bumpy-spheres', count=4, latent_dim=3,
                             subdivisions=1, seed=8, sample_seed=1)
  a, b = synth_family(spec), synth_family(spec)
  for x, y in zip(a.meshes, b.meshes):
    np.testing.assert_array_equal(x.vertices, y.vertices)

  other = synth_family(SyntheticFamilySpec(
      kind='bumpy-spheres', count=4, latent_dim=3, subdivisions=1, seed=8,
      sample_seed=2))
  np.testing.assert_array_equal(a.model.basis, other.model.basis)
  assert not np.allclose(a.latents, other.latents)


def test_moment_matched_latents(rng):
  lam = np.array([4., 1., 0.25])
  z = draw_latents(20, lam, rng)
  np.testing.assert_allclose(z.mean(axis=0), 0., atol=1e-12)
  np.testing.assert_allclose(np.cov(z, rowvar=False), np.diag(lam),
                             atol=1e-12)


def test_pca_of_family_recovers_the_true_model(head_family):
  model = build_pca(head_family.meshes, keep=4)
  np.testing.assert_allclose(model.eigenvalues, head_family.model.eigenvalues,
                             rtol=1e-8)
  np.testing.assert_allclose(np.abs(model.basis.T @ head_family.model.basis),
                             np.eye(4), atol=1e-6)


def test_face_part_follows_the_coupling(head_family):
  part = head_family.part_model
  face = head_family.part_indices
  for mesh, z in zip(head_family.meshes[:3], head_family.latents):
    observed = crop(mesh, face).vector - part.mean
    np.testing.assert_allclose(
        observed, part.basis @ (head_family.coupling @ z), atol=1e-9)
  assert head_family.model.metadata['landmarks']['nose_tip'] >= 0
  assert len(head_family.landmarks) == 11


def test_face_indices_form_a_patch():
  template = icosphere(2, 100.)
  face = face_indices(template, 40.)
  patch = crop(template, face)
  assert 0 < len(face) < template.n_vertices
  assert np.all(template.vertices[face, 2] >= 100. * np.cos(np.radians(40.))
                - 1e-9)
  assert len(boundary_loop(patch)) > 0


def test_toy_ear_base_loop():
  family = synth_family(SyntheticFamilySpec(kind='toy-ear', count=2,
                                            latent_dim=3, seed=2))
  mean = family.model.mean.reshape(-1, 3)
  template = family.meshes[0].with_vertices(mean)
  assert set(boundary_loop(template).tolist()) == set(
      family.extras['base_loop'].tolist())
  radii = np.linalg.norm(mean, axis=1)
  assert np.argmin(radii) == family.extras['canal_vertex']
  assert family.model.name == 'right-ear'


def test_eye_families():
  region = synth_family(SyntheticFamilySpec(kind='toy-eye-region', count=3,
                                            latent_dim=2))
  assert len(region.model.metadata['eyelid_indices']) == 17
  eyes = synth_family(SyntheticFamilySpec(kind='eyeball', count=3))
  eyeball = eyes.extras['eyeball']
  assert len(eyes.meshes) == 3
  assert len(eyeball.iris_indices) == 16
  assert eyeball.pupil_support().sum() == 16


def test_smooth_fields_are_orthonormal(sphere, rng):
  fields = smooth_fields(sphere.vertices, 5, rng, scale=10.)
  np.testing.assert_allclose(fields.T @ fields, np.eye(5), atol=1e-10)
  with pytest.raises(ValidationError, match='independent fields'):
    smooth_fields(sphere.vertices, 40, rng, degree=1, scale=10.)


@pytest.mark.parametrize('kwargs, match', [
    ({'kind': 'torus'}, 'Unknown family'),
    ({'latent_dim': 2, 'eigenvalues': (1.,)}, 'eigenvalue'),
    ({'latent_dim': 2, 'coupling': ((1., 0., 0.),)}, 'columns'),
    ({'noise': -1.}, 'nonnegative'),
])
def test_spec_validation(kwargs, match):
  with pytest.raises(ValidationError, match=match):
    SyntheticFamilySpec(**kwargs)
  assert 'eyeball' in KINDS
