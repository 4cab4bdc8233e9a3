import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from headfuse.errors import ValidationError
from headfuse.registration.nicp import StiffnessProfile, load_profile, \
    nicp_register, prealign
from headfuse.shape.mesh import LandmarkSet


def test_self_registration_is_exact(sphere):
  result = nicp_register(sphere, sphere, StiffnessProfile())
  assert result.converged
  np.testing.assert_allclose(result.mesh.vertices, sphere.vertices,
                             atol=1e-6)
  np.testing.assert_array_equal(result.mesh.triangles, sphere.triangles)
  assert result.history.series('accepted')[0] == 42


def test_translation_is_recovered(sphere):
  target = sphere.with_vertices(sphere.vertices + [1., 0., 0.])
  result = nicp_register(sphere, target, StiffnessProfile())
  np.testing.assert_allclose(result.mesh.vertices, target.vertices,
                             atol=1e-3)


def test_landmark_prealignment(sphere):
  rotation = Rotation.from_euler('xyz', [20., -35., 60.], degrees=True)
  moved = 1.3 * sphere.vertices @ rotation.as_matrix().T + [5., -2., 9.]
  target = sphere.with_vertices(moved)
  idx = [0, 7, 19, 30]
  names = ['a', 'b', 'c', 'd']
  template_lms = LandmarkSet.from_mesh(sphere, names, idx)
  target_lms = LandmarkSet(names[::-1], moved[idx][::-1])

  aligned = prealign(sphere, target, (template_lms, target_lms))
  np.testing.assert_allclose(aligned.vertices, moved, atol=1e-9)

  result = nicp_register(sphere, target, StiffnessProfile(),
                         landmarks=(template_lms, target_lms))
  np.testing.assert_allclose(result.mesh.vertices, moved, atol=1e-5)
  assert result.history.series('landmark')[-1] < 1e-8


def test_prealign_modes(sphere):
  target = sphere.with_vertices(2. * sphere.vertices + 3.)
  centred = prealign(sphere, target, mode='centroid')
  np.testing.assert_allclose(centred.vertices, target.vertices, atol=1e-9)
  assert prealign(sphere, target, mode='none') is sphere
  with pytest.raises(ValidationError):
    prealign(sphere, target, mode='landmarks')
  with pytest.raises(ValidationError):
    prealign(sphere, target, mode='sideways')


def test_history_follows_stiffness_ladder(sphere, rng):
  target = sphere.with_vertices(sphere.vertices
                                + 0.2 * rng.normal(size=(42, 3)))
  result = nicp_register(sphere, target, StiffnessProfile(),
                         stiffness=(10., 1.), n_steps=3, inner_iters=2,
                         prealign_mode='none')
  alphas = sorted(set(result.history.series('alpha')), reverse=True)
  np.testing.assert_allclose(alphas, [10., np.sqrt(10.), 1.])
  data = result.history.series('data')
  assert data[-1] < data[0]


def test_profile_weights():
  profile = StiffnessProfile(anchor=(0., 0., 0.), weight_at_anchor=4.,
                             length_scale=2.)
  w = profile.weights(np.array([[0., 0., 0.], [2., 0., 0.]]))
  np.testing.assert_allclose(w, [4., 4. * np.exp(-0.5)])
  linear = StiffnessProfile(decay='linear', length_scale=1.)
  np.testing.assert_allclose(
      linear.weights(np.array([[0.5, 0., 0.], [3., 0., 0.]])), [0.5, 1e-3])


def test_energy_never_increases_without_rejection(sphere):
  target = sphere.with_vertices(sphere.vertices * [1.1, 0.95, 1.])
  result = nicp_register(sphere, target, StiffnessProfile(),
                         stiffness=(20., 1.), n_steps=4, inner_iters=4,
                         reject_factor=np.inf, tolerance=0.,
                         prealign_mode='none')
  energy = np.array(result.history.series('energy'))
  alpha = np.array(result.history.series('alpha'))
  assert len(energy) == 16
  assert np.all(np.diff(energy) <= 1e-8 * energy.max())
  for a in np.unique(alpha):
    assert np.all(np.diff(energy[alpha == a]) <= 1e-8 * energy.max())
  assert result.history.series('accepted') == [42] * 16


@pytest.mark.parametrize('decay', ['gaussian', 'linear'])
def test_profile_weights_ignore_rotation_about_anchor(decay, rng):
  anchor = np.array([1., -2., 0.5])
  profile = StiffnessProfile(anchor=tuple(anchor), weight_at_anchor=2.,
                             decay=decay, length_scale=3.)
  points = rng.normal(scale=3., size=(50, 3))
  rotation = Rotation.from_euler('xyz', [33., -71., 124.],
                                degrees=True).as_matrix()
  rotated = (points - anchor) @ rotation.T + anchor
  np.testing.assert_allclose(profile.weights(rotated), profile.weights(points),
                             rtol=1e-12, atol=1e-15)


def test_profile_round_trip_and_validation(tmp_path):
  profile = StiffnessProfile(anchor=(1., 2., 3.), decay='linear',
                             length_scale=40., landmark_weight=2.)
  path = tmp_path / 'profile.json'
  path.write_text(json.dumps(profile.to_dict()))
  assert load_profile(str(path)) == profile
  with pytest.raises(ValidationError, match='Unknown'):
    StiffnessProfile.from_dict({'anchor': [0, 0, 0], 'softness': 1})
  with pytest.raises(ValidationError):
    StiffnessProfile(decay='cubic')
  with pytest.raises(ValidationError):
    StiffnessProfile(weight_at_anchor=0.)
