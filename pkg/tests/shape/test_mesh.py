import numpy as np
import pytest

from headfuse.errors import ValidationError
from headfuse.shape.mesh import IndexCrop, LandmarkSet, TriMesh, axis_index, \
    check_topology, crop


def test_mesh_is_immutable(sphere):
  with pytest.raises(ValueError):
    sphere.vertices[0, 0] = 1.
  assert sphere.vector.shape == (3 * 42,)


def test_mesh_rejects_bad_indices():
  with pytest.raises(ValidationError):
    TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
  with pytest.raises(ValidationError):
    TriMesh(np.zeros((3, 3)), [[1, 1, 1]])
  with pytest.raises(ValidationError):
    TriMesh(np.zeros((3, 2)), [[0, 1, 2]])


def test_colors_are_clipped():
  mesh = TriMesh(np.eye(3), [[0, 1, 2]], colors=[[2., -1., .5]] * 3)
  np.testing.assert_array_equal(mesh.colors[0], [1., 0., .5])
  np.testing.assert_array_equal(mesh.with_vertices(2 * np.eye(3)).colors,
                                [[1., 0., .5]] * 3)


def test_bounding_radius(sphere):
  assert sphere.bounding_radius() == pytest.approx(10.)
  assert sphere.same_topology(sphere.with_vertices(2 * sphere.vertices))


def test_crop_keeps_surviving_triangles(sphere):
  part = crop(sphere, [0, 11, 5, 1])
  assert part.n_vertices == 4
  np.testing.assert_array_equal(part.vertices, sphere.vertices[[0, 11, 5, 1]])
  assert np.all(part.triangles < 4)
  assert IndexCrop([0, 11, 5, 1])(sphere).same_topology(part)


def test_check_topology(sphere):
  check_topology(sphere, 42)
  with pytest.raises(ValidationError, match='Topology mismatch'):
    check_topology(sphere, 41)


def test_landmarks_ordered_and_mirrored(sphere):
  lms = LandmarkSet.from_mesh(sphere, ['a', 'b', 'c'], [3, 1, 2])
  sub = lms.ordered(['c', 'a'])
  np.testing.assert_array_equal(sub.indices, [2, 3])
  np.testing.assert_array_equal(sub['a'], sphere.vertices[3])
  with pytest.raises(ValidationError, match='Missing'):
    lms.ordered(['d'])

  mirrored = lms.mirrored('x')
  np.testing.assert_array_equal(mirrored.points[:, 0], -lms.points[:, 0])
  np.testing.assert_array_equal(mirrored.mirrored(0).points, lms.points)


def test_landmarks_reject_duplicates_and_bad_indices():
  with pytest.raises(ValidationError):
    LandmarkSet(['a', 'a'], np.zeros((2, 3)))
  lms = LandmarkSet(['a'], np.zeros((1, 3)), [7])
  with pytest.raises(ValidationError):
    lms.check_indices(5)
  with pytest.raises(ValidationError):
    LandmarkSet(['a'], np.zeros((1, 3))).check_indices(5)


def test_axis_index():
  assert axis_index('y') == 1
  assert axis_index(2) == 2
  with pytest.raises(ValidationError):
    axis_index('w')
