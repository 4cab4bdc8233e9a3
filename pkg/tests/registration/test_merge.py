import numpy as np
import pytest

from headfuse.data.synthetic import face_indices, icosphere
from headfuse.errors import ValidationError
from headfuse.registration.merge import align_face_region, merge_meshes, \
    ring_distances, seam_gap
from headfuse.registration.nicp import StiffnessProfile
from headfuse.shape.mesh import crop


@pytest.fixture
def head():
  return icosphere(2, 100.)


@pytest.fixture
def face(head):
  return face_indices(head, 40.)


@pytest.fixture
def profile():
  return StiffnessProfile()


def test_ring_distances(head, face):
  dist, sources = ring_distances(head, face)
  assert np.all(dist[face] == 0)
  np.testing.assert_array_equal(sources[face], face)
  outside = np.setdiff1d(np.arange(head.n_vertices), face)
  assert np.all(dist[outside] >= 1)
  assert np.all(np.isin(sources, face))


def test_merge_replaces_region_and_deforms_band(head, face, profile):
  shift = np.array([0., 0., 2.])
  inner = crop(head, face).with_vertices(head.vertices[face] + shift)
  merged = merge_meshes(inner, head, profile, face, band_rings=3)
  hard = merge_meshes(inner, head, profile, face, band_rings=0)
  np.testing.assert_allclose(merged.vertices[face], inner.vertices)

  dist, _ = ring_distances(head, face)
  moved = merged.vertices - head.vertices
  np.testing.assert_array_equal(moved[dist > 3], 0.)
  assert np.all(moved[dist == 1, 2] > 0)
  assert np.mean(moved[dist == 1, 2]) > np.mean(moved[dist == 3, 2])
  assert seam_gap(hard, head) == pytest.approx(2.)
  assert seam_gap(merged, head) < 0.75 * seam_gap(hard, head)


def test_merging_the_region_itself_changes_nothing(head, face, profile):
  merged = merge_meshes(crop(head, face), head, profile, face, band_rings=3)
  np.testing.assert_allclose(merged.vertices, head.vertices, atol=1e-6)


def test_merge_without_band(head, face, profile):
  inner = crop(head, face).with_vertices(head.vertices[face] * 1.01)
  merged = merge_meshes(inner, head, profile, face, band_rings=0)
  outside = np.setdiff1d(np.arange(head.n_vertices), face)
  np.testing.assert_array_equal(merged.vertices[outside],
                                head.vertices[outside])


def test_merge_validates_map(head, face, profile):
  inner = crop(head, face)
  with pytest.raises(ValidationError):
    merge_meshes(inner, head, profile, None)
  with pytest.raises(ValidationError):
    merge_meshes(inner, head, profile, face[:-1])
  with pytest.raises(ValidationError):
    merge_meshes(inner, head, profile, face, band_rings=-1)
  with pytest.raises(ValidationError, match='Pin'):
    merge_meshes(inner, head, profile, face, pin_weight=0.)


def test_align_face_region_is_a_no_op_on_a_perfect_fit(head, face):
  result = align_face_region(head, head, face, StiffnessProfile(),
                             band_rings=2)
  np.testing.assert_allclose(result.vertices, head.vertices, atol=1e-6)
