import numpy as np
import pytest

from headfuse.config import RefineConfig
from headfuse.data.synthetic import SyntheticFamilySpec, synth_family
from headfuse.errors import ValidationError
from headfuse.fusion.kernel import BlockKernel
from headfuse.fusion.refine import reconstruct_scan, refine_model
from headfuse.registration.nicp import StiffnessProfile
from headfuse.shape.mesh import LandmarkSet

FAST = RefineConfig(icp_iters=2, max_points=120, iterations=1,
                    face_align=False, landmark_sigma2=0.1, dense_sigma2=0.1)


@pytest.fixture
def scans(head_family):
  lms = head_family.landmarks
  return [(mesh, LandmarkSet(lms.names, mesh.vertices[lms.indices]))
          for mesh in head_family.meshes[:4]]


@pytest.fixture
def kernel(head_family):
  return BlockKernel.from_model(head_family.model)


def rms(a, b):
  return float(np.sqrt(np.mean(np.sum((a.vertices - b.vertices) ** 2, 1))))


def test_reconstruction_approaches_the_scan(kernel, scans, head_family):
  mesh, _ = scans[0]
  recon = reconstruct_scan(kernel, scans[0], head_family.landmarks, FAST)
  assert recon.same_topology(mesh)
  assert rms(recon, mesh) < rms(kernel.template, mesh)


def test_face_alignment_keeps_topology(kernel, scans, head_family):
  config = RefineConfig(icp_iters=1, max_points=120, face_align=True,
                        band_rings=2)
  recon = reconstruct_scan(kernel, scans[1], head_family.landmarks, config,
                           head_family.part_indices,
                           StiffnessProfile(landmark_weight=0.))
  assert recon.same_topology(scans[1][0])


def test_refined_model(kernel, scans, head_family):
  result = refine_model(kernel, scans, head_family.landmarks, FAST)
  assert result.model.n_vertices == kernel.n_points
  assert result.model.name == 'head-refined'
  assert len(result.reconstructions) == 4
  assert result.history.series('reconstructed') == [4]
  assert result.history.series('components')[0] <= 4


def test_refinement_needs_two_scans(kernel, scans, head_family):
  with pytest.raises(ValidationError):
    refine_model(kernel, scans[:1], head_family.landmarks, FAST)


@pytest.fixture(scope='module')
def noisy_family():
  return synth_family(SyntheticFamilySpec(count=50, latent_dim=5, noise=0.1,
                                          subdivisions=2, seed=11))


def test_refinement_recovers_generating_spectrum(noisy_family):
  family = noisy_family
  lms = family.landmarks
  scans = [(mesh, LandmarkSet(lms.names, mesh.vertices[lms.indices]))
           for mesh in family.meshes]
  config = RefineConfig(icp_iters=3, max_points=500, iterations=1,
                        face_align=False, landmark_sigma2=0.01,
                        dense_sigma2=0.01)
  result = refine_model(BlockKernel.from_model(family.model), scans, lms,
                        config)
  assert result.history.series('reconstructed') == [50]
  assert result.history.series('rms')[0] < 0.3
  assert result.model.n_components >= 5
  np.testing.assert_allclose(result.model.eigenvalues[:5],
                             family.model.eigenvalues[:5], rtol=0.15)
