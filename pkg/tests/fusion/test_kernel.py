import logging

import numpy as np
import pytest

from headfuse.data.synthetic import icosphere
from headfuse.errors import NumericalError, StorageError, ValidationError
from headfuse.fusion.base import coordinate_index
from headfuse.fusion.kernel import AnchorSet, BlendWeights, BlockKernel, \
    FactorKernel, KernelRegistrations, ModelCovariance, anchor_points, \
    blend_local_block, blend_weights, blended_matrix, build_universal_kernel, \
    check_psd, face_head_blend_weights, kernel_eigenmodel, kernel_from_model, \
    load_kernel, repair_psd, sample_gpmm
from headfuse.fusion.process import truncate_kernel, variance_count
from headfuse.shape.mesh import crop


@pytest.fixture
def ico():
  return icosphere(0, 10.)


@pytest.fixture
def ico_model(ico, rng, make_model):
  return make_model(ico, 5, rng, scale=4.)


def random_anchors(surface, count, rng):
  triangles = rng.integers(len(surface.triangles), size=count)
  coords = rng.dirichlet(np.ones(3), size=count)
  return AnchorSet(triangles, coords, surface.triangles[triangles])


@pytest.mark.parametrize('rule', ['sum', 'product'])
def test_factor_blend_matches_brute_force(ico, ico_model, rng, rule):
  assert ico.n_vertices == 12
  cov = ModelCovariance(ico_model)
  anchors = random_anchors(ico, 7, rng)
  others = random_anchors(ico, 5, rng)
  dense = blended_matrix(cov, anchors, others, rule=rule)
  assert dense.shape == (21, 15)
  for i, a in enumerate(anchors):
    for j, b in enumerate(others):
      np.testing.assert_allclose(
          dense[3 * i:3 * i + 3, 3 * j:3 * j + 3],
          blend_local_block(a, b, cov, rule), atol=1e-10)


def test_sum_rule_weights_sum_to_three(rng):
  ci = rng.dirichlet(np.ones(3), size=1000)
  cj = rng.dirichlet(np.ones(3), size=1000)
  sums = [blend_weights(a, b, 'sum').sum() for a, b in zip(ci, cj)]
  np.testing.assert_allclose(sums, 3., atol=1e-12)
  products = [blend_weights(a, b, 'product').sum() for a, b in zip(ci, cj)]
  np.testing.assert_allclose(products, 1., atol=1e-12)
  with pytest.raises(ValidationError):
    blend_weights(ci[0], cj[0], 'mean')


def test_product_rule_reproduces_source_at_vertices(ico, ico_model):
  cov = ModelCovariance(ico_model)
  anchors = anchor_points(ico, ico)
  np.testing.assert_allclose(blended_matrix(cov, anchors, rule='product'),
                             cov.dense(), atol=1e-9)


@pytest.mark.parametrize('rho, covered', [(1., 6), (0., 12)])
def test_single_source_kernel_keeps_spectrum(ico, ico_model, rho, covered):
  mask = np.zeros(12, dtype=bool)
  mask[:covered] = True
  weights = BlendWeights(np.full(12, rho), mask, 0, 0., 1.)
  kernel = build_universal_kernel(
      ico_model, ico_model, ico, KernelRegistrations(ico), weights,
      rule='product', psd='check')
  model = kernel_eigenmodel(kernel, 5)
  np.testing.assert_allclose(model.eigenvalues, ico_model.eigenvalues,
                             rtol=1e-6)
  assert kernel.regions[:covered] == ('face',) * covered
  assert kernel.region_indices('head').tolist() == list(range(covered, 12))


def test_face_blocks_blend_and_other_blocks_follow_head(head_family):
  head, face = head_family.model, head_family.part_model
  template = head.template
  mask = np.zeros(template.n_vertices, dtype=bool)
  mask[head_family.part_indices] = True
  weights = face_head_blend_weights(template, mask,
                                    head_family.extras['nose_tip'])
  face_surface = crop(template, head_family.part_indices)
  kernel = build_universal_kernel(head, face, template,
                                  KernelRegistrations(face_surface), weights,
                                  rule='product', psd='ignore')
  w = np.linalg.eigvalsh(kernel.matrix)
  assert w.min() >= -1e-6 * kernel.trace()
  np.testing.assert_allclose(kernel.matrix, kernel.matrix.T, atol=1e-9)

  k_head = blended_matrix(ModelCovariance(head),
                          anchor_points(template, template), rule='product')
  rows = coordinate_index(np.nonzero(mask)[0])
  outside = np.ones(len(k_head), dtype=bool)
  outside[rows] = False
  np.testing.assert_allclose(kernel.matrix[np.ix_(outside, outside)],
                             k_head[np.ix_(outside, outside)], atol=1e-9)
  scale = np.sqrt(np.repeat(weights.rho, 3))[rows]
  np.testing.assert_allclose(kernel.matrix[np.ix_(rows, outside)],
                             scale[:, None] * k_head[np.ix_(rows, outside)],
                             atol=1e-9)

  nose = head_family.extras['nose_tip']
  local = int(np.nonzero(head_family.part_indices == nose)[0][0])
  np.testing.assert_allclose(kernel.block(nose, nose),
                             ModelCovariance(face).block(local, local),
                             atol=1e-9)


def test_missing_face_registration(ico, ico_model):
  weights = face_head_blend_weights(ico, np.ones(12, dtype=bool), 0)
  with pytest.raises(ValidationError, match='face surface'):
    build_universal_kernel(ico_model, ico_model, ico,
                           KernelRegistrations(None), weights)


def test_blend_weights_ramp(head_family):
  template = head_family.model.template
  mask = np.zeros(template.n_vertices, dtype=bool)
  mask[head_family.part_indices] = True
  nose = head_family.extras['nose_tip']
  weights = face_head_blend_weights(template, mask, nose)
  assert weights.rho[nose] == 0.
  assert weights.rho[mask].max() == pytest.approx(1.)
  assert np.mean(weights.rho[~mask] == 1.) > 0.5
  assert np.all((weights.rho >= 0) & (weights.rho <= 1))
  with pytest.raises(ValidationError):
    face_head_blend_weights(template, ~mask, nose)


def test_repair_psd():
  psd = np.diag([3., 2., 1.])
  np.testing.assert_array_equal(repair_psd(psd), psd)
  for negative in (-1e-7, -1e-6):
    repaired = repair_psd(np.diag([3., 2., negative]))
    assert np.linalg.eigvalsh(repaired).min() >= 0.
    assert repaired[2, 2] == 0.
  with pytest.raises(NumericalError, match='indefinite'):
    repair_psd(np.diag([1., -1.]))
  with pytest.raises(NumericalError):
    check_psd(np.diag([1., -1.]))


def test_block_kernel_file(ico, ico_model, tmp_path):
  regions = ['face'] * 4 + ['head'] * 6 + ['left-ear', 'right-ear']
  kernel = BlockKernel.from_model(ico_model, regions)
  path = str(tmp_path / 'toy.kernel')
  kernel.save(path)
  loaded = BlockKernel.load(path)
  np.testing.assert_allclose(loaded.matrix, kernel.matrix, atol=1e-12)
  assert loaded.regions == kernel.regions
  assert loaded.name == 'toy'
  np.testing.assert_array_equal(loaded.template.vertices,
                                ico_model.template.vertices)
  with pytest.raises(ValidationError, match='region'):
    BlockKernel(ico, kernel.matrix, ['nose'] * 12)
  with pytest.raises(ValidationError):
    BlockKernel(ico, kernel.matrix[:-3, :-3])


def test_eigenmodel_and_sampling(ico_model, caplog):
  kernel = BlockKernel.from_model(ico_model)
  with caplog.at_level(logging.WARNING):
    model = kernel_eigenmodel(kernel, 10)
  assert model.n_components == 5
  assert 'supports 5' in caplog.text
  np.testing.assert_allclose(model.eigenvalues, ico_model.eigenvalues,
                             rtol=1e-8)
  mean = sample_gpmm(model, alpha=np.zeros(5))
  np.testing.assert_allclose(mean.vertices, ico_model.template.vertices)
  a = sample_gpmm(model, seed=3)
  b = sample_gpmm(model, seed=3)
  np.testing.assert_array_equal(a.vertices, b.vertices)
  with pytest.raises(ValidationError):
    kernel_eigenmodel(kernel, 0)


def test_sum_rule_can_be_indefinite(ico, ico_model, rng):
  cov = ModelCovariance(ico_model)
  anchors = random_anchors(ico, 7, rng)
  summed = blended_matrix(cov, anchors, rule='sum')
  assert np.linalg.eigvalsh(summed).min() < -1e-6 * np.trace(summed)
  with pytest.raises(NumericalError):
    check_psd(summed)
  check_psd(blended_matrix(cov, anchors, rule='product'))


def _face_head_weights(head_family):
  template = head_family.model.template
  mask = np.zeros(template.n_vertices, dtype=bool)
  mask[head_family.part_indices] = True
  return face_head_blend_weights(template, mask,
                                 head_family.extras['nose_tip'])


def test_large_kernels_stay_factored(head_family):
  head, face = head_family.model, head_family.part_model
  template = head.template
  registrations = KernelRegistrations(crop(template, head_family.part_indices))
  weights = _face_head_weights(head_family)
  dense = build_universal_kernel(head, face, template, registrations, weights,
                                 psd='ignore')
  factored = build_universal_kernel(head, face, template, registrations,
                                    weights, dense_limit=0)
  assert isinstance(dense, BlockKernel)
  assert isinstance(factored, FactorKernel)
  assert factored.regions == dense.regions
  np.testing.assert_allclose(factored.dense(), dense.matrix, atol=1e-8)
  assert factored.trace() == pytest.approx(dense.trace())

  a = kernel_eigenmodel(dense, 6)
  b = kernel_eigenmodel(factored, 6)
  np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, rtol=1e-6)
  assert variance_count(factored, 0.9) == variance_count(dense, 0.9)
  np.testing.assert_allclose(truncate_kernel(factored, 3).dense(),
                             truncate_kernel(dense, 3).matrix, atol=1e-8)


def test_sum_rule_kernels_are_dense(ico, ico_model, caplog):
  weights = face_head_blend_weights(ico, np.ones(12, dtype=bool), 0)
  with caplog.at_level(logging.WARNING):
    kernel = build_universal_kernel(ico_model, ico_model, ico,
                                    KernelRegistrations(ico), weights,
                                    rule='sum', psd='ignore', dense_limit=0)
  assert isinstance(kernel, BlockKernel)
  assert 'dense' in caplog.text


def test_factor_kernel_file(ico, ico_model, tmp_path):
  regions = ['face'] * 4 + ['head'] * 8
  kernel = kernel_from_model(ico_model, regions, dense_limit=0)
  assert isinstance(kernel, FactorKernel)
  assert kernel.rank == 5
  np.testing.assert_allclose(kernel.block(2, 7),
                             ModelCovariance(ico_model).block(2, 7))
  path = str(tmp_path / 'toy.kernel')
  kernel.save(path)
  loaded = load_kernel(path)
  assert isinstance(loaded, FactorKernel)
  np.testing.assert_array_equal(loaded.factor, kernel.factor)
  assert loaded.regions == kernel.regions
  with pytest.raises(StorageError, match='FactorKernel'):
    BlockKernel.load(path)
  with pytest.raises(ValidationError):
    FactorKernel(ico, kernel.factor[:-3])
  assert isinstance(kernel_from_model(ico_model), BlockKernel)


def test_truncated_kernel_file_is_rejected(ico_model, tmp_path):
  path = str(tmp_path / 'toy.kernel')
  BlockKernel.from_model(ico_model).save(path)
  with open(path, 'rb') as f:
    raw = f.read()
  with open(path, 'wb') as f:
    f.write(raw[:-8])
  with pytest.raises(StorageError, match='size'):
    load_kernel(path)
