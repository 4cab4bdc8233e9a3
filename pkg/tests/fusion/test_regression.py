import numpy as np
import pytest

from headfuse.errors import NumericalError, ValidationError
from headfuse.fusion.regression import LatentPairSet, LatentRegressor, \
    fit_face_ear_to_head, fit_regressor, generate_pairs, held_out_rms, \
    predict_whole
from headfuse.shape.mesh import IndexCrop
from headfuse.shape.pca import draw_random_instances


def test_solution_satisfies_normal_equations(rng):
  c_f = rng.normal(size=(20, 200))
  c_h = rng.normal(size=(15, 200))
  reg = fit_regressor(LatentPairSet(c_h, c_f))
  assert reg.matrix.shape == (15, 20)
  assert reg.ridge == 0.
  gradient = (reg.matrix @ c_f - c_h) @ c_f.T
  assert np.abs(gradient).max() < 1e-6


def test_exact_linear_map_is_recovered(rng):
  w = rng.normal(size=(6, 4))
  c_f = rng.normal(size=(4, 50))
  reg = fit_regressor(LatentPairSet(w @ c_f, c_f))
  np.testing.assert_allclose(reg.matrix, w, atol=1e-10)
  np.testing.assert_allclose(reg(c_f[:, 0]), w @ c_f[:, 0], atol=1e-10)


def test_rank_deficient_gram(rng):
  c_f = rng.normal(size=(3, 30))
  c_f = np.vstack([c_f, c_f[:1]])
  pairs = LatentPairSet(rng.normal(size=(2, 30)), c_f)
  reg = fit_regressor(pairs)
  assert reg.ridge > 0
  assert np.all(np.isfinite(reg.matrix))
  with pytest.raises(NumericalError, match='rank deficient'):
    fit_regressor(pairs, allow_ridge=False)


def test_pair_shapes_are_checked(rng):
  with pytest.raises(ValidationError):
    fit_regressor(LatentPairSet(np.zeros((2, 5)), np.zeros((3, 4))))
  with pytest.raises(ValidationError):
    fit_regressor(LatentPairSet(np.zeros((2, 0)), np.zeros((3, 0))))


def test_regressor_file(rng, tmp_path):
  reg = LatentRegressor(rng.normal(size=(4, 3)), 'face', 'head', 1e-3)
  path = str(tmp_path / 'face-to-head.reg')
  reg.save(path)
  loaded = LatentRegressor.load(path)
  np.testing.assert_array_equal(loaded.matrix, reg.matrix)
  assert (loaded.source, loaded.target, loaded.ridge) == ('face', 'head',
                                                          1e-3)


def test_synthetic_family_is_reconstructed(head_family):
  whole, part = head_family.model, head_family.part_model
  crop = IndexCrop(head_family.part_indices)
  pairs = generate_pairs(whole, part, crop, count=500, seed=11)
  assert pairs.n_samples == 500 and pairs.skipped == 0
  reg = fit_regressor(pairs, 'face', 'head')

  test = draw_random_instances(whole, 50, seed=99)
  rms = held_out_rms(reg, whole, part, [(crop(m), m) for m in test])
  assert rms < 0.01 * 100.

  predicted = predict_whole(reg, whole, part, crop(test[0]))
  assert predicted.same_topology(test[0])


def test_generate_pairs_is_deterministic(head_family):
  crop = IndexCrop(head_family.part_indices)
  a = generate_pairs(head_family.model, head_family.part_model, crop, 20, 4)
  b = generate_pairs(head_family.model, head_family.part_model, crop, 20, 4)
  np.testing.assert_array_equal(a.c_whole, b.c_whole)
  np.testing.assert_array_equal(a.c_part, b.c_part)


def test_failing_extraction_is_fatal(head_family):
  def broken(mesh):
    raise ValidationError('no part here')

  with pytest.raises(NumericalError, match='failed on 10 of 10'):
    generate_pairs(head_family.model, head_family.part_model, broken, 10, 0)


def test_fit_on_paired_meshes(head_family):
  crop = IndexCrop(head_family.part_indices)
  paired = [(crop(m), m) for m in head_family.meshes]
  reg = fit_face_ear_to_head(head_family.part_model, head_family.model,
                             paired)
  reg.check_models(head_family.model, head_family.part_model)
  with pytest.raises(ValidationError):
    reg.check_models(head_family.model.truncated(2), head_family.part_model)
  with pytest.raises(ValidationError):
    fit_face_ear_to_head(head_family.part_model, head_family.model, [])
