import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodguard._utils import nearest_rank
from oodguard.archive import ActivationArchive
from oodguard.exceptions import DataError, LayerMismatch
from oodguard.gram import GramDetector, deviation, gram_matrix


def loop_gram(f, p):
    c, s = f.shape
    out = []
    for i in range(c):
        for j in range(i, c):
            total = 0.0
            for k in range(s):
                total += f[i, k] ** p * f[j, k] ** p
            out.append(math.copysign(abs(total) ** (1.0 / p), total))
    return np.array(out)


def test_order_one_orthonormal_rows():
    assert gram_matrix(np.eye(2), 1).tolist() == [1.0, 0.0, 1.0]


def test_order_two_hand_arithmetic():
    assert gram_matrix(np.array([[1.0, 2.0]]), 2)[0] == pytest.approx(math.sqrt(17), rel=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_matches_triple_loop(rng, p):
    for _ in range(10):
        f = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 6))))
        np.testing.assert_allclose(gram_matrix(f, p), loop_gram(f, p), rtol=1e-9, atol=1e-12)


def test_order_one_is_outer_product(rng):
    f = rng.normal(size=(4, 7))
    full = f @ f.T
    np.testing.assert_allclose(gram_matrix(f, 1), full[np.triu_indices(4)], atol=1e-12)


def test_empty_spatial_axis_gives_zeros():
    assert np.all(gram_matrix(np.zeros((3, 0)), 2) == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_invariant_to_spatial_permutation(seed, p):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(3, 6))
    np.testing.assert_allclose(gram_matrix(f[:, rng.permutation(6)], p), gram_matrix(f, p), rtol=1e-12, atol=1e-12)


def test_deviation_examples():
    assert deviation(0.5, 0.0, 1.0) == 0.0
    assert deviation(2.0, 0.0, 1.0, 1e-300) == pytest.approx(1.0)
    assert deviation(-3.0, -1.0, 5.0) == pytest.approx(2.0)
    # zero-valued bound survives via the guard
    assert np.isfinite(deviation(1.0, 0.0, 0.0, 1e-12))
    # never-predicted class: every element counts once
    assert deviation(1.0, np.inf, -np.inf) == 1.0


def dense_archive(feats, logits):
    return ActivationArchive(layers=[("d", np.asarray(feats, float))], logits=np.asarray(logits, float))


def test_identical_samples_degenerate_profile():
    feats = np.tile([[1.0, 2.0, 0.5]], (20, 1))
    logits = np.tile([[1.0, 0.0]], (20, 1))
    det = GramDetector(orders=(1, 2)).fit(dense_archive(feats, logits))
    lo, hi = det.mins_[0][0], det.maxs_[0][0]
    assert np.array_equal(lo, hi)
    assert det.expected_deviation_.tolist() == [det.epsilon_div]
    assert det.threshold_ == 0.0
    assert det.total_deviation(dense_archive(feats[:1], logits[:1])).tolist() == [0.0]


def test_threshold_is_nearest_rank_of_normalization_partition(rng):
    feats = rng.normal(size=(500, 3))
    logits = rng.normal(size=(500, 2))
    det = GramDetector(holdout_fraction=0.2).fit(dense_archive(feats, logits))
    norm = np.sort(det.norm_total_deviation_)
    assert len(norm) == 100
    assert det.threshold_ == norm[94]


def test_nearest_rank_sort_oracle(rng):
    values = rng.permutation(np.linspace(-3, 7, 100))
    assert nearest_rank(values, 95) == np.sort(values)[94]
    assert nearest_rank(values, 5) == np.sort(values)[4]
    assert nearest_rank([2.0], 95) == 2.0


def test_bounds_use_predicted_class_and_cross_class_deviates(rng):
    logits = np.repeat([[5.0, 0.0], [0.0, 5.0]], 100, axis=0)
    feats = np.where(logits[:, :1] > 0, 1.0, 10.0) + 0.1 * rng.normal(size=(200, 2))
    det = GramDetector(orders=(1, 2)).fit(dense_archive(feats, logits))
    assert not np.allclose(det.mins_[0][0], det.mins_[0][1])
    sample_of_class1 = feats[150:151]
    as_class0 = dense_archive(sample_of_class1, [[5.0, 0.0]])
    assert det.layer_deviations(as_class0)[0, 0] > 0


def test_bounds_partition_samples_have_zero_deviation(blob_task):
    det = GramDetector().fit(blob_task["train"])
    bounds = blob_task["train"].subset(det.bounds_index_)
    assert np.all(det.total_deviation(bounds) == 0)
    assert np.all(det.score_samples(bounds) == 0)


def test_scores_nonpositive_and_far_ood_flagged(blob_task):
    det = GramDetector().fit(blob_task["train"])
    for name in ("test", "far", "near"):
        assert np.all(det.score_samples(blob_task[name]) <= 0)
    far_dev = det.total_deviation(blob_task["far"])
    assert np.mean(det.is_ood(far_dev)) >= 0.95


def test_normalization_rescore_flags_at_most_five_percent(blob_task):
    det = GramDetector().fit(blob_task["train"])
    norm = blob_task["train"].subset(det.normalization_index_)
    flagged = int(np.sum(det.predict(norm) == -1))
    assert flagged <= math.ceil(0.05 * norm.n_samples) + 1


def test_uniform_expected_deviation_scaling_preserves_ranking(blob_task):
    det = GramDetector().fit(blob_task["train"])
    before = det.total_deviation(blob_task["near"])
    det.expected_deviation_ = det.expected_deviation_ * 2
    after = det.total_deviation(blob_task["near"])
    np.testing.assert_allclose(after, before / 2, rtol=1e-12)
    assert np.array_equal(np.argsort(after, kind="stable"), np.argsort(before, kind="stable"))


def test_is_ood_strict_boundary():
    det = GramDetector()
    det.threshold_ = 1.5
    assert det.is_ood(1.5).item() is False
    assert det.is_ood(0.0).item() is False
    assert det.is_ood(1.6).item() is True


def test_empty_predicted_class_is_recorded(rng):
    feats = rng.normal(size=(40, 2))
    logits = np.tile([[1.0, 0.0, 0.0]], (40, 1))
    det = GramDetector().fit(dense_archive(feats, logits))
    assert det.empty_classes_ == [1, 2]
    dev = det.layer_deviations(dense_archive(feats[:1], [[0.0, 1.0, 0.0]]))
    # one unit of deviation per element and order
    assert dev[0, 0] == 3 * len(det.orders_)


def test_conv_feature_maps(rng):
    feats = np.abs(rng.normal(size=(30, 3, 2, 2)))
    det = GramDetector(orders=(1, 3)).fit(dense_archive(feats, rng.normal(size=(30, 2))))
    assert det.mins_[0].shape == (2, 2, 6)


def test_invalid_parameters(blob_task):
    with pytest.raises(DataError):
        GramDetector(holdout_fraction=0.7).fit(blob_task["train"])
    with pytest.raises(DataError):
        GramDetector(orders=(0,)).fit(blob_task["train"])


def test_layer_mismatch(blob_task):
    det = GramDetector().fit(blob_task["train"])
    with pytest.raises(LayerMismatch):
        det.score_samples(dense_archive(np.zeros((2, 2)), np.zeros((2, 4))))


def test_persistence_is_bitwise(tmp_path, blob_task):
    det = GramDetector(orders=(1, 2, 3)).fit(blob_task["train"])
    det.save(tmp_path / "g")
    assert (tmp_path / "g" / "mins_c0_l1_p3.npy").exists()
    back = GramDetector.load(tmp_path / "g")
    assert back.get_params() == det.get_params() | {"orders": (1, 2, 3)}
    for name in ("test", "near"):
        assert det.score_samples(blob_task[name]).tobytes() == back.score_samples(blob_task[name]).tobytes()
