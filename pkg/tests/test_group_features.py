"""Group feature tokens: per-segment means appended after ordinary instances."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_bag
from segmil.bag_model import KIND_GROUP, KIND_ORDINARY, UNSEGMENTED, make_bag
from segmil.group_features import augment_bag, compute_group_features


def bag_of(features, segment_of, areas=None):
    features = np.asarray(features, dtype=np.float32)
    if areas is None:
        areas = {int(s): 1.0 for s in np.unique(segment_of) if s != UNSEGMENTED}
    return make_bag("g", 0, features, segment_of, areas)


class TestComputeGroupFeatures:
    def test_mean_of_two_members(self):
        bag = bag_of([[1, 2], [3, 4]], [1, 1])
        tokens = compute_group_features(bag)
        assert len(tokens) == 1
        assert_array_equal(tokens[0].feature, [2.0, 3.0])
        assert tokens[0].member_count == 2

    def test_single_member_token_equals_instance(self):
        bag = bag_of([[1, 2], [5, 7]], [3, 9])
        tokens = compute_group_features(bag)
        assert [t.segment_id for t in tokens] == [3, 9]
        assert_array_equal(tokens[0].feature, [1.0, 2.0])
        assert_array_equal(tokens[1].feature, [5.0, 7.0])

    def test_all_unsegmented_yields_no_tokens(self):
        bag = bag_of([[1, 2], [3, 4]], [UNSEGMENTED, UNSEGMENTED])
        assert compute_group_features(bag) == []

    def test_tokens_ordered_by_ascending_id(self, gen):
        bag = bag_of(gen.standard_normal((6, 3)), [9, 2, 9, 5, 2, 5])
        ids = [t.segment_id for t in compute_group_features(bag)]
        assert ids == sorted(ids) == [2, 5, 9]

    def test_permutation_within_segment_leaves_mean_unchanged(self, gen):
        for _ in range(50):
            bag = random_bag(gen, d=6)
            perm = gen.permutation(bag.n_instances)
            shuffled = make_bag(
                bag.slide_id,
                bag.label,
                bag.features[perm],
                bag.segment_of[perm],
                bag.segment_areas,
            )
            for a, b in zip(compute_group_features(bag), compute_group_features(shuffled)):
                assert a.segment_id == b.segment_id
                assert_allclose(a.feature, b.feature, atol=1e-12)

    def test_member_counts_cover_all_instances(self, gen):
        for _ in range(50):
            bag = random_bag(gen)
            tokens = compute_group_features(bag)
            unseg = int(np.count_nonzero(bag.segment_of == UNSEGMENTED))
            assert sum(t.member_count for t in tokens) + unseg == bag.n_instances

    def test_constant_features_give_exact_mean(self):
        features = np.full((30, 4), 7.25, dtype=np.float32)
        bag = bag_of(features, [1] * 30)
        assert_array_equal(compute_group_features(bag)[0].feature, np.full(4, 7.25))

    def test_mean_matches_float64_oracle_within_1e6(self, gen):
        # float32 storage, float64 accumulation: the token must sit within
        # 1e-6 of the widened-precision mean even for large noisy groups.
        features = (1000.0 + gen.standard_normal((5000, 3))).astype(np.float32)
        bag = bag_of(features, [1] * 5000)
        oracle = np.asarray(features, dtype=np.float64).mean(axis=0)
        assert np.abs(compute_group_features(bag)[0].feature - oracle).max() < 1e-6


class TestAugmentBag:
    def test_token_order_and_kinds(self, gen):
        bag = bag_of(gen.standard_normal((5, 3)), [1, 0, 1, 0, 1])
        aug = augment_bag(bag)
        assert aug.n_tokens == 7
        assert_array_equal(aug.token_kind, [KIND_ORDINARY] * 5 + [KIND_GROUP] * 2)
        assert [t.segment_id for t in aug.group_tokens] == [0, 1]

    def test_no_segments_appends_nothing(self):
        bag = bag_of([[1, 2]], [UNSEGMENTED])
        aug = augment_bag(bag)
        assert aug.group_tokens == ()
        assert aug.n_tokens == 1
        assert_array_equal(aug.token_features(), bag.features.astype(np.float64))

    def test_double_augment_is_a_type_error(self, gen):
        aug = augment_bag(random_bag(gen))
        with pytest.raises(TypeError, match="already augmented"):
            augment_bag(aug)

    def test_non_bag_input_is_a_type_error(self):
        with pytest.raises(TypeError):
            augment_bag([[1.0, 2.0]])

    def test_token_features_shape_and_dtype(self, gen):
        bag = random_bag(gen, d=5)
        aug = augment_bag(bag)
        features = aug.token_features()
        assert features.dtype == np.float64
        assert features.shape == (aug.n_tokens, 5)
        assert_allclose(features[: bag.n_instances], bag.features, atol=0)

    def test_token_segments_carry_group_ids(self, gen):
        bag = bag_of(gen.standard_normal((4, 2)), [2, UNSEGMENTED, 7, 2])
        aug = augment_bag(bag)
        assert_array_equal(aug.token_segments(), [2, UNSEGMENTED, 7, 2, 2, 7])
