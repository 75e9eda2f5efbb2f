"""Area-guided and random masking plans over bag tokens."""

from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import random_bag
from segmil.bag_model import KIND_GROUP, KIND_ORDINARY, UNSEGMENTED, make_bag
from segmil.group_features import augment_bag
from segmil.masking import (
    ADJUSTED_SIGMOID,
    CONSTANT,
    FULL_RANDOM,
    LINEAR,
    NONGROUP_RANDOM,
    SG2M,
    MaskPlan,
    RatioFunction,
    apply_mask,
    full_view,
    group_mask_ratio,
    plan_full_random,
    plan_nongroup_random,
    plan_sg2m,
    ratio,
)

SIGMOID = RatioFunction(kind=ADJUSTED_SIGMOID, a=10.0, b=-5.0)


def two_group_bag(n_a=100, n_b=10, area_a=0.9, area_b=0.1, d=4, slide_id="wk"):
    """The canonical dominant-vs-rare pair: group 1 huge, group 2 tiny."""
    n = n_a + n_b
    gen = np.random.default_rng(0)
    segment_of = np.array([1] * n_a + [2] * n_b)
    return make_bag(
        slide_id,
        1,
        gen.standard_normal((n, d)).astype(np.float32),
        segment_of,
        {1: area_a, 2: area_b},
    )


class TestRatioFunction:
    def test_sigmoid_midpoint_is_half(self):
        assert ratio(SIGMOID, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_sigmoid_extremes(self):
        assert ratio(SIGMOID, 1.0) == pytest.approx(0.993307, abs=1e-6)
        assert ratio(SIGMOID, 0.0) == pytest.approx(0.006693, abs=1e-6)

    def test_constant_kind_ignores_area(self):
        fn = RatioFunction(kind=CONSTANT)
        assert ratio(fn, 0.0) == ratio(fn, 0.37) == ratio(fn, 1.0) == 1.0

    def test_linear_kind_is_identity_with_clamp(self):
        fn = RatioFunction(kind=LINEAR)
        assert ratio(fn, 0.25) == 0.25
        assert ratio(fn, 1.5) == 1.0
        assert ratio(fn, -0.5) == 0.0

    def test_sigmoid_strictly_increasing(self, gen):
        pairs = gen.random((500, 2))
        for lo, hi in np.sort(pairs, axis=1):
            if lo < hi:
                assert ratio(SIGMOID, lo) < ratio(SIGMOID, hi)

    def test_dict_round_trip(self):
        fn = RatioFunction(kind=ADJUSTED_SIGMOID, a=3.0, b=-1.5)
        assert RatioFunction.from_dict(fn.to_dict()) == fn

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            RatioFunction(kind="parabola")

    def test_nonfinite_coefficients_rejected(self):
        with pytest.raises(ValueError):
            RatioFunction(kind=ADJUSTED_SIGMOID, a=math.nan, b=0.0)

    def test_group_mask_ratio_scales_target(self):
        assert group_mask_ratio(RatioFunction(kind=LINEAR), 0.5, 0.8) == pytest.approx(0.4)
        assert group_mask_ratio(SIGMOID, 0.77, 0.0) == 0.0
        assert group_mask_ratio(RatioFunction(kind=CONSTANT), 0.123, 0.6) == pytest.approx(0.6)


class TestMaskPlan:
    def test_partition_enforced(self):
        with pytest.raises(ValueError, match="partition"):
            MaskPlan(SG2M, 0, 4, 4, retained=[0, 1], masked=[1, 2], per_group_ratio={})
        with pytest.raises(ValueError, match="partition"):
            MaskPlan(SG2M, 0, 4, 4, retained=[0], masked=[2, 3], per_group_ratio={})

    def test_group_tokens_protected_for_sg2m_and_nongroup(self):
        for strategy in (SG2M, NONGROUP_RANDOM):
            with pytest.raises(ValueError, match="group tokens"):
                MaskPlan(strategy, 0, 5, 3, retained=[0, 1, 2, 3], masked=[4], per_group_ratio={})

    def test_full_random_may_mask_group_tokens(self):
        plan = MaskPlan(FULL_RANDOM, 0, 5, 3, retained=[0, 1, 2, 3], masked=[4], per_group_ratio={})
        assert_array_equal(plan.masked, [4])

    def test_indices_sorted_on_construction(self):
        plan = MaskPlan(FULL_RANDOM, 0, 4, 4, retained=[3, 0], masked=[2, 1], per_group_ratio={})
        assert_array_equal(plan.retained, [0, 3])
        assert_array_equal(plan.masked, [1, 2])

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError):
            MaskPlan("zigzag", 0, 2, 2, retained=[0, 1], masked=[], per_group_ratio={})

    def test_dict_round_trip(self):
        plan = MaskPlan(SG2M, 7, 5, 5, retained=[0, 2, 4], masked=[1, 3], per_group_ratio={1: 0.4})
        back = MaskPlan.from_dict(plan.to_dict())
        assert back.strategy == plan.strategy
        assert_array_equal(back.retained, plan.retained)
        assert_array_equal(back.masked, plan.masked)
        assert back.per_group_ratio == {1: 0.4}


class TestPlanSG2M:
    def test_dominant_and_rare_group_counts(self):
        # n=100 at area 0.9 and n=10 at area 0.1 under mr_target 0.8:
        # floor(100 * 0.8 * sigmoid(4)) = 78 masked in the big group,
        # floor(10 * 0.8 * sigmoid(-4)) = 0 in the small one.
        bag = two_group_bag()
        plan = plan_sg2m(bag, SIGMOID, mr_target=0.8, seed=3)
        masked_of = bag.segment_of[plan.masked]
        assert np.count_nonzero(masked_of == 1) == 78
        assert np.count_nonzero(masked_of == 2) == 0
        want_a = 0.8 / (1.0 + math.exp(-4.0))
        want_b = 0.8 / (1.0 + math.exp(4.0))
        assert plan.per_group_ratio[1] == pytest.approx(want_a, abs=1e-12)
        assert plan.per_group_ratio[2] == pytest.approx(want_b, abs=1e-12)

    def test_zero_target_masks_nothing(self):
        bag = two_group_bag()
        plan = plan_sg2m(bag, SIGMOID, mr_target=0.0, seed=3)
        assert plan.masked.size == 0
        assert plan.retained.size == bag.n_instances

    def test_singleton_group_always_survives(self):
        bag = make_bag("s", 0, np.ones((1, 3), dtype=np.float32), [5], {5: 1.0})
        plan = plan_sg2m(bag, RatioFunction(kind=CONSTANT), mr_target=1.0, seed=0)
        assert plan.masked.size == 0

    def test_keep_one_per_group_at_full_ratio(self, gen):
        for _ in range(20):
            bag = random_bag(gen, unsegmented_fraction=0.0)
            plan = plan_sg2m(bag, RatioFunction(kind=CONSTANT), mr_target=1.0, seed=1)
            for k in np.unique(bag.segment_of):
                members = np.nonzero(bag.segment_of == k)[0]
                survivors = np.intersect1d(members, plan.retained)
                assert survivors.size == 1

    def test_group_tokens_never_masked(self):
        aug = augment_bag(two_group_bag())
        plan = plan_sg2m(aug, RatioFunction(kind=CONSTANT), mr_target=1.0, seed=9)
        assert plan.masked.max() < aug.n_ordinary
        assert np.all(np.isin([aug.n_ordinary, aug.n_ordinary + 1], plan.retained))

    def test_unsegmented_pseudo_group_participates(self, gen):
        bag = make_bag(
            "u",
            0,
            gen.standard_normal((10, 2)).astype(np.float32),
            [1] * 5 + [UNSEGMENTED] * 5,
            {1: 5.0},
        )
        plan = plan_sg2m(bag, RatioFunction(kind=CONSTANT), mr_target=1.0, seed=0)
        assert UNSEGMENTED in plan.per_group_ratio
        unseg = np.nonzero(bag.segment_of == UNSEGMENTED)[0]
        assert np.intersect1d(unseg, plan.retained).size == 1

    def test_deterministic_per_seed(self):
        bag = two_group_bag()
        a = plan_sg2m(bag, SIGMOID, 0.8, seed=5)
        b = plan_sg2m(bag, SIGMOID, 0.8, seed=5)
        c = plan_sg2m(bag, SIGMOID, 0.8, seed=6)
        assert_array_equal(a.masked, b.masked)
        assert not np.array_equal(a.masked, c.masked)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            plan_sg2m(two_group_bag(), SIGMOID, 1.1, seed=0)

    def test_masked_count_never_exceeds_floor(self, gen):
        for trial in range(50):
            bag = random_bag(gen, slide_id=f"t{trial}")
            mr = float(gen.random())
            plan = plan_sg2m(bag, SIGMOID, mr, seed=trial)
            for k, mr_k in plan.per_group_ratio.items():
                members = np.nonzero(bag.segment_of == k)[0]
                n_masked = np.intersect1d(members, plan.masked).size
                assert n_masked <= math.floor(members.size * mr_k)
                assert members.size - n_masked >= 1


class TestPlanFullRandom:
    def test_floor_count(self):
        bag = two_group_bag(n_a=6, n_b=4)
        plan = plan_full_random(bag, 0.3, seed=1)
        assert plan.masked.size == 3

    def test_single_token_always_kept(self):
        bag = make_bag("one", 0, np.ones((1, 2), dtype=np.float32), [UNSEGMENTED], {})
        plan = plan_full_random(bag, 0.99, seed=0)
        assert plan.masked.size == 0

    def test_group_tokens_eligible(self):
        aug = augment_bag(two_group_bag(n_a=6, n_b=4))
        plan = plan_full_random(aug, 1.0, seed=0)  # mask n_tokens - 1
        assert plan.retained.size == 1
        assert np.any(plan.masked >= aug.n_ordinary)

    def test_deterministic_per_seed(self):
        bag = two_group_bag(n_a=20, n_b=20)
        assert_array_equal(
            plan_full_random(bag, 0.5, seed=4).masked, plan_full_random(bag, 0.5, seed=4).masked
        )


class TestPlanNongroupRandom:
    def test_only_ordinary_pool(self):
        aug = augment_bag(two_group_bag(n_a=6, n_b=4))
        plan = plan_nongroup_random(aug, 0.5, seed=2)
        assert plan.masked.size == 5
        assert plan.masked.max() < aug.n_ordinary
        assert np.all(np.isin([aug.n_ordinary, aug.n_ordinary + 1], plan.retained))

    def test_single_instance_kept(self):
        aug = augment_bag(make_bag("x", 0, np.ones((1, 2), dtype=np.float32), [1], {1: 1.0}))
        assert plan_nongroup_random(aug, 0.9, seed=0).masked.size == 0

    def test_full_ratio_caps_at_n_minus_one(self):
        bag = two_group_bag(n_a=2, n_b=2)
        plan = plan_nongroup_random(bag, 1.0, seed=0)
        assert plan.masked.size == 3


class TestApplyMask:
    def test_empty_plan_is_identity(self, gen):
        bag = random_bag(gen)
        plan = plan_sg2m(bag, SIGMOID, 0.0, seed=0)
        view = apply_mask(bag, plan)
        full = full_view(bag)
        assert_array_equal(view.features, full.features)
        assert_array_equal(view.segment_ids, full.segment_ids)
        assert_array_equal(view.source_indices, np.arange(bag.n_instances))

    def test_retained_order_preserved(self):
        bag = make_bag(
            "o",
            0,
            np.arange(6, dtype=np.float32).reshape(3, 2),
            [1, 1, 1],
            {1: 3.0},
        )
        plan = MaskPlan(FULL_RANDOM, 0, 3, 3, retained=[0, 2], masked=[1], per_group_ratio={})
        view = apply_mask(bag, plan)
        assert_array_equal(view.features, [[0.0, 1.0], [4.0, 5.0]])
        assert_array_equal(view.segment_ids, [1, 1])
        assert_array_equal(view.source_indices, [0, 2])

    def test_kinds_carried_for_group_tokens(self):
        aug = augment_bag(two_group_bag(n_a=3, n_b=2))
        plan = plan_nongroup_random(aug, 0.5, seed=1)
        view = apply_mask(aug, plan)
        assert np.count_nonzero(view.kinds == KIND_GROUP) == 2
        assert view.kinds[view.kinds == KIND_ORDINARY].size == view.n_tokens - 2

    def test_plan_bag_shape_mismatch_rejected(self, gen):
        bag = random_bag(gen, n_min=5, n_max=5)
        other = random_bag(gen, n_min=9, n_max=9)
        plan = plan_full_random(other, 0.5, seed=0)
        with pytest.raises(ValueError, match="plan covers"):
            apply_mask(bag, plan)

    def test_masking_removes_rows_not_zeroes(self):
        bag = two_group_bag(n_a=50, n_b=10)
        plan = plan_sg2m(bag, SIGMOID, 0.8, seed=7)
        view = apply_mask(bag, plan)
        assert view.n_tokens == plan.retained.size < bag.n_instances
        assert not np.any(np.all(view.features == 0.0, axis=1))


class TestRandomizationQuality:
    def test_partition_holds_over_many_seeds(self):
        bag = two_group_bag(n_a=30, n_b=10)
        aug = augment_bag(bag)
        for seed in range(100):
            for plan in (
                plan_sg2m(aug, SIGMOID, 0.8, seed),
                plan_full_random(aug, 0.6, seed),
                plan_nongroup_random(aug, 0.6, seed),
            ):
                merged = np.sort(np.concatenate([plan.retained, plan.masked]))
                assert_array_equal(merged, np.arange(aug.n_tokens))

    def test_within_group_choice_is_roughly_uniform(self):
        # one group of 10 at constant ratio 0.5: each index is masked in
        # half the seeds, within 3 standard errors over 2000 draws.
        bag = make_bag(
            "u", 0, np.ones((10, 2), dtype=np.float32), [1] * 10, {1: 10.0}
        )
        fn = RatioFunction(kind=CONSTANT)
        hits = np.zeros(10)
        n_seeds = 2000
        for seed in range(n_seeds):
            plan = plan_sg2m(bag, fn, 0.5, seed)
            hits[plan.masked] += 1
        freq = hits / n_seeds
        se = math.sqrt(0.5 * 0.5 / n_seeds)
        assert np.all(np.abs(freq - 0.5) <= 3 * se)
