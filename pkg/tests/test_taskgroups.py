"""Sliding-window task assignment: counts, coverage, membership."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertmix.errors import InvalidArgumentError, InvariantError, UnknownClassError
from expertmix.taskgroups import (
    GroupingPlan,
    TaskGroup,
    generate_groups,
    group_count,
    membership,
    random_groups,
    window_stride,
)


class TestGroupCount:
    def test_published_counts(self):
        # the combinatorics the windowing scheme must reproduce exactly
        assert group_count(7756, 970, 0.5) == 16
        assert group_count(7756, 970, 0.0) == 8

    def test_disjoint_partition(self):
        assert group_count(10, 5, 0.0) == 2

    def test_overlap_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            group_count(10, 5, 1.0)
        with pytest.raises(InvalidArgumentError):
            group_count(10, 5, -0.1)

    def test_group_bigger_than_class_set_rejected(self):
        with pytest.raises(InvalidArgumentError):
            group_count(4, 5, 0.0)

    def test_stride_floor(self):
        assert window_stride(1, 0.9) == 1


class TestGenerateGroups:
    def test_canonical_half_overlap_plan(self):
        plan = generate_groups(range(10), 4, 0.5)
        assert [g.members for g in plan.groups] == [
            (0, 1, 2, 3), (2, 3, 4, 5), (4, 5, 6, 7), (6, 7, 8, 9), (8, 9, 0, 1),
        ]
        counts = np.zeros(10, dtype=int)
        for g in plan.groups:
            counts[list(g.members)] += 1
        assert np.all(counts == 2)

    def test_zero_overlap_partitions(self):
        plan = generate_groups(range(10), 5, 0.0)
        assert [g.members for g in plan.groups] == [(0, 1, 2, 3, 4), (5, 6, 7, 8, 9)]

    def test_full_group(self):
        plan = generate_groups(range(6), 6, 0.0)
        assert plan.theta == 1
        assert plan.groups[0].members == (0, 1, 2, 3, 4, 5)

    def test_respects_order(self):
        plan = generate_groups([3, 1, 0, 2], 2, 0.0)
        assert [g.members for g in plan.groups] == [(3, 1), (0, 2)]

    def test_sentinel_slot(self):
        group = generate_groups(range(6), 3, 0.0).groups[0]
        assert group.sentinel_slot == 3
        assert group.size == 3

    def test_bad_order_rejected(self):
        with pytest.raises(InvalidArgumentError):
            generate_groups([0, 1, 1, 3], 2, 0.0)

    def test_duplicate_members_rejected(self):
        with pytest.raises(InvariantError):
            TaskGroup(0, (1, 1, 2))


class TestRandomGroups:
    def test_same_group_count_as_ordered(self):
        ordered = generate_groups(range(10), 4, 0.5)
        shuffled = random_groups(range(10), 4, 0.5, seed=3)
        assert shuffled.theta == ordered.theta

    def test_deterministic_given_seed(self):
        a = random_groups(range(12), 5, 0.25, seed=9)
        b = random_groups(range(12), 5, 0.25, seed=9)
        assert [g.members for g in a.groups] == [g.members for g in b.groups]

    def test_multiplicity_two_at_half_overlap(self):
        plan = random_groups(range(10), 4, 0.5, seed=1)
        counts = np.zeros(10, dtype=int)
        for g in plan.groups:
            counts[list(g.members)] += 1
        assert np.all(counts == 2)


class TestMembership:
    def test_single_membership_without_overlap(self):
        plan = generate_groups(range(10), 5, 0.0)
        assert membership(plan, 7) == [(1, 2)]

    def test_canonical_plan_memberships(self):
        plan = generate_groups(range(10), 4, 0.5)
        assert membership(plan, 2) == [(0, 2), (1, 0)]
        assert membership(plan, 0) == [(0, 0), (4, 2)]

    def test_unknown_class(self):
        plan = generate_groups(range(10), 4, 0.5)
        with pytest.raises(UnknownClassError):
            membership(plan, 10)

    def test_never_empty(self):
        plan = generate_groups(range(13), 5, 0.4)
        assert all(membership(plan, c) for c in range(13))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=40),
    size=st.integers(min_value=1, max_value=40),
    overlap=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9]),
)
def test_coverage_property(n, size, overlap):
    size = min(size, n)
    plan = generate_groups(range(n), size, overlap)
    covered = set()
    for g in plan.groups:
        covered.update(g.members)
    assert covered == set(range(n))
    assert plan.theta == group_count(n, size, overlap)


@settings(max_examples=40, deadline=None)
@given(
    blocks=st.integers(min_value=2, max_value=6),
    half_size=st.integers(min_value=1, max_value=6),
)
def test_uniform_multiplicity_when_stride_divides(blocks, half_size):
    # overlap 0.5 with even size: stride = size/2; choose n = blocks * stride
    size = 2 * half_size
    stride = window_stride(size, 0.5)
    n = max(blocks * stride, size)
    if n % stride:
        n += stride - (n % stride)
    plan = generate_groups(range(n), size, 0.5)
    counts = np.zeros(n, dtype=int)
    for g in plan.groups:
        counts[list(g.members)] += 1
    assert np.all(counts == size // stride)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_random_groups_pure_given_seed(seed):
    a = random_groups(range(14), 4, 0.5, seed=seed)
    b = random_groups(range(14), 4, 0.5, seed=seed)
    assert [g.members for g in a.groups] == [g.members for g in b.groups]


def test_small_category_blocks_fit_one_window():
    # with 50% overlap, any contiguous span no longer than the stride
    # lies wholly inside at least one window
    plan = generate_groups(range(12), 4, 0.5)  # stride 2, windows of 4
    for start in range(12):
        span = {start % 12, (start + 1) % 12}
        assert any(span <= set(g.members) for g in plan.groups)


class TestPlanSerialization:
    def test_json_schema_and_round_trip(self, tmp_path):
        plan = generate_groups(range(10), 4, 0.5)
        doc = plan.to_json_dict()
        assert set(doc) == {"lambda", "M", "stride", "groups"}
        assert doc["M"] == 4 and doc["stride"] == 2 and doc["lambda"] == 0.5
        path = tmp_path / "plan.json"
        plan.save(path)
        loaded = GroupingPlan.load(path)
        assert [g.members for g in loaded.groups] == [g.members for g in plan.groups]
        assert loaded.overlap == plan.overlap
        assert loaded.stride == plan.stride
        assert loaded.n_classes == plan.n_classes
