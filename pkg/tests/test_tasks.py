import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dfcil.data import load_digits_dataset, make_blob_dataset
from dfcil.tasks import (
    TaskSchedule,
    cumulative_test_view,
    cumulative_train_view,
    split_equal,
    split_half_then_equal,
    task_train_view,
)


@pytest.fixture(scope="module")
def digits():
    return load_digits_dataset()


class TestSplitEqual:
    def test_100_over_5(self):
        schedule = split_equal(100, 5, seed=0)
        assert schedule.task_sizes == (20,) * 5
        assert sorted(schedule.class_order) == list(range(100))

    def test_100_over_20(self):
        assert split_equal(100, 20, seed=1).task_sizes == (5,) * 20

    def test_same_seed_same_order(self):
        assert split_equal(30, 5, seed=4).class_order == split_equal(30, 5, seed=4).class_order

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            split_equal(100, 7, seed=0)

    def test_order_is_numpy_permutation(self):
        schedule = split_equal(40, 4, seed=9)
        expected = tuple(int(c) for c in np.random.default_rng(9).permutation(40))
        assert schedule.class_order == expected


class TestSplitHalfThenEqual:
    def test_100_over_6(self):
        assert split_half_then_equal(100, 6).task_sizes == (50, 10, 10, 10, 10, 10)

    def test_100_over_26(self):
        assert split_half_then_equal(100, 26).task_sizes == (50,) + (2,) * 25

    def test_200_over_11(self):
        assert split_half_then_equal(200, 11).task_sizes == (100,) + (10,) * 10

    def test_divisibility_violation_rejected(self):
        with pytest.raises(ValueError):
            split_half_then_equal(100, 7)
        with pytest.raises(ValueError):
            split_half_then_equal(7, 3)

    def test_minimum_two_tasks(self):
        with pytest.raises(ValueError):
            split_half_then_equal(100, 1)


class TestScheduleValidation:
    def test_sizes_must_cover_order(self):
        with pytest.raises(ValueError):
            TaskSchedule(class_order=(0, 1, 2), task_sizes=(2, 2),
                         protocol_name="x", order_seed=0)

    def test_order_must_be_permutation(self):
        with pytest.raises(ValueError):
            TaskSchedule(class_order=(0, 1, 1), task_sizes=(3,),
                         protocol_name="x", order_seed=0)

    def test_task_index_bounds(self):
        schedule = split_equal(10, 5, seed=0)
        with pytest.raises(ValueError):
            schedule.task_classes(0)
        with pytest.raises(ValueError):
            schedule.task_classes(6)

    def test_offsets_and_cumulative_classes(self):
        schedule = split_half_then_equal(10, 6, seed=2)
        assert schedule.task_offset(1) == 0
        assert schedule.task_offset(2) == 5
        assert schedule.task_offset(6) == 9
        assert schedule.classes_through(6) == schedule.class_order
        for i in range(1, 7):
            assert len(schedule.classes_through(i)) == sum(schedule.task_sizes[:i])


class TestViews:
    def test_first_cumulative_view_is_task_one(self, digits):
        schedule = split_equal(10, 5, seed=0)
        cumulative = cumulative_test_view(schedule, digits, 1)
        first = schedule.task_classes(1)
        raw_labels = digits.test.labels
        expected = sum(int((raw_labels == c).sum()) for c in first)
        assert len(cumulative) == expected

    def test_last_cumulative_view_is_whole_test_set(self, digits):
        schedule = split_equal(10, 5, seed=1)
        assert len(cumulative_test_view(schedule, digits, 5)) == len(digits.test.labels)

    def test_cumulative_counts_match_brute_filter(self, digits):
        schedule = split_half_then_equal(10, 6, seed=0)
        raw = digits.test.labels.numpy()
        for i in range(1, 7):
            view = cumulative_test_view(schedule, digits, i)
            keep = set(schedule.classes_through(i))
            brute = [k for k, y in enumerate(raw) if int(y) in keep]
            assert view.indices.tolist() == brute

    def test_global_labels_are_learning_order_positions(self, digits):
        schedule = split_equal(10, 5, seed=2)
        view = cumulative_test_view(schedule, digits, 3)
        raw = digits.test.labels[view.indices]
        order = {c: k for k, c in enumerate(schedule.class_order)}
        expected = torch.tensor([order[int(c)] for c in raw])
        assert torch.equal(view.labels, expected)
        assert int(view.labels.max()) < 6

    def test_local_labels_fit_task_range(self, digits):
        schedule = split_equal(10, 5, seed=3)
        for i in range(1, 6):
            view = task_train_view(schedule, digits, i, label_mode="local")
            assert int(view.labels.min()) >= 0
            assert int(view.labels.max()) < 2

    def test_global_equals_offset_plus_local(self, digits):
        schedule = split_half_then_equal(10, 6, seed=1)
        for i in range(1, 7):
            local = task_train_view(schedule, digits, i, label_mode="local")
            global_ = task_train_view(schedule, digits, i, label_mode="global")
            assert torch.equal(global_.labels, local.labels + schedule.task_offset(i))

    def test_task_views_partition_dataset(self, digits):
        schedule = split_equal(10, 5, seed=4)
        seen: set[int] = set()
        for i in range(1, 6):
            ids = set(task_train_view(schedule, digits, i).indices.tolist())
            assert not seen & ids
            seen |= ids
        assert seen == set(range(len(digits.train.labels)))

    def test_cumulative_train_view_grows(self, digits):
        schedule = split_equal(10, 5, seed=5)
        sizes = [len(cumulative_train_view(schedule, digits, i)) for i in range(1, 6)]
        assert sizes == sorted(sizes)
        assert sizes[-1] == len(digits.train.labels)

    def test_batch_returns_matching_pairs(self, digits):
        schedule = split_equal(10, 5, seed=6)
        view = task_train_view(schedule, digits, 2)
        positions = torch.tensor([0, 3, 5])
        images, labels = view.batch(positions)
        assert images.shape[0] == 3
        assert torch.equal(labels, view.labels[positions])
        assert torch.equal(images, view.images(positions))

    def test_view_index_out_of_range_rejected(self, digits):
        schedule = split_equal(10, 5, seed=7)
        with pytest.raises(ValueError):
            cumulative_test_view(schedule, digits, 0)
        with pytest.raises(ValueError):
            cumulative_test_view(schedule, digits, 6)


class TestSeedSeparation:
    def test_seeds_0_1_2_give_distinct_orders(self):
        orders = {split_equal(10, 5, seed=s).class_order for s in (0, 1, 2)}
        assert len(orders) == 3

    @given(st.integers(0, 10_000))
    def test_any_seed_yields_valid_schedule(self, seed):
        schedule = split_half_then_equal(20, 3, seed=seed)
        assert sorted(schedule.class_order) == list(range(20))
        assert sum(schedule.task_sizes) == 20

    def test_blob_dataset_compatible(self):
        dataset = make_blob_dataset(n_classes=6, per_class_train=8, per_class_test=4, seed=0)
        schedule = split_equal(6, 3, seed=0)
        view = cumulative_test_view(schedule, dataset, 3)
        assert len(view) == 24
