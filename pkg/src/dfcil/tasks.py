"""Task schedules for class-incremental protocols and label-mapped dataset views.

Classes are shuffled once per run (numpy ``default_rng``, PCG64, so a seed
fully determines the order across platforms) and partitioned into disjoint
tasks. Task indices are 1-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class TaskSchedule:
    """Immutable class ordering plus per-task partition sizes.

    ``class_order[k]`` is the dataset class id learned at global position k;
    ``global_index_of`` inverts it. Task i (1-based) owns the order slice
    ``[offset(i), offset(i) + task_sizes[i-1])``.
    """

    class_order: tuple[int, ...]
    task_sizes: tuple[int, ...]
    protocol_name: str
    order_seed: int
    global_index_of: dict[int, int] = field(init=False)

    def __post_init__(self):
        if sum(self.task_sizes) != len(self.class_order):
            raise ValueError("task sizes must sum to the number of classes")
        if any(s < 1 for s in self.task_sizes):
            raise ValueError("every task needs at least one class")
        if sorted(self.class_order) != list(range(len(self.class_order))):
            raise ValueError("class_order must be a permutation of 0..n-1")
        object.__setattr__(self, "global_index_of",
                           {cls: pos for pos, cls in enumerate(self.class_order)})

    @property
    def n_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def _check_task(self, i: int) -> None:
        if not 1 <= i <= self.n_tasks:
            raise ValueError(f"task index {i} outside 1..{self.n_tasks}")

    def task_offset(self, i: int) -> int:
        """Number of classes learned before task i."""
        self._check_task(i)
        return sum(self.task_sizes[: i - 1])

    def task_classes(self, i: int) -> tuple[int, ...]:
        """Dataset class ids belonging to task i."""
        self._check_task(i)
        start = self.task_offset(i)
        return self.class_order[start: start + self.task_sizes[i - 1]]

    def classes_through(self, i: int) -> tuple[int, ...]:
        """Dataset class ids of every task up to and including i."""
        self._check_task(i)
        return self.class_order[: self.task_offset(i) + self.task_sizes[i - 1]]


def _shuffled_order(n_classes: int, seed: int) -> tuple[int, ...]:
    rng = np.random.default_rng(seed)
    return tuple(int(c) for c in rng.permutation(n_classes))


def split_equal(n_classes: int, n_tasks: int, seed: int) -> TaskSchedule:
    """Shuffle classes and split them into n_tasks equal parts."""
    if n_tasks < 1:
        raise ValueError(f"need at least one task, got {n_tasks}")
    if n_classes % n_tasks != 0:
        raise ValueError(f"{n_tasks} tasks do not divide {n_classes} classes evenly")
    size = n_classes // n_tasks
    return TaskSchedule(
        class_order=_shuffled_order(n_classes, seed),
        task_sizes=(size,) * n_tasks,
        protocol_name="equal",
        order_seed=seed,
    )


def split_half_then_equal(n_classes: int, n_tasks: int, seed: int = 0) -> TaskSchedule:
    """Half the classes form task 1; the rest split equally over the others."""
    if n_tasks < 2:
        raise ValueError(f"need at least two tasks, got {n_tasks}")
    if n_classes % 2 != 0:
        raise ValueError(f"cannot halve {n_classes} classes")
    half = n_classes // 2
    if half % (n_tasks - 1) != 0:
        raise ValueError(
            f"{n_tasks - 1} incremental tasks do not divide the remaining {half} classes")
    inc = half // (n_tasks - 1)
    return TaskSchedule(
        class_order=_shuffled_order(n_classes, seed),
        task_sizes=(half,) + (inc,) * (n_tasks - 1),
        protocol_name="half-then-equal",
        order_seed=seed,
    )


class DatasetView:
    """Subset of a dataset restricted to given classes, with remapped labels.

    ``label_mode="global"`` maps each class to its position in the learning
    order; ``"local"`` maps it to its position within its own task. Views are
    immutable after construction.
    """

    def __init__(self, dataset, class_ids: tuple[int, ...], label_map: dict[int, int],
                 label_mode: str):
        if label_mode not in ("global", "local"):
            raise ValueError(f"unknown label mode {label_mode!r}")
        missing = [c for c in class_ids if c not in label_map]
        if missing:
            raise ValueError(f"classes without a label mapping: {missing}")
        self.dataset = dataset
        self.class_ids = tuple(class_ids)
        self.label_mode = label_mode
        self._label_map = dict(label_map)
        wanted = torch.zeros(int(dataset.labels.max()) + 1, dtype=torch.bool)
        for c in class_ids:
            wanted[c] = True
        self.indices = torch.nonzero(wanted[dataset.labels], as_tuple=False).flatten()
        lut = torch.full((len(wanted),), -1, dtype=torch.long)
        for c, m in label_map.items():
            lut[c] = m
        self._labels = lut[dataset.labels[self.indices]]

    def __len__(self) -> int:
        return self.indices.numel()

    @property
    def labels(self) -> torch.Tensor:
        return self._labels

    def images(self, positions: torch.Tensor | None = None) -> torch.Tensor:
        """Raw [0, 1] images at the given view positions (all if omitted)."""
        idx = self.indices if positions is None else self.indices[positions]
        return self.dataset.images[idx]

    def batch(self, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images(positions), self._labels[positions]


def task_train_view(schedule: TaskSchedule, dataset, i: int,
                    label_mode: str = "global") -> DatasetView:
    """Training samples of task i's classes, labels global or task-local."""
    classes = schedule.task_classes(i)
    if label_mode == "global":
        label_map = {c: schedule.global_index_of[c] for c in classes}
    else:
        label_map = {c: k for k, c in enumerate(classes)}
    return DatasetView(dataset.train, classes, label_map, label_mode)


def cumulative_test_view(schedule: TaskSchedule, dataset, i: int) -> DatasetView:
    """Test samples of every class learned through task i, labels global."""
    classes = schedule.classes_through(i)
    label_map = {c: schedule.global_index_of[c] for c in classes}
    return DatasetView(dataset.test, classes, label_map, "global")


def cumulative_train_view(schedule: TaskSchedule, dataset, i: int) -> DatasetView:
    """Training samples of every class learned through task i, labels global."""
    classes = schedule.classes_through(i)
    label_map = {c: schedule.global_index_of[c] for c in classes}
    return DatasetView(dataset.train, classes, label_map, "global")
