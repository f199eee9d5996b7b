"""Overlapping task groups: circular sliding windows over a class ordering.

Each group holds ``group_size`` classes plus one extra "not-in-group"
output slot handled by the expert head. Consecutive windows advance by a
stride of ``group_size * (1 - overlap)`` positions (rounded, floored at 1),
wrapping circularly so every class is covered and, when the stride divides
both the class count and the group size, covered the same number of times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvariantError, UnknownClassError


@dataclass(frozen=True)
class TaskGroup:
    """One expert's slice of the class set.

    ``members[slot]`` is the global class id answered by output ``slot``;
    the extra output at ``sentinel_slot`` (== ``size``) answers
    "none of my classes".
    """

    index: int
    members: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise InvariantError(f"group {self.index} has duplicate members")
        if not self.members:
            raise InvariantError(f"group {self.index} is empty")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def sentinel_slot(self) -> int:
        return len(self.members)

    def slot_of(self, class_id: int) -> int | None:
        try:
            return self.members.index(class_id)
        except ValueError:
            return None


@dataclass
class GroupingPlan:
    """A full set of task groups over ``n_classes`` classes."""

    groups: list[TaskGroup]
    overlap: float
    group_size: int
    n_classes: int
    stride: int
    _slots: dict[int, list[tuple[int, int]]] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()
        self._slots = {c: [] for c in range(self.n_classes)}
        for group in self.groups:
            for slot, class_id in enumerate(group.members):
                self._slots[class_id].append((group.index, slot))

    @property
    def theta(self) -> int:
        """Number of groups, i.e. number of experts to train."""
        return len(self.groups)

    def validate(self) -> None:
        if not self.groups:
            raise InvariantError("plan has no groups")
        covered = set()
        for position, group in enumerate(self.groups):
            if group.index != position:
                raise InvariantError("group indices must match their positions")
            if group.size != self.group_size:
                raise InvariantError(
                    f"group {group.index} has {group.size} members, expected {self.group_size}"
                )
            covered.update(group.members)
        if covered != set(range(self.n_classes)):
            raise InvariantError("groups do not cover the class set")
        if self.stride < 1:
            raise InvariantError("stride must be >= 1")

    def membership(self, class_id: int) -> list[tuple[int, int]]:
        """All ``(group index, slot)`` pairs holding ``class_id``."""
        if class_id not in self._slots:
            raise UnknownClassError(f"unknown class id {class_id!r}")
        return list(self._slots[class_id])

    # -- serialization --------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "lambda": self.overlap,
            "M": self.group_size,
            "stride": self.stride,
            "groups": [list(g.members) for g in self.groups],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GroupingPlan":
        groups = [TaskGroup(i, tuple(int(c) for c in members))
                  for i, members in enumerate(doc["groups"])]
        n = max(c for g in groups for c in g.members) + 1
        return cls(
            groups=groups,
            overlap=float(doc["lambda"]),
            group_size=int(doc["M"]),
            n_classes=n,
            stride=int(doc["stride"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_json_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, path) -> "GroupingPlan":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_json_dict(json.load(handle))


def window_stride(group_size: int, overlap: float) -> int:
    """Positions a window advances between consecutive groups (at least 1)."""
    if not 0.0 <= overlap < 1.0:
        raise InvalidArgumentError(
            f"overlap must be in [0, 1), got {overlap} (1.0 collapses all task spaces)"
        )
    if group_size < 1:
        raise InvalidArgumentError(f"group size must be >= 1, got {group_size}")
    # round half away from zero so the stride is stable across platforms
    return max(1, int(math.floor(group_size * (1.0 - overlap) + 0.5)))


def group_count(n_classes: int, group_size: int, overlap: float) -> int:
    """Number of groups needed to cover ``n_classes`` with circular windows."""
    if group_size > n_classes:
        raise InvalidArgumentError(
            f"group size {group_size} exceeds class count {n_classes}"
        )
    stride = window_stride(group_size, overlap)
    return -(-n_classes // stride)


def generate_groups(order: Sequence[int], group_size: int, overlap: float) -> GroupingPlan:
    """Slide circular windows of ``group_size`` along a class ordering."""
    order = [int(c) for c in order]
    n = len(order)
    if sorted(order) != list(range(n)):
        raise InvalidArgumentError("order must be a permutation of 0..n-1")
    theta = group_count(n, group_size, overlap)
    stride = window_stride(group_size, overlap)
    groups = [
        TaskGroup(j, tuple(order[(j * stride + t) % n] for t in range(group_size)))
        for j in range(theta)
    ]
    return GroupingPlan(
        groups=groups,
        overlap=overlap,
        group_size=group_size,
        n_classes=n,
        stride=stride,
    )


def random_groups(classes: Sequence[int], group_size: int, overlap: float, seed: int) -> GroupingPlan:
    """Baseline assignment: the same windowing over a seeded uniform shuffle."""
    classes = [int(c) for c in classes]
    rng = np.random.default_rng(seed)
    shuffled = [classes[i] for i in rng.permutation(len(classes))]
    return generate_groups(shuffled, group_size, overlap)


def membership(plan: GroupingPlan, class_id: int) -> list[tuple[int, int]]:
    """All ``(group index, slot)`` pairs holding ``class_id``."""
    return plan.membership(class_id)
