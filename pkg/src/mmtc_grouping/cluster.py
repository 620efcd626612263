"""Grouping of periodic devices and coordinator selection.

Groups obey three rules: one device class per group, a cap on the
geographic diameter and a per-class cap on the number of devices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import UNLIMITED_GROUP_SIZE
from .scenario import Device

EXACT_DIAMETER_LIMIT = 64

__all__ = [
    "Device", "Group", "ClusterConstraints", "cluster_global", "greedy_seeded",
    "select_gc", "best_group_for", "group_diameter", "group_violations", "apply_groups",
]


@dataclass(frozen=True)
class ClusterConstraints:
    max_diameter_m: float = math.inf
    max_group_size: Mapping[int, int] = field(default_factory=dict)
    default_group_size: int = UNLIMITED_GROUP_SIZE

    def size_cap(self, class_id: int) -> int:
        return int(self.max_group_size.get(class_id, self.default_group_size))


@dataclass(frozen=True)
class Group:
    group_id: int
    class_id: int
    coordinator_id: int
    member_ids: frozenset[int] = frozenset()
    diameter_m: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "member_ids", frozenset(self.member_ids))
        if self.coordinator_id in self.member_ids:
            raise ValueError(f"group {self.group_id}: coordinator listed as member")

    @property
    def size(self) -> int:
        return 1 + len(self.member_ids)

    @property
    def device_ids(self) -> frozenset[int]:
        return self.member_ids | {self.coordinator_id}

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "class_id": self.class_id,
            "coordinator_id": self.coordinator_id,
            "member_ids": sorted(self.member_ids),
            "diameter_m": self.diameter_m,
        }

    @classmethod
    def from_dict(cls, d) -> "Group":
        return cls(int(d["group_id"]), int(d["class_id"]), int(d["coordinator_id"]),
                   frozenset(int(m) for m in d.get("member_ids", ())), float(d.get("diameter_m", 0.0)))


def _positions(ids: Sequence[int], devices: Mapping[int, Device]) -> np.ndarray:
    return np.array([devices[i].position for i in ids], dtype=float).reshape(-1, 2)


def exact_diameter(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def group_diameter(points: np.ndarray) -> float:
    """Max pairwise distance; above 64 points a bounding-circle upper bound."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) <= EXACT_DIAMETER_LIMIT:
        return exact_diameter(points)
    centre = points.mean(axis=0)
    return 2.0 * float(np.sqrt(((points - centre) ** 2).sum(-1)).max())


def greedy_seeded(devices: Sequence[Device], max_size: int, max_diameter: float) -> list[list[int]]:
    """Greedy seeded growth for devices of a single class.

    The lowest-id free device seeds a group; free devices are then taken in
    order of distance to the seed (ties by id) whenever they keep the group
    within both caps.
    """
    order = sorted(devices, key=lambda d: d.device_id)
    ids = np.array([d.device_id for d in order], dtype=np.int64)
    pts = np.array([d.position for d in order], dtype=float).reshape(-1, 2)
    free = np.ones(len(order), dtype=bool)
    clusters = []
    for s in range(len(order)):
        if not free[s]:
            continue
        free[s] = False
        chosen = [s]
        cand = np.flatnonzero(free)
        if len(cand) and max_size > 1:
            dist = np.hypot(*(pts[cand] - pts[s]).T)
            keep = dist <= max_diameter
            cand, dist = cand[keep], dist[keep]
            cand = cand[np.lexsort((ids[cand], dist))]
            for c in cand:
                if len(chosen) >= max_size:
                    break
                if math.isfinite(max_diameter):
                    d = np.hypot(*(pts[chosen] - pts[c]).T)
                    if d.max() > max_diameter:
                        continue
                chosen.append(int(c))
                free[c] = False
        clusters.append([int(ids[i]) for i in chosen])
    return clusters


ClusterAlgorithm = Callable[[Sequence[Device], int, float], list]


def select_gc(member_ids: Iterable[int], devices: Mapping[int, Device]) -> int:
    """Device closest to the group centroid; the lowest id wins ties."""
    ids = sorted(member_ids)
    if not ids:
        raise ValueError("cannot select a coordinator for an empty group")
    pts = _positions(ids, devices)
    dist = np.hypot(*(pts - pts.mean(axis=0)).T)
    best = dist.min()
    return next(i for i, d in zip(ids, dist) if d == best)


def cluster_global(devices: Iterable[Device], constraints: ClusterConstraints,
                   algorithm: ClusterAlgorithm = greedy_seeded, first_group_id: int = 0) -> list[Group]:
    """Cluster every periodic device into groups and elect their coordinators.

    Aperiodic (class 0) devices are skipped. Group ids are assigned in order
    of class id, then seed order.
    """
    by_id = {}
    per_class: dict[int, list[Device]] = {}
    for d in devices:
        if not d.is_periodic:
            continue
        by_id[d.device_id] = d
        per_class.setdefault(d.class_id, []).append(d)
    groups = []
    gid = first_group_id
    for cid in sorted(per_class):
        for ids in algorithm(per_class[cid], constraints.size_cap(cid), constraints.max_diameter_m):
            gc = select_gc(ids, by_id)
            groups.append(Group(gid, cid, gc, frozenset(ids) - {gc}, group_diameter(_positions(ids, by_id))))
            gid += 1
    return groups


def best_group_for(device: Device, groups: Iterable[Group], constraints: ClusterConstraints,
                   devices: Mapping[int, Device]) -> int | None:
    """Pick the existing group with the nearest coordinator that can admit ``device``.

    A group qualifies if it is of the device's class, has room under the size
    cap and keeps its diameter within the cap once the device joins. Groups
    are assumed to satisfy the caps already.
    """
    if not device.is_periodic:
        raise ValueError("aperiodic devices are never grouped")
    cap = constraints.size_cap(device.class_id)
    here = np.asarray(device.position, dtype=float)
    best = None
    for g in groups:
        if g.class_id != device.class_id or device.device_id in g.device_ids or g.size + 1 > cap:
            continue
        if math.isfinite(constraints.max_diameter_m):
            pts = _positions(sorted(g.device_ids), devices)
            if np.hypot(*(pts - here).T).max() > constraints.max_diameter_m:
                continue
        d = float(np.hypot(*(here - np.asarray(devices[g.coordinator_id].position))))
        key = (d, g.group_id)
        if best is None or key < best[0]:
            best = (key, g.group_id)
    return None if best is None else best[1]


def group_violations(group: Group, devices: Mapping[int, Device], constraints: ClusterConstraints) -> list[str]:
    """Return the grouping rules ``group`` breaks (empty when valid)."""
    out = []
    ids = sorted(group.device_ids)
    if any(devices[i].class_id != group.class_id for i in ids):
        out.append("mixed device classes")
    if group.class_id == 0:
        out.append("aperiodic devices grouped")
    if group.size > constraints.size_cap(group.class_id):
        out.append(f"size {group.size} exceeds cap {constraints.size_cap(group.class_id)}")
    diam = exact_diameter(_positions(ids, devices))
    if diam > constraints.max_diameter_m:
        out.append(f"diameter {diam:.3f} m exceeds cap {constraints.max_diameter_m}")
    return out


def apply_groups(devices: Iterable[Device], groups: Iterable[Group]) -> list[Device]:
    """Copies of ``devices`` with role and group id set from ``groups``."""
    role = {}
    for g in groups:
        role[g.coordinator_id] = ("coordinator", g.group_id)
        for m in g.member_ids:
            role[m] = ("member", g.group_id)
    out = []
    for d in devices:
        r, gid = role.get(d.device_id, ("ungrouped", None))
        out.append(Device(d.device_id, d.class_id, d.position, r, gid))
    return out
