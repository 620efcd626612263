"""Experiment scenarios, RAO allocation builders and the table1 preset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import APERIODIC, UNLIMITED_GROUP_SIZE, DeviceClass, RaoAllocation

TABLE1_PERIODS_S = (60.0, 60.0, 3600.0, 3600.0, 86400.0, 86400.0)
TABLE1_GAMMA0 = 0.001
DEFAULT_RAOS = 3600


@dataclass(frozen=True)
class Scenario:
    classes: tuple[DeviceClass, ...]
    cell_radius_m: float = 1000.0
    d2d_range_m: float = 100.0
    seed: int = 0
    raos_per_second: int = DEFAULT_RAOS

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.class_id for c in self.classes]
        if not ids or ids != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        if sum(not c.is_periodic for c in self.classes) != 1:
            raise ValueError("exactly one aperiodic class (id 0) is required")
        if not self.cell_radius_m > 0 or not self.d2d_range_m > 0:
            raise ValueError("cell radius and D2D range must be positive")
        if self.d2d_range_m > self.cell_radius_m:
            raise ValueError("D2D range cannot exceed the cell radius")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.raos_per_second < 1:
            raise ValueError("raos_per_second must be >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def periodic_population(self) -> int:
        return sum(c.population for c in self.classes[1:])


def table1_preset(n0: int, raos_per_second: int = DEFAULT_RAOS, max_group_size: int = UNLIMITED_GROUP_SIZE,
                  seed: int = 0, **geometry) -> Scenario:
    """Six periodic classes of n0/6 devices (1 min, 1 min, 1 h, 1 h, 1 day, 1 day).

    A remainder of ``n0 % 6`` is handed out one device at a time starting at class 1.
    """
    if n0 < 6:
        raise ValueError(f"n0 must be >= 6, got {n0}")
    base, rem = divmod(n0, 6)
    classes = [DeviceClass(0, population=n0, aperiodic_rate=TABLE1_GAMMA0)]
    for i, period in enumerate(TABLE1_PERIODS_S, start=1):
        pop = base + (1 if i <= rem else 0)
        classes.append(DeviceClass(i, population=pop, period_s=period, max_group_size=max_group_size))
    return Scenario(tuple(classes), seed=seed, raos_per_second=raos_per_second, **geometry)


def full_sharing_alloc(raos: int, num_classes: int) -> RaoAllocation:
    """Every RAO is usable by every class."""
    if raos < 1:
        raise ValueError(f"need at least one RAO, got {raos}")
    everyone = frozenset(range(num_classes))
    return RaoAllocation((everyone,) * raos, num_classes)


def full_dedication_alloc(per_class_raos: Sequence[int]) -> RaoAllocation:
    """Contiguous blocks of RAOs, block i reserved for class i."""
    if any(n < 1 for n in per_class_raos):
        raise ValueError(f"every class needs at least one RAO: {list(per_class_raos)}")
    sets = []
    for c, n in enumerate(per_class_raos):
        sets.extend([frozenset({c})] * int(n))
    return RaoAllocation(tuple(sets), len(per_class_raos))


def mixed_alloc(blocks: Sequence[tuple[int, Sequence[int]]], num_classes: int) -> RaoAllocation:
    """Allocation built from ``(count, allowed classes)`` blocks laid out in order."""
    sets = []
    for count, allowed in blocks:
        sets.extend([frozenset(allowed)] * int(count))
    return RaoAllocation(tuple(sets), num_classes)


def random_mixed_alloc(raos: int, num_classes: int, rng: np.random.Generator) -> RaoAllocation:
    """Random allowed sets per RAO, repaired so each class has at least one RAO."""
    if raos < num_classes:
        raise ValueError("need at least one RAO per class")
    sets = []
    for _ in range(raos):
        mask = rng.random(num_classes) < 0.5
        if not mask.any():
            mask[rng.integers(num_classes)] = True
        sets.append(set(np.flatnonzero(mask).tolist()))
    covered = set().union(*sets)
    for c in range(num_classes):
        if c not in covered:
            sets[int(rng.integers(raos))].add(c)
    return RaoAllocation(tuple(frozenset(s) for s in sets), num_classes)


def table1_mixed_alloc(raos: int = DEFAULT_RAOS) -> RaoAllocation:
    """A fixed mixed allocation for the seven table1 classes.

    One third of the RAOs is shared by all, the rest is split among odd
    classes, even periodic classes and the asynchronous class.
    """
    third = raos // 3
    rest = raos - 2 * third
    return mixed_alloc(
        [(third, range(7)), (third, (1, 3, 5)), (rest - rest // 2, (2, 4, 6)), (rest // 2, (0,))], 7)


@dataclass
class Device:
    device_id: int
    class_id: int
    position: tuple[float, float]
    role: str = "ungrouped"
    group_id: int | None = None

    @property
    def is_periodic(self) -> bool:
        return self.class_id != 0


def place_devices(scenario: Scenario, rng: np.random.Generator | None = None) -> list[Device]:
    """Drop every device uniformly at random in the cell disc.

    Device ids are assigned class by class, starting at 0. Without ``rng`` the
    scenario seed is used.
    """
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    total = sum(c.population for c in scenario.classes)
    r = scenario.cell_radius_m * np.sqrt(rng.random(total))
    theta = 2 * np.pi * rng.random(total)
    xs, ys = r * np.cos(theta), r * np.sin(theta)
    devices = []
    idx = 0
    for c in scenario.classes:
        for _ in range(c.population):
            devices.append(Device(idx, c.class_id, (float(xs[idx]), float(ys[idx]))))
            idx += 1
    return devices


# -- JSON files -------------------------------------------------------------

def class_to_dict(c: DeviceClass) -> dict:
    d = {"class_id": c.class_id, "population": c.population, "period_s": c.period_s}
    if c.class_id == 0:
        d["aperiodic_rate"] = c.aperiodic_rate
    elif c.max_group_size != UNLIMITED_GROUP_SIZE:
        d["max_group_size"] = c.max_group_size
    return d


def class_from_dict(d: dict) -> DeviceClass:
    cid = int(d["class_id"])
    period = d.get("period_s", APERIODIC)
    period = APERIODIC if period in (None, APERIODIC) else float(period)
    return DeviceClass(
        class_id=cid,
        population=int(d["population"]),
        period_s=period,
        max_group_size=int(d.get("max_group_size", UNLIMITED_GROUP_SIZE)),
        aperiodic_rate=float(d.get("aperiodic_rate", 0.0)),
    )


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "classes": [class_to_dict(c) for c in s.classes],
        "cell_radius_m": s.cell_radius_m,
        "d2d_range_m": s.d2d_range_m,
        "L": s.raos_per_second,
        "seed": s.seed,
    }


def scenario_from_dict(d: dict) -> Scenario:
    """Build a scenario from a config mapping.

    Either ``classes`` or ``preset: "table1"`` with ``n0`` must be given.
    """
    geometry = {k: float(d[k]) for k in ("cell_radius_m", "d2d_range_m") if k in d}
    seed = int(d.get("seed", 0))
    raos = int(d.get("L", DEFAULT_RAOS))
    if d.get("preset") == "table1":
        return table1_preset(int(d.get("n0", 3600)), raos_per_second=raos, seed=seed,
                             max_group_size=int(d.get("max_group_size", UNLIMITED_GROUP_SIZE)), **geometry)
    if "preset" in d:
        raise ValueError(f"unknown preset {d['preset']!r}")
    if "classes" not in d:
        raise ValueError("scenario needs 'classes' or a 'preset'")
    classes = tuple(class_from_dict(c) for c in d["classes"])
    return Scenario(classes, seed=seed, raos_per_second=raos, **geometry)


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))


def save_scenario(s: Scenario, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_dict(s), f, indent=2)
        f.write("\n")


def parse_alloc(choice, scenario: Scenario) -> RaoAllocation:
    """Resolve an allocation description from a config file or the CLI.

    Accepts ``"sharing"``, ``"dedication"`` (even split), ``"mixed"`` (the fixed
    table1 layout), ``{"per_class_raos": [...]}`` or ``{"allowed_classes": [[...], ...]}``.
    """
    m = scenario.num_classes
    L = scenario.raos_per_second
    if choice in (None, "sharing"):
        return full_sharing_alloc(L, m)
    if choice == "dedication":
        base, rem = divmod(L, m)
        if base < 1:
            raise ValueError(f"L={L} is too small to dedicate RAOs to {m} classes")
        return full_dedication_alloc([base + (1 if i < rem else 0) for i in range(m)])
    if choice == "mixed":
        if m != 7:
            raise ValueError("the built-in mixed allocation is defined for 7 classes")
        return table1_mixed_alloc(L)
    if isinstance(choice, dict):
        if "per_class_raos" in choice:
            return full_dedication_alloc([int(n) for n in choice["per_class_raos"]])
        if "allowed_classes" in choice:
            return RaoAllocation(tuple(frozenset(a) for a in choice["allowed_classes"]), m)
    raise ValueError(f"unknown allocation {choice!r}")
