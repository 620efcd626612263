"""Closed-form random-access collision model for grouped mMTC traffic.

All rates are per second. Class 0 is the asynchronous (aperiodic) class;
classes 1..M are periodic. RAO identifiers run from 1 to L.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

APERIODIC = "aperiodic"
UNLIMITED_GROUP_SIZE = 2**31 - 1


class InvariantViolation(RuntimeError):
    """Raised when an allocation or load breaks a structural invariant."""


@dataclass(frozen=True)
class DeviceClass:
    """Population, period and grouping limit of one device class.

    ``aperiodic_rate`` is the total request intensity of class 0 and must be
    zero for periodic classes.
    """

    class_id: int
    population: int
    period_s: float | str = APERIODIC
    max_group_size: int = UNLIMITED_GROUP_SIZE
    aperiodic_rate: float = 0.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if self.population < 0:
            raise ValueError(f"class {self.class_id}: population must be >= 0")
        if self.max_group_size < 1:
            raise ValueError(f"class {self.class_id}: max_group_size must be >= 1")
        if self.class_id == 0:
            if self.period_s != APERIODIC:
                raise ValueError("class 0 must be aperiodic")
            if not self.aperiodic_rate >= 0:
                raise ValueError("class 0 aperiodic_rate must be >= 0")
        else:
            if self.period_s == APERIODIC or not float(self.period_s) > 0:
                raise ValueError(f"class {self.class_id} needs a positive period_s")
            if self.aperiodic_rate != 0:
                raise ValueError(f"class {self.class_id} is periodic; aperiodic_rate must be 0")

    @property
    def is_periodic(self) -> bool:
        return self.class_id != 0

    def group_size(self, k: int) -> int:
        """Group size actually usable by this class for a requested ``k``."""
        return min(k, self.max_group_size)


def _check_classes(classes: Sequence[DeviceClass]) -> None:
    if not classes:
        raise ValueError("at least the aperiodic class 0 is required")
    ids = [c.class_id for c in classes]
    if ids != list(range(len(classes))):
        raise ValueError(f"class ids must be contiguous 0..M in order, got {ids}")


@dataclass(frozen=True)
class ExceptionModel:
    """D2D link exception intensity as an exponential function of group size."""

    alpha: float = 0.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    def rate(self, k: int) -> float:
        """Expected exceptions per grouped device per second at group size ``k``."""
        if k < 1:
            raise ValueError(f"group size must be >= 1, got {k}")
        return math.expm1(self.alpha * (k - 1))


@dataclass(frozen=True)
class GroupedLoad:
    """Effective RA arrival intensities, index 0 being the asynchronous class."""

    gamma_tilde: tuple[float, ...]
    base_async: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gamma_tilde", tuple(float(g) for g in self.gamma_tilde))
        if not self.gamma_tilde:
            raise ValueError("load vector must not be empty")
        if any(not g >= 0 for g in self.gamma_tilde):
            raise ValueError(f"loads must be non-negative: {self.gamma_tilde}")
        if self.gamma_tilde[0] < self.base_async:
            raise ValueError("async load cannot be below the normal aperiodic rate")

    def __len__(self):
        return len(self.gamma_tilde)

    def __getitem__(self, i):
        return self.gamma_tilde[i]

    @property
    def total(self) -> float:
        return math.fsum(self.gamma_tilde)

    @property
    def exception_load(self) -> float:
        """Extra asynchronous load caused by D2D exception reports."""
        return self.gamma_tilde[0] - self.base_async


@dataclass(frozen=True, eq=False)
class RaoAllocation:
    """Per-RAO sets of device classes allowed to contend on that RAO.

    ``allowed_classes[l - 1]`` is the set for RAO ``l``.
    """

    allowed_classes: tuple[frozenset[int], ...]
    num_classes: int
    # derived
    rao_sets: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    _set_counts: tuple[tuple[tuple[frozenset[int], int], ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        sets = tuple(frozenset(int(c) for c in a) for a in self.allowed_classes)
        object.__setattr__(self, "allowed_classes", sets)
        if not sets:
            raise ValueError("an allocation needs at least one RAO")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        members: list[list[int]] = [[] for _ in range(self.num_classes)]
        for l, a in enumerate(sets, start=1):
            if not a:
                raise InvariantViolation(f"RAO {l} has an empty allowed-class set")
            for c in a:
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"RAO {l} references unknown class {c}")
                members[c].append(l)
        for c, b in enumerate(members):
            if not b:
                raise InvariantViolation(f"class {c} has no usable RAO")
        object.__setattr__(self, "rao_sets", tuple(tuple(b) for b in members))
        # RAOs with identical allowed sets share a collision probability.
        counts = []
        for c in range(self.num_classes):
            seen = Counter(sets[l - 1] for l in members[c])
            counts.append(tuple(sorted(seen.items(), key=lambda kv: sorted(kv[0]))))
        object.__setattr__(self, "_set_counts", tuple(counts))

    @property
    def raos_per_second(self) -> int:
        return len(self.allowed_classes)

    def raos_for(self, i: int) -> tuple[int, ...]:
        """B_i: identifiers of the RAOs class ``i`` may use."""
        self._check_class(i)
        return self.rao_sets[i]

    def num_raos_for(self, i: int) -> int:
        """L_i = |B_i|."""
        return len(self.raos_for(i))

    def allowed(self, l: int) -> frozenset[int]:
        if not 1 <= l <= len(self.allowed_classes):
            raise KeyError(f"unknown RAO id {l}")
        return self.allowed_classes[l - 1]

    def is_full_sharing(self) -> bool:
        everyone = frozenset(range(self.num_classes))
        return all(a == everyone for a in self.allowed_classes)

    def is_full_dedication(self) -> bool:
        return all(len(a) == 1 for a in self.allowed_classes)

    def _check_class(self, i):
        if not 0 <= i < self.num_classes:
            raise KeyError(f"unknown class id {i}")


def collision_prob_basic(gamma: float, raos: float) -> float:
    """Probability that a request collides, given load ``gamma`` on ``raos`` RAO/s."""
    if not raos > 0:
        raise ValueError(f"raos must be > 0, got {raos}")
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return -math.expm1(-gamma / raos)


def ungrouped_load(classes: Sequence[DeviceClass], mode: str = "optimal") -> GroupedLoad:
    """Request intensities without grouping.

    ``optimal`` spreads each class uniformly over its period (N_i / T_i);
    ``worst_peak`` is the instantaneous peak when a whole class fires in the
    same second (N_i).
    """
    _check_classes(classes)
    if mode not in ("optimal", "worst_peak"):
        raise ValueError(f"unknown mode {mode!r}")
    gamma0 = classes[0].aperiodic_rate
    rates = [gamma0]
    for c in classes[1:]:
        rates.append(c.population / float(c.period_s) if mode == "optimal" else float(c.population))
    return GroupedLoad(tuple(rates), base_async=gamma0)


def num_groups(population: int, k: int) -> int:
    """Number of groups of size ``k`` needed for ``population`` devices (with residue)."""
    if k < 1:
        raise ValueError(f"group size must be >= 1, got {k}")
    return -(-population // k)


def grouped_load(classes: Sequence[DeviceClass], k: int, exc: ExceptionModel | None = None) -> GroupedLoad:
    """Effective intensities when periodic classes are grouped with size ``k``.

    Only group coordinators send periodic requests. Every grouped device adds
    D2D exception reports to the asynchronous class.
    """
    _check_classes(classes)
    if k < 1:
        raise ValueError(f"group size must be >= 1, got {k}")
    exc = exc or ExceptionModel()
    gamma0 = classes[0].aperiodic_rate
    periodic = []
    extra = []
    for c in classes[1:]:
        kc = c.group_size(k)
        periodic.append(num_groups(c.population, kc) / float(c.period_s))
        extra.append(exc.rate(kc) * c.population)
    return GroupedLoad((gamma0 + math.fsum(extra), *periodic), base_async=gamma0)


def _exponent(load: GroupedLoad, alloc: RaoAllocation, a: Iterable[int]) -> float:
    return math.fsum(load[j] / alloc.num_raos_for(j) for j in sorted(a))


def _check_shapes(load: GroupedLoad, alloc: RaoAllocation):
    if len(load) != alloc.num_classes:
        raise ValueError(f"load has {len(load)} classes but allocation has {alloc.num_classes}")


def collision_prob_per_rao(load: GroupedLoad, alloc: RaoAllocation, l: int) -> float:
    """Collision probability on RAO ``l``, shared by the classes allowed on it."""
    _check_shapes(load, alloc)
    return -math.expm1(-_exponent(load, alloc, alloc.allowed(l)))


def collision_prob_class(load: GroupedLoad, alloc: RaoAllocation, i: int) -> float:
    """Expected collision probability of a class-``i`` request picking uniformly from B_i."""
    _check_shapes(load, alloc)
    alloc._check_class(i)
    groups = alloc._set_counts[i]
    if not groups:
        raise InvariantViolation(f"class {i} has no usable RAO")
    probs = [(n, -math.expm1(-_exponent(load, alloc, a))) for a, n in groups]
    if len(probs) == 1:
        return probs[0][1]
    return math.fsum(n * p for n, p in probs) / alloc.num_raos_for(i)


def collision_probs(load: GroupedLoad, alloc: RaoAllocation) -> list[float]:
    """Per-class collision probabilities for every class."""
    return [collision_prob_class(load, alloc, i) for i in range(alloc.num_classes)]


def collision_intensity(load: GroupedLoad, alloc: RaoAllocation) -> float:
    """Expected number of colliding requests per second in the cell."""
    return math.fsum(p * g for p, g in zip(collision_probs(load, alloc), load.gamma_tilde))


# Closed forms for the two extreme allocations, kept separate from the general
# path so they can serve as cross-checks.

def sharing_collision_prob(load: GroupedLoad, raos: int) -> float:
    return collision_prob_basic(load.total, raos)


def sharing_collision_intensity(load: GroupedLoad, raos: int) -> float:
    return sharing_collision_prob(load, raos) * load.total


def dedication_collision_probs(load: GroupedLoad, per_class_raos: Sequence[int]) -> list[float]:
    return [collision_prob_basic(g, n) for g, n in zip(load.gamma_tilde, per_class_raos)]


def dedication_collision_intensity(load: GroupedLoad, per_class_raos: Sequence[int]) -> float:
    probs = dedication_collision_probs(load, per_class_raos)
    return math.fsum(p * g for p, g in zip(probs, load.gamma_tilde))
