"""Grouped random-access collision models, simulation, clustering and group-management protocol."""

from .model import (
    APERIODIC, UNLIMITED_GROUP_SIZE, DeviceClass, ExceptionModel, GroupedLoad, InvariantViolation, RaoAllocation,
    collision_intensity, collision_prob_basic, collision_prob_class, collision_prob_per_rao, collision_probs,
    grouped_load, ungrouped_load,
)
from .scenario import (
    Scenario, full_dedication_alloc, full_sharing_alloc, mixed_alloc, place_devices, random_mixed_alloc,
    table1_mixed_alloc, table1_preset,
)

__version__ = "0.1.0"
