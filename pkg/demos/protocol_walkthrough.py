"""Cluster a small cell, then run a few management flows and print their traces."""

import sys

from mmtc_grouping.cluster import ClusterConstraints, Device, cluster_global
from mmtc_grouping.protocol import DropRule, FlowTrigger, TriggerKind, World, count_async_ra, run_flow, write_trace

devices = [Device(i, 1, (float(3 * (i % 4)), float(3 * (i // 4)))) for i in range(8)]
cons = ClusterConstraints(max_diameter_m=50.0, max_group_size={1: 4})

out = run_flow(World.fresh(devices, cons), FlowTrigger(TriggerKind.INITIAL_CLUSTERING),
               faults=[DropRule(kind="D2DSetupRequest", dst="d5")])
print(f"initial clustering: {len(out.world.bs.groups)} groups, failed setups {sorted(out.failed_setups)}")
world = World.from_groups(devices, cluster_global(devices, cons), cons)
gm = min(m for g in world.bs.groups.values() for m in g.member_ids)

for trig in (FlowTrigger(TriggerKind.GM_LOST_D2D_WITH_BS, device_id=gm, noise_measure=0.4),
             FlowTrigger(TriggerKind.GM_LOST_D2D_AND_BS, device_id=gm),
             FlowTrigger(TriggerKind.DETACH_GM, device_id=gm, switching_off=True)):
    res = run_flow(world, trig)
    print(f"\n{trig.kind.value}: complete={res.complete}, RA attempts={count_async_ra(res.trace)}")
    write_trace(res.trace, sys.stdout)
