"""Deterministic event loop that drives protocol flows over a simulated network.

Cellular links are lossless with fixed latency; D2D links may drop messages
at random or according to a fault schedule. Random access attempts are
recorded whenever a device without an open connection (and without the
scheduled link of an active coordinator) sends or is paged over cellular.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..cluster import ClusterConstraints, Device, Group
from .messages import (
    BS, GLOBAL_TRIGGERS, NEIGHBOUR_BS, FlowTrigger, Kind, Link, Message, TimerExpiry, TraceEvent, TriggerKind,
    dev, device_of,
)
from .nodes import DEFAULT_CONFIG, BsNode, DeviceNode, ProtocolConfig, Role, bs_violations, step, timer_live


class InvalidTrigger(ValueError):
    pass


@dataclass(frozen=True)
class DropRule:
    """Drop the first ``count`` messages matching every given field."""

    kind: str | None = None
    src: str | None = None
    dst: str | None = None
    link: str | None = None
    count: int = 1

    def matches(self, m: Message) -> bool:
        return ((self.kind is None or m.kind.value == self.kind) and (self.src is None or m.src == self.src)
                and (self.dst is None or m.dst == self.dst) and (self.link is None or m.link.value == self.link))

    @classmethod
    def from_dict(cls, d) -> "DropRule":
        return cls(d.get("kind"), d.get("src"), d.get("dst"), d.get("link"), int(d.get("count", 1)))


def load_faults(path) -> list[DropRule]:
    with open(path) as f:
        data = json.load(f)
    rules = data.get("drop", []) if isinstance(data, dict) else data
    return [DropRule.from_dict(r) for r in rules]


@dataclass
class World:
    bs: BsNode
    devices: dict[int, DeviceNode]
    time: float = 0.0

    @classmethod
    def fresh(cls, devices: Iterable[Device], constraints: ClusterConstraints | None = None) -> "World":
        """Every device attached and ungrouped; no groups yet."""
        return cls.from_groups(devices, (), constraints)

    @classmethod
    def from_groups(cls, devices: Iterable[Device], groups: Iterable[Group],
                    constraints: ClusterConstraints | None = None, offline: Iterable[int] = ()) -> "World":
        """A quiescent world in which ``groups`` are already confirmed."""
        devices = list(devices)
        offline = set(offline)
        constraints = constraints or ClusterConstraints()
        groups = list(groups)
        registry = {d.device_id: Device(d.device_id, d.class_id, tuple(d.position))
                    for d in devices if d.device_id not in offline}
        nodes = {d.device_id: DeviceNode(d.device_id, d.class_id, tuple(d.position), online=d.device_id not in offline)
                 for d in devices}
        table, index = {}, {}
        for g in groups:
            table[g.group_id] = g
            nodes[g.coordinator_id] = replace(nodes[g.coordinator_id], role=Role.COORDINATOR, group_id=g.group_id,
                                              members=g.member_ids)
            index[g.coordinator_id] = g.group_id
            for m in g.member_ids:
                nodes[m] = replace(nodes[m], role=Role.MEMBER, group_id=g.group_id, gc_id=g.coordinator_id)
                index[m] = g.group_id
        nxt = max((g.group_id for g in groups), default=-1) + 1
        bs = BsNode(constraints=constraints, registry=registry, groups=table, device_group=index, next_group_id=nxt)
        world = cls(bs, nodes)
        problems = bs_violations(bs)
        if problems:
            raise ValueError("inconsistent world: " + "; ".join(problems))
        return world

    def copy(self) -> "World":
        return World(self.bs, dict(self.devices), self.time)

    def node(self, node_id: str):
        if node_id == BS:
            return self.bs
        return self.devices[device_of(node_id)]

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "constraints": _constraints_to_dict(self.bs.constraints),
            "devices": [{"device_id": n.device_id, "class_id": n.class_id, "x": n.position[0], "y": n.position[1],
                         "online": n.online} for _, n in sorted(self.devices.items())],
            "groups": [g.to_dict() for _, g in sorted(self.bs.groups.items())],
        }

    @classmethod
    def from_dict(cls, d) -> "World":
        devices = [Device(int(x["device_id"]), int(x["class_id"]), (float(x["x"]), float(x["y"])))
                   for x in d.get("devices", [])]
        offline = [int(x["device_id"]) for x in d.get("devices", []) if not x.get("online", True)]
        groups = [Group.from_dict(g) for g in d.get("groups", [])]
        w = cls.from_groups(devices, groups, _constraints_from_dict(d.get("constraints", {})), offline)
        w.time = float(d.get("time", 0.0))
        return w


def _constraints_to_dict(c: ClusterConstraints) -> dict:
    out = {"max_group_size": {str(k): v for k, v in sorted(c.max_group_size.items())}}
    if math.isfinite(c.max_diameter_m):
        out["max_diameter_m"] = c.max_diameter_m
    if c.default_group_size != ClusterConstraints().default_group_size:
        out["default_group_size"] = c.default_group_size
    return out


def _constraints_from_dict(d) -> ClusterConstraints:
    kw = {}
    if "max_diameter_m" in d and d["max_diameter_m"] is not None:
        kw["max_diameter_m"] = float(d["max_diameter_m"])
    if "default_group_size" in d:
        kw["default_group_size"] = int(d["default_group_size"])
    return ClusterConstraints(max_group_size={int(k): int(v) for k, v in d.get("max_group_size", {}).items()}, **kw)


def validate_trigger(world: World, t: FlowTrigger) -> None:
    """Raise ``InvalidTrigger`` if ``t`` cannot start in ``world``."""
    bs = world.bs
    k = t.kind
    if k is TriggerKind.INITIAL_CLUSTERING:
        if bs.groups:
            raise InvalidTrigger("initial clustering requires a cell without groups")
        return
    if k in GLOBAL_TRIGGERS:
        if not bs.groups:
            raise InvalidTrigger(f"{k.value} requires existing groups")
        return
    d = t.device_id
    if d is None:
        raise InvalidTrigger(f"{k.value} needs a device id")
    node = world.devices.get(d)
    if k is TriggerKind.DEVICE_JOIN:
        if node is not None and node.online and d in bs.registry:
            raise InvalidTrigger(f"d{d} is already attached")
        if node is None and (t.class_id is None or t.position is None):
            raise InvalidTrigger("a new device needs class_id and position")
        return
    if node is None or not node.online:
        raise InvalidTrigger(f"d{d} is not present")
    want = Role.MEMBER if k in (TriggerKind.DETACH_GM, TriggerKind.GM_LOST_D2D_WITH_BS, TriggerKind.GM_LOST_D2D_AND_BS,
                                TriggerKind.HANDOVER_GM) else Role.COORDINATOR
    if bs.role_of(d) is not want or node.role is not want:
        raise InvalidTrigger(f"d{d} is not a {want.value} (BS: {bs.role_of(d).value}, node: {node.role.value})")
    if want is Role.COORDINATOR and not node.bs_link:
        raise InvalidTrigger(f"d{d} has no BS link")


@dataclass
class FlowOutcome:
    world: World
    trace: list[TraceEvent]
    complete: bool
    ra_attempts: int = 0
    safety_violations: list[str] = field(default_factory=list)
    d2d_violations: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    failed_setups: set[int] = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return self.complete and not self.safety_violations and not self.d2d_violations


class _Loop:
    def __init__(self, world: World, cfg: ProtocolConfig, faults: Sequence[DropRule], rng, start: float,
                 check_safety: bool):
        self.w = world
        self.cfg = cfg
        self.rules = [[r, r.count] for r in faults]
        self.rng = rng
        self.heap = []
        self.seq = itertools.count()
        self.trace: list[TraceEvent] = []
        self.connected: set[int] = set()
        self.out = FlowOutcome(world, self.trace, False)
        self.start = start
        self.check_safety = check_safety

    def push(self, t, what, *data):
        heapq.heappush(self.heap, (t, next(self.seq), what, data))

    def record(self, t, src, dst, kind, link, payload=None):
        self.trace.append(TraceEvent(t, src, dst, kind, link, payload or {}))

    def _needs_ra(self, d: int) -> bool:
        if d in self.connected:
            return False
        if self.w.devices[d].is_active_gc:
            # the coordinator's scheduled link stays usable for the rest of the flow
            self.connected.add(d)
            return False
        return True

    def _ra(self, t, d, reason):
        self.connected.add(d)
        self.record(t, dev(d), BS, "RA", Link.CELLULAR.value, {"reason": reason})
        self.out.ra_attempts += 1

    def send(self, t, m: Message):
        if m.link is Link.D2D:
            problem = _d2d_problem(self.w, m)
            if problem:
                self.out.d2d_violations.append(f"t={t:.3f} {problem}")
        src = device_of(m.src)
        if m.link is Link.CELLULAR and src is not None:
            if not self.w.devices[src].bs_link:
                self.record(t, m.src, m.dst, "Drop:" + m.kind.value, m.link.value, m.payload)
                return
            if self._needs_ra(src):
                self._ra(t, src, m.kind.value)
        if self._dropped(m):
            self.record(t, m.src, m.dst, "Drop:" + m.kind.value, m.link.value, m.payload)
            if m.kind in (Kind.D2D_SETUP_REQUEST, Kind.D2D_SETUP_RESPONSE):
                gm = device_of(m.dst if m.kind is Kind.D2D_SETUP_REQUEST else m.src)
                self.out.failed_setups.add(gm)
            return
        lat = self.cfg.cellular_latency_s if m.link is Link.CELLULAR else self.cfg.d2d_latency_s
        self.push(t + lat, "msg", m)

    def _dropped(self, m: Message) -> bool:
        for rule in self.rules:
            if rule[1] > 0 and rule[0].matches(m):
                rule[1] -= 1
                return True
        if m.link is Link.D2D and self.cfg.d2d_drop_prob > 0:
            return bool(self.rng.random() < self.cfg.d2d_drop_prob)
        return False

    def apply(self, t, node_id, inp):
        node = self.w.node(node_id)
        res = step(node, inp, t, self.cfg)
        if res.errors:
            for e in res.errors:
                self.record(t, node_id, node_id, "ProtocolError", "local", {"error": e})
            self.out.errors.extend(res.errors)
        if node_id == BS:
            self.w.bs = res.state
            if self.check_safety:
                self.out.safety_violations.extend(f"t={t:.3f} {v}" for v in bs_violations(res.state, node))
        else:
            self.w.devices[device_of(node_id)] = res.state
        for tr in res.timers:
            self.push(t + tr.delay, "timer", node_id, TimerExpiry(tr.name, tr.key, tr.token))
        for m in res.messages:
            self.send(t, m)

    def deliver(self, t, m: Message):
        d = device_of(m.dst)
        if m.dst == NEIGHBOUR_BS:
            self.record(t, m.src, m.dst, m.kind.value, m.link.value, m.payload)
            return
        if d is not None:
            node = self.w.devices.get(d)
            if node is None or not node.online or (m.link is Link.CELLULAR and not node.bs_link):
                self.record(t, m.src, m.dst, "Drop:" + m.kind.value, m.link.value, m.payload)
                return
            if m.link is Link.CELLULAR and self._needs_ra(d):
                self._ra(t, d, m.kind.value)
        self.record(t, m.src, m.dst, m.kind.value, m.link.value, m.payload)
        self.apply(t, m.dst, m)

    def run(self):
        deadline = self.start + self.cfg.flow_timeout_s
        now = self.start
        while self.heap:
            t, _, what, data = self.heap[0]
            if t > deadline:
                break
            heapq.heappop(self.heap)
            if what == "timer" and not timer_live(self.w.node(data[0]), data[1]):
                continue  # cancelled timers neither show in the trace nor hold the flow open
            now = t
            if what == "msg":
                self.deliver(t, data[0])
            elif what == "timer":
                node_id, exp = data
                node = self.w.node(node_id)
                if node_id != BS and not node.online:
                    continue
                self.record(t, node_id, node_id, "Timer:" + exp.name, "local", {"key": exp.key})
                self.apply(t, node_id, exp)
            elif what == "trigger":
                node_id, trig = data
                self.record(t, node_id, node_id, "Trigger:" + trig.kind.value, "local",
                            {"device_id": trig.device_id})
                self.apply(t, node_id, trig)
        self.out.complete = not self.heap
        self.w.time = now if self.out.complete else deadline
        return self.out


def _d2d_problem(w: World, m: Message) -> str | None:
    a, b = device_of(m.src), device_of(m.dst)
    na, nb = w.devices.get(a), w.devices.get(b)
    if na is None or nb is None:
        return f"D2D message {m.kind.value} between unknown nodes {m.src}->{m.dst}"
    if m.kind is Kind.D2D_SETUP_REQUEST:
        if any(b in s.expected for s in na.setups.values()):
            return None
    elif m.kind is Kind.D2D_SETUP_RESPONSE:
        if na.pending is not None and na.pending.gc == b:
            return None
    elif (na.role is Role.COORDINATOR and b in na.members) or (na.role is Role.MEMBER and na.gc_id == b):
        return None
    return f"D2D {m.kind.value} {m.src}->{m.dst} outside a GC/GM pair"


def run_flow(world: World, trigger: FlowTrigger, cfg: ProtocolConfig = DEFAULT_CONFIG,
             faults: Sequence[DropRule] = (), seed: int = 0, start: float | None = None,
             rng: np.random.Generator | None = None, check_safety: bool = True) -> FlowOutcome:
    """Run one flow from ``trigger`` until quiescence or the global flow timeout.

    The input world is not modified; the outcome holds the resulting world.
    """
    validate_trigger(world, trigger)
    w = world.copy()
    t0 = w.time if start is None else start
    loop = _Loop(w, cfg, faults, rng if rng is not None else np.random.default_rng(seed), t0, check_safety)
    k = trigger.kind
    d = trigger.device_id
    if k in GLOBAL_TRIGGERS or k in (TriggerKind.HANDOVER_GM, TriggerKind.HANDOVER_GC):
        if d is not None:
            loop.connected.add(d)  # a device in handover is already in connected mode
        loop.push(t0, "trigger", BS, trigger)
    elif k is TriggerKind.DEVICE_JOIN:
        node = w.devices.get(d)
        cid = trigger.class_id if trigger.class_id is not None else node.class_id
        pos = tuple(trigger.position) if trigger.position is not None else node.position
        w.devices[d] = DeviceNode(d, cid, (float(pos[0]), float(pos[1])))
        if trigger.join_mode == "attach":
            loop.push(t0, "trigger", dev(d), trigger)
        else:
            loop.send(t0, Message(NEIGHBOUR_BS, BS, Kind.HANDOVER_NOTICE,
                                  {"device_id": d, "class_id": cid, "position": list(pos)}))
    elif k in (TriggerKind.GM_LOST_D2D_WITH_BS, TriggerKind.GM_LOST_D2D_AND_BS):
        gc = w.bs.groups[w.bs.device_group[d]].coordinator_id
        loop.push(t0, "trigger", dev(d), trigger)
        loop.push(t0, "trigger", dev(gc), trigger)
    elif k is TriggerKind.GC_LOST_BS:
        loop.push(t0, "trigger", dev(d), trigger)
        for i in range(1, cfg.keepalive_misses + 1):
            loop.push(t0 + i * cfg.keepalive_interval_s, "timer", BS, TimerExpiry("keepalive_miss", d))
    else:
        loop.push(t0, "trigger", dev(d), trigger)
    return loop.run()


def consistency_violations(world: World, group_ids: Iterable[int] | None = None,
                           device_ids: Iterable[int] | None = None) -> list[str]:
    """Disagreements between the BS table and device views.

    With no arguments the whole world is checked, including that no pending
    work remains. Otherwise only the given groups and devices are checked.
    """
    bs = world.bs
    out = []
    full = group_ids is None and device_ids is None
    gids = sorted(bs.groups) if group_ids is None else [g for g in group_ids if g in bs.groups]
    for gid in gids:
        g = bs.groups[gid]
        gc = world.devices.get(g.coordinator_id)
        if gc is None or not gc.is_active_gc or gc.group_id != gid:
            out.append(f"group {gid}: d{g.coordinator_id} does not act as its coordinator")
        elif gc.members != g.member_ids:
            out.append(f"group {gid}: GC view {sorted(gc.members)} != BS {sorted(g.member_ids)}")
        for m in g.member_ids:
            n = world.devices.get(m)
            if n is None or not n.online or n.role is not Role.MEMBER or n.group_id != gid or n.gc_id != g.coordinator_id:
                out.append(f"group {gid}: d{m} is not a member pointing at d{g.coordinator_id}")
    ids = sorted(world.devices) if full else sorted(device_ids or ())
    for d in ids:
        n = world.devices[d]
        if not n.online or not n.bs_link:
            continue
        gid = bs.device_group.get(d)
        if n.role is Role.UNGROUPED:
            if gid is not None:
                out.append(f"d{d} is ungrouped but the BS lists it in group {gid}")
        elif gid is None or gid != n.group_id:
            out.append(f"d{d} claims group {n.group_id} but the BS has {gid}")
        if full and (n.pending is not None or n.setups or n.loss_timers):
            out.append(f"d{d} still has pending work")
    if full and bs.pending:
        out.append(f"BS has {len(bs.pending)} pending updates")
    return out
