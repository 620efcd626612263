"""Pure transition functions for the base station and grouped devices.

A device node plays the GC or GM role depending on its current state; the
BS keeps the authoritative group table. ``step`` never mutates its input.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from ..cluster import (
    ClusterConstraints, Device, Group, best_group_for, cluster_global, group_diameter, select_gc,
)
from .messages import (
    BS, GLOBAL_TRIGGERS, NEIGHBOUR_BS, FlowTrigger, Kind, Link, Message, TimerExpiry, TimerRequest,
    TriggerKind, dev, device_of,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProtocolConfig:
    d2d_setup_timeout_s: float = 2.0
    gm_loss_wait_s: float = 5.0
    flow_timeout_s: float = 30.0
    report_guard_s: float = 1.0  # BS waits this long past the D2D setup timeout
    keepalive_interval_s: float = 1.0
    keepalive_misses: int = 2
    cellular_latency_s: float = 0.01
    d2d_latency_s: float = 0.005
    d2d_drop_prob: float = 0.0
    disposal: str = "rejoin"  # what the BS does with a GM that lost its D2D link
    congestion_threshold: float = 0.01
    recluster_interval_s: float = 86400.0

    def __post_init__(self):
        if self.disposal not in ("rejoin", "ungroup"):
            raise ValueError(f"disposal must be 'rejoin' or 'ungroup', got {self.disposal!r}")
        if not 0 <= self.d2d_drop_prob <= 1:
            raise ValueError("d2d_drop_prob must lie in [0, 1]")


DEFAULT_CONFIG = ProtocolConfig()


def global_update_trigger(has_groups: bool, congestion_rate: float, since_last_update_s: float,
                          cfg: ProtocolConfig = DEFAULT_CONFIG) -> TriggerKind | None:
    """Which global update (if any) the BS should start right now."""
    if congestion_rate > cfg.congestion_threshold:
        return TriggerKind.EMERGENCY_RECLUSTER if has_groups else TriggerKind.INITIAL_CLUSTERING
    if has_groups and since_last_update_s >= cfg.recluster_interval_s:
        return TriggerKind.REGULAR_RECLUSTER
    return None


class Role(str, enum.Enum):
    UNGROUPED = "ungrouped"
    MEMBER = "member"
    COORDINATOR = "coordinator"


@dataclass(frozen=True)
class Assignment:
    update_id: int
    group_id: int
    gc: int


@dataclass(frozen=True)
class SetupState:
    update_id: int
    group_id: int
    expected: frozenset[int]
    acked: frozenset[int] = frozenset()
    token: int = 0


@dataclass(frozen=True)
class DeviceNode:
    device_id: int
    class_id: int
    position: tuple[float, float]
    role: Role = Role.UNGROUPED
    group_id: int | None = None
    gc_id: int | None = None
    members: frozenset[int] = frozenset()
    online: bool = True
    bs_link: bool = True
    d2d_ok: bool = True
    pending: Assignment | None = None
    setups: Mapping[int, SetupState] = field(default_factory=dict)
    loss_timers: Mapping[int, int] = field(default_factory=dict)
    next_token: int = 0

    @property
    def node_id(self) -> str:
        return dev(self.device_id)

    @property
    def is_active_gc(self) -> bool:
        return self.role is Role.COORDINATOR and self.online and self.bs_link


@dataclass(frozen=True)
class PendingUpdate:
    update_id: int
    kind: str  # global | join | regroup
    group_id: int
    class_id: int
    gc: int
    candidates: frozenset[int]
    recipients: frozenset[int]
    token: int


@dataclass(frozen=True)
class BsNode:
    constraints: ClusterConstraints = field(default_factory=ClusterConstraints)
    registry: Mapping[int, Device] = field(default_factory=dict)
    groups: Mapping[int, Group] = field(default_factory=dict)
    device_group: Mapping[int, int] = field(default_factory=dict)
    pending: Mapping[int, PendingUpdate] = field(default_factory=dict)
    ka_misses: Mapping[int, int] = field(default_factory=dict)
    next_group_id: int = 0
    next_update_id: int = 0
    next_token: int = 0

    node_id = BS

    def role_of(self, device_id: int) -> Role:
        gid = self.device_group.get(device_id)
        if gid is None:
            return Role.UNGROUPED
        return Role.COORDINATOR if self.groups[gid].coordinator_id == device_id else Role.MEMBER


@dataclass(frozen=True)
class StepResult:
    state: Any
    messages: tuple[Message, ...] = ()
    timers: tuple[TimerRequest, ...] = ()
    errors: tuple[str, ...] = ()


class _Out:
    def __init__(self):
        self.messages = []
        self.timers = []

    def send(self, src, dst, kind, link=Link.CELLULAR, **payload):
        self.messages.append(Message(src, dst, kind, payload, link))

    def result(self, state):
        return StepResult(state, tuple(self.messages), tuple(self.timers))


def step(state, inp, now: float, cfg: ProtocolConfig = DEFAULT_CONFIG) -> StepResult:
    """Advance one node by one input (message, timer expiry or flow trigger)."""
    try:
        if isinstance(state, BsNode):
            return _bs_step(state, inp, now, cfg)
        return _device_step(state, inp, now, cfg)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        what = getattr(inp, "kind", None) or getattr(inp, "name", type(inp).__name__)
        return StepResult(state, errors=(f"{state.node_id}: malformed {getattr(what, 'value', what)}: {exc!r}",))


# -- devices ----------------------------------------------------------------

def _ungroup(node: DeviceNode, **changes) -> DeviceNode:
    return replace(node, role=Role.UNGROUPED, group_id=None, gc_id=None, members=frozenset(),
                   setups={}, loss_timers={}, **changes)


def _device_step(node: DeviceNode, inp, now, cfg) -> StepResult:
    out = _Out()
    me = node.node_id
    if isinstance(inp, FlowTrigger):
        return _device_trigger(node, inp, out, cfg)
    if isinstance(inp, TimerExpiry):
        if inp.name == "d2d_setup":
            s = node.setups.get(inp.key)
            if s is None or s.token != inp.token:
                return out.result(node)
            node = replace(node, setups={k: v for k, v in node.setups.items() if k != inp.key})
            out.send(me, BS, Kind.SETUP_REPORT, update_id=s.update_id, group_id=s.group_id,
                     ok=sorted(s.acked), failed=sorted(s.expected - s.acked))
            return out.result(node)
        if inp.name == "gm_loss":
            if node.loss_timers.get(inp.key) != inp.token or node.role is not Role.COORDINATOR:
                return out.result(node)
            node = replace(node, loss_timers={k: v for k, v in node.loss_timers.items() if k != inp.key})
            out.send(me, BS, Kind.GC_LOSS_REPORT, group_id=node.group_id, gm=inp.key)
            return out.result(node)
        log.debug("%s ignoring timer %s", me, inp.name)
        return out.result(node)

    msg: Message = inp
    p = msg.payload
    k = msg.kind
    if k in (Kind.CLUSTERING_RESULT, Kind.GC_RESELECT):
        gc, members = int(p["gc"]), frozenset(int(m) for m in p["members"])
        a = Assignment(int(p["update_id"]), int(p["group_id"]), gc)
        if node.device_id == gc:
            node = _ungroup(node, pending=a)
            if not members:
                out.send(me, BS, Kind.SETUP_REPORT, update_id=a.update_id, group_id=a.group_id, ok=[], failed=[])
                return out.result(node)
            node = _start_setup(node, a, members, out, cfg)
        elif node.device_id in members:
            node = _ungroup(node, pending=a, d2d_ok=False)
        else:
            raise ValueError(f"{me} is not part of group {a.group_id}")
        return out.result(node)
    if k is Kind.JOIN_ASSIGNMENT:
        a = Assignment(int(p["update_id"]), int(p["group_id"]), int(p["gc"]))
        joining = int(p["joining"])
        if node.device_id == a.gc:
            if node.role is not Role.COORDINATOR or node.group_id != a.group_id:
                log.debug("%s: stale join assignment for group %s", me, a.group_id)
                return out.result(node)
            node = _start_setup(node, a, frozenset({joining}), out, cfg)
        elif node.device_id == joining:
            node = _ungroup(node, pending=a, d2d_ok=False)
        return out.result(node)
    if k is Kind.D2D_SETUP_REQUEST:
        a = node.pending
        if a is not None and a.update_id == int(p["update_id"]) and dev(a.gc) == msg.src:
            node = replace(node, d2d_ok=True)
            out.send(me, msg.src, Kind.D2D_SETUP_RESPONSE, Link.D2D, update_id=a.update_id, group_id=a.group_id)
        return out.result(node)
    if k is Kind.D2D_SETUP_RESPONSE:
        uid = int(p["update_id"])
        s = node.setups.get(uid)
        gm = device_of(msg.src)
        if s is None or gm not in s.expected:
            return out.result(node)
        s = replace(s, acked=s.acked | {gm})
        setups = dict(node.setups)
        if s.acked == s.expected:
            del setups[uid]
            out.send(me, BS, Kind.SETUP_REPORT, update_id=uid, group_id=s.group_id, ok=sorted(s.acked), failed=[])
        else:
            setups[uid] = s
        return out.result(replace(node, setups=setups))
    if k is Kind.UPDATE_CONFIRMATION:
        uid, gid, gc = int(p["update_id"]), int(p["group_id"]), int(p["gc"])
        members = frozenset(map(int, p["members"]))
        mine = (node.pending is not None and node.pending.update_id == uid) or node.group_id == gid
        if not mine:
            return out.result(node)
        if node.device_id == gc:
            keep = node.setups if node.role is Role.COORDINATOR else {}
            node = replace(node, role=Role.COORDINATOR, group_id=gid, gc_id=None, members=members,
                           pending=None, setups=keep,
                           loss_timers={m: t for m, t in node.loss_timers.items() if m in members})
        elif node.device_id in members:
            node = replace(node, role=Role.MEMBER, group_id=gid, gc_id=gc, members=frozenset(), pending=None,
                           setups={}, loss_timers={})
        else:
            node = _ungroup(node, pending=None)
        return out.result(node)
    if k is Kind.GM_REMOVAL:
        gid, gm = int(p["group_id"]), int(p["gm"])
        if node.role is Role.COORDINATOR and node.group_id == gid:
            node = replace(node, members=node.members - {gm},
                           loss_timers={m: t for m, t in node.loss_timers.items() if m != gm})
        elif node.device_id == gm and node.role is Role.MEMBER and node.group_id == gid:
            node = _ungroup(node)
        return out.result(node)
    if k is Kind.LEAVE_CONFIRM:
        return out.result(_ungroup(node, online=False, pending=None))
    if k is Kind.HANDOVER_NOTICE:
        # The device leaves for the target cell ungrouped.
        return out.result(_ungroup(node, online=False, pending=None))
    log.debug("%s ignoring %s", me, k)
    return out.result(node)


def _start_setup(node, a: Assignment, members, out, cfg) -> DeviceNode:
    token = node.next_token
    for m in sorted(members):
        out.send(node.node_id, dev(m), Kind.D2D_SETUP_REQUEST, Link.D2D, update_id=a.update_id, group_id=a.group_id)
    out.timers.append(TimerRequest(cfg.d2d_setup_timeout_s, "d2d_setup", a.update_id, token))
    setups = dict(node.setups)
    setups[a.update_id] = SetupState(a.update_id, a.group_id, frozenset(members), frozenset(), token)
    return replace(node, setups=setups, next_token=token + 1)


def _device_trigger(node: DeviceNode, t: FlowTrigger, out: _Out, cfg) -> StepResult:
    me = node.node_id
    k = t.kind
    if k in (TriggerKind.DETACH_GM, TriggerKind.DETACH_GC):
        want = Role.MEMBER if k is TriggerKind.DETACH_GM else Role.COORDINATOR
        if node.role is not want:
            raise ValueError(f"{me} is {node.role.value}, cannot run {k.value}")
        out.send(me, BS, Kind.LEAVE_REQUEST, group_id=node.group_id, switching_off=t.switching_off)
        if t.switching_off:
            node = _ungroup(node, online=False, pending=None)
        return out.result(node)
    if k in (TriggerKind.GM_LOST_D2D_WITH_BS, TriggerKind.GM_LOST_D2D_AND_BS):
        if node.device_id == t.device_id:
            if k is TriggerKind.GM_LOST_D2D_AND_BS:
                return out.result(_ungroup(node, online=False, bs_link=False, d2d_ok=False))
            out.send(me, BS, Kind.D2D_EXCEPTION_REPORT, group_id=node.group_id,
                     position=list(node.position), noise_measure=t.noise_measure)
            return out.result(replace(node, d2d_ok=False))
        if node.role is Role.COORDINATOR and t.device_id in node.members:
            token = node.next_token
            out.timers.append(TimerRequest(cfg.gm_loss_wait_s, "gm_loss", t.device_id, token))
            timers = dict(node.loss_timers)
            timers[t.device_id] = token
            return out.result(replace(node, loss_timers=timers, next_token=token + 1))
        raise ValueError(f"{me} is not involved in the D2D loss of d{t.device_id}")
    if k is TriggerKind.GC_LOST_BS:
        # Without a BS link the device cannot coordinate; members are re-homed by the BS.
        return out.result(_ungroup(node, bs_link=False))
    if k is TriggerKind.DEVICE_JOIN:
        out.send(me, BS, Kind.ATTACH_REQUEST, class_id=node.class_id, position=list(node.position))
        return out.result(node)
    raise ValueError(f"trigger {k.value} is not handled by devices")


# -- base station -----------------------------------------------------------

class _Bs:
    """Mutable scratch copy of a BsNode used inside one transition."""

    def __init__(self, s: BsNode, cfg: ProtocolConfig, out: _Out):
        self.s = s
        self.cfg = cfg
        self.out = out
        self.groups = s.groups
        self.device_group = s.device_group
        self.registry = s.registry
        self.pending = s.pending
        self.ka_misses = s.ka_misses
        self.next_group_id = s.next_group_id
        self.next_update_id = s.next_update_id
        self.next_token = s.next_token
        self._copied = set()

    def _own(self, name):
        if name not in self._copied:
            setattr(self, name, dict(getattr(self, name)))
            self._copied.add(name)
        return getattr(self, name)

    def freeze(self) -> BsNode:
        return replace(self.s, groups=self.groups, device_group=self.device_group, registry=self.registry,
                       pending=self.pending, ka_misses=self.ka_misses, next_group_id=self.next_group_id,
                       next_update_id=self.next_update_id, next_token=self.next_token)

    # table edits
    def put_group(self, g: Group):
        groups, index = self._own("groups"), self._own("device_group")
        old = groups.get(g.group_id)
        if old is not None:
            for d in old.device_ids:
                if index.get(d) == g.group_id:
                    del index[d]
        groups[g.group_id] = g
        for d in g.device_ids:
            index[d] = g.group_id

    def drop_group(self, gid) -> Group | None:
        groups, index = self._own("groups"), self._own("device_group")
        g = groups.pop(gid, None)
        if g is not None:
            for d in g.device_ids:
                if index.get(d) == gid:
                    del index[d]
        return g

    def remove_member(self, gid, gm) -> Group | None:
        g = self.groups.get(gid)
        if g is None or gm not in g.member_ids:
            return None
        ng = replace(g, member_ids=g.member_ids - {gm})
        index = self._own("device_group")
        index.pop(gm, None)
        self._own("groups")[gid] = ng
        return ng

    def deregister(self, d):
        if d in self.registry:
            self._own("registry").pop(d)

    def start_update(self, kind, gid, cid, gc, candidates, recipients) -> int:
        uid, token = self.next_update_id, self.next_token
        self.next_update_id += 1
        self.next_token += 1
        self._own("pending")[uid] = PendingUpdate(uid, kind, gid, cid, gc, frozenset(candidates),
                                                  frozenset(recipients), token)
        self.out.timers.append(TimerRequest(self.cfg.d2d_setup_timeout_s + self.cfg.report_guard_s,
                                            "report_guard", uid, token))
        return uid

    def regroup(self, gid, cid, remaining):
        remaining = frozenset(d for d in remaining if d in self.registry)
        if not remaining:
            return
        gc = select_gc(remaining, self.registry)
        uid = self.start_update("regroup", gid, cid, gc, remaining - {gc}, remaining)
        members = sorted(remaining - {gc})
        for d in sorted(remaining):
            self.out.send(BS, dev(d), Kind.GC_RESELECT, update_id=uid, group_id=gid, gc=gc, members=members)

    def try_join(self, d) -> bool:
        device = self.registry[d]
        if not device.is_periodic:
            return False
        candidates = [g for g in self.groups.values() if g.class_id == device.class_id]
        gid = best_group_for(device, candidates, self.s.constraints, self.registry)
        if gid is None:
            return False
        gc = self.groups[gid].coordinator_id
        uid = self.start_update("join", gid, device.class_id, gc, {d}, {gc, d})
        for target in (gc, d):
            self.out.send(BS, dev(target), Kind.JOIN_ASSIGNMENT, update_id=uid, group_id=gid, gc=gc, joining=d)
        return True

    def confirm(self, uid, gid, gc, members, recipients):
        for d in sorted(recipients):
            if d in self.registry:
                self.out.send(BS, dev(d), Kind.UPDATE_CONFIRMATION, update_id=uid, group_id=gid, gc=gc,
                              members=sorted(members))

    def commit(self, p: PendingUpdate, ok):
        self._own("pending").pop(p.update_id, None)
        ok = frozenset(ok) & p.candidates
        ok = frozenset(d for d in ok if d in self.registry and d not in self.device_group)
        if p.kind == "join":
            g = self.groups.get(p.group_id)
            cap = self.s.constraints.size_cap(p.class_id)
            if g is None or g.coordinator_id != p.gc:
                self.confirm(p.update_id, p.group_id, -1, (), p.candidates)
                return
            if g.size + len(ok) > cap:
                ok = frozenset()
            if ok:
                g = replace(g, member_ids=g.member_ids | ok,
                            diameter_m=_joined_diameter(g, ok, self.registry))
                self.put_group(g)
            self.confirm(p.update_id, g.group_id, g.coordinator_id, g.member_ids, p.recipients)
            return
        # global or regroup: the whole group is (re)created
        if p.gc not in self.registry or p.gc in self.device_group:
            self.confirm(p.update_id, p.group_id, -1, (), p.recipients)
            return
        ids = sorted(ok | {p.gc})
        pts = np.array([self.registry[i].position for i in ids], dtype=float)
        g = Group(p.group_id, p.class_id, p.gc, ok, group_diameter(pts))
        self.put_group(g)
        self.confirm(p.update_id, g.group_id, g.coordinator_id, g.member_ids, p.recipients)


def _joined_diameter(g: Group, new, registry) -> float:
    old = np.array([registry[i].position for i in sorted(g.device_ids) if i in registry], dtype=float)
    add = np.array([registry[i].position for i in sorted(new)], dtype=float)
    if not len(old):
        return 0.0
    d = np.sqrt(((old[:, None, :] - add[None, :, :]) ** 2).sum(-1)).max()
    return float(max(g.diameter_m, d))


def _bs_step(s: BsNode, inp, now, cfg) -> StepResult:
    out = _Out()
    b = _Bs(s, cfg, out)
    if isinstance(inp, FlowTrigger):
        _bs_trigger(b, inp)
        return out.result(b.freeze())
    if isinstance(inp, TimerExpiry):
        if inp.name == "report_guard":
            p = b.pending.get(inp.key)
            if p is not None and p.token == inp.token:
                if p.kind == "join":
                    b.commit(p, ())
                else:
                    b._own("pending").pop(p.update_id)
                    b.confirm(p.update_id, p.group_id, -1, (), p.recipients)
        elif inp.name == "keepalive_miss":
            gc = int(inp.key)
            gid = b.device_group.get(gc)
            if gid is not None and b.groups[gid].coordinator_id == gc:
                misses = b._own("ka_misses")
                misses[gc] = misses.get(gc, 0) + 1
                if misses[gc] >= cfg.keepalive_misses:
                    del misses[gc]
                    g = b.drop_group(gid)
                    b.deregister(gc)
                    b.regroup(gid, g.class_id, g.member_ids)
        else:
            log.debug("bs ignoring timer %s", inp.name)
        return out.result(b.freeze())

    msg: Message = inp
    p = msg.payload
    k = msg.kind
    src = device_of(msg.src)
    if k is Kind.SETUP_REPORT:
        pend = b.pending.get(int(p["update_id"]))
        if pend is None or pend.gc != src:
            log.debug("bs: stale setup report %s", p.get("update_id"))
        else:
            b.commit(pend, (int(d) for d in p["ok"]))
    elif k is Kind.ATTACH_REQUEST:
        reg = b._own("registry")
        reg[src] = Device(src, int(p["class_id"]), _pos(p["position"]))
        b.try_join(src)
    elif k is Kind.HANDOVER_NOTICE and msg.src == NEIGHBOUR_BS:
        d = int(p["device_id"])
        b._own("registry")[d] = Device(d, int(p["class_id"]), _pos(p["position"]))
        b.try_join(d)
    elif k is Kind.LEAVE_REQUEST:
        gid = b.device_group.get(src)
        b.deregister(src)
        if gid is not None:
            g = b.groups[gid]
            if g.coordinator_id == src:
                b.drop_group(gid)
                b.regroup(gid, g.class_id, g.member_ids)
            else:
                b.remove_member(gid, src)
                out.send(BS, dev(g.coordinator_id), Kind.GM_REMOVAL, group_id=gid, gm=src)
        if not p["switching_off"]:
            out.send(BS, msg.src, Kind.LEAVE_CONFIRM, group_id=gid)
    elif k is Kind.D2D_EXCEPTION_REPORT:
        d = src
        if d in b.registry:
            old = b.registry[d]
            b._own("registry")[d] = Device(d, old.class_id, _pos(p["position"]))
        gid = b.device_group.get(d)
        if gid is not None and b.groups[gid].coordinator_id != d:
            b.remove_member(gid, d)
            out.send(BS, dev(b.groups[gid].coordinator_id), Kind.GM_REMOVAL, group_id=gid, gm=d)
        if not (cfg.disposal == "rejoin" and d in b.registry and b.try_join(d)):
            out.send(BS, msg.src, Kind.GM_REMOVAL, group_id=-1 if gid is None else gid, gm=d)
    elif k is Kind.GC_LOSS_REPORT:
        gid, gm = int(p["group_id"]), int(p["gm"])
        if b.remove_member(gid, gm) is not None:
            b.deregister(gm)
        if gid in b.groups:
            out.send(BS, dev(b.groups[gid].coordinator_id), Kind.GM_REMOVAL, group_id=gid, gm=gm)
    else:
        log.debug("bs ignoring %s from %s", k, msg.src)
    return out.result(b.freeze())


def _pos(v) -> tuple[float, float]:
    x, y = v
    if not (math.isfinite(float(x)) and math.isfinite(float(y))):
        raise ValueError("position must be finite")
    return (float(x), float(y))


def _bs_trigger(b: _Bs, t: FlowTrigger):
    k = t.kind
    if k in GLOBAL_TRIGGERS:
        if (k is TriggerKind.INITIAL_CLUSTERING) == bool(b.groups):
            raise ValueError(f"{k.value} is not valid with {len(b.groups)} existing groups")
        b.groups, b.device_group, b.pending = {}, {}, {}
        b._copied |= {"groups", "device_group", "pending"}
        groups = cluster_global(b.registry.values(), b.s.constraints, first_group_id=b.next_group_id)
        for g in groups:
            b.next_group_id = max(b.next_group_id, g.group_id + 1)
            uid = b.start_update("global", g.group_id, g.class_id, g.coordinator_id, g.member_ids, g.device_ids)
            members = sorted(g.member_ids)
            for d in sorted(g.device_ids):
                b.out.send(BS, dev(d), Kind.CLUSTERING_RESULT, update_id=uid, group_id=g.group_id,
                           gc=g.coordinator_id, members=members)
        return
    if k in (TriggerKind.HANDOVER_GM, TriggerKind.HANDOVER_GC):
        d = t.device_id
        gid = b.device_group.get(d)
        if gid is None:
            raise ValueError(f"d{d} is not grouped")
        g = b.groups[gid]
        is_gc = g.coordinator_id == d
        if is_gc != (k is TriggerKind.HANDOVER_GC):
            raise ValueError(f"d{d} has the wrong role for {k.value}")
        info = b.registry[d]
        b.deregister(d)
        b.out.send(BS, dev(d), Kind.HANDOVER_NOTICE, device_id=d, direction="out")
        b.out.send(BS, NEIGHBOUR_BS, Kind.HANDOVER_NOTICE, device_id=d, class_id=info.class_id,
                   position=list(info.position))
        if is_gc:
            b.drop_group(gid)
            b.regroup(gid, g.class_id, g.member_ids)
        else:
            b.remove_member(gid, d)
            b.out.send(BS, dev(g.coordinator_id), Kind.GM_REMOVAL, group_id=gid, gm=d)
        return
    raise ValueError(f"trigger {k.value} is not handled by the BS")


def timer_live(state, exp: TimerExpiry) -> bool:
    """False when ``exp`` was superseded and stepping it would change nothing."""
    if isinstance(state, BsNode):
        if exp.name == "report_guard":
            p = state.pending.get(exp.key)
            return p is not None and p.token == exp.token
        return True
    if exp.name == "d2d_setup":
        s = state.setups.get(exp.key)
        return s is not None and s.token == exp.token
    if exp.name == "gm_loss":
        return state.loss_timers.get(exp.key) == exp.token and state.role is Role.COORDINATOR
    return True


def bs_violations(s: BsNode, prev: BsNode | None = None) -> list[str]:
    """Safety problems in a BS table: duplicated devices or broken indexes.

    With ``prev`` only groups whose records changed since ``prev`` are
    scanned; a size count over all groups still catches a device listed twice.
    """
    out = []
    index = s.device_group
    if prev is None:
        gids = sorted(s.groups)
        before = set(index)
    elif prev.groups is s.groups and prev.device_group is index:
        return out
    else:
        gids = sorted(g for g, v in s.groups.items() if prev.groups.get(g) is not v)
        before = set()
        for g, v in prev.groups.items():
            if s.groups.get(g) is not v:
                before |= v.device_ids
    seen: set[int] = set()
    for gid in gids:
        g = s.groups[gid]
        ids = g.device_ids
        if g.group_id != gid:
            out.append(f"group {gid} stored under wrong key")
        if g.coordinator_id in g.member_ids:
            out.append(f"group {gid}: coordinator is also a member")
        out.extend(f"d{d} is in group {gid} and another group" for d in sorted(ids & seen))
        seen |= ids
        out.extend(f"index for d{d} is {index.get(d)}, expected {gid}" for d in sorted(d for d in ids if index.get(d) != gid))
    for d in sorted(before - seen):
        gid = index.get(d)
        g = s.groups.get(gid)
        if gid is not None and (g is None or (d != g.coordinator_id and d not in g.member_ids)):
            out.append(f"index lists d{d} in group {gid} but the table does not")
    listed = sum(g.size for g in s.groups.values())
    if listed != len(index):
        out.append(f"groups list {listed} device slots but the index holds {len(index)}")
    return out
