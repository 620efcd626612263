"""Message, timer, trigger and trace records shared by the protocol machines."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

BS = "bs"
NEIGHBOUR_BS = "nbr"


def dev(device_id: int) -> str:
    return f"d{device_id}"


def device_of(node_id: str) -> int | None:
    if node_id.startswith("d") and node_id[1:].isdigit():
        return int(node_id[1:])
    return None


class Kind(str, enum.Enum):
    CLUSTERING_RESULT = "ClusteringResult"
    D2D_SETUP_REQUEST = "D2DSetupRequest"
    D2D_SETUP_RESPONSE = "D2DSetupResponse"
    SETUP_REPORT = "SetupReport"
    UPDATE_CONFIRMATION = "UpdateConfirmation"
    JOIN_ASSIGNMENT = "JoinAssignment"
    LEAVE_REQUEST = "LeaveRequest"
    LEAVE_CONFIRM = "LeaveConfirm"
    GM_REMOVAL = "GmRemoval"
    D2D_EXCEPTION_REPORT = "D2DExceptionReport"
    GC_LOSS_REPORT = "GcLossReport"
    GC_RESELECT = "GcReselect"
    HANDOVER_NOTICE = "HandoverNotice"
    ATTACH_REQUEST = "AttachRequest"


class Link(str, enum.Enum):
    CELLULAR = "cellular"
    D2D = "d2d"


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: Kind
    payload: Mapping[str, Any] = field(default_factory=dict)
    link: Link = Link.CELLULAR


@dataclass(frozen=True)
class TimerRequest:
    """Ask the harness to deliver a ``TimerExpiry`` after ``delay`` seconds."""

    delay: float
    name: str
    key: Any
    token: int


@dataclass(frozen=True)
class TimerExpiry:
    name: str
    key: Any
    token: int = -1


class TriggerKind(str, enum.Enum):
    INITIAL_CLUSTERING = "InitialClustering"
    EMERGENCY_RECLUSTER = "EmergencyRecluster"
    REGULAR_RECLUSTER = "RegularRecluster"
    DEVICE_JOIN = "DeviceJoin"
    DETACH_GM = "DetachGM"
    DETACH_GC = "DetachGC"
    GM_LOST_D2D_WITH_BS = "GmLostD2dWithBs"
    GM_LOST_D2D_AND_BS = "GmLostD2dAndBs"
    GC_LOST_BS = "GcLostBs"
    HANDOVER_GM = "HandoverGM"
    HANDOVER_GC = "HandoverGC"


GLOBAL_TRIGGERS = (TriggerKind.INITIAL_CLUSTERING, TriggerKind.EMERGENCY_RECLUSTER, TriggerKind.REGULAR_RECLUSTER)


@dataclass(frozen=True)
class FlowTrigger:
    kind: TriggerKind
    device_id: int | None = None
    switching_off: bool = False
    join_mode: str = "attach"  # or "handover"
    class_id: int | None = None  # joining device context
    position: tuple[float, float] | None = None
    noise_measure: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TriggerKind(self.kind))
        if self.join_mode not in ("attach", "handover"):
            raise ValueError(f"join_mode must be 'attach' or 'handover', got {self.join_mode!r}")


def _plain(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (frozenset, set)):
        return sorted(_plain(o) for o in obj)
    if isinstance(obj, (list, tuple)):
        return [_plain(o) for o in obj]
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def payload_digest(payload: Mapping[str, Any]) -> str:
    blob = json.dumps(_plain(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TraceEvent:
    """One line of a protocol trace.

    ``kind`` is the message kind for deliveries, ``Drop:<kind>`` for lost
    messages, ``Timer:<name>`` for timer expiries, ``RA`` for a random-access
    attempt and ``ProtocolError`` for rejected input.
    """

    t: float
    src: str
    dst: str
    kind: str
    link: str
    payload: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def digest(self) -> str:
        return payload_digest(self.payload)

    def to_json(self) -> str:
        # Field order is part of the trace format.
        return json.dumps({"t": round(self.t, 9), "src": self.src, "dst": self.dst, "kind": self.kind,
                           "link": self.link, "payload_digest": self.digest})


def write_trace(events, fh) -> None:
    for e in events:
        fh.write(e.to_json())
        fh.write("\n")


def count_async_ra(trace, reason: str | None = None) -> int:
    """Random-access attempts recorded in ``trace``, optionally by triggering message kind."""
    return sum(1 for e in trace if e.kind == "RA" and (reason is None or e.payload.get("reason") == reason))
