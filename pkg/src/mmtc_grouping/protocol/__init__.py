"""Group management protocol: messages, node state machines and flow harness."""

from .harness import (
    DropRule, FlowOutcome, InvalidTrigger, World, consistency_violations, load_faults, run_flow, validate_trigger,
)
from .messages import (
    BS, NEIGHBOUR_BS, FlowTrigger, Kind, Link, Message, TimerExpiry, TimerRequest, TraceEvent, TriggerKind,
    count_async_ra, dev, device_of, payload_digest, write_trace,
)
from .nodes import (
    DEFAULT_CONFIG, BsNode, DeviceNode, ProtocolConfig, Role, StepResult, bs_violations, global_update_trigger,
    step, timer_live,
)
