"""Monte Carlo random-access simulator.

Time is cut into 1-second frames of L RAOs. Every attempt draws one RAO
uniformly from the RAOs its class may use; an attempt collides when another
attempt picked the same RAO in the same frame. Collided attempts are dropped
unless retry mode is switched on.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cluster import ClusterConstraints, Group, cluster_global
from .model import (
    ExceptionModel, GroupedLoad, InvariantViolation, RaoAllocation, collision_probs, grouped_load,
    num_groups, ungrouped_load,
)
from .protocol import FlowTrigger, ProtocolConfig, TriggerKind, World, consistency_violations, run_flow
from .scenario import Scenario, place_devices

STREAMS = ("arrivals", "rao", "exceptions", "faults")
CSV_FIELDS = ("k", "alpha", "class_id", "attempts", "collisions", "rate", "analytic_rate", "stderr")


class SimEventKind(str, enum.Enum):
    GROUP_RA_DUE = "GroupRaDue"
    ASYNC_RA_ARRIVAL = "AsyncRaArrival"
    D2D_EXCEPTION = "D2dException"
    TIMER_EXPIRY = "TimerExpiry"
    MESSAGE_DELIVERY = "MessageDelivery"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: SimEventKind
    subject: int
    data: tuple = ()


class EventQueue:
    """Time-ordered queue; events at equal times pop in insertion order."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, ev: SimEvent) -> None:
        heapq.heappush(self._heap, (ev.time, next(self._seq), ev))

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[2]

    def peek_time(self) -> float:
        return self._heap[0][0]

    def __len__(self):
        return len(self._heap)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, so toggling one feature leaves the others untouched."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


@dataclass
class RaStats:
    duration_s: float
    attempts: np.ndarray
    collisions: np.ndarray
    async_attempts: int = 0
    exception_attempts: int = 0

    def __post_init__(self):
        self.attempts = np.asarray(self.attempts, dtype=np.int64)
        self.collisions = np.asarray(self.collisions, dtype=np.int64)
        if np.any(self.collisions > self.attempts):
            raise InvariantViolation("more collisions than attempts")

    @property
    def attempts_per_class(self) -> list[int]:
        return self.attempts.tolist()

    @property
    def collisions_per_class(self) -> list[int]:
        return self.collisions.tolist()

    @property
    def successes(self) -> np.ndarray:
        return self.attempts - self.collisions

    @property
    def empirical_collision_rate_per_class(self) -> list[float]:
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.collisions / self.attempts
        return [float(x) if a else math.nan for x, a in zip(r, self.attempts)]

    @property
    def empirical_collision_intensity(self) -> float:
        return float(self.collisions.sum()) / self.duration_s

    @property
    def async_ra_rate_measured(self) -> float:
        return self.async_attempts / self.duration_s

    @property
    def exception_ra_rate_measured(self) -> float:
        return self.exception_attempts / self.duration_s

    def merge(self, other: "RaStats") -> "RaStats":
        """Pool two independent runs (counts and durations add)."""
        return RaStats(self.duration_s + other.duration_s, self.attempts + other.attempts,
                       self.collisions + other.collisions, self.async_attempts + other.async_attempts,
                       self.exception_attempts + other.exception_attempts)

    def summary(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "attempts_per_class": self.attempts_per_class,
            "collisions_per_class": self.collisions_per_class,
            "empirical_collision_rate_per_class": [None if math.isnan(r) else r
                                                   for r in self.empirical_collision_rate_per_class],
            "empirical_collision_intensity": self.empirical_collision_intensity,
            "async_ra_rate_measured": self.async_ra_rate_measured,
            "exception_ra_rate_measured": self.exception_ra_rate_measured,
        }


def standard_error(p: float, n: int) -> float:
    """Binomial standard error; ignores that collisions come in pairs."""
    return math.sqrt(p * (1 - p) / n) if n else math.inf


def attempt_variances(load: GroupedLoad, alloc: RaoAllocation) -> list[float]:
    """Per-attempt variance of the collision indicator, pairing included.

    Under Poisson traffic an RAO-frame holds X ~ Poi(a) attempts of class i
    and Y ~ Poi(mu) others. The class-i rate estimator C/n has variance
    sum_l Var(X 1[X+Y>=2] - p X) / (gamma_i n); a collision between two
    class-i attempts moves C by two, which the binomial formula misses.
    The result v_i plays the role of p(1-p): ``se = sqrt(v_i / n)``.
    """
    per_rao = [load[j] / alloc.num_raos_for(j) for j in range(alloc.num_classes)]
    p_all = collision_probs(load, alloc)
    out = []
    for i in range(alloc.num_classes):
        g, p = load[i], p_all[i]
        if g == 0:
            out.append(p * (1 - p))
            continue
        a = per_rao[i]
        v = 0.0
        for allowed, count in alloc._set_counts[i]:
            lam = math.fsum(per_rao[j] for j in allowed)
            hit = a * -math.expm1(-lam)
            ex2 = a + a * a - a * math.exp(-lam)
            mean = hit - p * a
            v += count * ((1 - 2 * p) * ex2 + p * p * (a + a * a) - mean * mean)
        out.append(v / g)
    return out


def clustered_standard_error(v: float, n: int) -> float:
    return math.sqrt(v / n) if n else math.inf


def resolve_collisions(frames: np.ndarray, raos: np.ndarray) -> np.ndarray:
    """Boolean mask of attempts sharing their (frame, RAO) slot with another attempt."""
    if len(frames) == 0:
        return np.zeros(0, dtype=bool)
    key = frames.astype(np.int64) * (int(raos.max()) + 1) + raos.astype(np.int64)
    _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    return counts[inverse] >= 2


def _pick_raos(classes: np.ndarray, alloc: RaoAllocation, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(len(classes), dtype=np.int64)
    for c in range(alloc.num_classes):
        idx = np.flatnonzero(classes == c)
        if not len(idx):
            continue
        b = np.asarray(alloc.raos_for(c), dtype=np.int64)
        if not len(b):
            raise InvariantViolation(f"class {c} has no usable RAO")
        out[idx] = b[rng.integers(0, len(b), size=len(idx))]
    return out


def _periodic_times(sources: int, period: float, duration: float, rng) -> np.ndarray:
    """One attempt per source per period, at a uniform time inside each period."""
    if sources == 0:
        return np.zeros(0)
    periods = math.ceil(duration / period)
    t = (np.arange(periods)[:, None] + rng.random((periods, sources))) * period
    t = t.ravel()
    return t[t < duration]


def _poisson_times(rate: float, duration: float, rng) -> np.ndarray:
    n = rng.poisson(rate * duration) if rate > 0 else 0
    return np.sort(rng.random(n) * duration)


@dataclass
class _Attempts:
    times: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    exception: list = field(default_factory=list)

    def add(self, t, cls, exception=False):
        t = np.asarray(t, dtype=float)
        self.times.append(t)
        self.classes.append(np.full(len(t), cls, dtype=np.int64))
        self.exception.append(np.full(len(t), exception, dtype=bool))

    def arrays(self):
        if not self.times:
            return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
        return np.concatenate(self.times), np.concatenate(self.classes), np.concatenate(self.exception)


def _tally(att: _Attempts, alloc: RaoAllocation, duration: float, rng_rao, retry: bool,
           max_retries: int, backoff_frames: int, rng_retry) -> RaStats:
    times, classes, exc = att.arrays()
    m = alloc.num_classes
    if retry:
        collided, classes, exc = _resolve_with_retries(times, classes, exc, alloc, rng_rao, max_retries,
                                                       backoff_frames, rng_retry)
    else:
        raos = _pick_raos(classes, alloc, rng_rao)
        collided = resolve_collisions(np.floor(times), raos)
    attempts = np.bincount(classes, minlength=m)
    collisions = np.bincount(classes[collided], minlength=m)
    return RaStats(duration, attempts, collisions, int((classes == 0).sum()), int(exc.sum()))


def _resolve_with_retries(times, classes, exc, alloc, rng_rao, max_retries, backoff_frames, rng_retry):
    """Frame-by-frame resolution where collided attempts come back after a random backoff."""
    q = EventQueue()
    for f, c, e in zip(np.floor(times), classes, exc):
        kind = SimEventKind.ASYNC_RA_ARRIVAL if c == 0 else SimEventKind.GROUP_RA_DUE
        q.push(SimEvent(float(f), kind, int(c), (bool(e), 0)))
    out_cls, out_exc, out_col = [], [], []
    while q:
        f = q.peek_time()
        batch = []
        while q and q.peek_time() == f:
            batch.append(q.pop())
        cls = np.array([ev.subject for ev in batch], dtype=np.int64)
        col = resolve_collisions(np.zeros(len(batch)), _pick_raos(cls, alloc, rng_rao))
        for ev, hit in zip(batch, col):
            is_exc, tries = ev.data
            out_cls.append(ev.subject)
            out_exc.append(is_exc)
            out_col.append(bool(hit))
            if hit and tries < max_retries:
                back = float(rng_retry.integers(1, backoff_frames + 1))
                q.push(SimEvent(f + back, ev.kind, ev.subject, (is_exc, tries + 1)))
    return np.array(out_col, dtype=bool), np.array(out_cls, dtype=np.int64), np.array(out_exc, dtype=bool)


def run_ra_sim(scenario: Scenario, k: int, alloc: RaoAllocation, exc: ExceptionModel | None = None,
               duration_s: float = 3600.0, seed: int = 0, retry: bool = False, max_retries: int = 3,
               backoff_frames: int = 10) -> RaStats:
    """Simulate grouped RA traffic using the closed-form group counts.

    Each class has ceil(N_i / K_i) coordinators, each firing once per period at
    a uniform random time; asynchronous requests (base rate plus exception
    reports) are Poisson.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    if alloc.num_classes != scenario.num_classes:
        raise ValueError("allocation and scenario disagree on the number of classes")
    exc = exc or ExceptionModel()
    rng = rng_streams(seed)
    load = grouped_load(scenario.classes, k, exc)
    att = _Attempts()
    att.add(_poisson_times(load.base_async, duration_s, rng["arrivals"]), 0)
    att.add(_poisson_times(load.exception_load, duration_s, rng["arrivals"]), 0, exception=True)
    for c in scenario.classes[1:]:
        n = num_groups(c.population, c.group_size(k))
        att.add(_periodic_times(n, float(c.period_s), duration_s, rng["arrivals"]), c.class_id)
    return _tally(att, alloc, duration_s, rng["rao"], retry, max_retries, backoff_frames, rng["faults"])


def worst_case_burst_sim(scenario: Scenario, alloc: RaoAllocation, duration_s: float, seed: int = 0) -> RaStats:
    """Ungrouped devices of each class all fire in the first frame of every period."""
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    rng = rng_streams(seed)
    att = _Attempts()
    att.add(_poisson_times(scenario.classes[0].aperiodic_rate, duration_s, rng["arrivals"]), 0)
    for c in scenario.classes[1:]:
        starts = np.arange(0.0, duration_s, float(c.period_s))
        att.add(np.repeat(starts, c.population), c.class_id)
    return _tally(att, alloc, duration_s, rng["rao"], False, 0, 1, rng["faults"])


@dataclass
class IntegratedResult:
    stats: RaStats
    groups: list[Group]
    flows_started: int = 0
    flows_completed: int = 0
    flows_incomplete: int = 0
    flows_skipped: int = 0
    consistency_failures: int = 0
    safety_violations: int = 0
    protocol_ra: int = 0
    expected_flows: float = 0.0

    def summary(self) -> dict:
        return {
            **self.stats.summary(),
            "groups": len(self.groups),
            "flows_started": self.flows_started,
            "flows_completed": self.flows_completed,
            "flows_incomplete": self.flows_incomplete,
            "flows_skipped": self.flows_skipped,
            "expected_flows": self.expected_flows,
            "consistency_failures": self.consistency_failures,
            "safety_violations": self.safety_violations,
            "protocol_ra": self.protocol_ra,
        }


def default_constraints(scenario: Scenario, k: int, max_diameter_m: float | None = None) -> ClusterConstraints:
    return ClusterConstraints(
        max_diameter_m=scenario.d2d_range_m if max_diameter_m is None else max_diameter_m,
        max_group_size={c.class_id: c.group_size(k) for c in scenario.classes[1:]},
    )


def run_integrated_sim(scenario: Scenario, k: int, alloc: RaoAllocation, exc: ExceptionModel | None = None,
                       protocol: ProtocolConfig | None = None, duration_s: float = 3600.0, seed: int = 0,
                       groups: Sequence[Group] | None = None,
                       constraints: ClusterConstraints | None = None) -> IntegratedResult:
    """RA simulation over a real clustering, with exception reports run through the protocol.

    Every device in a group of two or more sees D2D exceptions as a Poisson
    process of the per-device exception rate. A GM's exception runs the
    GM-lost-D2D flow for that GM; a GC's exception runs it for one of its GMs
    picked at random. The RA attempts each flow records join the same
    collision arena as the periodic and asynchronous traffic. Flows are run
    one at a time; a flow that would start before the previous one finished
    waits for it.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    exc = exc or ExceptionModel()
    protocol = protocol or ProtocolConfig()
    rng = rng_streams(seed)
    devices = place_devices(scenario)
    constraints = constraints or default_constraints(scenario, k)
    groups = list(groups) if groups is not None else cluster_global(devices, constraints)
    world = World.from_groups(devices, groups, constraints)
    classes = {c.class_id: c for c in scenario.classes}

    att = _Attempts()
    att.add(_poisson_times(scenario.classes[0].aperiodic_rate, duration_s, rng["arrivals"]), 0)
    for c in scenario.classes[1:]:
        n = sum(1 for g in groups if g.class_id == c.class_id)
        att.add(_periodic_times(n, float(c.period_s), duration_s, rng["arrivals"]), c.class_id)

    # exception sources: every device of a multi-device group
    src_ids, src_rate = [], []
    for g in groups:
        if g.size < 2:
            continue
        r = exc.rate(classes[g.class_id].group_size(k))
        for d in sorted(g.device_ids):
            src_ids.append(d)
            src_rate.append(r)
    src_rate = np.asarray(src_rate, dtype=float)
    total_rate = float(src_rate.sum())
    res = IntegratedResult(stats=None, groups=groups, expected_flows=total_rate * duration_s)
    ex_rng = rng["exceptions"]
    times = _poisson_times(total_rate, duration_s, ex_rng)
    picks = ex_rng.choice(len(src_ids), size=len(times), p=src_rate / total_rate) if len(times) else []
    ra_t, ra_exc = [], []
    for t, pick in zip(times, picks):
        d = src_ids[pick]
        bs = world.bs
        gid = bs.device_group.get(d)
        if gid is None:
            res.flows_skipped += 1
            continue
        g = bs.groups[gid]
        if g.coordinator_id == d:
            if not g.member_ids:
                res.flows_skipped += 1
                continue
            members = sorted(g.member_ids)
            d = members[int(ex_rng.integers(len(members)))]
        trig = FlowTrigger(TriggerKind.GM_LOST_D2D_WITH_BS, device_id=d, noise_measure=float(ex_rng.random()))
        out = run_flow(world, trig, protocol, start=max(float(t), world.time), rng=rng["faults"])
        res.flows_started += 1
        if out.complete:
            res.flows_completed += 1
        else:
            res.flows_incomplete += 1
        res.safety_violations += len(out.safety_violations)
        world = out.world
        new_gid = world.bs.device_group.get(d)
        touched = {gid} | ({new_gid} if new_gid is not None else set())
        if consistency_violations(world, touched, {d, g.coordinator_id}):
            res.consistency_failures += 1
        for e in out.trace:
            if e.kind == "RA" and e.t < duration_s:
                ra_t.append(e.t)
                ra_exc.append(e.payload.get("reason") == "D2DExceptionReport")
        res.protocol_ra += out.ra_attempts
    ra_t = np.asarray(ra_t, dtype=float)
    ra_exc = np.asarray(ra_exc, dtype=bool)
    att.add(ra_t[ra_exc], 0, exception=True)
    att.add(ra_t[~ra_exc], 0)
    res.stats = _tally(att, alloc, duration_s, rng["rao"], False, 0, 1, rng["faults"])
    res.world = world
    return res


def burst_analytic_rates(scenario: Scenario, alloc: RaoAllocation, duration_s: float) -> list[float]:
    """Exact per-attempt collision probability for ``worst_case_burst_sim``.

    In a frame where the classes in S all fire, an attempt of class i on RAO l
    succeeds iff none of the other N_j attempts of each j in A_l & S picks l
    and no asynchronous (Poisson) attempt does. Probabilities are averaged
    over the frames in which each class attempts.
    """
    frames = math.ceil(duration_s)
    classes = scenario.classes
    gamma0 = classes[0].aperiodic_rate
    fire = {}  # frame pattern -> number of frames with that pattern
    periodic = [c for c in classes[1:] if c.population > 0]
    burst_frames = set()
    for c in periodic:
        burst_frames.update(int(t) for t in np.arange(0.0, duration_s, float(c.period_s)))
    for f in burst_frames:
        pattern = frozenset(c.class_id for c in periodic if (f % float(c.period_s)) == 0)
        fire[pattern] = fire.get(pattern, 0) + 1
    quiet = frames - len(burst_frames)
    if quiet:
        fire[frozenset()] = fire.get(frozenset(), 0) + quiet
    L = [alloc.num_raos_for(c.class_id) for c in classes]
    N = [c.population for c in classes]

    def p_collide(i, pattern):
        tot = 0.0
        for a, count in alloc._set_counts[i]:
            log_free = -gamma0 / L[0] if 0 in a else 0.0
            for j in a & pattern:
                log_free += (N[j] - (j == i)) * math.log1p(-1.0 / L[j])
            tot += count * -math.expm1(log_free)
        return tot / L[i]

    out = []
    for c in classes:
        i = c.class_id
        w = {pat: n for pat, n in fire.items() if (i == 0 or i in pat)}
        total = sum(w.values())
        out.append(sum(n * p_collide(i, pat) for pat, n in w.items()) / total if total else 0.0)
    return out


def analytic_rates(scenario: Scenario, k: int, alloc: RaoAllocation, exc: ExceptionModel | None = None,
                   burst: bool = False) -> list[float]:
    if burst:
        load = ungrouped_load(scenario.classes, "worst_peak")
    else:
        load = grouped_load(scenario.classes, k, exc)
    return collision_probs(load, alloc)


def stats_rows(stats: RaStats, analytic: Sequence[float], k: int, alpha: float, validate: bool = False,
               variances: Sequence[float] | None = None) -> list[dict]:
    """CSV rows per class; ``variances`` (from ``attempt_variances``) replaces the binomial p(1-p)."""
    rows = []
    for c, (a, n, p) in enumerate(zip(stats.attempts_per_class, stats.collisions_per_class, analytic)):
        se = standard_error(p, a) if variances is None else clustered_standard_error(variances[c], a)
        row = {
            "k": k, "alpha": alpha, "class_id": c, "attempts": a, "collisions": n,
            "rate": (n / a) if a else "", "analytic_rate": p, "stderr": se if a else "",
        }
        if validate:
            row["verdict"] = "pass" if (not a or abs(n / a - p) <= 3 * se) else "fail"
        rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str] | None = None) -> str:
    if fields is None:
        fields = list(rows[0]) if rows else list(CSV_FIELDS)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
