"""Command-line front end: ``mmtc analytic | simulate | cluster | protocol-trace``.

Exit codes: 0 success, 1 invariant or validation failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import netsim
from .cluster import cluster_global, group_violations
from .model import (
    UNLIMITED_GROUP_SIZE, ExceptionModel, InvariantViolation, collision_intensity, collision_probs, grouped_load,
)
from .protocol import (
    FlowTrigger, InvalidTrigger, ProtocolConfig, Role, TriggerKind, World, consistency_violations, load_faults,
    run_flow, write_trace,
)
from .scenario import Scenario, parse_alloc, place_devices, scenario_from_dict

ANALYTIC_FIELDS = ("k", "alpha", "class_id", "gamma_tilde", "collision_prob", "collision_intensity",
                   "baseline_prob", "above_baseline", "crossover")

TRIGGERS = {
    "initial": TriggerKind.INITIAL_CLUSTERING,
    "emergency": TriggerKind.EMERGENCY_RECLUSTER,
    "regular": TriggerKind.REGULAR_RECLUSTER,
    "join": TriggerKind.DEVICE_JOIN,
    "detach-gm": TriggerKind.DETACH_GM,
    "detach-gc": TriggerKind.DETACH_GC,
    "gm-lost-d2d": TriggerKind.GM_LOST_D2D_WITH_BS,
    "gm-lost-all": TriggerKind.GM_LOST_D2D_AND_BS,
    "gc-lost-bs": TriggerKind.GC_LOST_BS,
    "handover-gm": TriggerKind.HANDOVER_GM,
    "handover-gc": TriggerKind.HANDOVER_GC,
}


class UsageError(Exception):
    pass


def parse_k_range(text: str) -> list[int]:
    """``"1..5000"``, ``"1..5000:10"`` or ``"1,10,100"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, _, rest = text.partition("..")
            hi, _, step = rest.partition(":")
            ks = list(range(int(lo), int(hi) + 1, int(step) if step else 1))
        else:
            ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse K range {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"K values must be >= 1: {text!r}")
    return ks


def parse_floats(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(x) for x in text]
    try:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None
    if not vals:
        raise UsageError("empty number list")
    return vals


def _default_seed() -> int:
    raw = os.environ.get("MMTC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MMTC_SEED must be an integer, got {raw!r}") from None


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _pick(args, cfg: dict, name: str, key: str | None = None, default=None):
    """CLI flag if given, else the config value, else ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(key or name, default)


def _scenario(args, cfg: dict) -> Scenario:
    d = dict(cfg.get("scenario", cfg))
    if getattr(args, "preset", None):
        d = {k: v for k, v in d.items() if k != "classes"}
        d["preset"] = args.preset
    if "classes" not in d and "preset" not in d:
        d["preset"] = "table1"
    if getattr(args, "n0", None) is not None:
        d["n0"] = args.n0
    if getattr(args, "L", None) is not None:
        d["L"] = args.L
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    elif "seed" not in d:
        d["seed"] = _default_seed()
    try:
        return scenario_from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"bad scenario: {e}") from None


def _alloc(args, cfg, scenario):
    choice = _pick(args, cfg, "alloc", default="sharing")
    if isinstance(choice, str) and choice.lstrip().startswith("{"):
        choice = json.loads(choice)
    try:
        return parse_alloc(choice, scenario)
    except (ValueError, InvariantViolation) as e:
        raise UsageError(f"bad allocation: {e}") from None


def _write(text: str, path) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- analytic ---------------------------------------------------------------

def analytic_rows(scenario: Scenario, alloc, ks, alphas) -> list[dict]:
    """One row per (alpha, K, class); ``collision_intensity`` is the cell-wide C.

    ``baseline_prob`` is the ungrouped (K = 1) value of the same class;
    ``crossover`` marks the first K of a sweep at which a curve rises above it.
    """
    base = collision_probs(grouped_load(scenario.classes, 1), alloc)
    rows = []
    for a in alphas:
        exc = ExceptionModel(a)
        was_above = [False] * scenario.num_classes
        for k in ks:
            load = grouped_load(scenario.classes, k, exc)
            probs = collision_probs(load, alloc)
            c = collision_intensity(load, alloc)
            for i, p in enumerate(probs):
                above = p > base[i]
                rows.append({"k": k, "alpha": a, "class_id": i, "gamma_tilde": load[i], "collision_prob": p,
                             "collision_intensity": c, "baseline_prob": base[i], "above_baseline": int(above),
                             "crossover": int(above and not was_above[i])})
                was_above[i] = above
    return rows


def cmd_analytic(args) -> int:
    cfg = _load_config(args.config)
    scenario = _scenario(args, cfg)
    alloc = _alloc(args, cfg, scenario)
    ks = parse_k_range(_pick(args, cfg, "k", default="1..5000"))
    alphas = parse_floats(_pick(args, cfg, "alpha", default="0,1e-6"))
    if any(a < 0 for a in alphas):
        raise UsageError("alpha must be >= 0")
    rows = analytic_rows(scenario, alloc, ks, alphas)
    _write(netsim.rows_to_csv(rows, ANALYTIC_FIELDS), args.output)
    return 0


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    scenario = _scenario(args, cfg)
    alloc = _alloc(args, cfg, scenario)
    duration = float(_pick(args, cfg, "duration", "duration_s", 3600.0))
    if not duration > 0:
        raise UsageError("duration must be > 0")
    seed = scenario.seed
    ks = parse_k_range(_pick(args, cfg, "k", default="1"))
    alphas = parse_floats(_pick(args, cfg, "alpha", default="0"))
    rows, runs = [], []
    if args.burst:
        stats = netsim.worst_case_burst_sim(scenario, alloc, duration, seed)
        an = netsim.burst_analytic_rates(scenario, alloc, duration)
        rows += netsim.stats_rows(stats, an, 1, 0.0, args.validate)
        runs.append({"mode": "burst", "seed": seed, **stats.summary()})
    else:
        for a in alphas:
            exc = ExceptionModel(a)
            for k in ks:
                if args.integrated:
                    max_d = _pick(args, cfg, "max_diameter", "max_diameter_m")
                    cons = netsim.default_constraints(scenario, k, None if max_d is None else float(max_d))
                    res = netsim.run_integrated_sim(scenario, k, alloc, exc, ProtocolConfig(), duration, seed,
                                                    constraints=cons)
                    stats, extra = res.stats, res.summary()
                else:
                    stats = netsim.run_ra_sim(scenario, k, alloc, exc, duration, seed, retry=args.retry)
                    extra = stats.summary()
                an = netsim.analytic_rates(scenario, k, alloc, exc)
                var = netsim.attempt_variances(grouped_load(scenario.classes, k, exc), alloc)
                rows += netsim.stats_rows(stats, an, k, a, args.validate, var)
                runs.append({"mode": "integrated" if args.integrated else "ra", "k": k, "alpha": a, "seed": seed,
                             **extra})
    fields = list(netsim.CSV_FIELDS) + (["verdict"] if args.validate else [])
    _write(netsim.rows_to_csv(rows, fields), args.output)
    if args.summary:
        Path(args.summary).write_text(_dump_json({"runs": runs}))
    if args.validate and any(r["verdict"] == "fail" for r in rows):
        print("validation failed: empirical rate outside 3 standard errors", file=sys.stderr)
        return 1
    return 0


# -- cluster ----------------------------------------------------------------

def cmd_cluster(args) -> int:
    cfg = _load_config(args.config)
    scenario = _scenario(args, cfg)
    k = int(_pick(args, cfg, "k", default=UNLIMITED_GROUP_SIZE))
    max_d = _pick(args, cfg, "max_diameter", "max_diameter_m")
    cons = netsim.default_constraints(scenario, k, None if max_d is None else float(max_d))
    devices = place_devices(scenario)
    groups = cluster_global(devices, cons)
    world = World.from_groups(devices, groups, cons)
    by_id = {d.device_id: d for d in devices}
    bad = [f"group {g.group_id}: {v}" for g in groups for v in group_violations(g, by_id, cons)]
    out = world.to_dict()
    out["summary"] = {"groups": len(groups), "devices": len(devices),
                      "grouped": sum(g.size for g in groups), "violations": bad}
    _write(_dump_json(out), args.output)
    return 1 if bad else 0


# -- protocol-trace ---------------------------------------------------------

def _load_world(args, cfg) -> World:
    if args.world:
        try:
            with open(args.world) as f:
                return World.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise UsageError(f"cannot read world {args.world}: {e}") from None
    scenario = _scenario(args, cfg)
    k = int(_pick(args, cfg, "k", default=UNLIMITED_GROUP_SIZE))
    return World.fresh(place_devices(scenario), netsim.default_constraints(scenario, k))


def _default_device(world: World, kind: TriggerKind) -> int | None:
    """Lowest id that suits the trigger, so scripted runs need not name a device."""
    bs = world.bs
    if kind in (TriggerKind.DETACH_GC, TriggerKind.GC_LOST_BS, TriggerKind.HANDOVER_GC):
        ids = [g.coordinator_id for g in bs.groups.values()]
    else:
        ids = [m for g in bs.groups.values() for m in g.member_ids]
    return min(ids) if ids else None


def _trigger(args, world: World) -> FlowTrigger:
    name = args.trigger
    if name == "global-update":
        kind = TriggerKind.EMERGENCY_RECLUSTER if world.bs.groups else TriggerKind.INITIAL_CLUSTERING
    else:
        kind = TRIGGERS[name]
    device = args.device
    if device is None and kind not in (TriggerKind.INITIAL_CLUSTERING, TriggerKind.EMERGENCY_RECLUSTER,
                                       TriggerKind.REGULAR_RECLUSTER, TriggerKind.DEVICE_JOIN):
        device = _default_device(world, kind)
    pos = None
    if args.position:
        try:
            x, y = (float(v) for v in args.position.split(","))
        except ValueError:
            raise UsageError(f"--position wants x,y, got {args.position!r}") from None
        pos = (x, y)
    return FlowTrigger(kind, device_id=device, switching_off=args.switching_off, join_mode=args.join_mode,
                       class_id=args.class_id, position=pos, noise_measure=args.noise)


def cmd_protocol_trace(args) -> int:
    cfg = _load_config(args.config)
    world = _load_world(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", _default_seed()))
    faults = []
    if args.faults:
        try:
            faults = load_faults(args.faults)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise UsageError(f"cannot read fault schedule {args.faults}: {e}") from None
    pcfg = ProtocolConfig(**{k: v for k, v in cfg.get("protocol", {}).items()})
    if args.d2d_drop is not None:
        pcfg = ProtocolConfig(**{**pcfg.__dict__, "d2d_drop_prob": args.d2d_drop})
    try:
        trig = _trigger(args, world)
        out = run_flow(world, trig, pcfg, faults, seed=seed)
    except InvalidTrigger as e:
        raise UsageError(f"invalid trigger: {e}") from None
    if args.output in (None, "-"):
        write_trace(out.trace, sys.stdout)
    else:
        with open(args.output, "w") as f:
            write_trace(out.trace, f)
    consistency = consistency_violations(out.world) if out.complete else []
    failed_not_ungrouped = sorted(d for d in out.failed_setups if out.world.devices[d].role is not Role.UNGROUPED
                                  or d in out.world.bs.device_group)
    report = {
        "trigger": trig.kind.value,
        "device_id": trig.device_id,
        "complete": out.complete,
        "ra_attempts": out.ra_attempts,
        "safety_violations": out.safety_violations,
        "d2d_violations": out.d2d_violations,
        "consistency_violations": consistency,
        "failed_setups": sorted(out.failed_setups),
        "failed_setups_still_grouped": failed_not_ungrouped,
        "protocol_errors": out.errors,
        "groups": len(out.world.bs.groups),
    }
    text = _dump_json(report)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stderr.write(text)
    if args.world_out:
        Path(args.world_out).write_text(_dump_json(out.world.to_dict()))
    bad = out.safety_violations or out.d2d_violations or consistency or failed_not_ungrouped
    return 1 if bad else 0


# -- parser -----------------------------------------------------------------

def _scenario_flags(p):
    p.add_argument("--config", help="JSON config (scenario keys plus command defaults)")
    p.add_argument("--preset", choices=["table1"], help="built-in scenario")
    p.add_argument("--n0", type=int, help="device count for the table1 preset")
    p.add_argument("--L", type=int, help="RAOs per second")
    p.add_argument("--seed", type=int, help="RNG seed (default: $MMTC_SEED or 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmtc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analytic", help="closed-form sweep over K and alpha")
    _scenario_flags(p)
    p.add_argument("--k", help="K range: 1..5000, 1..5000:10 or 1,10,100")
    p.add_argument("--alpha", help="comma-separated alpha values")
    p.add_argument("--alloc", help="sharing | dedication | mixed | JSON object")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("simulate", help="Monte Carlo RA simulation")
    _scenario_flags(p)
    p.add_argument("--k", help="group size(s)")
    p.add_argument("--alpha", help="comma-separated alpha values")
    p.add_argument("--alloc", help="sharing | dedication | mixed | JSON object")
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--validate", action="store_true", help="add a 3-sigma verdict column; exit 1 on failure")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--burst", action="store_true", help="ungrouped synchronized bursts")
    mode.add_argument("--integrated", action="store_true", help="clustered world with protocol-driven exceptions")
    p.add_argument("--retry", action="store_true", help="retry collided attempts after a random backoff")
    p.add_argument("--max-diameter", type=float, dest="max_diameter", help="group diameter cap (integrated)")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.add_argument("--summary", help="JSON summary path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", help="cluster devices and write a world JSON")
    _scenario_flags(p)
    p.add_argument("--k", type=int, help="group size cap")
    p.add_argument("--max-diameter", type=float, dest="max_diameter", help="group diameter cap in metres")
    p.add_argument("-o", "--output", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("protocol-trace", help="run one protocol flow and write its trace")
    _scenario_flags(p)
    p.add_argument("--world", help="world JSON (as written by 'cluster'); default: fresh preset world")
    p.add_argument("--k", type=int, help="group size cap for a fresh world")
    p.add_argument("--trigger", required=True, choices=["global-update", *TRIGGERS])
    p.add_argument("--device", type=int, help="subject device (default: lowest suitable id)")
    p.add_argument("--switching-off", action="store_true", dest="switching_off")
    p.add_argument("--join-mode", choices=["attach", "handover"], default="attach", dest="join_mode")
    p.add_argument("--class-id", type=int, dest="class_id", help="class of a joining device")
    p.add_argument("--position", help="x,y of a joining device")
    p.add_argument("--noise", type=float, default=0.0, help="noise measure carried in exception reports")
    p.add_argument("--faults", help="fault schedule JSON: {\"drop\": [{kind, src, dst, link, count}]}")
    p.add_argument("--d2d-drop", type=float, dest="d2d_drop", help="random D2D drop probability")
    p.add_argument("-o", "--output", help="JSON-lines trace path (default stdout)")
    p.add_argument("--report", help="invariant report path (default stderr)")
    p.add_argument("--world-out", dest="world_out", help="write the resulting world JSON here")
    p.set_defaults(func=cmd_protocol_trace)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mmtc: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
