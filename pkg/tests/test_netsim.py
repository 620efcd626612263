import math

import numpy as np
import pytest

from mmtc_grouping.model import DeviceClass, GroupedLoad, collision_probs, ExceptionModel, InvariantViolation, grouped_load
from mmtc_grouping.netsim import (
    CSV_FIELDS, EventQueue, attempt_variances, RaStats, SimEvent, SimEventKind, analytic_rates, burst_analytic_rates,
    resolve_collisions, rng_streams, rows_to_csv, run_integrated_sim, run_ra_sim, standard_error, stats_rows,
    worst_case_burst_sim,
)
from mmtc_grouping.protocol import consistency_violations
from mmtc_grouping.scenario import Scenario, full_dedication_alloc, full_sharing_alloc, mixed_alloc, table1_preset


def tiny(n1=2, period=1.0, gamma0=0.0):
    return Scenario((DeviceClass(0, 0, aperiodic_rate=gamma0), DeviceClass(1, n1, period_s=period)), cell_radius_m=50.0,
                    d2d_range_m=20.0)


class TestEventQueue:
    def test_time_then_insertion_order(self):
        q = EventQueue()
        q.push(SimEvent(2.0, SimEventKind.TIMER_EXPIRY, 1))
        q.push(SimEvent(1.0, SimEventKind.GROUP_RA_DUE, 2))
        q.push(SimEvent(1.0, SimEventKind.ASYNC_RA_ARRIVAL, 3))
        assert q.peek_time() == 1.0 and len(q) == 3
        assert [q.pop().subject for _ in range(3)] == [2, 3, 1]

    def test_streams_independent(self):
        a, b = rng_streams(5), rng_streams(5)
        assert set(a) == {"arrivals", "rao", "exceptions", "faults"}
        assert a["rao"].random() == b["rao"].random()
        assert a["rao"].random() != a["arrivals"].random()


class TestResolve:
    def test_collisions(self):
        frames = np.array([0, 0, 0, 1, 1, 2])
        raos = np.array([5, 5, 6, 5, 7, 5])
        assert resolve_collisions(frames, raos).tolist() == [True, True, False, False, False, False]

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        f, r = rng.integers(0, 3, 200), rng.integers(0, 4, 200)
        hit = resolve_collisions(f, r)
        perm = rng.permutation(200)
        assert (resolve_collisions(f[perm], r[perm]) == hit[perm]).all()

    def test_empty(self):
        assert resolve_collisions(np.array([], int), np.array([], int)).size == 0


class TestVariance:
    def test_reduces_to_binomial_for_light_class(self):
        load = GroupedLoad((1e-9, 5.0))
        al = full_sharing_alloc(10, 2)
        p = collision_probs(load, al)[0]
        assert attempt_variances(load, al)[0] == pytest.approx(p * (1 - p), rel=1e-6)

    def test_matches_replicated_spread(self):
        load = GroupedLoad((3.0, 2.0, 1.0))
        al = mixed_alloc([(3, (0, 1, 2)), (2, (1,)), (2, (0, 2))], 3)
        v, p = attempt_variances(load, al), collision_probs(load, al)
        rng = np.random.default_rng(0)
        frames, reps = 2000, 300
        est = np.empty((reps, 3))
        for r in range(reps):
            f, ra, cl = [], [], []
            for i in range(3):
                n = rng.poisson(load[i] * frames)
                f.append(rng.integers(0, frames, n))
                ra.append(rng.choice(al.raos_for(i), n))
                cl.append(np.full(n, i))
            f, ra, cl = map(np.concatenate, (f, ra, cl))
            hit = resolve_collisions(f, ra)
            est[r] = [hit[cl == i].mean() for i in range(3)]
        for i in range(3):
            se = math.sqrt(v[i] / (load[i] * frames))
            assert abs(est[:, i].mean() - p[i]) < 4 * se / math.sqrt(reps)
            # spread within 15% of the prediction; binomial is off by more for class 0
            assert est[:, i].std() == pytest.approx(se, rel=0.15)


class TestRaStats:
    def test_invariant(self):
        with pytest.raises(InvariantViolation):
            RaStats(1.0, np.array([1, 1]), np.array([0, 2]))

    def test_nan_without_attempts(self):
        s = RaStats(1.0, np.array([0, 4]), np.array([0, 2]))
        r = s.empirical_collision_rate_per_class
        assert math.isnan(r[0]) and r[1] == 0.5
        assert s.successes.tolist() == [0, 2]

    def test_merge(self):
        a = run_ra_sim(table1_preset(600), 1, full_sharing_alloc(3600, 7), duration_s=100.0, seed=1)
        b = run_ra_sim(table1_preset(600), 1, full_sharing_alloc(3600, 7), duration_s=100.0, seed=2)
        m = a.merge(b)
        assert m.duration_s == 200.0
        assert m.attempts_per_class == [x + y for x, y in zip(a.attempts_per_class, b.attempts_per_class)]


class TestRaSim:
    def test_zero_devices(self):
        s = run_ra_sim(tiny(n1=0), 1, full_sharing_alloc(3, 2), duration_s=50.0)
        assert s.attempts_per_class == [0, 0] and s.collisions_per_class == [0, 0]

    def test_deterministic(self):
        sc, al = table1_preset(6000), full_sharing_alloc(3600, 7)
        a = run_ra_sim(sc, 10, al, ExceptionModel(1e-4), duration_s=200.0, seed=9)
        b = run_ra_sim(sc, 10, al, ExceptionModel(1e-4), duration_s=200.0, seed=9)
        c = run_ra_sim(sc, 10, al, ExceptionModel(1e-4), duration_s=200.0, seed=10)
        assert a.summary() == b.summary()
        assert a.attempts_per_class != c.attempts_per_class

    def test_periodic_conservation(self):
        # whole periods only: each coordinator fires exactly once per period
        sc = table1_preset(6000)
        s = run_ra_sim(sc, 10, full_sharing_alloc(3600, 7), duration_s=3600.0, seed=3)
        assert s.attempts_per_class[1] == 100 * 60
        assert s.attempts_per_class[3] == 100

    def test_exception_rate(self):
        sc = table1_preset(60000)
        exc = ExceptionModel(1e-6)
        s = run_ra_sim(sc, 100, full_sharing_alloc(3600, 7), exc, duration_s=2000.0, seed=4)
        want = grouped_load(sc.classes, 100, exc).exception_load
        assert abs(s.exception_ra_rate_measured - want) < 4 * math.sqrt(want / 2000.0)

    def test_matches_closed_form(self):
        sc = table1_preset(60000)
        al = full_dedication_alloc([514] * 7)
        s = run_ra_sim(sc, 1, al, duration_s=200.0, seed=5)
        want = analytic_rates(sc, 1, al)
        for i in range(7):
            n = s.attempts_per_class[i]
            if n:
                se = standard_error(want[i], n)
                assert abs(s.empirical_collision_rate_per_class[i] - want[i]) < 5 * se + 1e-12

    def test_pigeonhole(self):
        s = run_ra_sim(tiny(n1=2), 1, full_sharing_alloc(1, 2), duration_s=1.0)
        assert s.attempts_per_class == [0, 2]
        s = worst_case_burst_sim(tiny(n1=2), full_sharing_alloc(1, 2), duration_s=1.0)
        assert s.collisions_per_class == [0, 2]

    def test_retry_mode(self):
        sc = table1_preset(60000)
        al = full_sharing_alloc(36, 7)
        base = run_ra_sim(sc, 1, al, duration_s=60.0, seed=6)
        retry = run_ra_sim(sc, 1, al, duration_s=60.0, seed=6, retry=True, max_retries=3)
        assert sum(retry.attempts_per_class) > sum(base.attempts_per_class)
        assert all(c <= a for c, a in zip(retry.collisions_per_class, retry.attempts_per_class))

    def test_validates_inputs(self):
        with pytest.raises(ValueError):
            run_ra_sim(tiny(), 1, full_sharing_alloc(3, 2), duration_s=0.0)
        with pytest.raises(ValueError):
            run_ra_sim(tiny(), 1, full_sharing_alloc(3, 3))


class TestBurst:
    def test_single_class_exact(self):
        # N devices all in one frame on L RAOs
        sc = tiny(n1=5, period=1.0)
        al = full_sharing_alloc(4, 2)
        exact = 1 - (3 / 4) ** 4
        assert burst_analytic_rates(sc, al, 10.0)[1] == pytest.approx(exact)
        s = worst_case_burst_sim(sc, al, 4000.0, seed=1)
        n = s.attempts_per_class[1]
        assert abs(s.empirical_collision_rate_per_class[1] - exact) < 4 * standard_error(exact, n)

    def test_burst_worse_than_spread(self):
        sc = table1_preset(6000)
        al = full_sharing_alloc(3600, 7)
        burst = worst_case_burst_sim(sc, al, 120.0)
        spread = run_ra_sim(sc, 1, al, duration_s=120.0)
        assert burst.empirical_collision_rate_per_class[1] > 10 * spread.empirical_collision_rate_per_class[1]


class TestRows:
    def test_csv(self):
        sc = table1_preset(600)
        al = full_sharing_alloc(3600, 7)
        s = run_ra_sim(sc, 1, al, duration_s=100.0)
        rows = stats_rows(s, analytic_rates(sc, 1, al), 1, 0.0, validate=True)
        text = rows_to_csv(rows)
        lines = text.strip().splitlines()
        assert lines[0].split(",")[: len(CSV_FIELDS)] == list(CSV_FIELDS)
        assert len(lines) == 8


def small_world(n0=60):
    return table1_preset(n0, cell_radius_m=150.0, d2d_range_m=100.0, seed=11)


class TestIntegrated:
    def test_flow_count_and_consistency(self):
        sc = small_world()
        al = full_sharing_alloc(3600, 7)
        exc = ExceptionModel(1e-3)
        res = run_integrated_sim(sc, 10, al, exc, duration_s=1e4, seed=2)
        assert res.expected_flows > 100
        assert abs(res.flows_started + res.flows_skipped - res.expected_flows) < 3 * math.sqrt(res.expected_flows)
        assert res.flows_incomplete == 0 and res.safety_violations == 0 and res.consistency_failures == 0
        assert consistency_violations(res.world) == []
        assert res.stats.attempts_per_class[0] >= res.flows_started

    def test_no_exceptions_at_alpha_zero(self):
        res = run_integrated_sim(small_world(), 10, full_sharing_alloc(3600, 7), ExceptionModel(0.0),
                                 duration_s=1e4, seed=2)
        assert res.expected_flows == 0 and res.flows_started == 0
        assert res.stats.exception_attempts == 0

    def test_groups_respect_caps(self):
        sc = table1_preset(60, max_group_size=3, cell_radius_m=150.0, d2d_range_m=100.0)
        res = run_integrated_sim(sc, 10, full_sharing_alloc(3600, 7), duration_s=100.0)
        assert max(g.size for g in res.groups) <= 3
        assert sum(g.size for g in res.groups) == sc.periodic_population
