import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmtc_grouping.model import DeviceClass, grouped_load, ungrouped_load
from mmtc_grouping.scenario import (
    Scenario, parse_alloc, full_dedication_alloc, full_sharing_alloc, load_scenario, mixed_alloc, place_devices,
    random_mixed_alloc, save_scenario, scenario_from_dict, scenario_to_dict, table1_mixed_alloc, table1_preset,
)


class TestTable1:
    def test_n0_3600(self):
        s = table1_preset(3600)
        assert [c.population for c in s.classes[1:]] == [600] * 6
        assert [c.period_s for c in s.classes[1:]] == [60, 60, 3600, 3600, 86400, 86400]
        assert s.classes[0].population == 3600
        assert s.classes[0].aperiodic_rate == 0.001
        assert s.raos_per_second == 3600

    def test_minimal(self):
        assert [c.population for c in table1_preset(6).classes[1:]] == [1] * 6

    def test_large(self):
        assert [c.population for c in table1_preset(60000).classes[1:]] == [10000] * 6

    def test_remainder_round_robin(self):
        assert [c.population for c in table1_preset(16).classes[1:]] == [3, 3, 3, 3, 2, 2]

    def test_too_small(self):
        with pytest.raises(ValueError):
            table1_preset(5)

    @given(st.integers(6, 100000))
    def test_k1_reproduces_ungrouped(self, n0):
        s = table1_preset(n0)
        assert grouped_load(s.classes, 1).gamma_tilde == ungrouped_load(s.classes).gamma_tilde
        assert sum(c.population for c in s.classes[1:]) == n0


class TestScenarioValidation:
    def test_needs_class0(self):
        with pytest.raises(ValueError):
            Scenario((DeviceClass(1, 1, 60.0),))

    def test_contiguous_ids(self):
        with pytest.raises(ValueError):
            Scenario((DeviceClass(0, 0), DeviceClass(2, 1, 60.0)))

    def test_range_vs_radius(self):
        with pytest.raises(ValueError):
            table1_preset(6, cell_radius_m=50.0, d2d_range_m=100.0)

    def test_seed_range(self):
        with pytest.raises(ValueError):
            table1_preset(6, seed=-1)
        with pytest.raises(ValueError):
            table1_preset(6, seed=2**64)

    def test_json_round_trip(self, tmp_path):
        s = table1_preset(120, seed=7, cell_radius_m=500.0, d2d_range_m=50.0)
        path = tmp_path / "s.json"
        save_scenario(s, path)
        assert load_scenario(path) == s
        assert scenario_from_dict(json.loads(path.read_text())) == s
        assert scenario_from_dict({"preset": "table1", "n0": 120, "seed": 7, "cell_radius_m": 500,
                                   "d2d_range_m": 50}) == s

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            scenario_from_dict({"preset": "table9"})


class TestAllocations:
    def test_sharing_minimal(self):
        a = full_sharing_alloc(1, 1)
        assert a.raos_for(0) == (1,)

    def test_sharing_table1(self):
        a = full_sharing_alloc(3600, 7)
        assert all(a.num_raos_for(i) == 3600 for i in range(7))
        assert a.is_full_sharing()

    @given(st.integers(1, 100), st.integers(1, 8))
    def test_sharing_l_equals_l(self, L, m):
        a = full_sharing_alloc(L, m)
        assert [a.num_raos_for(i) for i in range(m)] == [L] * m

    def test_dedication_pair(self):
        a = full_dedication_alloc([1, 1])
        assert a.raos_for(0) == (1,) and a.raos_for(1) == (2,)

    def test_dedication_table1(self):
        a = full_dedication_alloc([1800] + [300] * 6)
        assert a.raos_per_second == 3600
        assert a.is_full_dedication()

    def test_dedication_zero(self):
        with pytest.raises(ValueError):
            full_dedication_alloc([2, 0])

    @given(st.lists(st.integers(1, 40), min_size=1, max_size=8))
    def test_dedication_partitions(self, per):
        a = full_dedication_alloc(per)
        sets = [set(a.raos_for(i)) for i in range(len(per))]
        assert [len(s) for s in sets] == per
        assert set().union(*sets) == set(range(1, sum(per) + 1))
        assert sum(len(s) for s in sets) == len(set().union(*sets))

    def test_mixed(self):
        a = mixed_alloc([(2, (0, 1)), (1, (1,))], 2)
        assert a.raos_for(1) == (1, 2, 3)

    def test_table1_mixed_covers(self):
        a = table1_mixed_alloc(3600)
        assert a.raos_per_second == 3600
        assert not a.is_full_sharing() and not a.is_full_dedication()

    @given(st.integers(0, 2**32))
    def test_random_mixed_valid(self, seed):
        a = random_mixed_alloc(8, 4, np.random.default_rng(seed))
        assert all(a.num_raos_for(i) >= 1 for i in range(4))

    def test_parse_alloc(self):
        s = table1_preset(60, raos_per_second=70)
        assert parse_alloc("sharing", s).is_full_sharing()
        assert [parse_alloc("dedication", s).num_raos_for(i) for i in range(7)] == [10] * 7
        assert parse_alloc({"per_class_raos": [1] * 7}, s).raos_per_second == 7
        with pytest.raises(ValueError):
            parse_alloc("random", s)


class TestPlacement:
    def test_deterministic(self):
        s = table1_preset(600, seed=11)
        assert place_devices(s) == place_devices(s)
        assert place_devices(s) != place_devices(table1_preset(600, seed=12))

    def test_within_radius(self):
        s = table1_preset(6000, seed=1, cell_radius_m=250.0, d2d_range_m=10.0)
        pts = np.array([d.position for d in place_devices(s)])
        assert np.hypot(*pts.T).max() <= 250.0

    def test_ids_and_classes(self):
        devs = place_devices(table1_preset(12))
        assert [d.device_id for d in devs] == list(range(24))
        assert [d.class_id for d in devs[:12]] == [0] * 12
        assert all(not d.is_periodic for d in devs[:12])

    def test_mean_radius(self):
        s = Scenario((DeviceClass(0, 100000),), cell_radius_m=1000.0, d2d_range_m=100.0, seed=5)
        pts = np.array([d.position for d in place_devices(s)])
        assert np.hypot(*pts.T).mean() == pytest.approx(2000.0 / 3.0, rel=0.01)
