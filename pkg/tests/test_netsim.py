import numpy as np
import pytest

from twinet.link import LinkEndpoint
from twinet.netsim import (
    PACKETS_PER_MBPS,
    CellSim,
    RateSchedule,
    ScenarioConfig,
    compute_psr,
)


def sim(sigma=0.0, seed=0, n_ues=3, capacity=9.0):
    return CellSim(ScenarioConfig(n_ues=n_ues, capacity_mbps=capacity,
                                  psr_noise_sigma=sigma, seed=seed))


class TestComputePsr:
    def test_under_capacity_is_one(self):
        psr = compute_psr(np.array([1.5, 1.5, 1.5]), 9.0, 0.0,
                          np.random.default_rng(0))
        assert np.all(psr == 1.0)

    def test_over_capacity_ratio(self):
        psr = compute_psr(np.array([4.5, 4.5, 4.5]), 9.0, 0.0,
                          np.random.default_rng(0))
        assert psr == pytest.approx([9 / 13.5] * 3)

    def test_zero_demand_convention(self):
        psr = compute_psr(np.zeros(3), 9.0, 0.5, np.random.default_rng(0))
        assert np.all(psr == 1.0)

    def test_bounds_with_noise(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            psr = compute_psr(np.array([5.0, 5.0]), 9.0, 0.3, rng)
            assert np.all((psr >= 0.0) & (psr <= 1.0))

    def test_deterministic_given_seed(self):
        def run():
            s = sim(sigma=0.05, seed=42)
            s.apply_allocation([4.0, 4.0, 4.0])
            return [tuple(ue.psr for ue in s.step_tick().ues) for _ in range(50)]
        assert run() == run()


class TestStepTick:
    def test_zero_rates_well_formed(self):
        s = sim()
        state = s.step_tick()
        assert all(ue.packets_sent == 0 and ue.psr == 1.0 for ue in state.ues)
        assert state.aggregate_demand_mbps == 0.0

    def test_psr_one_receives_all(self):
        s = sim()
        s.apply_allocation([1.0, 1.0, 1.0])
        state = s.step_tick()
        for ue in state.ues:
            assert ue.packets_received == ue.packets_sent == int(
                1.0 * PACKETS_PER_MBPS * 0.1
            )

    def test_binomial_mean(self):
        # psr 0.5 via demand 2x capacity; 100 packets sent per tick per UE
        s = CellSim(ScenarioConfig(n_ues=1, capacity_mbps=5.0,
                                   psr_noise_sigma=0.0, seed=3))
        s.apply_allocation([10.0])
        received = [s.step_tick().ues[0].packets_received for _ in range(1000)]
        mean = np.mean(received)
        # 3 sigma of a binomial(100, 0.5) mean over 1000 ticks
        assert abs(mean - 50.0) < 1.5

    def test_conservation_every_tick(self):
        s = sim(sigma=0.2, seed=9)
        s.apply_allocation([3.0, 3.0, 4.0])
        for _ in range(200):
            state = s.step_tick()
            for ue in state.ues:
                assert ue.packets_received <= ue.packets_sent
                assert 0.0 <= ue.psr <= 1.0

    def test_allocation_applies_at_next_boundary(self):
        s = sim()
        s.apply_allocation([1.0, 1.0, 1.0])
        assert s.step_tick().ues[0].r_act_mbps == 1.0
        s.apply_allocation([2.0, 2.0, 2.0])
        # not yet stepped: last state unchanged
        assert s.last_state.ues[0].r_act_mbps == 1.0
        assert s.step_tick().ues[0].r_act_mbps == 2.0

    def test_allocation_validation(self):
        s = sim()
        with pytest.raises(ValueError):
            s.apply_allocation([])
        with pytest.raises(ValueError):
            s.apply_allocation([-1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            s.apply_allocation([2.0, 2.0, 2.0], expected_mbps=[1.0, 2.0, 2.0])

    def test_identical_inputs_identical_state_sequences(self):
        def run():
            s = sim(sigma=0.1, seed=21)
            out = []
            for k in range(100):
                if k % 10 == 0:
                    s.apply_allocation([k * 0.1, 1.0, 2.0])
                out.append(s.step_tick())
            return out
        assert run() == run()


class TestRateSchedule:
    def test_piecewise_lookup(self):
        schedule = RateSchedule(((0.0, 10.0), (10.0, 20.0)))
        assert schedule.rate_at(5.0) == 10.0

    def test_inclusive_at_change_point(self):
        schedule = RateSchedule(((0.0, 10.0), (10.0, 20.0)))
        assert schedule.rate_at(10.0) == 20.0

    def test_before_first_point(self):
        schedule = RateSchedule(((0.0, 10.0),))
        assert schedule.rate_at(-1.0) == 0.0

    def test_non_increasing_times_rejected(self):
        with pytest.raises(ValueError):
            RateSchedule(((0.0, 1.0), (0.0, 2.0)))


class TestMirroring:
    def test_update_and_duplicate_ignored(self, broker):
        real = CellSim(ScenarioConfig(n_ues=1, psr_noise_sigma=0.0, seed=0))
        twin = CellSim(ScenarioConfig(n_ues=1, psr_noise_sigma=0.0, seed=0))
        with LinkEndpoint("rw", broker.host, broker.port) as rw, \
             LinkEndpoint("dt", broker.host, broker.port) as dt:
            dt.subscribe("rw/#")
            real.apply_allocation([2.0])
            real.step_tick()
            real.publish_observation(rw)
            env = dt.poll_envelope(timeout=2.0)
            delay = twin.apply_mirror_update(env)
            assert delay is not None and delay >= 0
            assert twin.step_tick().ues[0].r_act_mbps == 2.0
            # duplicate: ignored and counted, state unchanged
            assert twin.apply_mirror_update(env) is None
            assert twin.stale_updates == 1
            assert twin.step_tick().ues[0].r_act_mbps == 2.0

    def test_idempotence_equals_single_application(self, broker):
        def mirror(times):
            twin = CellSim(ScenarioConfig(n_ues=1, psr_noise_sigma=0.0, seed=5))
            real = CellSim(ScenarioConfig(n_ues=1, psr_noise_sigma=0.0, seed=5))
            with LinkEndpoint("rw2", broker.host, broker.port) as rw, \
                 LinkEndpoint(f"dt{times}", broker.host, broker.port) as dt:
                dt.subscribe("rw/#")
                real.apply_allocation([3.0])
                real.step_tick()
                real.publish_observation(rw)
                env = dt.poll_envelope(timeout=2.0)
                for _ in range(times):
                    twin.apply_mirror_update(env)
            return [twin.step_tick() for _ in range(5)]
        assert mirror(1) == mirror(2)
