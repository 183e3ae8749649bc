import numpy as np
import pytest

from twinet.netsim import CellSim, NetworkState, ScenarioConfig, UEStat
from twinet.sadr import (
    DEFER_TO_TWIN,
    LAUNCH_DIRECTLY,
    SAFE_FALLBACK,
    ActionSet,
    LocalTwinGate,
    SadrConfig,
    SadrController,
    TrafficRequest,
    TwinEvaluation,
    calibrate_app_requirements,
    compute_risk,
    default_instances,
    map_action_to_rate,
    per_tick_reward,
    run_escalating_scenario,
    twin_evaluate,
    twin_sim_for,
)


def make_state(psr, r_exp, r_act):
    ues = tuple(
        UEStat(r_exp_mbps=e, r_act_mbps=a, packets_sent=0, packets_received=0,
               psr=p)
        for p, e, a in zip(psr, r_exp, r_act)
    )
    return NetworkState(0, ues, sum(r_act))


class TestActionMapping:
    def test_endpoints(self):
        assert map_action_to_rate(0) == 0.0
        assert map_action_to_rate(9) == 4.5

    def test_linear_spacing(self):
        assert map_action_to_rate(5) == 2.5

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            map_action_to_rate(10)

    def test_action_set_invariants(self):
        with pytest.raises(ValueError):
            ActionSet(actions=tuple(float(a) for a in range(10)))


class TestRisk:
    @pytest.mark.parametrize("vector,expected", [
        ([0, 0, 0], 0.0),
        ([4.5, 4.5, 4.5], 1.5),
        ([1.5, 1.5, 1.5], 0.5),
    ])
    def test_normalized_demand(self, vector, expected):
        assert compute_risk(vector, 9.0) == pytest.approx(expected)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            compute_risk([-1.0], 9.0)


class TestPerTickReward:
    def test_full_grant_full_psr(self):
        state = make_state([1, 1, 1], [2, 2, 2], [2, 2, 2])
        assert per_tick_reward(state) == 3.0

    def test_deficit_arithmetic(self):
        state = make_state([0.8], [3.0], [1.5])
        assert per_tick_reward(state) == pytest.approx(0.3)

    def test_zero_expected_rate_has_no_deficit(self):
        state = make_state([1, 1, 1], [0, 0, 0], [0, 0, 0])
        assert per_tick_reward(state) == 3.0

    def test_never_exceeds_ue_count(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = rng.integers(1, 5)
            r_exp = rng.uniform(0, 5, n)
            r_act = r_exp * rng.uniform(0, 1, n)
            psr = rng.uniform(0, 1, n)
            state = make_state(psr, r_exp, r_act)
            assert per_tick_reward(state) <= n + 1e-12


class TestTwinEvaluate:
    def test_safe_setup_scores_maximum(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.0, seed=1)
        req = TrafficRequest(1, (3, 3, 3), (1.5, 1.5, 1.5))
        evaluation = twin_evaluate(CellSim(scenario), req, horizon=20)
        assert evaluation.twin_reward == pytest.approx(3.0)

    def test_congested_request_score(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.0, seed=1)
        req = TrafficRequest(2, (9, 9, 9), (4.5, 4.5, 4.5))
        evaluation = twin_evaluate(CellSim(scenario), req, horizon=20)
        assert evaluation.twin_reward == pytest.approx(2.0)

    def test_reward_matches_tick_log_recompute(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.05, seed=8)
        sim = CellSim(scenario)
        req = TrafficRequest(3, (8, 8, 8), (4.0, 4.0, 4.0))
        evaluation = twin_evaluate(sim, req, horizon=30)
        recomputed = [per_tick_reward(s) for s in sim.tick_log]
        assert evaluation.per_tick_rewards == tuple(recomputed)
        assert evaluation.twin_reward == pytest.approx(np.mean(recomputed))


def controller(send=lambda req: None, threshold=0.8, app_req=2.5):
    sim = CellSim(ScenarioConfig(psr_noise_sigma=0.0, seed=0))
    config = SadrConfig(risk_threshold=threshold, app_requirements=app_req,
                        safe_setup=(1.5, 1.5, 1.5))
    return SadrController(config, sim, send_eval_request=send), sim


class TestControllerBranches:
    def test_low_risk_launches_directly(self):
        ctrl, sim = controller()
        req = TrafficRequest(1, (3, 3, 3), (1.5, 1.5, 1.5))  # risk 0.5
        assert ctrl.on_traffic_request(req) == LAUNCH_DIRECTLY
        assert ctrl.applied_rates == (1.5, 1.5, 1.5)

    def test_high_risk_defers(self):
        sent = []
        ctrl, sim = controller(send=sent.append)
        req = TrafficRequest(2, (9, 9, 9), (4.5, 4.5, 4.5))  # risk 1.5
        assert ctrl.on_traffic_request(req) == DEFER_TO_TWIN
        assert sent == [req]
        assert ctrl.applied_rates is None

    def test_risk_exactly_at_threshold_launches(self):
        ctrl, _ = controller(threshold=0.5)
        req = TrafficRequest(3, (3, 3, 3), (1.5, 1.5, 1.5))  # risk = 0.5
        assert ctrl.on_traffic_request(req) == LAUNCH_DIRECTLY

    def test_good_verdict_applies_requested(self):
        ctrl, _ = controller()
        req = TrafficRequest(4, (9, 9, 9), (4.5, 4.5, 4.5))
        ctrl.on_traffic_request(req)
        applied = ctrl.on_twin_evaluation_completed(
            TwinEvaluation(4, twin_reward=2.6, per_tick_rewards=(2.6,))
        )
        assert applied == (4.5, 4.5, 4.5)

    def test_bad_verdict_applies_safe_setup(self):
        ctrl, _ = controller()
        req = TrafficRequest(5, (9, 9, 9), (4.5, 4.5, 4.5))
        ctrl.on_traffic_request(req)
        applied = ctrl.on_twin_evaluation_completed(
            TwinEvaluation(5, twin_reward=2.4, per_tick_rewards=(2.4,))
        )
        assert applied == (1.5, 1.5, 1.5)

    def test_verdict_exactly_at_requirement_applies_requested(self):
        ctrl, _ = controller(app_req=2.5)
        req = TrafficRequest(6, (9, 9, 9), (4.5, 4.5, 4.5))
        ctrl.on_traffic_request(req)
        applied = ctrl.on_twin_evaluation_completed(
            TwinEvaluation(6, twin_reward=2.5, per_tick_rewards=(2.5,))
        )
        assert applied == (4.5, 4.5, 4.5)

    def test_unknown_request_id_ignored_and_counted(self):
        ctrl, _ = controller()
        assert ctrl.on_twin_evaluation_completed(
            TwinEvaluation(99, twin_reward=3.0, per_tick_rewards=())
        ) is None
        assert ctrl.unknown_results == 1

    def test_twin_unreachable_falls_back_to_safe(self):
        def broken(req):
            raise ConnectionError("link down")
        ctrl, _ = controller(send=broken)
        req = TrafficRequest(7, (9, 9, 9), (4.5, 4.5, 4.5))
        assert ctrl.on_traffic_request(req) == SAFE_FALLBACK
        assert ctrl.applied_rates == (1.5, 1.5, 1.5)
        assert ctrl.flagged


class TestEscalatingScenario:
    def test_lowest_demand_arms_equal(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.0, seed=4)
        config = SadrConfig(risk_threshold=0.8, app_requirements=2.9,
                            safe_setup=(1.5, 1.5, 1.5), twin_horizon_ticks=20)
        result = run_escalating_scenario(scenario, config, repetitions=2,
                                         dwell_ticks=10,
                                         instances=[(1, 1, 1)])
        assert result.mean_reward("gated") == pytest.approx(
            result.mean_reward("ungated"))
        assert result.mean_reward("gated") == pytest.approx(3.0)

    def test_highest_demand_gated_wins(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.0, seed=4)
        config = SadrConfig(risk_threshold=0.8, app_requirements=2.9,
                            safe_setup=(1.5, 1.5, 1.5), twin_horizon_ticks=20)
        result = run_escalating_scenario(scenario, config, repetitions=2,
                                         dwell_ticks=10,
                                         instances=[(9, 9, 9)])
        assert result.mean_reward("gated") >= result.mean_reward("ungated")
        assert result.mean_reward("ungated") == pytest.approx(2.0)
        assert result.mean_reward("gated") == pytest.approx(3.0)

    def test_default_instances_escalate(self):
        instances = default_instances(3)
        demands = [sum(map_action_to_rate(a) for a in inst)
                   for inst in instances]
        assert demands == sorted(demands)
        assert len(instances) == 9

    def test_calibration_is_moderate_baseline(self):
        scenario = ScenarioConfig(psr_noise_sigma=0.0, seed=0)
        assert calibrate_app_requirements(scenario, (1.5, 1.5, 1.5)) == 3.0

    def test_twin_sim_seed_is_reproducible(self):
        scenario = ScenarioConfig(seed=12)
        a = twin_sim_for(scenario, 5)
        b = twin_sim_for(scenario, 5)
        c = twin_sim_for(scenario, 6)
        assert a.config.seed == b.config.seed != c.config.seed
