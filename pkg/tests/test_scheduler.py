"""Unit commitment: model building, exact branch and bound, schedule audits."""
import numpy as np
import pytest

from stabsched.chance import SocStabilityConstraint, k_eta, spectral_factorize
from stabsched.scheduler import (
    DeterministicStability,
    Scenario,
    UcInfeasibleError,
    UcInstance,
    UnitParams,
    build_uc,
    evaluate_schedule,
    solve_uc,
)
from stabsched.validation import enumerate_uc


def small_units(n=2):
    catalog = (
        UnitParams(name="sg1", bus=1, p_min=10, p_max=80, no_load_cost=4.5,
                   marginal_cost=47.0, startup_cost=10.0, min_up=2, min_down=1),
        UnitParams(name="sg2", bus=2, p_min=10, p_max=60, no_load_cost=3.0,
                   marginal_cost=60.0, startup_cost=5.0, min_up=2, min_down=1),
        UnitParams(name="sg3", bus=3, p_min=5, p_max=50, no_load_cost=3.0,
                   marginal_cost=200.0),
    )
    return catalog[:n]


def small_instance(n_units=2, T=3):
    demand = np.array([60.0, 80.0, 70.0, 75.0][:T])
    wind = np.array([30.0, 40.0, 20.0, 35.0][:T])
    return UcInstance(demand=demand, wind_available=wind, units=small_units(n_units),
                      shed_cost=3000.0, base_power=100.0, wind_capacity=160.0)


def stability_pair(n_units):
    k = 2 + 2 * n_units
    mu = np.concatenate([[0.5], np.full(n_units, 1.2), [0.9],
                         np.full(n_units, -0.15)])
    root = np.linspace(0.02, 0.06, k)
    sigma = np.outer(root, root) + np.diag(np.full(k, 1e-4))
    tau, q = spectral_factorize(sigma)
    det = DeterministicStability(mu, 1.4)
    dro = SocStabilityConstraint(mu=mu, tau=tau, q=q, g_lim=1.4, eta=0.8, k=k_eta(0.8))
    return det, dro


class TestBuildUc:
    def test_single_unit_flat_demand(self):
        inst = UcInstance(demand=np.array([50.0, 50.0]), wind_available=np.zeros(2),
                          units=(UnitParams(name="sg1", bus=1, p_min=5, p_max=80,
                                            no_load_cost=4.5, marginal_cost=47.0,
                                            ramp_frac=1.0),),
                          shed_cost=3000.0, base_power=100.0, wind_capacity=0.0)
        sched = solve_uc(build_uc(inst, None))
        assert np.all(sched.commitment == 1)
        assert sched.cost == pytest.approx(2 * (4.5 + 47.0 * 50 / 1000), abs=1e-4)

    def test_dimension_mismatch_rejected(self):
        inst = small_instance(2)
        with pytest.raises(ValueError):
            build_uc(inst, DeterministicStability(np.ones(5), 1.4))

    def test_deterministic_commits_at_least_unconstrained(self):
        inst = small_instance(2)
        det, _ = stability_pair(2)
        plain = solve_uc(build_uc(inst, None))
        constrained = solve_uc(build_uc(inst, det))
        assert constrained.commitment.sum() >= plain.commitment.sum()

    def test_dro_with_zero_covariance_matches_deterministic_bitwise(self):
        inst = small_instance(2)
        det, _ = stability_pair(2)
        zero = SocStabilityConstraint(mu=det.coefficients, tau=np.zeros(0),
                                      q=np.zeros((0, 6)), g_lim=det.g_lim,
                                      eta=0.8, k=k_eta(0.8))
        a = solve_uc(build_uc(inst, det))
        b = solve_uc(build_uc(inst, zero))
        assert np.array_equal(a.commitment, b.commitment)
        assert a.cost == b.cost
        assert np.array_equal(a.dispatch, b.dispatch)
        assert np.array_equal(a.margins, b.margins)


class TestSolveUc:
    @pytest.mark.parametrize("mode", ["none", "det", "dro"])
    def test_branch_and_bound_matches_enumeration(self, mode):
        inst = small_instance(3, T=4)
        det, dro = stability_pair(3)
        stability = {"none": None, "det": det, "dro": dro}[mode]
        problem = build_uc(inst, stability)
        sched = solve_uc(problem)
        reference, _ = enumerate_uc(problem)
        assert sched.cost == pytest.approx(reference, rel=1e-5, abs=1e-5)

    def test_textbook_two_unit_dispatch(self):
        # no binaries in doubt: both units must run, cheap one at capacity.
        # By hand: P1 = 80, P2 = 20; cost = 2-step mirror of (4.5 + 3.0
        # + 80*47/1000 + 20*60/1000) with no startups from a warm start.
        units = (
            UnitParams(name="a", bus=1, p_min=10, p_max=80, no_load_cost=4.5,
                       marginal_cost=47.0, initially_on=1, initial_power=80.0,
                       ramp_frac=1.0),
            UnitParams(name="b", bus=2, p_min=10, p_max=60, no_load_cost=3.0,
                       marginal_cost=60.0, initially_on=1, initial_power=20.0,
                       ramp_frac=1.0),
        )
        inst = UcInstance(demand=np.array([100.0, 100.0]), wind_available=np.zeros(2),
                          units=units, shed_cost=3000.0, base_power=100.0,
                          wind_capacity=0.0)
        sched = solve_uc(build_uc(inst, None))
        hand = 2 * (4.5 + 3.0 + 80 * 47.0 / 1000 + 20 * 60.0 / 1000)
        assert sched.cost == pytest.approx(hand, abs=1e-4)
        assert np.allclose(sched.dispatch[0, 0], 80.0, atol=1e-4)
        assert np.allclose(sched.dispatch[0, 1], 20.0, atol=1e-4)

    def test_root_bound_below_incumbent(self):
        inst = small_instance(3, T=3)
        det, _ = stability_pair(3)
        sched = solve_uc(build_uc(inst, det))
        assert sched.bound <= sched.cost + 1e-9

    def test_min_up_and_startup_linking_respected(self):
        inst = small_instance(2, T=4)
        sched = solve_uc(build_uc(inst, None))
        for g, unit in enumerate(inst.units):
            x = np.concatenate([[unit.initially_on], sched.commitment[g]])
            starts = np.flatnonzero(np.diff(x) == 1)
            for t in starts:
                window = sched.commitment[g, t: t + unit.min_up]
                assert window.all()

    def test_demand_above_capacity_sheds(self):
        from dataclasses import replace

        units = tuple(replace(u, ramp_frac=1.0) for u in small_units(2))
        inst = UcInstance(demand=np.array([300.0]), wind_available=np.array([0.0]),
                          units=units, shed_cost=3000.0, base_power=100.0,
                          wind_capacity=0.0)
        sched = solve_uc(build_uc(inst, None))
        assert sched.shed[0, 0] == pytest.approx(300.0 - 140.0, abs=1e-4)

    def test_cold_start_output_capped_by_startup_ramp(self):
        inst = UcInstance(demand=np.array([300.0]), wind_available=np.array([0.0]),
                          units=small_units(2), shed_cost=3000.0, base_power=100.0,
                          wind_capacity=0.0)
        sched = solve_uc(build_uc(inst, None))
        caps = [max(u.p_min, u.ramp_frac * u.p_max) for u in inst.units]
        assert np.all(sched.dispatch[0, :, 0] <= np.array(caps) + 1e-4)

    def test_product_linearization_exact_at_solution(self):
        inst = small_instance(2, T=3)
        _, dro = stability_pair(2)
        sched = solve_uc(build_uc(inst, dro))
        X = sched.augmented_decisions()
        w_pu = sched.wind[0] / inst.base_power
        assert np.allclose(X[:, 4:], (sched.commitment * w_pu[None, :]).T, atol=1e-9)

    def test_deterministic_replays(self):
        inst = small_instance(3, T=3)
        det, _ = stability_pair(3)
        a = solve_uc(build_uc(inst, det))
        b = solve_uc(build_uc(inst, det))
        assert np.array_equal(a.commitment, b.commitment)
        assert a.cost == b.cost

    def test_cost_nondecreasing_in_uncertainty_scale(self):
        inst = small_instance(2, T=3)
        det, dro = stability_pair(2)
        sigma = dro.covariance()
        costs = []
        for alpha in (0.0, 0.25, 0.5, 1.0, 2.0):
            tau, q = spectral_factorize(alpha * sigma)
            scaled = SocStabilityConstraint(mu=dro.mu, tau=tau, q=q, g_lim=dro.g_lim,
                                            eta=dro.eta, k=dro.k)
            costs.append(solve_uc(build_uc(inst, scaled)).cost)
        assert all(b >= a - 1e-7 for a, b in zip(costs, costs[1:]))

    def test_scenario_list_supported(self):
        base = small_instance(2, T=2)
        scenarios_ = (
            Scenario(0.6, np.array([60.0, 70.0]), np.array([30.0, 30.0])),
            Scenario(0.4, np.array([80.0, 90.0]), np.array([10.0, 10.0])),
        )
        inst = UcInstance(demand=base.demand[:2], wind_available=base.wind_available[:2],
                          units=base.units, shed_cost=3000.0, base_power=100.0,
                          wind_capacity=160.0, scenarios=scenarios_)
        sched = solve_uc(build_uc(inst, None))
        assert sched.dispatch.shape[0] == 2
        for s, scenario in enumerate(scenarios_):
            bal = sched.dispatch[s].sum(axis=0) + sched.wind[s] + sched.shed[s]
            assert np.allclose(bal, scenario.demand, atol=1e-5)


class TestInstanceFiles:
    def test_roundtrip_with_scenarios(self, tmp_path):
        import json

        from stabsched.scheduler import instance_from_dict, load_instance

        payload = {
            "base_power_mva": 100.0, "wind_capacity_mw": 160.0,
            "shed_cost_per_mwh": 3000.0,
            "demand_mw": [60.0, 70.0], "wind_available_mw": [30.0, 20.0],
            "units": [{"name": "sg1", "bus": 1, "p_min_mw": 10.0, "p_max_mw": 80.0,
                       "no_load_cost": 4.5, "marginal_cost": 47.0, "min_up_h": 2}],
            "scenarios": [
                {"probability": 0.7, "demand_mw": [60.0, 70.0],
                 "wind_available_mw": [30.0, 20.0]},
                {"probability": 0.3, "demand_mw": [80.0, 85.0],
                 "wind_available_mw": [10.0, 5.0]},
            ],
        }
        path = tmp_path / "instance.json"
        path.write_text(json.dumps(payload))
        inst = load_instance(path)
        assert inst.units[0].min_up == 2
        assert len(inst.scenario_list()) == 2
        assert inst.scenario_list()[1].probability == 0.3
        again = instance_from_dict(payload)
        assert np.array_equal(again.demand, inst.demand)

    def test_negative_profile_rejected(self):
        with pytest.raises(ValueError):
            UcInstance(demand=np.array([-1.0]), wind_available=np.array([0.0]),
                       units=small_units(1), shed_cost=100.0, base_power=100.0,
                       wind_capacity=0.0)


class TestEvaluateSchedule:
    def test_all_sources_on_strong_grid(self, desk_grid, desk_instance):
        sched = solve_uc(build_uc(desk_instance, None))
        forced = sched.commitment.copy()
        forced[:] = 1
        from dataclasses import replace

        strong = replace(sched, commitment=forced)
        audit = evaluate_schedule(strong, desk_grid, desk_grid.source_reactances(), 2.5)
        assert audit.rate == 0.0

    def test_unconstrained_weak_grid_violates(self, desk_grid, desk_instance):
        sched = solve_uc(build_uc(desk_instance, None))
        audit = evaluate_schedule(sched, desk_grid, desk_grid.source_reactances(), 2.5)
        assert audit.rate > 0.0

    def test_rate_bounds_and_vacuous_limit(self, desk_grid, desk_instance):
        sched = solve_uc(build_uc(desk_instance, None))
        audit = evaluate_schedule(sched, desk_grid, desk_grid.source_reactances(), 2.5)
        assert 0.0 <= audit.rate <= 1.0
        vacuous = evaluate_schedule(sched, desk_grid, desk_grid.source_reactances(),
                                    -np.inf)
        assert vacuous.rate == 0.0


class TestInfeasibility:
    def test_conflicting_fixed_state_reported(self):
        # demand cannot be met and shedding is not free: still feasible, so
        # force a true infeasibility through an impossible stability row
        inst = small_instance(1, T=2)
        mu = np.array([-10.0, 0.0, 0.0, 0.0])  # surrogate can never reach the limit
        with pytest.raises(UcInfeasibleError):
            solve_uc(build_uc(inst, DeterministicStability(mu, 1.0)))
