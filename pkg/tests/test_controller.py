import numpy as np
import pytest

from ddspc.conic import SolverSettings
from ddspc.controller import (
    ClosedLoopTrace,
    Controller,
    ControllerState,
    InitialStateSampler,
    feedback_input,
    monte_carlo,
    recover_germ_realization,
    run_closed_loop,
)
from ddspc.ocp import OcpAssembler, prepare_initial
from ddspc.conic import solve


def solve_at(assembler, z_k, previous=None):
    init = prepare_initial(np.asarray(z_k, dtype=float), previous)
    program, encoding = assembler.assemble(init)
    solution = solve(program)
    assert solution.optimal
    return assembler.decode(encoding, solution)


class TestGermRecovery:
    def test_identity_columns(self, small_setup):
        from types import SimpleNamespace

        sol = SimpleNamespace(
            z0=np.vstack([np.zeros((1, 2)), np.eye(2), np.zeros((4, 2))]),
            init=None,
        )
        phi = recover_germ_realization(sol, np.array([1.0, 0.0]))
        np.testing.assert_allclose(phi, [1.0, 0.0], atol=1e-12)

    def test_bootstrap_zero_spread_gives_zero_germs(self, small_setup):
        _, _, stack, config = small_setup
        assembler = OcpAssembler(config, stack)
        sol = solve_at(assembler, [0.4, -0.2])
        phi = recover_germ_realization(sol, np.array([0.4, -0.2]))
        np.testing.assert_allclose(phi, 0.0)
        u_cl = feedback_input(sol, phi, stack.t_ini)
        np.testing.assert_allclose(u_cl, sol.u_coeffs[0, stack.t_ini, :])

    def test_round_trip_random_psd(self):
        from types import SimpleNamespace

        rng = np.random.default_rng(0)
        for _ in range(20):
            f = rng.normal(size=(3, 3))
            m = f @ f.T
            mean = rng.normal(size=3)
            z0 = np.vstack([mean[None, :], m.T, np.zeros((2, 3))])
            sol = SimpleNamespace(z0=z0, init=None)
            phi0 = rng.normal(size=3)
            z_k = m @ phi0 + mean
            phi = recover_germ_realization(sol, z_k)
            np.testing.assert_allclose(m @ phi, m @ phi0, atol=1e-8)

    def test_inconsistent_state_raises(self):
        from types import SimpleNamespace

        # rank-1 spread, measured state outside the range
        m = np.outer([1.0, 0.0], [1.0, 0.0])
        sol = SimpleNamespace(z0=np.vstack([np.zeros((1, 2)), m.T, np.zeros((3, 2))]), init=None)
        from ddspc.controller import ControllerInfeasible

        with pytest.raises(ControllerInfeasible):
            recover_germ_realization(sol, np.array([0.0, 1.0]))


class TestFeedbackInput:
    def test_single_coefficient_row(self, small_setup):
        from types import SimpleNamespace

        u_coeffs = np.zeros((7, 5, 1))
        u_coeffs[0, 1, 0] = 0.3
        u_coeffs[1, 1, 0] = 0.5
        sol = SimpleNamespace(u_coeffs=u_coeffs)
        u = feedback_input(sol, np.array([2.0, 0.0]), t_ini=1)
        assert u[0] == pytest.approx(0.3 + 2.0 * 0.5)

    def test_affine_in_measured_state(self, small_setup):
        _, _, stack, config = small_setup
        assembler = OcpAssembler(config, stack)
        boot = solve_at(assembler, [0.5, -0.5])
        sol = solve_at(assembler, [0.52, -0.48], boot)
        # collinear measured states inside the carried range
        mean = sol.z0[0]
        m = sol.z0[1:3].T
        direction = m @ np.array([0.7, -0.2])
        us = []
        for t in (0.0, 0.5, 1.0):
            z = mean + t * direction
            phi = recover_germ_realization(sol, z)
            us.append(feedback_input(sol, phi, stack.t_ini))
        second_diff = us[0] - 2 * us[1] + us[2]
        np.testing.assert_allclose(second_diff, 0.0, atol=1e-9)


class TestClosedLoop:
    def test_origin_stays_near_origin_without_disturbance(self, small_setup):
        from ddspc.lti import realization_step

        plant, _, stack, config = small_setup
        controller = Controller(plant, config, stack)
        state = ControllerState(z_cl=np.zeros(2))
        for _ in range(5):
            init = prepare_initial(state.z_cl, state.previous)
            sol = controller.solve_ocp(init)
            phi = recover_germ_realization(sol, state.z_cl)
            u_cl = feedback_input(sol, phi, stack.t_ini)
            y_cl, z_next = realization_step(plant, state.z_cl, u_cl, np.zeros(1))
            assert np.abs(u_cl).max() < 1e-5
            assert np.abs(y_cl).max() < 1e-5
            state = ControllerState(z_cl=z_next, k=state.k + 1, previous=sol)

    def test_trace_consistency_and_determinism(self, small_setup):
        plant, _, stack, config = small_setup
        trace_a = run_closed_loop(plant, config, stack, t_sim=8, seed=5, z0=np.array([0.6, -0.9]))
        trace_b = run_closed_loop(plant, config, stack, t_sim=8, seed=5, z0=np.array([0.6, -0.9]))
        assert trace_a.to_csv() == trace_b.to_csv()
        # closed-loop output recomputation
        for rec in trace_a.records:
            y = plant.phi @ rec.z_cl + plant.d @ rec.u_cl + rec.w
            np.testing.assert_allclose(y, rec.y_cl, atol=1e-10)
        # extended-state bookkeeping across steps
        for first, second in zip(trace_a.records, trace_a.records[1:]):
            from ddspc.lti import realization_step

            _, z_next = realization_step(plant, first.z_cl, first.u_cl, first.w)
            np.testing.assert_allclose(z_next, second.z_cl, atol=1e-12)

    def test_cost_accounting(self, small_setup):
        plant, _, stack, config = small_setup
        trace = run_closed_loop(plant, config, stack, t_sim=6, seed=9, z0=np.array([1.0, 1.0]))
        for rec in trace.records:
            stage = rec.u_cl @ config.r @ rec.u_cl + rec.y_cl @ config.q @ rec.y_cl
            assert stage == rec.stage_cost
        np.testing.assert_allclose(
            trace.averaged_cost[-1], trace.stage_costs.mean(), atol=1e-12
        )

    def test_replayed_feedback_is_bit_exact(self, small_setup):
        plant, _, stack, config = small_setup
        trace = run_closed_loop(plant, config, stack, t_sim=5, seed=13, z0=np.array([0.2, 0.8]))
        # recompute u from stored phi and the planned coefficients per step
        controller = Controller(plant, config, stack)
        state = ControllerState(z_cl=np.array([0.2, 0.8]))
        rng = np.random.default_rng(np.random.SeedSequence(13))
        for rec in trace.records:
            init = prepare_initial(state.z_cl, state.previous)
            sol = controller.solve_ocp(init)
            u_replay = feedback_input(sol, rec.phi_ini, stack.t_ini)
            assert np.array_equal(u_replay, rec.u_cl)
            from ddspc.lti import realization_step

            _, z_next = realization_step(plant, state.z_cl, rec.u_cl, rec.w)
            state = ControllerState(z_cl=z_next, k=state.k + 1, previous=sol)

    def test_mu_stays_in_unit_interval(self, small_setup):
        plant, _, stack, config = small_setup
        trace = run_closed_loop(plant, config, stack, t_sim=10, seed=21, z0=np.array([2.0, -2.0]))
        mus = trace.array("mu")
        assert np.all(mus >= -1e-9) and np.all(mus <= 1 + 1e-9)


class TestMonteCarlo:
    def test_single_run_matches_run_closed_loop(self, small_setup):
        plant, _, stack, config = small_setup
        sampler = InitialStateSampler(base=(0.5, -0.5), kind="fixed")
        summary = monte_carlo(
            plant, config, stack, n_runs=1, t_sim=4, sampler=sampler, master_seed=3,
            workers=1,
        )
        seed = int(np.random.SeedSequence(3).spawn(1)[0].generate_state(1)[0])
        seq = np.random.SeedSequence(seed)
        rng0 = np.random.default_rng(seq.spawn(1)[0])
        z0 = sampler.sample(rng0)
        trace = ClosedLoopTrace(records=[], seed=seed, alpha=0.0)
        from ddspc.controller import _run_one
        from ddspc.conic import SolverSettings

        trace = _run_one((plant, config, stack, seed, 4, sampler, SolverSettings(), "free"))
        np.testing.assert_allclose(
            summary.values[0], [rec.value for rec in trace.records]
        )

    def test_summary_fields_and_seed_stability(self, small_setup):
        plant, _, stack, config = small_setup
        sampler = InitialStateSampler(base=(0.0, 1.5), spread=0.2, kind="uniform")
        s1 = monte_carlo(
            plant, config, stack, n_runs=4, t_sim=5, sampler=sampler, master_seed=7,
            workers=1, histogram_steps=(0, 4), histogram_component=0,
        )
        s2 = monte_carlo(
            plant, config, stack, n_runs=4, t_sim=5, sampler=sampler, master_seed=7,
            workers=2, histogram_steps=(0, 4), histogram_component=0,
        )
        np.testing.assert_allclose(s1.values, s2.values)
        assert s1.y_all.shape == (4, 5, 1)
        assert 0 in s1.histograms and 4 in s1.histograms
        assert s1.violation_rates[0] <= 1.0
        assert s1.decay_statistic.shape == (4,)
        assert "alpha" in s1.to_json()
        assert s1.histogram_csv().startswith("k,bin_left,bin_right,density")

    def test_failure_isolation(self, small_setup):
        plant, _, stack, config = small_setup
        # an absurd initial state makes one run fail at the germ-recovery
        # consistency check only if predictions are inconsistent; instead force
        # failure via an infeasible mu mode on a tiny iteration budget
        sampler = InitialStateSampler(base=(0.5, -0.5), kind="fixed")
        settings = SolverSettings(max_iter=1, polish=False)
        with pytest.raises(Exception):
            monte_carlo(
                plant, config, stack, n_runs=2, t_sim=2, sampler=sampler,
                master_seed=1, workers=1, settings=settings,
            )
