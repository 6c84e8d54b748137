import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvlab import kernels, presets
from mvlab.coefficients import CoefficientSet
from mvlab.errors import InvalidParameter, SimulationDiverged
from mvlab.measures import EmpiricalMeasure, MeasureFlow
from mvlab.simulator import (
    SimulationPlan,
    estimate_invariance_N,
    initial_particles,
    invariant_class_check,
    minimal_invariant_N,
    moment_report,
    phi_map,
    picard_solve,
    random_class_flow,
    segment_bounds,
    simulate_frozen,
    simulate_mckean_vlasov,
)

ORIGIN = EmpiricalMeasure.dirac([0.0])


def test_plan_validation():
    with pytest.raises(InvalidParameter):
        SimulationPlan(10, [0.0, 0.0])
    with pytest.raises(InvalidParameter):
        SimulationPlan(0, [0.0, 1.0])
    with pytest.raises(InvalidParameter):
        SimulationPlan(10, [0.0, 1.0], scheme="milstein")
    with pytest.raises(InvalidParameter):
        SimulationPlan(10, [0.0, 1.0], workers=0)


def test_brownian_terminal_law():
    cs = presets.get("brownian")
    ens = simulate_mckean_vlasov(cs, ORIGIN, SimulationPlan.uniform(20000, 0, 1, 10, seed=2))
    x = ens.terminal[:, 0]
    se = np.sqrt(2 / x.size)
    assert abs(x.mean()) < 5 / np.sqrt(x.size)
    assert abs(x.var() - 1.0) < 5 * se


def test_constant_drift_is_exact_shift():
    cs = presets.get("constant_drift", magnitude=0.7)
    plan = SimulationPlan.uniform(500, 0, 1, 8, seed=4)
    drifted = simulate_mckean_vlasov(cs, ORIGIN, plan).paths
    free = simulate_mckean_vlasov(presets.get("brownian"), ORIGIN, plan).paths
    assert np.allclose(drifted - free, 0.7 * plan.time_grid[None, :, None], atol=1e-12)


def test_one_step_matches_noise_stream():
    cs = presets.get("constant_diffusion_bump_drift")
    plan = SimulationPlan(64, [0.0, 0.04], seed=9)
    ens = simulate_mckean_vlasov(cs, ORIGIN, plan)
    b0 = 0.5  # bump drift at the origin
    expected = b0 * 0.04 + 0.2 * kernels.normals(9, 0, 0, 64, 1)
    assert np.allclose(ens.terminal, expected, atol=1e-15)


@pytest.mark.parametrize("preset", ["bump_drift_mu_dependent", "sigma_mu_dependent"])
def test_paths_identical_across_workers(preset):
    cs = presets.get(preset)
    runs = [
        simulate_mckean_vlasov(cs, ORIGIN, SimulationPlan.uniform(1001, 0, 0.5, 12, seed=5, workers=w)).paths
        for w in (1, 2, 8)
    ]
    assert all(np.array_equal(runs[0], r) for r in runs[1:])


def test_step_offset_continues_the_stream():
    cs = presets.get("brownian")
    whole = simulate_mckean_vlasov(cs, ORIGIN, SimulationPlan.uniform(50, 0, 1, 4, seed=1))
    first = simulate_mckean_vlasov(cs, ORIGIN, SimulationPlan(50, whole.times[:3], seed=1))
    rest = simulate_mckean_vlasov(
        cs, EmpiricalMeasure.uniform(first.terminal), SimulationPlan(50, whole.times[2:], seed=1, step_offset=2)
    )
    assert np.allclose(rest.terminal, whole.terminal, atol=1e-14)


def test_mixture_initial_law():
    gamma = EmpiricalMeasure([[-1.0], [2.0]], [0.3, 0.7])
    x = initial_particles(gamma, 20000, seed=3)[:, 0]
    frac = np.mean(x == -1.0)
    assert abs(frac - 0.3) < 5 * np.sqrt(0.21 / 20000)


def _cs(drift):
    return CoefficientSet(dim=1, brownian_dim=1, theta=2, K=2, p=4, q=8, drift=drift,
                          diffusion=lambda t, x, mu: np.ones((x.shape[0], 1, 1)), envelope=lambda t, x: np.ones(x.shape[0]))


def test_drift_cap_bounds_each_step():
    cs = _cs(lambda t, x, mu: np.full_like(x, 1e6))
    plan = SimulationPlan.uniform(100, 0, 0.1, 10, seed=0, drift_cap_factor=2.0)
    ens = simulate_frozen(cs, MeasureFlow.constant(ORIGIN, plan.time_grid), ORIGIN, plan)
    assert ens.cap_events == 100 * 10
    free = simulate_frozen(presets.get("brownian"), MeasureFlow.constant(ORIGIN, plan.time_grid), ORIGIN, plan)
    cap = 2.0 * np.sqrt(2 * 0.01)
    assert np.allclose(ens.terminal - free.terminal, 10 * cap)


def test_non_finite_drift_raises_with_location():
    def drift(t, x, mu):
        out = np.zeros_like(x)
        out[x[:, 0] > 1.0] = np.nan
        return out

    plan = SimulationPlan.uniform(200, 0, 1, 50, seed=0)
    with pytest.raises(SimulationDiverged) as info:
        simulate_frozen(_cs(drift), MeasureFlow.constant(ORIGIN, plan.time_grid), ORIGIN, plan)
    assert info.value.step >= 0 and 0 <= info.value.particle < 200


def test_phi_ignores_flow_for_measure_free_drift():
    cs = presets.get("constant_diffusion_bump_drift")
    plan = SimulationPlan.uniform(300, 0, 0.5, 10, seed=2)
    a = phi_map(cs, ORIGIN, MeasureFlow.constant(ORIGIN, plan.time_grid), plan)
    b = phi_map(cs, ORIGIN, MeasureFlow.constant(EmpiricalMeasure.dirac([3.0]), plan.time_grid), plan)
    assert all(np.array_equal(m.atoms, n.atoms) for m, n in zip(a.measures, b.measures))


def test_picard_measure_free_two_iterations():
    cs = presets.get("constant_diffusion_bump_drift")
    plan = SimulationPlan.uniform(2000, 0, 0.2, 20, seed=7)
    res = picard_solve(cs, ORIGIN, plan, tol=1e-12, max_iter=10, t0=0.05)
    assert res.segments == 4
    assert res.iterations == [2, 2, 2, 2]
    assert res.converged


def test_picard_fixed_point_is_mckean_vlasov_solution():
    cs = presets.get("bump_drift_mu_dependent")
    plan = SimulationPlan.uniform(3000, 0, 0.2, 20, seed=7)
    res = picard_solve(cs, ORIGIN, plan, tol=1e-13, max_iter=30, t0=0.2)
    assert res.converged
    assert all(r < 1 for r in res.contraction_ratios)
    # the fixed point reproduces itself under Phi
    again = phi_map(cs, ORIGIN, res.flow, plan)
    assert np.allclose(again.measures[-1].atoms, res.flow.measures[-1].atoms, atol=1e-9)


@given(st.lists(st.floats(0.01, 0.3), min_size=1, max_size=30), st.floats(0.02, 1.0))
def test_segment_bounds_partition(steps, t0):
    grid = np.concatenate([[0.0], np.cumsum(steps)])
    segs = segment_bounds(grid, t0)
    assert segs[0][0] == 0 and segs[-1][1] == grid.size - 1
    for (a, b), (c, _) in zip(segs, segs[1:]):
        assert b == c
    for a, b in segs:
        assert b == a + 1 or grid[b] - grid[a] <= t0 + 1e-12


@given(st.integers(0, 10**6), st.floats(0.0, 3.0), st.floats(1.0, 4.0))
def test_random_class_flows_are_in_class(seed, N, theta):
    rng = np.random.default_rng(seed)
    gamma = EmpiricalMeasure([[0.5], [-1.0]], [0.5, 0.5])
    flow = random_class_flow(gamma, np.linspace(0, 1, 6), N, theta, rng)
    assert invariant_class_check(flow, gamma, N, theta)
    n_min = minimal_invariant_N(flow, gamma, theta)
    assert n_min <= N + 1e-9
    assert invariant_class_check(flow, gamma, n_min, theta)


def test_minimal_N_is_sharp():
    times = np.linspace(0, 1, 5)
    flow = MeasureFlow(times, tuple(EmpiricalMeasure.dirac([3 * t]) for t in times))
    n_min = minimal_invariant_N(flow, ORIGIN, 2.0)
    assert n_min > 0
    assert invariant_class_check(flow, ORIGIN, n_min, 2.0)
    assert not invariant_class_check(flow, ORIGIN, 0.95 * n_min, 2.0)


def test_phi_keeps_fitted_class():
    cs = presets.get("bump_drift_mu_dependent")
    plan = SimulationPlan.uniform(1000, 0, 1, 10, seed=3)
    N = estimate_invariance_N(cs, ORIGIN, plan, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        flow = random_class_flow(ORIGIN, plan.time_grid, N, cs.theta, rng)
        assert invariant_class_check(phi_map(cs, ORIGIN, flow, plan), ORIGIN, N, cs.theta)


def test_moment_report_brownian():
    cs = presets.get("brownian")
    ens = simulate_mckean_vlasov(cs, ORIGIN, SimulationPlan.uniform(4000, 0, 1, 20, seed=0))
    rep = moment_report(ens, 2.0)
    terminal = np.mean(1 + ens.terminal[:, 0] ** 2)
    assert rep.sup_moment_theta >= terminal
    assert np.isfinite(rep.sup_moment_stderr) and rep.sup_moment_stderr > 0
    assert np.all(np.diff(rep.horizon_moments) >= 0)
    assert np.isfinite(rep.fitted_growth_rate)
    with pytest.raises(InvalidParameter):
        moment_report(ens, 0.5)
