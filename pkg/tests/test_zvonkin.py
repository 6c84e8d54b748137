import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from mvlab import presets
from mvlab import zvonkin as Z
from mvlab.coefficients import CoefficientSet
from mvlab.errors import ExtrapolationRefused, InvalidParameter, NoAdmissibleLambda, SolverDiverged


def constant_case(b, sigma):
    return CoefficientSet(
        dim=1, brownian_dim=1, theta=2, K=max(2.0, sigma**2 + 0.1), p=4, q=8,
        drift=lambda t, x, mu: np.full_like(x, b),
        diffusion=lambda t, x, mu: np.full((x.shape[0], 1, 1), sigma),
        envelope=lambda t, x: np.full(x.shape[0], max(abs(b), 1e-3)),
    )


def test_zero_drift_gives_zero_solution():
    cs = presets.get("brownian")
    sol = Z.solve_backward_pde(cs, None, None, 0.0, Z.GridSpec(n_steps=100))
    assert np.all(sol.u == 0.0)
    assert Z.regularity_gate(sol).passed
    assert Z.lambda_search(cs, None, None, Z.GridSpec(n_steps=100), 10.0) == 0.0


@pytest.mark.parametrize("lam", [0.0, 1.0, 5.0, 20.0])
def test_constant_drift_closed_form(lam):
    sol = Z.solve_backward_pde(constant_case(1.0, math.sqrt(2.0)), None, None, lam)
    exact = Z.closed_form_constant(lam, 1.0, sol.t)[:, None]
    assert np.max(np.abs(sol.u - exact)) < 1e-5


def test_implicit_euler_is_first_order():
    cs = constant_case(1.0, math.sqrt(2.0))
    errs = []
    for n in (100, 200):
        sol = Z.solve_backward_pde(cs, None, None, 5.0, Z.GridSpec(n_steps=n, scheme="implicit_euler"))
        errs.append(np.max(np.abs(sol.u - Z.closed_form_constant(5.0, 1.0, sol.t)[:, None])))
    assert 1.7 < errs[0] / errs[1] < 2.3


def test_lambda_search_matches_root():
    cs = constant_case(1.0, math.sqrt(2.0))
    lam = Z.lambda_search(cs, None, None, Z.GridSpec(n_steps=500), 64.0)
    root = brentq(lambda v: -math.expm1(-v) / v - Z.GATE, 1.0, 10.0)
    assert abs(lam - root) / root < 1e-3
    with pytest.raises(NoAdmissibleLambda):
        Z.lambda_search(cs, None, None, Z.GridSpec(n_steps=200), 2.0)


def test_bump_drift_self_convergence_and_residual():
    cs = presets.get("constant_diffusion_bump_drift")
    coarse = Z.solve_backward_pde(cs, None, None, 3.0, Z.GridSpec(dx=0.05, n_steps=400))
    fine = Z.solve_backward_pde(cs, None, None, 3.0, Z.GridSpec(dx=0.025, n_steps=800))
    xs = np.linspace(-3, 3, 25)
    a = Z.theta_transform(coarse, 0.0, xs) - xs
    b = Z.theta_transform(fine, 0.0, xs) - xs
    assert np.max(np.abs(a - b)) < 1e-3 * max(np.max(np.abs(b)), 1e-12) + 1e-6
    assert Z.pde_residual(fine, cs, None, None) < 1e-2


def test_sup_u_decreases_in_lambda():
    cs = presets.get("bump_drift_mu_dependent")
    sups = [Z.solve_backward_pde(cs, None, None, lam, Z.GridSpec(n_steps=200)).sup_u for lam in (0.0, 1.0, 4.0, 16.0)]
    assert all(x > y for x, y in zip(sups, sups[1:]))


def test_gate_gives_near_identity_transform():
    cs = presets.get("singular_envelope_1d")
    grid = Z.GridSpec(n_steps=300)
    lam = Z.lambda_search(cs, None, None, grid, 256.0, rel_tol=1e-2)
    sol = Z.solve_backward_pde(cs, None, None, lam, grid)
    gate = Z.regularity_gate(sol)
    assert gate.passed and gate.sup_u + gate.sup_du <= Z.GATE
    xs = np.linspace(-4, 4, 200)
    slope = np.diff(Z.theta_transform(sol, 0.0, xs)) / np.diff(xs)
    assert slope.min() >= 1 - Z.GATE - 1e-9


def test_theta_transform_refuses_extrapolation():
    sol = Z.solve_backward_pde(presets.get("brownian"), None, None, 0.0, Z.GridSpec(n_steps=10))
    with pytest.raises(ExtrapolationRefused):
        Z.theta_transform(sol, 0.0, sol.x[-1] + 1.0)
    with pytest.raises(ExtrapolationRefused):
        Z.theta_transform(sol, 2.0, 0.0)
    assert Z.theta_transform(sol, 0.5, 0.3) == pytest.approx(0.3)


def test_invalid_inputs_and_divergence():
    with pytest.raises(InvalidParameter):
        Z.GridSpec(dx=-1.0)
    with pytest.raises(InvalidParameter):
        Z.GridSpec(scheme="explicit")
    with pytest.raises(InvalidParameter):
        Z.solve_backward_pde(presets.get("brownian", dim=2), None, None, 0.0)
    with pytest.raises(InvalidParameter):
        Z.solve_backward_pde(presets.get("brownian"), None, None, -1.0)
    with pytest.raises(SolverDiverged):
        Z.solve_backward_pde(constant_case(float("nan"), 1.0), None, None, 0.0, Z.GridSpec(n_steps=5))


def test_write_solution(tmp_path):
    sol = Z.solve_backward_pde(constant_case(1.0, 1.0), None, None, 5.0, Z.GridSpec(n_steps=20))
    Z.write_solution(tmp_path, sol)
    gate = json.loads((tmp_path / "gate.json").read_text())
    assert set(gate) == {"lambda", "sup_u", "sup_du", "sup_d2u_norm", "pass"}
    header = (tmp_path / "solution.csv").read_text().splitlines()[0]
    assert header == "t,x,u"


def test_search_schedule_is_monotone():
    history = []
    Z.lambda_search(presets.get("bump_drift_mu_dependent"), None, None, Z.GridSpec(n_steps=200), 64.0,
                    rel_tol=1e-2, history=history)
    assert len(history) >= 3
    assert Z.schedule_monotonicity(history) <= 1e-6


def test_residual_shrinks_under_refinement():
    cs = presets.get("constant_diffusion_bump_drift")
    res = [
        Z.pde_residual(Z.solve_backward_pde(cs, None, None, 2.0, Z.GridSpec(dx=dx, n_steps=n)), cs, None, None)
        for dx, n in ((0.1, 100), (0.05, 200))
    ]
    assert res[1] < 0.6 * res[0]
