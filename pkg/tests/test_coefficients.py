import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from mvlab import presets
from mvlab.coefficients import (
    CoefficientSet,
    QuadratureSpec,
    SamplePlan,
    kato_class_check,
    tilde_lpq_norm,
    verify_A1,
    verify_A2,
)
from mvlab.errors import ConfigError, DegenerateDiffusion, DivergentNorm, EnvelopeViolation, InvalidParameter

PRESETS = [name for name, _ in presets.list_presets()]


@given(st.integers(1, 3), st.floats(1.01, 50), st.floats(1.01, 50))
def test_kato_class_definition(d, p, q):
    assert kato_class_check(p, q, d) == (d / p + 2 / q < 1)


def test_kato_class_rejects_boundary_and_small_exponents():
    assert not kato_class_check(2.0, 4.0, 1)
    assert not kato_class_check(1.0, 100.0, 1)
    with pytest.raises(InvalidParameter):
        dataclasses.replace(presets.get("brownian"), p=2.0, q=4.0)


@pytest.mark.parametrize("name", PRESETS)
def test_presets_satisfy_assumptions(name):
    cs = presets.get(name)
    plan = SamplePlan(seed=3, n_probes=60)
    a1, a2 = verify_A1(cs, plan), verify_A2(cs, plan)
    assert a1.ok, a1.as_dict()
    assert a2.ok, a2.as_dict()
    assert 0 < cs.delta < 1


def test_preset_registry():
    assert presets.get_preset("bump-drift-mu-dependent").name == "bump_drift_mu_dependent"
    with pytest.raises(ConfigError):
        presets.get_preset("nope")
    with pytest.raises(ConfigError):
        presets.get("brownian", nonsense=1)
    assert presets.get("brownian", dim=2).dim == 2


def _cs(drift, diffusion, envelope, **kw):
    return CoefficientSet(dim=1, brownian_dim=1, theta=2, K=2, p=4, q=8, drift=drift, diffusion=diffusion,
                          envelope=envelope, **kw)


def test_degenerate_diffusion_detected():
    cs = _cs(lambda t, x, mu: np.zeros_like(x), lambda t, x, mu: np.zeros((x.shape[0], 1, 1)),
             lambda t, x: np.ones(x.shape[0]))
    with pytest.raises(DegenerateDiffusion):
        verify_A1(cs, SamplePlan(n_probes=5))


def test_envelope_violation_detected():
    cs = _cs(lambda t, x, mu: np.ones_like(x), lambda t, x, mu: np.ones((x.shape[0], 1, 1)),
             lambda t, x: np.zeros(x.shape[0]))
    with pytest.raises(EnvelopeViolation):
        verify_A2(cs, SamplePlan(n_probes=5))


def test_drift_above_envelope_fails_growth():
    cs = _cs(lambda t, x, mu: 3 * np.ones_like(x), lambda t, x, mu: np.ones((x.shape[0], 1, 1)),
             lambda t, x: np.ones(x.shape[0]))
    rep = verify_A2(cs, SamplePlan(n_probes=20))
    assert not rep.ok and rep.drift_envelope_ratio > 1


def test_lpq_norm_constant_function():
    for p, q in [(3.0, 8.0), (4.0, 6.0)]:
        norm = tilde_lpq_norm(lambda u, x: np.ones(x.shape[0]), p, q, 0.0, 1.0, [[0.0]])
        assert norm.value == pytest.approx(2 ** (1 / p), rel=1e-12)


def test_lpq_norm_singular_power_against_scipy():
    p, q, alpha = 3.0, 8.0, 0.25

    def f(u, x):
        return np.abs(x[:, 0]) ** -alpha

    norm = tilde_lpq_norm(f, p, q, 0.0, 0.5, [[0.0], [0.5]], singular_points=[[0.0]])
    inner, _ = integrate.quad(lambda x: abs(x) ** (-alpha * p), -1, 1, points=[0.0])
    exact = 0.5 ** (1 / q) * inner ** (1 / p)
    assert norm.center[0] == 0.0
    assert norm.extrapolated == pytest.approx(exact, rel=1e-3)


def test_lpq_norm_divergent():
    def f(u, x):
        return np.abs(x[:, 0]) ** -0.5

    with pytest.raises(DivergentNorm):
        tilde_lpq_norm(f, 2.0, 8.0, 0.0, 1.0, [[0.0]], quad=QuadratureSpec(levels=4), singular_points=[[0.0]])


def test_lpq_norm_time_localised():
    def f(u, x):
        return np.full(x.shape[0], 1.0 + u)

    norm = tilde_lpq_norm(f, 2.0, 4.0, 0.0, 1.0, [[0.0]])
    exact = (integrate.quad(lambda u: (2 * (1 + u) ** 2) ** 2, 0, 1)[0]) ** 0.25
    assert norm.value == pytest.approx(exact, rel=1e-10)
