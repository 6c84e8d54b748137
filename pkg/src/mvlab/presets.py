"""Named coefficient families.

Every preset satisfies the diffusion and drift assumptions with its declared
constants (verified by the test-suite on probe families). Names are stable;
hyphens and underscores are interchangeable when looking one up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet
from .errors import ConfigError
from .measures import theta_moment


def _bump(x):
    return np.exp(-0.5 * np.sum(x * x, axis=1))


def _identity_diffusion(scale: float = 1.0):
    def diffusion(t, x, mu):
        n, d = x.shape
        return np.broadcast_to(scale * np.eye(d), (n, d, d)).copy()

    return diffusion


def _unit(d):
    e = np.zeros(d)
    e[0] = 1.0
    return e


def _tanh_mean(mu):
    return float(np.dot(mu.weights, np.tanh(mu.atoms[:, 0])))


def brownian(dim: int = 1, horizon: float = 1.0) -> CoefficientSet:
    return CoefficientSet(
        dim=dim,
        brownian_dim=dim,
        theta=2.0,
        K=1.5,
        p=4.0 * dim,
        q=8.0,
        drift=lambda t, x, mu: np.zeros_like(x),
        diffusion=_identity_diffusion(),
        envelope=lambda t, x: np.zeros(x.shape[0]),
        horizon=horizon,
        name="brownian",
        state_independent_diffusion=True,
    )


def constant_drift(dim: int = 1, horizon: float = 1.0, magnitude: float = 0.25) -> CoefficientSet:
    e = magnitude * _unit(dim)
    return CoefficientSet(
        dim=dim,
        brownian_dim=dim,
        theta=2.0,
        K=2.0,
        p=4.0 * dim,
        q=8.0,
        drift=lambda t, x, mu: np.broadcast_to(e, x.shape).copy(),
        diffusion=_identity_diffusion(),
        envelope=lambda t, x: np.full(x.shape[0], abs(magnitude)),
        horizon=horizon,
        name="constant_drift",
        state_independent_diffusion=True,
        params={"magnitude": magnitude},
    )


def constant_diffusion_bump_drift(dim: int = 1, horizon: float = 1.0, amplitude: float = 0.5) -> CoefficientSet:
    e = _unit(dim)
    return CoefficientSet(
        dim=dim,
        brownian_dim=dim,
        theta=2.0,
        K=2.0,
        p=4.0 * dim,
        q=8.0,
        drift=lambda t, x, mu: amplitude * _bump(x)[:, None] * e,
        diffusion=_identity_diffusion(),
        envelope=lambda t, x: abs(amplitude) * _bump(x),
        horizon=horizon,
        name="constant_diffusion_bump_drift",
        state_independent_diffusion=True,
        params={"amplitude": amplitude},
    )


def bump_drift_mu_dependent(dim: int = 1, horizon: float = 1.0, amplitude: float = 0.5) -> CoefficientSet:
    e = _unit(dim)

    def drift(t, x, mu):
        return amplitude * (1.0 + _tanh_mean(mu)) * _bump(x)[:, None] * e

    return CoefficientSet(
        dim=dim,
        brownian_dim=dim,
        theta=2.0,
        K=2.0,
        p=4.0 * dim,
        q=8.0,
        drift=drift,
        diffusion=_identity_diffusion(),
        # |1 + mu(tanh)| <= 2 and |mu(tanh) - nu(tanh)| <= ||mu - nu||_TV
        envelope=lambda t, x: 2.0 * abs(amplitude) * _bump(x),
        horizon=horizon,
        name="bump_drift_mu_dependent",
        state_independent_diffusion=True,
        params={"amplitude": amplitude},
    )


def singular_envelope_1d(horizon: float = 1.0, amplitude: float = 0.3, exponent: float = 0.25) -> CoefficientSet:
    def g(x):
        r = np.abs(x[:, 0])
        out = np.zeros_like(r)
        inside = (r < 1.0) & (r > 0.0)
        out[inside] = r[inside] ** (-exponent)
        return out

    def drift(t, x, mu):
        return (amplitude * (1.0 + 0.5 * _tanh_mean(mu)) * np.sign(x[:, 0]) * g(x))[:, None]

    return CoefficientSet(
        dim=1,
        brownian_dim=1,
        theta=2.0,
        K=2.0,
        p=3.0,
        q=8.0,
        drift=drift,
        diffusion=_identity_diffusion(),
        envelope=lambda t, x: 1.5 * abs(amplitude) * g(x),
        horizon=horizon,
        singular_points=((0.0,),),
        name="singular_envelope_1d",
        state_independent_diffusion=True,
        params={"amplitude": amplitude, "exponent": exponent},
    )


def sigma_mu_dependent(horizon: float = 1.0, amplitude: float = 0.5) -> CoefficientSet:
    theta = 2.0

    def diffusion(t, x, mu):
        level = 1.2 + 0.1 * np.sin(x[:, 0]) + 0.3 * np.tanh(theta_moment(mu, theta))
        return level[:, None, None] * np.ones((1, 1, 1))

    return CoefficientSet(
        dim=1,
        brownian_dim=1,
        theta=theta,
        K=3.0,
        p=4.0,
        q=8.0,
        drift=lambda t, x, mu: amplitude * _bump(x)[:, None],
        diffusion=diffusion,
        envelope=lambda t, x: abs(amplitude) * _bump(x),
        horizon=horizon,
        name="sigma_mu_dependent",
        state_independent_diffusion=False,
        params={"amplitude": amplitude},
    )


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    factory: Callable[..., CoefficientSet]
    measure_dependent: bool


_REGISTRY = {
    p.name: p
    for p in (
        Preset("brownian", "b = 0, sigma = I; any dimension", brownian, False),
        Preset("constant_drift", "b = 0.25 e1, sigma = I; exact drifted-Gaussian density", constant_drift, False),
        Preset(
            "constant_diffusion_bump_drift",
            "b = 0.5 exp(-|x|^2/2) e1, sigma = I; bounded, measure-free drift",
            constant_diffusion_bump_drift,
            False,
        ),
        Preset(
            "bump_drift_mu_dependent",
            "b = 0.5 exp(-|x|^2/2)(1 + mu(tanh x1)) e1, sigma = I; exercises both drift clauses",
            bump_drift_mu_dependent,
            True,
        ),
        Preset(
            "singular_envelope_1d",
            "d = 1, b = 0.3 sgn(x)|x|^(-1/4) 1{|x|<1}(1 + mu(tanh)/2); unbounded envelope",
            singular_envelope_1d,
            True,
        ),
        Preset(
            "sigma_mu_dependent",
            "d = 1, sigma = 1.2 + 0.1 sin x + 0.3 tanh ||mu||_2, b = 0.5 exp(-x^2/2)",
            sigma_mu_dependent,
            True,
        ),
    )
}


def _key(name: str) -> str:
    return name.strip().lower().replace("-", "_")


def list_presets() -> list[tuple[str, str]]:
    """(name, description) pairs in registration order."""
    return [(p.name, p.description) for p in _REGISTRY.values()]


def get_preset(name: str) -> Preset:
    try:
        return _REGISTRY[_key(name)]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(_REGISTRY)}", key="preset") from None


def get(name: str, **params) -> CoefficientSet:
    """Instantiate a preset by name, forwarding keyword parameters to its factory."""
    preset = get_preset(name)
    try:
        return preset.factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for preset {preset.name!r}: {exc}", key="preset_params") from None
