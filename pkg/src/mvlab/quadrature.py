"""Gauss-Legendre / Gauss-Hermite rules and the endpoint-singularity time substitution."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _gl(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=64)
def _gh(n: int):
    # probabilists' Hermite: weights normalised to the standard normal law
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(a: float, b: float, n: int):
    """Nodes and weights of the n-point rule on [a, b]."""
    x, w = _gl(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def composite_gauss_legendre(breaks, n: int, panels: int = 1):
    """Composite rule over consecutive break intervals, each split into ``panels`` panels."""
    breaks = np.asarray(breaks, dtype=np.float64)
    edges = [np.linspace(lo, hi, panels + 1) for lo, hi in zip(breaks[:-1], breaks[1:]) if hi > lo]
    edges = np.unique(np.concatenate(edges)) if edges else breaks
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre(lo, hi, n)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def gauss_hermite(n: int):
    """Nodes/weights with sum w g(x) ~ E[g(Z)], Z ~ N(0, 1)."""
    return _gh(n)


def sin2_nodes(a: float, b: float, n: int):
    """Rule on [a, b] after u = a + (b - a) sin^2(pi v / 2).

    The Jacobian vanishes like sqrt at both ends, which absorbs integrable
    (u - a)^(-1/2) and (b - u)^(-1/2) singularities.
    """
    v, w = gauss_legendre(0.0, 1.0, n)
    u = a + (b - a) * np.sin(0.5 * np.pi * v) ** 2
    jac = (b - a) * 0.5 * np.pi * np.sin(np.pi * v)
    return u, w * jac


def tensor_grid(axes_nodes, axes_weights):
    """Tensor product of per-axis rules -> (N, d) nodes and (N,) weights."""
    mesh = np.meshgrid(*axes_nodes, indexing="ij")
    nodes = np.stack([m.reshape(-1) for m in mesh], axis=1)
    wmesh = np.meshgrid(*axes_weights, indexing="ij")
    weights = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=1), axis=1)
    return nodes, weights
