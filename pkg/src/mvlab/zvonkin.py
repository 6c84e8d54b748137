"""One-dimensional backward Zvonkin equation, its regularity gate, and the transform x + u_t(x).

Solves  du/dt + 1/2 sigma^2 u'' + b u' + b = lambda u  on [s, T] with u(T, .) = 0,
drift evaluated with the measure flow ``mu_flow`` and diffusion with ``phi_flow``.
Space: centred differences on a truncated box with homogeneous Neumann ends.
Time: Crank-Nicolson, with the first step replaced by four implicit-Euler quarter
steps to damp the start-up oscillations of non-smooth data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg

from . import io
from .coefficients import CoefficientSet
from .errors import ExtrapolationRefused, InvalidParameter, NoAdmissibleLambda, SolverDiverged
from .measures import EmpiricalMeasure, MeasureFlow

log = logging.getLogger(__name__)

GATE = 0.2


@dataclass(frozen=True)
class GridSpec:
    dx: float = 0.05
    n_steps: int = 2000
    half_width: float | None = None  # default 10 + 8 sqrt(K T)
    scheme: str = "crank_nicolson"  # or "implicit_euler"
    center: float = 0.0

    def __post_init__(self):
        if self.dx <= 0 or self.n_steps < 1:
            raise InvalidParameter("dx must be positive and n_steps >= 1")
        if self.scheme not in ("crank_nicolson", "implicit_euler"):
            raise InvalidParameter(f"unknown scheme {self.scheme!r}")


@dataclass
class ZvonkinSolution:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray  # (len(t), len(x)), u[-1] == 0
    lam: float
    sup_u: float
    sup_du: float
    sup_d2u_norm: float


@dataclass
class GateReport:
    passed: bool
    lam: float
    sup_u: float
    sup_du: float
    sup_d2u_norm: float

    def __bool__(self):
        return self.passed

    def as_dict(self):
        return {
            "lambda": self.lam,
            "sup_u": self.sup_u,
            "sup_du": self.sup_du,
            "sup_d2u_norm": self.sup_d2u_norm,
            "pass": self.passed,
        }


def _measure(flow, t):
    return EmpiricalMeasure.dirac([0.0]) if flow is None else flow.at(t)


def _coefficients(coeffs, mu_flow, phi_flow, t, X):
    b = coeffs.b(t, X, _measure(mu_flow, t))[:, 0]
    sig = coeffs.sigma(t, X, _measure(phi_flow, t))
    a = np.sum(sig[:, 0, :] ** 2, axis=1)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise SolverDiverged(f"non-finite coefficients at t = {t}")
    return b, a


def _operator(b, a, dx, lam):
    """Banded (3, n) form of L = a/2 D2 + b D1 - lam with Neumann ends."""
    n = b.shape[0]
    lo = 0.5 * a / dx**2 - 0.5 * b / dx
    hi = 0.5 * a / dx**2 + 0.5 * b / dx
    diag = -a / dx**2 - lam
    upper = hi.copy()
    lower = lo.copy()
    # ghost node mirrors the first interior node: u_{-1} = u_1, u_{n} = u_{n-2}
    upper[0] += lo[0]
    lower[-1] += hi[-1]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return ab


def _apply(ab, u):
    out = ab[1] * u
    out[:-1] += ab[0, 1:] * u[1:]
    out[1:] += ab[2, :-1] * u[:-1]
    return out


def _ltilde_grid(values, x, t, p, q):
    """Discrete sup_z (int (int_{|x-z|<=1} |v|^p dx)^{q/p} dt)^{1/q} with trapezoid weights."""
    dx = x[1] - x[0]
    cum = np.concatenate([np.zeros((values.shape[0], 1)), np.cumsum(np.abs(values) ** p * dx, axis=1)], axis=1)
    half = int(round(1.0 / dx))
    idx = np.arange(x.shape[0])
    lo = np.clip(idx - half, 0, x.shape[0])
    hi = np.clip(idx + half + 1, 0, x.shape[0])
    inner = cum[:, hi] - cum[:, lo]  # (nt, nx)
    integrand = inner ** (q / p)
    outer = integrate.trapezoid(integrand, t, axis=0)
    return float(np.max(outer) ** (1.0 / q))


def solve_backward_pde(
    coeffs: CoefficientSet,
    mu_flow: MeasureFlow | None,
    phi_flow: MeasureFlow | None,
    lam: float,
    grid: GridSpec = GridSpec(),
    s: float = 0.0,
    T: float | None = None,
) -> ZvonkinSolution:
    if coeffs.dim != 1:
        raise InvalidParameter("the Zvonkin solver is one-dimensional")
    if lam < 0:
        raise InvalidParameter("lambda must be >= 0")
    T = coeffs.horizon if T is None else T
    if not T > s:
        raise InvalidParameter("need T > s")
    width = grid.half_width if grid.half_width is not None else 10.0 + 8.0 * math.sqrt(coeffs.K * (T - s))
    nx = int(math.ceil(2 * width / grid.dx)) + 1
    x = grid.center - width + grid.dx * np.arange(nx)
    X = x[:, None]
    t = np.linspace(s, T, grid.n_steps + 1)
    u = np.zeros((t.shape[0], nx))
    cache = {}

    def coef(k_or_t):
        if k_or_t not in cache:
            if len(cache) > 8:
                cache.clear()
            cache[k_or_t] = _coefficients(coeffs, mu_flow, phi_flow, k_or_t, X)
        return cache[k_or_t]

    def implicit(u_next, t_new, dt):
        b, a = coef(t_new)
        ab = _operator(b, a, grid.dx, lam)
        lhs = -dt * ab
        lhs[1] += 1.0
        return linalg.solve_banded((1, 1), lhs, u_next + dt * b)

    for n in range(grid.n_steps - 1, -1, -1):
        dt = t[n + 1] - t[n]
        prev = u[n + 1]
        if grid.scheme == "implicit_euler":
            cur = implicit(prev, t[n], dt)
        elif n == grid.n_steps - 1:
            cur = prev
            for j in range(4):
                cur = implicit(cur, t[n + 1] - (j + 1) * dt / 4, dt / 4)
        else:
            b0, a0 = coef(t[n])
            b1, a1 = coef(t[n + 1])
            ab0 = _operator(b0, a0, grid.dx, lam)
            ab1 = _operator(b1, a1, grid.dx, lam)
            rhs = prev + 0.5 * dt * (_apply(ab1, prev) + b1) + 0.5 * dt * b0
            lhs = -0.5 * dt * ab0
            lhs[1] += 1.0
            try:
                cur = linalg.solve_banded((1, 1), lhs, rhs)
            except (linalg.LinAlgError, ValueError) as exc:
                raise SolverDiverged(f"linear solve failed at t = {t[n]}: {exc}") from None
        if not np.all(np.isfinite(cur)):
            raise SolverDiverged(f"non-finite solution at t = {t[n]}")
        before = np.max(np.abs(prev))
        if before > 1e-12 and np.max(np.abs(cur)) > 10.0 * before:
            raise SolverDiverged(f"sup|u| grew more than tenfold in one step at t = {t[n]}")
        u[n] = cur
    du = np.gradient(u, x, axis=1)
    d2u = np.gradient(du, x, axis=1)
    return ZvonkinSolution(
        x=x,
        t=t,
        u=u,
        lam=float(lam),
        sup_u=float(np.max(np.abs(u))),
        sup_du=float(np.max(np.abs(du))),
        sup_d2u_norm=_ltilde_grid(d2u, x, t, coeffs.p, coeffs.q),
    )


def regularity_gate(sol: ZvonkinSolution) -> GateReport:
    """Passes iff sup|u| + sup|u'| <= 1/5 (+1e-9)."""
    return GateReport(
        passed=bool(sol.sup_u + sol.sup_du <= GATE + 1e-9),
        lam=sol.lam,
        sup_u=sol.sup_u,
        sup_du=sol.sup_du,
        sup_d2u_norm=sol.sup_d2u_norm,
    )


def lambda_search(
    coeffs: CoefficientSet,
    mu_flow: MeasureFlow | None,
    phi_flow: MeasureFlow | None,
    grid: GridSpec,
    lambda_max: float,
    rel_tol: float = 1e-4,
    history: list | None = None,
    s: float = 0.0,
    T: float | None = None,
) -> float:
    """Smallest lambda passing the gate: 0, then 1, 2, 4, ... up to ``lambda_max``, then bisection.

    ``history`` (if given) receives one GateReport per solve, in schedule order.
    """
    if not np.isfinite(lambda_max) or lambda_max < 0:
        raise InvalidParameter("lambda_max must be finite and >= 0")

    seen = [] if history is None else history

    def gate(lam):
        rep = regularity_gate(solve_backward_pde(coeffs, mu_flow, phi_flow, lam, grid, s, T))
        seen.append(rep)
        return rep.passed

    def done(lam):
        rise = schedule_monotonicity(seen)
        if rise > 1e-6:
            log.warning("sup|u| rose by %.3g between increasing lambdas on this grid", rise)
        return float(lam)

    if gate(0.0):
        return done(0.0)
    lo, hi = 0.0, 1.0
    while True:
        if hi > lambda_max:
            if lo < lambda_max and gate(lambda_max):
                hi = lambda_max
                break
            done(lo)
            raise NoAdmissibleLambda(f"regularity gate fails for every lambda <= {lambda_max}")
        if gate(hi):
            break
        lo, hi = hi, 2.0 * hi
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if gate(mid):
            hi = mid
        else:
            lo = mid
    return done(hi)


def schedule_monotonicity(history) -> float:
    """Largest increase of sup|u| between consecutive lambdas in ``history``; <= 0 when non-increasing."""
    pts = sorted((rep.lam, rep.sup_u) for rep in history)
    rises = [b[1] - a[1] for a, b in zip(pts, pts[1:]) if b[0] > a[0]]
    return max(rises, default=0.0)


def theta_transform(sol: ZvonkinSolution, t: float, x):
    """x + u_t(x) by bilinear interpolation; refuses points outside the grid."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    eps = 1e-12 * max(1.0, abs(sol.t[-1]))
    if not (sol.t[0] - eps <= t <= sol.t[-1] + eps):
        raise ExtrapolationRefused(f"t = {t} outside [{sol.t[0]}, {sol.t[-1]}]")
    if np.any(xs < sol.x[0] - 1e-12) or np.any(xs > sol.x[-1] + 1e-12):
        raise ExtrapolationRefused("x outside the spatial grid")
    k = int(np.clip(np.searchsorted(sol.t, t, side="right") - 1, 0, sol.t.shape[0] - 2))
    w = (t - sol.t[k]) / (sol.t[k + 1] - sol.t[k])
    row = (1 - w) * sol.u[k] + w * sol.u[k + 1]
    out = xs + np.interp(xs, sol.x, row)
    return float(out[0]) if np.ndim(x) == 0 else out


def pde_residual(sol: ZvonkinSolution, coeffs, mu_flow, phi_flow, trim: float = 0.25) -> float:
    """Max-norm of du/dt + a/2 u'' + b u' + b - lambda u on interior nodes.

    Derivatives by second-order ``np.gradient`` stencils; a band of width
    ``trim`` times the box is dropped at each spatial end.
    """
    ut = np.gradient(sol.u, sol.t, axis=0)
    ux = np.gradient(sol.u, sol.x, axis=1)
    uxx = np.gradient(ux, sol.x, axis=1)
    n = sol.x.shape[0]
    cut = int(trim * n)
    sl = slice(cut, n - cut)
    worst = 0.0
    X = sol.x[:, None]
    for k, tk in enumerate(sol.t):
        b, a = _coefficients(coeffs, mu_flow, phi_flow, tk, X)
        res = ut[k] + 0.5 * a * uxx[k] + b * ux[k] + b - sol.lam * sol.u[k]
        worst = max(worst, float(np.max(np.abs(res[sl]))))
    return worst


def closed_form_constant(lam: float, T: float, t):
    """u(t) = (1 - exp(-lambda (T - t)))/lambda for b = 1 (T - t at lambda = 0)."""
    t = np.asarray(t, dtype=np.float64)
    if lam == 0:
        return T - t
    return -np.expm1(-lam * (T - t)) / lam


def write_solution(directory, sol: ZvonkinSolution, time_stride: int | None = None):
    """``solution.csv`` with (t, x, u) rows and ``gate.json``."""
    from pathlib import Path

    directory = Path(directory)
    stride = time_stride or max(1, (sol.t.shape[0] - 1) // 50)
    rows = []
    for k in list(range(0, sol.t.shape[0], stride)) + ([sol.t.shape[0] - 1] if (sol.t.shape[0] - 1) % stride else []):
        for xi, ui in zip(sol.x, sol.u[k]):
            rows.append((sol.t[k], xi, ui))
    io.write_csv(directory / "solution.csv", ["t", "x", "u"], rows)
    io.write_json(directory / "gate.json", regularity_gate(sol).as_dict())
