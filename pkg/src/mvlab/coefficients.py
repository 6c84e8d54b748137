"""Problem data (drift, diffusion, singular envelope, constants) and probe-based assumption checks.

Coefficient callables are vectorised over particles:

* ``drift(t, x, mu) -> (n, d)`` for ``x`` of shape (n, d),
* ``diffusion(t, x, mu) -> (n, d, m)``,
* ``envelope(t, x) -> (n,)``, nonnegative.

Callables must be safe to call concurrently; nothing here caches across calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import quadrature
from .errors import DegenerateDiffusion, DivergentNorm, EnvelopeViolation, InvalidParameter
from .measures import EmpiricalMeasure, theta_moment, wasserstein, weighted_tv

SLACK = 1e-9


def kato_class_check(p: float, q: float, d: int) -> bool:
    """True iff p > 1, q > 1 and d/p + 2/q < 1."""
    return bool(p > 1 and q > 1 and d / p + 2.0 / q < 1.0)


@dataclass
class CoefficientSet:
    dim: int
    brownian_dim: int
    theta: float
    K: float
    p: float
    q: float
    drift: Callable
    diffusion: Callable
    envelope: Callable
    horizon: float = 1.0
    singular_points: tuple = ()
    name: str = "custom"
    # sigma(t, x, mu) does not depend on x; enables covariance caching in the parametrix
    state_independent_diffusion: bool = False
    description: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1 or self.brownian_dim < 1:
            raise InvalidParameter("dimensions must be positive")
        if self.theta < 1:
            raise InvalidParameter(f"theta must be >= 1, got {self.theta}")
        if self.K <= 0:
            raise InvalidParameter(f"K must be positive, got {self.K}")
        if self.horizon <= 0:
            raise InvalidParameter("horizon must be positive")
        if not kato_class_check(self.p, self.q, self.dim):
            raise InvalidParameter(f"(p, q) = ({self.p}, {self.q}) violates d/p + 2/q < 1 at d = {self.dim}")
        self.singular_points = tuple(tuple(float(c) for c in np.atleast_1d(z)) for z in self.singular_points)

    @property
    def delta(self) -> float:
        return 0.5 * (1.0 - self.dim / self.p - 2.0 / self.q)

    def b(self, t, x, mu) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.asarray(self.drift(t, x, mu), dtype=np.float64).reshape(x.shape[0], self.dim)

    def sigma(self, t, x, mu) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.asarray(self.diffusion(t, x, mu), dtype=np.float64)
        return out.reshape(x.shape[0], self.dim, self.brownian_dim)

    def f(self, t, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.asarray(self.envelope(t, x), dtype=np.float64).reshape(x.shape[0])

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "brownian_dim": self.brownian_dim,
            "theta": self.theta,
            "K": self.K,
            "p": self.p,
            "q": self.q,
            "horizon": self.horizon,
            "singular_points": [list(z) for z in self.singular_points],
            "params": dict(self.params),
        }


@dataclass(frozen=True)
class QuadratureSpec:
    n_space: int = 8
    n_time: int = 8
    levels: int = 3
    divergence_ratio: float = 0.9


@dataclass
class LpqNorm:
    value: float
    center: np.ndarray
    level_values: list
    extrapolated: float


GRADING = 0.5


def _graded_edges(lo, hi, toward_lo, toward_hi, level):
    """2**level uniform panels plus 12 (level + 1) geometric layers toward singular ends.

    The layer count grows linearly with the level, so a non-integrable
    singularity shows up as a level sequence that keeps growing.
    """
    panels = 2**level
    edges = set(np.linspace(lo, hi, panels + 1).tolist())
    layers = 12 * (level + 1)
    width = hi - lo
    for j in range(1, layers + 1):
        step = width * GRADING**j
        if step < 1e-14 * max(1.0, abs(lo), abs(hi)):
            break
        if toward_lo:
            edges.add(lo + step)
        if toward_hi:
            edges.add(hi - step)
    return np.array(sorted(edges))


def _ball_rule(z, singular, n, level):
    d = z.shape[0]
    nodes_ax, w_ax = [], []
    for k in range(d):
        sing = {float(s[k]) for s in singular if z[k] - 1.0 <= s[k] <= z[k] + 1.0}
        cuts = np.unique([z[k] - 1.0, z[k] + 1.0, *(c for c in sing if z[k] - 1.0 < c < z[k] + 1.0)])
        xs, ws = [], []
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            edges = _graded_edges(lo, hi, lo in sing, hi in sing, level)
            x, w = quadrature.composite_gauss_legendre(edges, n)
            xs.append(x)
            ws.append(w)
        nodes_ax.append(np.concatenate(xs))
        w_ax.append(np.concatenate(ws))
    nodes, weights = quadrature.tensor_grid(nodes_ax, w_ax)
    inside = np.linalg.norm(nodes - z, axis=1) <= 1.0
    nodes, weights = nodes[inside], weights[inside]
    for s in singular:
        s = np.asarray(s)
        r = np.linalg.norm(nodes - s, axis=1)
        # graded panels keep Gauss nodes off the singular point; guard exact hits only
        close = r == 0.0
        if np.any(close):
            nodes[close] = s + 1e-300
    return nodes, weights


def tilde_lpq_norm(
    f: Callable,
    p: float,
    q: float,
    s: float,
    t: float,
    center_grid,
    quad: QuadratureSpec = QuadratureSpec(),
    singular_points=(),
) -> LpqNorm:
    """Localised norm sup_z ( int_s^t ( int_{B(z,1)} |f(u,x)|^p dx )^{q/p} du )^{1/q}.

    Evaluated by tensor Gauss-Legendre over the box around each unit ball
    (indicator-masked, split at declared singular points) at ``quad.levels``
    successive panel doublings. ``value`` is the finest-level quadrature;
    ``extrapolated`` applies Richardson extrapolation to the level sequence.
    A level sequence that fails to contract raises :class:`DivergentNorm`.
    """
    if not s < t:
        raise InvalidParameter("need s < t")
    centers = np.atleast_2d(np.asarray(center_grid, dtype=np.float64))
    singular = [np.atleast_1d(np.asarray(z, dtype=np.float64)) for z in singular_points]
    best = None
    for z in centers:
        vals, peaks = [], []
        for level in range(quad.levels):
            panels = 2**level
            xs, wx = _ball_rule(z, singular, quad.n_space, level)
            ts, wt = quadrature.composite_gauss_legendre([s, t], quad.n_time, panels)
            inner = np.empty(ts.shape[0])
            for i, u in enumerate(ts):
                fx = np.abs(np.asarray(f(u, xs), dtype=np.float64).reshape(-1))
                inner[i] = np.dot(wx, fx**p)
            val = np.dot(wt, inner ** (q / p)) ** (1.0 / q)
            if not np.isfinite(val):
                raise DivergentNorm(f"non-finite quadrature at center {z.tolist()}")
            vals.append(float(val))
            peaks.append(float(inner.max()))
        # the raw spatial integral grows linearly under a logarithmic divergence
        for seq in (peaks, vals):
            for j in range(2, len(seq)):
                d1, d2 = seq[j - 1] - seq[j - 2], seq[j] - seq[j - 1]
                if abs(d2) > 1e-12 * max(abs(seq[j]), 1e-300) and d1 != 0 and d2 / d1 >= quad.divergence_ratio:
                    raise DivergentNorm(
                        f"quadrature does not settle under refinement at center {z.tolist()}: levels {vals}"
                    )
        extrap = vals[-1]
        if len(vals) >= 3:
            d1, d2 = vals[-2] - vals[-3], vals[-1] - vals[-2]
            if d1 != 0 and 0 < d2 / d1 < 1:
                rho = d2 / d1
                extrap = vals[-1] + d2 * rho / (1.0 - rho)
        if best is None or vals[-1] > best.value:
            best = LpqNorm(vals[-1], z.copy(), vals, extrap)
    return best


@dataclass
class SamplePlan:
    """Deterministic probe family for the assumption checks."""

    seed: int = 0
    n_probes: int = 200
    x_range: tuple = (-3.0, 3.0)
    t_range: tuple | None = None
    n_atoms: int = 5
    atom_scale: float = 2.0

    def probes(self, coeffs: CoefficientSet):
        rng = np.random.default_rng(self.seed)
        t_lo, t_hi = self.t_range if self.t_range is not None else (0.0, coeffs.horizon)
        d = coeffs.dim
        out = []
        for k in range(self.n_probes):
            t = rng.uniform(t_lo, t_hi)
            x = rng.uniform(*self.x_range, size=d)
            y = rng.uniform(*self.x_range, size=d)
            atoms = rng.standard_normal((self.n_atoms, d)) * self.atom_scale
            mu = EmpiricalMeasure(atoms, rng.dirichlet(np.ones(self.n_atoms)))
            if k % 2 == 0:
                # same support, reweighted: finite weighted-TV
                nu = EmpiricalMeasure(atoms, rng.dirichlet(np.ones(self.n_atoms)))
            else:
                nu_atoms = atoms + rng.standard_normal((self.n_atoms, d)) * 0.1 * self.atom_scale
                nu = EmpiricalMeasure(nu_atoms, mu.weights)
            out.append((t, x, y, mu, nu))
        return out


@dataclass
class AssumptionReport:
    max_sigma_norm_sq: float | None = None
    max_inv_norm: float | None = None
    lipschitz_x_ratio: float | None = None
    lipschitz_measure_ratio: float | None = None
    joint_lipschitz_ratio: float | None = None
    mixed_ratio: float | None = None
    drift_envelope_ratio: float | None = None
    drift_tv_lipschitz_ratio: float | None = None
    relaxed_growth_ratio: float | None = None
    passes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passes.values())

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "passes"}
        out["passes"] = dict(self.passes)
        out["ok"] = self.ok
        return out


def _opnorm(m):
    return float(np.linalg.norm(m, ord=2))


def verify_A1(coeffs: CoefficientSet, sample_plan: SamplePlan) -> AssumptionReport:
    """Worst ratios of the diffusion clauses over the probe family.

    Clauses: ||sigma||^2 and ||(sigma sigma^*)^{-1}|| bounded by K; joint
    Lipschitz in (x, W_theta); mixed second difference bounded by
    K |x - y| W_theta(mu, nu).
    """
    K, th = coeffs.K, coeffs.theta
    sig_sq = inv = lx = lm = joint = mixed = 0.0
    for k, (t, x, y, mu, nu) in enumerate(sample_plan.probes(coeffs)):
        sx_mu = coeffs.sigma(t, x, mu)[0]
        sy_mu = coeffs.sigma(t, y, mu)[0]
        sx_nu = coeffs.sigma(t, x, nu)[0]
        sy_nu = coeffs.sigma(t, y, nu)[0]
        for s in (sx_mu, sy_mu, sx_nu, sy_nu):
            a = s @ s.T
            ev = np.linalg.eigvalsh(a)
            if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
                raise DegenerateDiffusion(f"sigma sigma^* singular at probe {k}", probe=k)
            sig_sq = max(sig_sq, _opnorm(s) ** 2)
            inv = max(inv, float(1.0 / ev[0]))
        dx = float(np.linalg.norm(x - y))
        w = wasserstein(mu, nu, th)
        if dx > 0:
            lx = max(lx, _opnorm(sx_mu - sy_mu) / dx)
        if w > 0:
            lm = max(lm, _opnorm(sx_mu - sx_nu) / w)
        if dx + w > 0:
            joint = max(joint, _opnorm(sx_mu - sy_nu) / (dx + w))
        diff2 = _opnorm((sx_mu - sy_mu) - (sx_nu - sy_nu))
        if dx * w > 0:
            mixed = max(mixed, diff2 / (dx * w))
    rep = AssumptionReport(
        max_sigma_norm_sq=sig_sq,
        max_inv_norm=inv,
        lipschitz_x_ratio=lx,
        lipschitz_measure_ratio=lm,
        joint_lipschitz_ratio=joint,
        mixed_ratio=mixed,
    )
    rep.passes = {
        "bounded": bool(sig_sq <= K + SLACK),
        "inverse_bounded": bool(inv <= K + SLACK),
        "lipschitz": bool(max(lx, lm, joint) <= K + SLACK),
        "mixed": bool(mixed <= K + SLACK),
    }
    return rep


def verify_A2(coeffs: CoefficientSet, sample_plan: SamplePlan, relaxed_K: float | None = None) -> AssumptionReport:
    """Worst ratios |b| / ((1 + ||mu||_theta) f) and |b(mu) - b(nu)| / (f ||mu - nu||_{theta,TV}).

    ``relaxed_K`` additionally reports |b| / ((1 + ||mu||_theta)(K|x| + f)),
    the weaker growth condition; it carries no pass flag.
    """
    th = coeffs.theta
    growth = lip = relaxed = 0.0
    for k, (t, x, _, mu, nu) in enumerate(sample_plan.probes(coeffs)):
        f = float(coeffs.f(t, x)[0])
        b_mu = float(np.linalg.norm(coeffs.b(t, x, mu)[0]))
        b_nu = float(np.linalg.norm(coeffs.b(t, x, nu)[0]))
        scale = 1.0 + theta_moment(mu, th)
        if f == 0.0:
            if b_mu > 0 or b_nu > 0:
                raise EnvelopeViolation(f"envelope vanishes where |b| > 0 at probe {k}", probe=k)
        else:
            growth = max(growth, b_mu / (scale * f))
        tv = weighted_tv(mu, nu, th)
        diff = float(np.linalg.norm(coeffs.b(t, x, mu)[0] - coeffs.b(t, x, nu)[0]))
        if f * tv > 0:
            lip = max(lip, diff / (f * tv))
        elif diff > 0:
            raise EnvelopeViolation(f"drift changes with zero envelope or zero distance at probe {k}", probe=k)
        if relaxed_K is not None:
            denom = scale * (relaxed_K * float(np.linalg.norm(x)) + f)
            if denom > 0:
                relaxed = max(relaxed, b_mu / denom)
    rep = AssumptionReport(
        drift_envelope_ratio=growth,
        drift_tv_lipschitz_ratio=lip,
        relaxed_growth_ratio=relaxed if relaxed_K is not None else None,
    )
    rep.passes = {"growth": bool(growth <= 1.0 + SLACK), "tv_lipschitz": bool(lip <= 1.0 + SLACK)}
    return rep
