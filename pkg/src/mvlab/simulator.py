"""Euler-Maruyama particle schemes, the flow map Phi, Picard iteration, moment diagnostics.

Brownian increments are drawn from a counter-based generator keyed by
(seed, global step index, particle index), so an ensemble does not depend on
how particles are chunked across workers, and two runs with the same seed
share their noise exactly (common random numbers).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .coefficients import CoefficientSet
from .errors import InvalidParameter, NoContractionDetected, SimulationDiverged
from .measures import EmpiricalMeasure, MeasureFlow, flow_distance, theta_moment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationPlan:
    n_particles: int
    time_grid: np.ndarray
    seed: int = 0
    scheme: str = "euler_maruyama"
    workers: int = 1
    drift_cap_factor: float = 10.0
    # global index of time_grid[0]; keeps noise aligned when a run is split into segments
    step_offset: int = 0

    def __post_init__(self):
        grid = np.asarray(self.time_grid, dtype=np.float64).reshape(-1)
        if grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
            raise InvalidParameter("time_grid needs >= 2 strictly increasing points")
        if self.n_particles < 1:
            raise InvalidParameter("n_particles must be positive")
        if self.scheme != "euler_maruyama":
            raise InvalidParameter(f"unknown scheme {self.scheme!r}")
        if self.workers < 1:
            raise InvalidParameter("workers must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameter("seed must fit in 64 bits")
        grid.setflags(write=False)
        object.__setattr__(self, "time_grid", grid)

    @classmethod
    def uniform(cls, n_particles: int, t_start: float, t_end: float, n_steps: int, **kw) -> SimulationPlan:
        return cls(n_particles, np.linspace(t_start, t_end, n_steps + 1), **kw)


@dataclass
class ParticleEnsemble:
    paths: np.ndarray  # (n_particles, n_times, d)
    times: np.ndarray
    plan: SimulationPlan
    cap_events: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]

    def law(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.uniform(self.paths[:, k, :])

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.times, tuple(self.law(k) for k in range(self.times.shape[0])))


def initial_particles(gamma: EmpiricalMeasure, n: int, seed: int) -> np.ndarray:
    """Particles at the start time.

    A uniform measure with exactly ``n`` atoms is used atom by atom (this is how
    segment restarts hand over an ensemble); otherwise ``n`` i.i.d. draws by
    inverse CDF on the counter-based uniform stream.
    """
    if gamma.size == n and gamma.is_uniform:
        return np.array(gamma.atoms, dtype=np.float64)
    if gamma.size == 1:
        return np.repeat(gamma.atoms, n, axis=0)
    u = kernels.uniforms(seed, 0, 0, n, 1)[:, 0]
    cdf = np.cumsum(gamma.weights)
    idx = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), gamma.size - 1)
    return np.array(gamma.atoms[idx], dtype=np.float64)


def _chunks(n: int, workers: int):
    edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _step(coeffs, t, dt, x, drift_mu, diff_mu, dW, cap, k, start):
    b = coeffs.b(t, x, drift_mu)
    sig = coeffs.sigma(t, x, diff_mu)
    bad = ~(np.all(np.isfinite(b), axis=1) & np.all(np.isfinite(sig), axis=(1, 2)))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0]) + start
        raise SimulationDiverged(f"non-finite coefficient at step {k}, particle {i}", step=k, particle=i)
    move = b * dt
    capped = 0
    if cap is not None:
        size = np.linalg.norm(move, axis=1)
        over = size > cap
        capped = int(over.sum())
        if capped:
            move[over] *= (cap / size[over])[:, None]
    # fixed-order contraction keeps the result independent of the batch size
    noise = np.zeros_like(x)
    for j in range(sig.shape[2]):
        noise += sig[:, :, j] * dW[:, j : j + 1]
    return x + move + noise, capped


def _simulate(coeffs: CoefficientSet, gamma: EmpiricalMeasure, plan: SimulationPlan, drift_law, keep_paths=True):
    if gamma.dim != coeffs.dim:
        raise InvalidParameter(f"initial law has dim {gamma.dim}, coefficients have dim {coeffs.dim}")
    n, d, m = plan.n_particles, coeffs.dim, coeffs.brownian_dim
    grid = plan.time_grid
    x = initial_particles(gamma, n, plan.seed)
    nt = grid.shape[0]
    keep = np.arange(nt) if keep_paths else np.array([0, nt - 1])
    paths = np.empty((n, keep.shape[0], d))
    paths[:, 0] = x
    slot = 1
    cap_events = 0
    chunks = _chunks(n, plan.workers)
    pool = ThreadPoolExecutor(plan.workers) if len(chunks) > 1 else None
    try:
        for k in range(nt - 1):
            t, dt = grid[k], grid[k + 1] - grid[k]
            gk = plan.step_offset + k
            live = EmpiricalMeasure.uniform(x)
            dmu = drift_law(t, live)
            cap = plan.drift_cap_factor * np.sqrt(coeffs.K * dt) if plan.drift_cap_factor else None
            sqdt = np.sqrt(dt)

            def run(ab, x=x, t=t, dt=dt, dmu=dmu, live=live, cap=cap, gk=gk, sqdt=sqdt):
                a, b = ab
                dW = kernels.normals(plan.seed, gk, a, b - a, m) * sqdt
                return _step(coeffs, t, dt, x[a:b], dmu, live, dW, cap, gk, a)

            results = list(pool.map(run, chunks)) if pool else [run(c) for c in chunks]
            x = np.concatenate([r[0] for r in results], axis=0)
            cap_events += sum(r[1] for r in results)
            if keep_paths or k == nt - 2:
                paths[:, slot] = x
                slot += 1
    finally:
        if pool is not None:
            pool.shutdown()
    if cap_events:
        log.info("drift cap active in %d particle-steps", cap_events)
    return ParticleEnsemble(paths, grid[keep].copy(), plan, cap_events)


def simulate_frozen(
    coeffs: CoefficientSet, mu_flow: MeasureFlow, gamma: EmpiricalMeasure, plan: SimulationPlan, keep_paths: bool = True
) -> ParticleEnsemble:
    """Frozen equation: drift sees ``mu_flow`` (left-nearest in time), diffusion sees the live ensemble law."""
    if mu_flow.times[0] > plan.time_grid[0] + 1e-12:
        raise InvalidParameter("mu_flow starts after the simulation grid")
    return _simulate(coeffs, gamma, plan, lambda t, live: mu_flow.at(t), keep_paths)


def simulate_mckean_vlasov(
    coeffs: CoefficientSet, gamma: EmpiricalMeasure, plan: SimulationPlan, keep_paths: bool = True
) -> ParticleEnsemble:
    """Interacting particle system: both coefficients see the live ensemble law."""
    return _simulate(coeffs, gamma, plan, lambda t, live: live, keep_paths)


def phi_map(coeffs: CoefficientSet, gamma: EmpiricalMeasure, mu_flow: MeasureFlow, plan: SimulationPlan) -> MeasureFlow:
    """Law flow of the frozen equation on ``plan.time_grid``."""
    return simulate_frozen(coeffs, mu_flow, gamma, plan).flow()


def default_lattice(theta: float = 2.0) -> float:
    return 0.1


@dataclass
class PicardResult:
    flow: MeasureFlow
    iterates: list  # all per-iteration flow distances, segment after segment
    contraction_ratios: list
    t0_used: float
    segments: int
    segment_iterates: list = field(default_factory=list)
    segment_ratios: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    converged: bool = True
    lattice_h: float = 0.1

    @property
    def first_ratio(self) -> float:
        for ratios in self.segment_ratios:
            if ratios:
                return ratios[0]
        return float("nan")


def segment_bounds(grid: np.ndarray, t0: float) -> list[tuple[int, int]]:
    """Split grid indices into consecutive segments of duration <= t0 (at least one step each)."""
    out, i, n = [], 0, grid.shape[0]
    tol = 1e-12 * max(1.0, abs(grid[-1]))
    while i < n - 1:
        j = i + 1
        while j + 1 < n and grid[j + 1] - grid[i] <= t0 + tol:
            j += 1
        out.append((i, j))
        i = j
    return out


def picard_solve(
    coeffs: CoefficientSet,
    gamma: EmpiricalMeasure,
    plan: SimulationPlan,
    tol: float,
    max_iter: int,
    t0: float,
    lattice_h: float | None = None,
    metric: str = "lattice_weighted_tv",
) -> PicardResult:
    """Fixed point of Phi on consecutive segments of length <= t0.

    Each segment starts from the constant flow equal to the current initial
    law and iterates mu <- Phi(mu) with common random numbers until the flow
    distance drops below ``tol``. The next segment starts from the ensemble at
    the end of the converged segment.
    """
    if t0 <= 0 or tol <= 0 or max_iter < 1:
        raise InvalidParameter("need t0 > 0, tol > 0, max_iter >= 1")
    h = default_lattice(coeffs.theta) if lattice_h is None else float(lattice_h)
    grid = plan.time_grid
    times, measures = [grid[0]], []
    all_d, all_r, seg_d, seg_r, iters = [], [], [], [], []
    converged = True
    init = gamma
    bounds = segment_bounds(grid, t0)
    for si, (a, b) in enumerate(bounds):
        sub = replace(plan, time_grid=grid[a : b + 1], step_offset=plan.step_offset + a)
        mu = MeasureFlow.constant(init, sub.time_grid)
        dists, ratios = [], []
        streak = 0
        ok = False
        for _ in range(max_iter):
            ens = simulate_frozen(coeffs, mu, init, sub)
            new = ens.flow()
            dist = flow_distance(new, mu, coeffs.theta, kind=metric, h=h)
            dists.append(dist)
            if len(dists) >= 2 and dists[-2] > 0:
                ratios.append(dist / dists[-2])
                streak = streak + 1 if ratios[-1] >= 1.0 else 0
            mu = new
            if dist < tol:
                ok = True
                break
            if streak >= 3:
                raise NoContractionDetected(
                    f"segment {si} [{grid[a]}, {grid[b]}]: ratio >= 1 for 3 iterations; try a smaller t0",
                    diagnostics={"segment": si, "distances": dists, "ratios": ratios, "t0": t0},
                )
        converged &= ok
        if not ok:
            log.warning("segment %d stopped at max_iter=%d with distance %.3g", si, max_iter, dists[-1])
        seg_d.append(dists)
        seg_r.append(ratios)
        iters.append(len(dists))
        all_d += dists
        all_r += ratios
        if si == 0:
            measures.append(mu.measures[0])
        times += list(sub.time_grid[1:])
        measures += list(mu.measures[1:])
        init = mu.measures[-1]
    return PicardResult(
        flow=MeasureFlow(np.array(times), tuple(measures)),
        iterates=all_d,
        contraction_ratios=all_r,
        t0_used=float(t0),
        segments=len(bounds),
        segment_iterates=seg_d,
        segment_ratios=seg_r,
        iterations=iters,
        converged=converged,
        lattice_h=h,
    )


@dataclass
class MomentReport:
    sup_moment_theta: float
    sup_moment_stderr: float
    per_time_moments: np.ndarray
    fitted_growth_rate: float
    horizons: np.ndarray
    horizon_moments: np.ndarray
    theta: float


def moment_report(ensemble: ParticleEnsemble, theta: float) -> MomentReport:
    """E[sup_t (1 + |X_t|^2)^(theta/2)] with its standard error, per-time moments,
    and the slope of log E[sup_{t <= T'} ...] against T' over the grid horizons."""
    if theta < 1:
        raise InvalidParameter("theta must be >= 1")
    g = (1.0 + np.sum(ensemble.paths**2, axis=2)) ** (0.5 * theta)  # (n, nt)
    running = np.maximum.accumulate(g, axis=1)
    horizon_moments = running.mean(axis=0)
    sup = running[:, -1]
    n = sup.shape[0]
    stderr = float(sup.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    rel = ensemble.times - ensemble.times[0]
    if rel.shape[0] >= 2 and np.ptp(rel) > 0:
        rate = float(np.polyfit(rel, np.log(horizon_moments), 1)[0])
    else:
        rate = 0.0
    return MomentReport(
        sup_moment_theta=float(sup.mean()),
        sup_moment_stderr=stderr,
        per_time_moments=g.mean(axis=0),
        fitted_growth_rate=rate,
        horizons=rel,
        horizon_moments=horizon_moments,
        theta=float(theta),
    )


def invariant_class_check(flow: MeasureFlow, gamma: EmpiricalMeasure, N: float, theta: float) -> bool:
    """sup_r (1 + ||mu_r||_theta) exp(-N (r - s)) <= 2 (1 + ||gamma||_theta) on the grid."""
    s = flow.times[0]
    bound = 2.0 * (1.0 + theta_moment(gamma, theta))
    lhs = max((1.0 + theta_moment(m, theta)) * np.exp(-N * (r - s)) for r, m in zip(flow.times, flow.measures))
    return bool(lhs <= bound * (1.0 + 1e-12))


def minimal_invariant_N(flow: MeasureFlow, gamma: EmpiricalMeasure, theta: float) -> float:
    """Smallest N >= 0 for which :func:`invariant_class_check` holds; inf if the start already violates it."""
    s = flow.times[0]
    bound = 2.0 * (1.0 + theta_moment(gamma, theta))
    need = 0.0
    for r, m in zip(flow.times, flow.measures):
        excess = np.log((1.0 + theta_moment(m, theta)) / bound)
        if excess > 0:
            if r == s:
                return float("inf")
            need = max(need, excess / (r - s))
    return float(need)


def random_class_flow(
    gamma: EmpiricalMeasure, times, N: float, theta: float, rng: np.random.Generator
) -> MeasureFlow:
    """A random flow inside the invariant class: gamma translated by a random path v(r) whose
    length keeps 1 + ||gamma + v(r)||_theta <= 2 (1 + ||gamma||_theta) e^{N (r - s)}."""
    times = np.asarray(times, dtype=np.float64)
    g = theta_moment(gamma, theta)
    d = gamma.dim
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    frac = rng.uniform(0.0, 1.0, size=times.shape[0])
    frac[0] = 0.0
    budget = 2.0 * (1.0 + g) * np.exp(N * (times - times[0])) - 1.0 - g
    out = []
    for k in range(times.shape[0]):
        v = frac[k] * budget[k] * direction
        out.append(EmpiricalMeasure(gamma.atoms + v, gamma.weights))
    return MeasureFlow(times, tuple(out))


def estimate_invariance_N(
    coeffs: CoefficientSet, gamma: EmpiricalMeasure, plan: SimulationPlan, n_probe_flows: int = 4, seed: int = 0,
    safety: float = 1.5,
) -> float:
    """Fit N so that Phi keeps the invariant class: the largest minimal N over Phi-images of a few
    probe flows (the constant flow and random class members), times a safety factor, plus 0.1."""
    rng = np.random.default_rng(seed)
    grid = plan.time_grid
    n_fit = 0.0
    probes = [MeasureFlow.constant(gamma, grid)]
    for _ in range(n_probe_flows - 1):
        probes.append(random_class_flow(gamma, grid, max(n_fit, 1.0), coeffs.theta, rng))
    for mu in probes:
        out = phi_map(coeffs, gamma, mu, plan)
        n_fit = max(n_fit, minimal_invariant_N(out, out.measures[0], coeffs.theta))
    return safety * n_fit + 0.1
