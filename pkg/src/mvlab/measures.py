"""Atomic probability measures on R^d, measure flows, and the metrics between them.

Metrics provided: the theta-moment, the L^theta Wasserstein distance (exact by
assignment / linear programming / quantile coupling), the total variation and
theta-weighted total variation norms of the difference (exact by atom
matching), and their sup-over-time versions for flows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from .errors import IncompatibleFlows, InstanceTooLarge, InvalidParameter

ATOM_TOL = 1e-12
DEFAULT_MAX_ATOMS = 2048


def _check_theta(theta: float, lower: float = 1.0) -> float:
    theta = float(theta)
    if not np.isfinite(theta) or theta < lower:
        raise InvalidParameter(f"theta must be >= {lower}, got {theta}")
    return theta


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely many weighted atoms in R^d.

    ``atoms`` has shape (n, d) and ``weights`` shape (n,); weights are
    nonnegative and sum to one.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise InvalidParameter("atoms must be a non-empty (n, d) array")
        if weights.shape[0] != atoms.shape[0]:
            raise InvalidParameter(f"{atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if not np.all(np.isfinite(atoms)):
            raise InvalidParameter("atoms must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidParameter("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidParameter(f"weights sum to {weights.sum()!r}, not 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> EmpiricalMeasure:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, x) -> EmpiricalMeasure:
        return cls(np.atleast_1d(np.asarray(x, dtype=np.float64))[None, :], np.ones(1))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def integrate(self, fn) -> float:
        """Integral of a vectorised function ``fn(atoms) -> (n,)`` against the measure."""
        return float(np.dot(self.weights, fn(self.atoms)))

    def moment(self, theta: float) -> float:
        return theta_moment(self, theta)

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Measures indexed by a strictly increasing time grid."""

    times: np.ndarray
    measures: tuple = field(default_factory=tuple)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        measures = tuple(self.measures)
        if len(measures) != times.shape[0] or len(measures) == 0:
            raise InvalidParameter("one measure per grid time is required")
        if np.any(np.diff(times) <= 0):
            raise InvalidParameter("flow times must be strictly increasing")
        dims = {m.dim for m in measures}
        if len(dims) != 1:
            raise InvalidParameter(f"measures in a flow must share a dimension, got {sorted(dims)}")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "measures", measures)

    @classmethod
    def constant(cls, measure: EmpiricalMeasure, times) -> MeasureFlow:
        times = np.asarray(times, dtype=np.float64)
        return cls(times, (measure,) * times.shape[0])

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    def __len__(self):
        return len(self.measures)

    def index_at(self, t: float) -> int:
        # left-nearest grid time; tolerance absorbs grid round-off
        i = int(np.searchsorted(self.times, t + 1e-12 * max(1.0, abs(t)), side="right")) - 1
        if i < 0:
            raise InvalidParameter(f"time {t} precedes the flow start {self.times[0]}")
        return i

    def at(self, t: float) -> EmpiricalMeasure:
        return self.measures[self.index_at(t)]


@dataclass(frozen=True)
class MetricReport:
    tv: float
    weighted_tv: float
    wasserstein_theta: float
    theta: float

    @property
    def kappa(self) -> float:
        """Empirical ratio (tv + W_theta) / weighted_tv; nan for identical measures."""
        if self.weighted_tv == 0.0:
            return float("nan")
        return (self.tv + self.wasserstein_theta) / self.weighted_tv


def theta_moment(mu: EmpiricalMeasure, theta: float) -> float:
    theta = _check_theta(theta)
    r = np.linalg.norm(mu.atoms, axis=1)
    return float(np.dot(mu.weights, r**theta) ** (1.0 / theta))


def _cost_matrix(x: np.ndarray, y: np.ndarray, theta: float) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt((diff**2).sum(axis=2)) ** theta


def _w_quantile(mu: EmpiricalMeasure, nu: EmpiricalMeasure, theta: float) -> float:
    # monotone (quantile) coupling is optimal on the line for convex costs
    ix, iy = np.argsort(mu.atoms[:, 0], kind="stable"), np.argsort(nu.atoms[:, 0], kind="stable")
    x, wx = mu.atoms[ix, 0], mu.weights[ix]
    y, wy = nu.atoms[iy, 0], nu.weights[iy]
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    breaks = np.union1d(cx, cy)
    lengths = np.diff(np.concatenate(([0.0], breaks)))
    mids = breaks - 0.5 * lengths
    i = np.minimum(np.searchsorted(cx, mids), x.size - 1)
    j = np.minimum(np.searchsorted(cy, mids), y.size - 1)
    return float(np.dot(lengths, np.abs(x[i] - y[j]) ** theta))


def _w_assignment(mu, nu, theta):
    cost = _cost_matrix(mu.atoms, nu.atoms, theta)
    r, c = optimize.linear_sum_assignment(cost)
    return float(cost[r, c].mean())


def _w_lp(mu, nu, theta):
    n, m = mu.size, nu.size
    cost = _cost_matrix(mu.atoms, nu.atoms, theta).ravel()
    rows = sparse.kron(sparse.identity(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.identity(m))
    a_eq = sparse.vstack([rows, cols]).tocsr()
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = optimize.linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def sliced_wasserstein(mu, nu, theta, n_directions=256, seed=0) -> float:
    """Monte Carlo sliced W_theta. An approximation, not the exact distance."""
    theta = _check_theta(theta)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, mu.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for v in dirs:
        a = EmpiricalMeasure(mu.atoms @ v, mu.weights)
        b = EmpiricalMeasure(nu.atoms @ v, nu.weights)
        total += _w_quantile(a, b, theta)
    return (total / n_directions) ** (1.0 / theta)


def wasserstein(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    theta: float,
    method: str = "auto",
    max_atoms: int = DEFAULT_MAX_ATOMS,
    allow_approximate: bool = False,
) -> float:
    """Exact L^theta Wasserstein distance between two atomic measures.

    ``method`` is one of 'auto', 'quantile' (d = 1 only), 'assignment'
    (equal-size uniform supports) or 'lp'. Instances with more than
    ``max_atoms**2`` coupling entries raise :class:`InstanceTooLarge` unless
    ``allow_approximate`` is set, in which case a sliced estimate is returned
    with a warning.
    """
    theta = _check_theta(theta)
    if mu.dim != nu.dim:
        raise InvalidParameter(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if method == "auto":
        if mu.dim == 1:
            method = "quantile"
        elif mu.size == nu.size and mu.is_uniform and nu.is_uniform:
            method = "assignment"
        else:
            method = "lp"
    if method != "quantile" and mu.size * nu.size > max_atoms**2:
        if not allow_approximate:
            raise InstanceTooLarge(f"{mu.size} x {nu.size} coupling exceeds the cap of {max_atoms} atoms")
        warnings.warn("support above the exact-transport cap; returning the APPROXIMATE sliced distance", stacklevel=2)
        return sliced_wasserstein(mu, nu, theta)
    if method == "quantile":
        if mu.dim != 1:
            raise InvalidParameter("quantile coupling is exact only in one dimension")
        cost = _w_quantile(mu, nu, theta)
    elif method == "assignment":
        if mu.size != nu.size or not (mu.is_uniform and nu.is_uniform):
            raise InvalidParameter("assignment requires equal-size uniform supports")
        cost = _w_assignment(mu, nu, theta)
    elif method == "lp":
        cost = _w_lp(mu, nu, theta)
    else:
        raise InvalidParameter(f"unknown method {method!r}")
    return cost ** (1.0 / theta)


def _signed_sites(mu, nu, atol):
    pts = np.vstack([mu.atoms, nu.atoms])
    w = np.concatenate([mu.weights, -nu.weights])
    if atol > 0:
        pairs = cKDTree(pts).query_pairs(atol, output_type="ndarray")
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    n = pts.shape[0]
    if pairs.size:
        graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
    else:
        # exact duplicates still merge
        _, labels = np.unique(pts, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
    mass = np.bincount(labels, weights=w)
    first = np.full(mass.size, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    return pts[first], mass


def total_variation(mu: EmpiricalMeasure, nu: EmpiricalMeasure, atol: float = ATOM_TOL) -> float:
    """sup over |f| <= 1 of |mu(f) - nu(f)|, i.e. the total mass of |mu - nu|."""
    if mu.dim != nu.dim:
        raise InvalidParameter(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    _, mass = _signed_sites(mu, nu, atol)
    return float(np.abs(mass).sum())


def weighted_tv(mu: EmpiricalMeasure, nu: EmpiricalMeasure, theta: float, atol: float = ATOM_TOL) -> float:
    """sup over |f| <= 1 + |x|^theta of |mu(f) - nu(f)|, exact for atomic measures."""
    theta = _check_theta(theta)
    if mu.dim != nu.dim:
        raise InvalidParameter(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    sites, mass = _signed_sites(mu, nu, atol)
    weight = 1.0 + np.linalg.norm(sites, axis=1) ** theta
    return float(np.dot(weight, np.abs(mass)))


def _lattice_masses(measures, h):
    d = measures[0].dim
    lo = np.min([np.floor(m.atoms.min(axis=0) / h) for m in measures], axis=0).astype(np.int64)
    hi = np.max([np.floor(m.atoms.max(axis=0) / h) for m in measures], axis=0).astype(np.int64)
    shape = hi - lo + 2
    grids = [kernels.cic_deposit(m.atoms, m.weights, h, lo, shape) for m in measures]
    axes = [h * (lo[k] + np.arange(shape[k])) for k in range(d)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return nodes, grids


def project_to_lattice(mu: EmpiricalMeasure, h: float) -> EmpiricalMeasure:
    """Cloud-in-cell projection of ``mu`` onto the lattice h Z^d."""
    if h <= 0:
        raise InvalidParameter("lattice spacing must be positive")
    nodes, (mass,) = _lattice_masses([mu], h)
    keep = mass > 0
    w = mass[keep]
    return EmpiricalMeasure(nodes[keep], w / w.sum())


def lattice_weighted_tv(mu: EmpiricalMeasure, nu: EmpiricalMeasure, theta: float, h: float) -> float:
    """Weighted TV between the lattice projections of mu and nu.

    Equal to ``weighted_tv(project_to_lattice(mu, h), project_to_lattice(nu, h), theta)``
    but computed without atom matching. Continuous in the atom positions, which
    makes it usable between particle clouds whose atoms never coincide.
    """
    theta = _check_theta(theta)
    if mu.dim != nu.dim:
        raise InvalidParameter(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if h <= 0:
        raise InvalidParameter("lattice spacing must be positive")
    nodes, (a, b) = _lattice_masses([mu, nu], h)
    weight = 1.0 + np.linalg.norm(nodes, axis=1) ** theta
    return float(np.dot(weight, np.abs(a - b)))


def flow_distance(
    mu: MeasureFlow,
    nu: MeasureFlow,
    theta: float,
    kind: str = "weighted_tv",
    h: float | None = None,
    per_time: bool = False,
):
    """sup over grid times of a per-time metric ('weighted_tv', 'wasserstein' or 'lattice_weighted_tv')."""
    if mu.times.shape != nu.times.shape or np.any(mu.times != nu.times):
        raise IncompatibleFlows("flows must share the same time grid")
    if kind == "weighted_tv":
        fn = lambda a, b: weighted_tv(a, b, theta)  # noqa: E731
    elif kind == "wasserstein":
        fn = lambda a, b: wasserstein(a, b, theta)  # noqa: E731
    elif kind == "lattice_weighted_tv":
        if h is None:
            raise InvalidParameter("lattice_weighted_tv needs a lattice spacing h")
        fn = lambda a, b: lattice_weighted_tv(a, b, theta, h)  # noqa: E731
    else:
        raise InvalidParameter(f"unknown flow metric {kind!r}")
    values = np.array([0.0 if a is b else fn(a, b) for a, b in zip(mu.measures, nu.measures)])
    sup = float(values.max())
    return (sup, values) if per_time else sup


def gpp_report(mu: EmpiricalMeasure, nu: EmpiricalMeasure, theta: float) -> MetricReport:
    return MetricReport(
        tv=total_variation(mu, nu),
        weighted_tv=weighted_tv(mu, nu, theta),
        wasserstein_theta=wasserstein(mu, nu, theta),
        theta=float(theta),
    )

