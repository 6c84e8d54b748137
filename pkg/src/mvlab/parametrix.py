"""Frozen Gaussian kernels and the parametrix series for the frozen equation's transition density.

Notation. For a freeze point ``w`` the frozen kernel from (r, y) to (r', y') is the
Gaussian density with covariance ``a^w_{r,r'} = int_r^{r'} (sigma sigma^*)(u, w, Phi_u) du``.
The correction kernel is

    H_{r,t}(y, z) = <b_r(y, mu_r), grad_y p^z_{r,t}(y, z)>
                    + 1/2 tr[{(sigma sigma^*)_r(y) - (sigma sigma^*)_r(z)} hess_y p^z_{r,t}(y, z)],

i.e. the generator difference (L - L^z) applied to the frozen kernel in its
backward variable. The density is

    p_{s,t}(x, z) = sum_m T_m,   T_0 = p^z_{s,t}(x, z),
    T_m = int_{s<r_1<...<r_m<t} int p^{y_1}_{s,r_1}(x, y_1) H_{r_1,r_2}(y_1, y_2) ... H_{r_m,t}(y_m, z).

Each T_m is evaluated as a nested quadrature: times by the substitution
r_k = r_{k-1} + (t - r_{k-1}) sin^2(pi v / 2) with Gauss-Legendre in v, space by
Gauss-Hermite under the Gaussian bridge from (r_{k-1}, y_{k-1}) to (t, z). For
constant coefficients the bridge-weighted integrand is polynomial and the rule is
exact up to the time quadrature.

Coefficient callables receive ``t`` as an array here (one entry per node);
callables written for scalar ``t`` work unchanged if they broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import io, quadrature
from .coefficients import CoefficientSet, tilde_lpq_norm
from .errors import DegenerateCovariance, DiffusionBandViolation, InvalidParameter, QuadratureUnresolved
from .measures import EmpiricalMeasure, MeasureFlow, theta_moment, wasserstein

MAX_DIM = 3
LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------- kernels


@dataclass(frozen=True, eq=False)
class FrozenKernel:
    a: np.ndarray
    s: float
    t: float
    z: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        if a.shape[0] != a.shape[1]:
            raise InvalidParameter("covariance must be square")
        scale = max(float(np.max(np.abs(a))), 1e-300)
        if np.max(np.abs(a - a.T)) > 1e-12 * scale:
            raise InvalidParameter("covariance is not symmetric")
        a = 0.5 * (a + a.T)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            raise DegenerateCovariance("covariance is not positive definite") from None
        diag = np.diag(chol)
        if diag.min() <= 1e-150 or diag.min() / diag.max() < 1e-8:
            raise DegenerateCovariance(f"covariance numerically singular (cholesky diagonal {diag})")
        inv = linalg.cho_solve((chol, True), np.eye(a.shape[0]))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=np.float64)))
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "inv", 0.5 * (inv + inv.T))
        object.__setattr__(self, "logdet", 2.0 * float(np.sum(np.log(diag))))

    @property
    def dim(self) -> int:
        return self.a.shape[0]


def _pair(k: FrozenKernel, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = np.broadcast_to(y, np.broadcast(x, y).shape) - x
    flat = diff.reshape(-1, k.dim)
    w = linalg.solve_triangular(k.chol, flat.T, lower=True)
    quad = np.sum(w * w, axis=0)
    dens = np.exp(-0.5 * quad - 0.5 * k.logdet - 0.5 * k.dim * LOG_2PI)
    return diff, flat, dens


def frozen_density(k: FrozenKernel, x, y):
    """Gaussian density with covariance ``k.a`` of y - x. Broadcasts over leading axes."""
    diff, _, dens = _pair(k, x, y)
    out = dens.reshape(diff.shape[:-1])
    return float(out) if out.ndim == 0 else out


def frozen_density_grad(k: FrozenKernel, x, y):
    """Gradient in x: a^{-1}(y - x) p."""
    diff, flat, dens = _pair(k, x, y)
    g = (flat @ k.inv) * dens[:, None]
    return g.reshape(diff.shape)


def frozen_density_hess(k: FrozenKernel, x, y):
    """Hessian in x: [a^{-1}(y - x) (x) a^{-1}(y - x) - a^{-1}] p."""
    diff, flat, dens = _pair(k, x, y)
    g = flat @ k.inv
    h = (g[:, :, None] * g[:, None, :] - k.inv) * dens[:, None, None]
    return h.reshape(diff.shape + (k.dim,))


def reference_kernel(Kc: float, s: float, t: float, x, y):
    """Isotropic Gaussian with covariance 2 Kc (t - s) I."""
    if not t > s:
        raise InvalidParameter("reference kernel needs t > s")
    if Kc <= 0:
        raise InvalidParameter("Kc must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = y - x
    d = diff.shape[-1]
    tau = t - s
    out = np.exp(-np.sum(diff * diff, axis=-1) / (4.0 * Kc * tau)) / (4.0 * Kc * math.pi * tau) ** (0.5 * d)
    return float(out) if np.ndim(out) == 0 else out


def _placeholder(d):
    return EmpiricalMeasure.dirac(np.zeros(d))


def _flow_at(flow: MeasureFlow | None, t: float, d: int) -> EmpiricalMeasure:
    return _placeholder(d) if flow is None else flow.at(t)


def freeze_covariance(
    coeffs: CoefficientSet,
    phi_flow: MeasureFlow | None,
    z,
    s: float,
    r: float,
    n_quad: int = 64,
    check_band: bool = True,
) -> FrozenKernel:
    """int_s^r (sigma sigma^*)(u, z, Phi_u) du by composite two-point Gauss-Legendre on ``n_quad`` panels.

    ``phi_flow=None`` means the diffusion ignores its measure argument.
    Raises :class:`DiffusionBandViolation` when an eigenvalue leaves
    [(r - s)/K, K (r - s)] by more than 1e-9 relative.
    """
    if not r > s:
        raise InvalidParameter("need s < r")
    if n_quad < 1:
        raise InvalidParameter("n_quad must be positive")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    d = coeffs.dim
    nodes, weights = quadrature.composite_gauss_legendre([s, r], 2, n_quad)
    a = np.zeros((d, d))
    zz = z[None, :]
    for u, w in zip(nodes, weights):
        sig = coeffs.sigma(u, zz, _flow_at(phi_flow, u, d))[0]
        a += w * (sig @ sig.T)
    a = 0.5 * (a + a.T)
    if check_band:
        ev = np.linalg.eigvalsh(a)
        lo, hi = (r - s) / coeffs.K, coeffs.K * (r - s)
        if ev[0] < lo * (1 - 1e-9) or ev[-1] > hi * (1 + 1e-9):
            raise DiffusionBandViolation(
                f"covariance eigenvalues [{ev[0]:.6g}, {ev[-1]:.6g}] outside [{lo:.6g}, {hi:.6g}]"
            )
    return FrozenKernel(a, s, r, z)


# ------------------------------------------------------------------ batched machinery


@dataclass(frozen=True)
class KernelGrid:
    """Quadrature sizes for the nested series integrals."""

    n_time: int = 12
    n_space: int = 8
    cov_panels: int = 32
    max_batch: int = 400_000

    def refined(self) -> KernelGrid:
        return KernelGrid(self.n_time + 4, self.n_space + 2, 2 * self.cov_panels, self.max_batch)


class _Covariance:
    """Cumulative int_s^u (sigma sigma^*)(v, w, Phi_v) dv on panel edges, linear in between."""

    def __init__(self, coeffs, phi_flow, s, t, panels):
        self.coeffs, self.flow, self.d = coeffs, phi_flow, coeffs.dim
        edges = np.linspace(s, t, panels + 1)
        if phi_flow is not None:
            inner = phi_flow.times[(phi_flow.times > s) & (phi_flow.times < t)]
            edges = np.unique(np.concatenate([edges, inner]))
        self.edges = edges
        x, w = quadrature.gauss_legendre(-1.0, 1.0, 2)
        lo, hi = edges[:-1], edges[1:]
        self.nodes = (0.5 * (lo + hi))[:, None] + (0.5 * (hi - lo))[:, None] * x[None, :]
        self.wts = (0.5 * (hi - lo))[:, None] * w[None, :]
        self.shared = None
        self._cache = {}
        if coeffs.state_independent_diffusion:
            self.shared = self._cumulative(np.zeros((1, self.d)))[0]

    def _single(self, w):
        key = tuple(float(v) for v in w)
        if key not in self._cache:
            self._cache[key] = self._cumulative(np.asarray(w, dtype=np.float64)[None, :])[0]
        return self._cache[key]

    def _cumulative(self, W):
        n, d = W.shape[0], self.d
        inc = np.zeros((self.edges.shape[0] - 1, n, d, d))
        for i in range(self.nodes.shape[0]):
            for j in range(self.nodes.shape[1]):
                u = self.nodes[i, j]
                sig = self.coeffs.sigma(np.full(n, u), W, _flow_at(self.flow, u, d))
                inc[i] += self.wts[i, j] * np.einsum("nij,nkj->nik", sig, sig)
        cum = np.concatenate([np.zeros((1, n, d, d)), np.cumsum(inc, axis=0)], axis=0)
        return np.moveaxis(cum, 0, 1)  # (n, edges, d, d)

    def _interp(self, cum, r):
        e = self.edges
        idx = np.clip(np.searchsorted(e, r, side="right") - 1, 0, e.shape[0] - 2)
        frac = ((r - e[idx]) / (e[idx + 1] - e[idx]))[:, None, None]
        if cum.ndim == 3:
            return cum[idx] + frac * (cum[idx + 1] - cum[idx])
        rows = np.arange(r.shape[0])
        return cum[rows, idx] + frac * (cum[rows, idx + 1] - cum[rows, idx])

    def a(self, r1, r2, W=None):
        """(n, d, d) covariances over [r1, r2] frozen at rows of W (ignored when state-independent)."""
        r1 = np.asarray(r1, dtype=np.float64)
        r2 = np.asarray(r2, dtype=np.float64)
        if self.shared is not None or W is None:
            cum = self.shared if self.shared is not None else self._single(np.zeros(self.d))
        else:
            W = np.asarray(W, dtype=np.float64)
            cum = self._single(W[0]) if np.all(W == W[0]) else self._cumulative(W)
        out = self._interp(cum, r2) - self._interp(cum, r1)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def diffusion_matrix(self, r, Y):
        """(sigma sigma^*)(r, y, Phi_r) for arrays r (n,), Y (n, d)."""
        out = np.empty((Y.shape[0], self.d, self.d))
        for mu, rows in _group_by_measure(self.flow, r, self.d):
            sig = self.coeffs.sigma(r[rows], Y[rows], mu)
            out[rows] = np.einsum("nij,nkj->nik", sig, sig)
        return out


def _group_by_measure(flow, r, d):
    if flow is None:
        yield _placeholder(d), np.arange(r.shape[0])
        return
    idx = np.searchsorted(flow.times, r + 1e-12 * np.maximum(1.0, np.abs(r)), side="right") - 1
    if np.any(idx < 0):
        raise InvalidParameter("flow does not cover the requested times")
    for k in np.unique(idx):
        yield flow.measures[k], np.flatnonzero(idx == k)


def _drift(coeffs, mu_flow, r, Y):
    out = np.empty_like(Y)
    for mu, rows in _group_by_measure(mu_flow, r, coeffs.dim):
        out[rows] = coeffs.b(r[rows], Y[rows], mu)
    return out


def _gauss(a, diff):
    """Batched Gaussian density, solve a^{-1} diff and inverse: (p, g, inv)."""
    d = diff.shape[1]
    if d == 1:
        inv = 1.0 / a[:, 0, 0]
        g = diff * inv[:, None]
        p = np.exp(-0.5 * diff[:, 0] * g[:, 0]) / np.sqrt(2.0 * math.pi * a[:, 0, 0])
        return p, g, inv[:, None, None]
    chol = np.linalg.cholesky(a)
    inv = np.linalg.inv(a)
    g = np.einsum("nij,nj->ni", inv, diff)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    p = np.exp(-0.5 * np.sum(diff * g, axis=1) - 0.5 * logdet - 0.5 * d * LOG_2PI)
    return p, g, inv


class _Series:
    """Shared context for H evaluations and nested chain integrals."""

    def __init__(self, coeffs, mu_flow, phi_flow, s, t, quad: KernelGrid, inner_freeze="endpoint"):
        if coeffs.dim > MAX_DIM:
            raise InvalidParameter(f"series quadrature supports d <= {MAX_DIM}, got {coeffs.dim}")
        if inner_freeze not in ("endpoint", "z"):
            raise InvalidParameter("inner_freeze must be 'endpoint' or 'z'")
        self.coeffs, self.mu_flow, self.phi_flow = coeffs, mu_flow, phi_flow
        self.s, self.t, self.quad, self.inner_freeze = s, t, quad, inner_freeze
        self.d = coeffs.dim
        self.cov = _Covariance(coeffs, phi_flow, s, t, quad.cov_panels)
        self.const_sigma = coeffs.state_independent_diffusion
        v, wv = quadrature.gauss_legendre(0.0, 1.0, quad.n_time)
        self.v_sin2 = np.sin(0.5 * math.pi * v) ** 2
        self.v_jac = wv * 0.5 * math.pi * np.sin(math.pi * v)
        xi1, w1 = quadrature.gauss_hermite(quad.n_space)
        self.xi, self.xw = quadrature.tensor_grid([xi1] * self.d, [w1] * self.d)
        # 1 / N(xi; 0, I): turns expectations under the bridge into Lebesgue integrals
        self.inv_phi = np.exp(0.5 * np.sum(self.xi**2, axis=1) + 0.5 * self.d * LOG_2PI)

    def h_values(self, r, Y, b, Sy, r2, Y2):
        """H_{r, r2}(y, y2) frozen at y2, given drift b and (sigma sigma^*) Sy at (r, y)."""
        a = self.cov.a(r, r2, None if self.const_sigma else Y2)
        p, g, inv = _gauss(a, Y2 - Y)
        val = np.sum(b * g, axis=1)
        if not self.const_sigma:
            S2 = self.cov.diffusion_matrix(r, Y2)
            hess = g[:, :, None] * g[:, None, :] - inv
            val = val + 0.5 * np.einsum("nij,nji->n", Sy - S2, hess)
        return val * p

    def local(self, r, Y):
        b = _drift(self.coeffs, self.mu_flow, r, Y)
        Sy = None if self.const_sigma else self.cov.diffusion_matrix(r, Y)
        return b, Sy

    def h_to_target(self, r, Y, b, Sy, z):
        Z = np.broadcast_to(z, Y.shape)
        return self.h_values(r, Y, b, Sy, np.full(r.shape[0], self.t), Z)

    def chain(self, r0, y0, z, levels, first_link):
        """Contributions c_k, k = 1..levels: sum over nodes of weight_k * H_{r_k,t}(y_k, z).

        ``first_link='p'`` starts from p^{y_1}_{r0,r_1}(y0, y_1) (series terms T_k);
        ``first_link='H'`` starts from H_{r0,r_1}(y0, y_1) (iterated kernels H^{k+1}).
        """
        out = np.zeros(levels + 1)
        if levels == 0:
            return out
        st = {
            "r": np.array([r0], dtype=np.float64),
            "y": np.array(y0, dtype=np.float64).reshape(1, self.d),
            "w": np.ones(1),
        }
        st["b"], st["S"] = self.local(st["r"], st["y"]) if first_link == "H" else (None, None)
        self._descend(st, 1, levels, z, first_link, out)
        return out

    def _descend(self, st, k, levels, z, first_link, out):
        fan = self.v_sin2.shape[0] * self.xi.shape[0]
        n = st["r"].shape[0]
        step = max(1, self.quad.max_batch // fan)
        for a in range(0, n, step):
            part = {key: (None if val is None else val[a : a + step]) for key, val in st.items()}
            child = self._expand(part, k, z, first_link)
            keep = child["w"] != 0.0
            if not np.any(keep):
                continue
            if not np.all(keep):
                # exact zeros (H vanishes) contribute nothing at any depth
                child = {key: (None if val is None else val[keep]) for key, val in child.items()}
            out[k] += float(np.sum(child["w"] * self.h_to_target(child["r"], child["y"], child["b"], child["S"], z)))
            if k < levels:
                self._descend(child, k + 1, levels, z, first_link, out)

    def _expand(self, st, k, z, first_link):
        t, d = self.t, self.d
        nt, ng = self.v_sin2.shape[0], self.xi.shape[0]
        r, y, w = st["r"], st["y"], st["w"]
        n = r.shape[0]
        span = t - r
        r_new = (r[:, None] + span[:, None] * self.v_sin2[None, :]).reshape(-1)
        tw = (span[:, None] * self.v_jac[None, :]).reshape(-1)
        rp = np.repeat(r, nt)
        yp = np.repeat(y, nt, axis=0)
        # bridge from (r, y) to (t, z) under the z-frozen covariance
        zrow = np.broadcast_to(z, (rp.shape[0], d))
        A1 = self.cov.a(rp, r_new, None if self.const_sigma else zrow)
        A2 = self.cov.a(r_new, np.full_like(r_new, t), None if self.const_sigma else zrow)
        G = np.linalg.solve(A1 + A2, np.swapaxes(A1, 1, 2))  # (A1 + A2)^{-1} A1
        mean = yp + np.einsum("nji,nj->ni", G, z - yp)
        C = A1 - np.einsum("nij,njk->nik", A1, G)
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        L = np.linalg.cholesky(C)
        detL = np.prod(np.diagonal(L, axis1=1, axis2=2), axis=1)
        m = rp.shape[0]
        y_new = (mean[:, None, :] + np.einsum("nij,gj->ngi", L, self.xi)).reshape(m * ng, d)
        r_new_x = np.repeat(r_new, ng)
        qinv = (detL[:, None] * self.inv_phi[None, :] * self.xw[None, :]).reshape(-1)
        base = np.repeat(np.repeat(w, nt) * tw, ng) * qinv
        yp_x = np.repeat(yp, ng, axis=0)
        rp_x = np.repeat(rp, ng)
        if k == 1 and first_link == "p":
            freeze = y_new if self.inner_freeze == "endpoint" else np.broadcast_to(z, y_new.shape)
            a = self.cov.a(rp_x, r_new_x, None if self.const_sigma else freeze)
            link = _gauss(a, y_new - yp_x)[0]
        else:
            b = np.repeat(np.repeat(st["b"], nt, axis=0), ng, axis=0)
            Sy = None if st["S"] is None else np.repeat(np.repeat(st["S"], nt, axis=0), ng, axis=0)
            link = self.h_values(rp_x, yp_x, b, Sy, r_new_x, y_new)
        b_new, S_new = self.local(r_new_x, y_new)
        return {"r": r_new_x, "y": y_new, "w": base * link, "b": b_new, "S": S_new}


# ------------------------------------------------------------------------- public API


def _as_point(v, d):
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if v.shape != (d,):
        raise InvalidParameter(f"expected a point in R^{d}, got shape {v.shape}")
    return v


def h_kernel(coeffs, mu_flow, phi_flow, r: float, t: float, y, z, quad: KernelGrid = KernelGrid()) -> float:
    """H_{r,t}(y, z) with the covariance frozen at z over [r, t]."""
    if not r < t:
        raise InvalidParameter("need r < t")
    d = coeffs.dim
    y, z = _as_point(y, d), _as_point(z, d)
    ser = _Series(coeffs, mu_flow, phi_flow, r, t, quad)
    rr = np.array([r])
    b, Sy = ser.local(rr, y[None, :])
    return float(ser.h_to_target(rr, y[None, :], b, Sy, z)[0])


def h_kernel_iterated(
    m: int, coeffs, mu_flow, phi_flow, r: float, t: float, y, z, quad: KernelGrid = KernelGrid(), check: bool = False
) -> float:
    """H^m_{r,t}(y, z): the m-fold space-time convolution of H with itself.

    With ``check=True`` the value is recomputed on ``quad.refined()`` and a
    relative change above 10% raises :class:`QuadratureUnresolved`.
    """
    if m < 1:
        raise InvalidParameter("m must be >= 1")
    if m == 1:
        return h_kernel(coeffs, mu_flow, phi_flow, r, t, y, z, quad)
    d = coeffs.dim
    y, z = _as_point(y, d), _as_point(z, d)

    def at(q):
        return float(_Series(coeffs, mu_flow, phi_flow, r, t, q).chain(r, y, z, m - 1, "H")[m - 1])

    val = at(quad)
    if check:
        fine = at(quad.refined())
        if abs(fine - val) > 0.1 * max(abs(fine), 1e-300) and abs(fine - val) > 1e-14:
            raise QuadratureUnresolved(f"H^{m}: {val:.6g} vs refined {fine:.6g}")
        val = fine
    return val


@dataclass
class ParametrixResult:
    value: float
    terms: list
    tail_estimate: float
    M: int
    series_untrusted: bool = False
    rho: float = 0.0
    majorant_C: float = 0.0
    delta: float = 0.0
    extras: dict = field(default_factory=dict)


def _sup_moment(flow, theta, s, t, d):
    if flow is None:
        return 1.0
    sel = [m for r, m in zip(flow.times, flow.measures) if s - 1e-12 <= r <= t + 1e-12] or [flow.at(s)]
    return 1.0 + max(theta_moment(m, theta) for m in sel)


def fit_majorant_constant(
    coeffs, mu_flow, phi_flow, s: float, t: float, n_probes: int = 64, seed: int = 0, center=None, spread: float = 3.0
) -> float:
    """Smallest C with |H_{r,t}(y,z)| <= C S f_r(y) (t - r)^{-1/2} p~^{2K}_{r,t}(y, z) on random probes.

    S = sup_r (1 + ||mu_r||_theta). Returns inf when H is nonzero where f vanishes.
    """
    d = coeffs.dim
    rng = np.random.default_rng(seed)
    center = np.zeros(d) if center is None else _as_point(center, d)
    S = _sup_moment(mu_flow, coeffs.theta, s, t, d)
    ser = _Series(coeffs, mu_flow, phi_flow, s, t, KernelGrid())
    r = s + (t - s) * rng.uniform(0.0, 0.95, size=n_probes)
    Y = center + spread * rng.uniform(-1.0, 1.0, size=(n_probes, d))
    Z = Y + np.sqrt(t - r)[:, None] * rng.standard_normal((n_probes, d)) * 1.5
    b, Sy = ser.local(r, Y)
    H = ser.h_values(r, Y, b, Sy, np.full(n_probes, t), Z)
    f = np.empty(n_probes)
    for i in range(n_probes):
        f[i] = coeffs.f(r[i], Y[i : i + 1])[0]
    ref = np.array([reference_kernel(2.0 * coeffs.K, r[i], t, Y[i], Z[i]) for i in range(n_probes)])
    C = 0.0
    for i in range(n_probes):
        if abs(H[i]) == 0.0:
            continue
        if f[i] <= 0.0:
            return float("inf")
        C = max(C, abs(H[i]) * math.sqrt(t - r[i]) / (S * f[i] * ref[i]))
    return float(C)


def envelope_norm(coeffs, s, t, centers, quad=None) -> float:
    """||f||_{L~_p^q([s,t])} over the given centers (finest-level quadrature)."""
    kw = {} if quad is None else {"quad": quad}
    return tilde_lpq_norm(
        lambda u, x: coeffs.f(u, x), coeffs.p, coeffs.q, s, t, centers, singular_points=coeffs.singular_points, **kw
    ).value


def parametrix_density(
    coeffs,
    mu_flow,
    phi_flow,
    x,
    z,
    s: float,
    t: float,
    M: int,
    quad: KernelGrid = KernelGrid(),
    majorant_C: float | None = None,
    inner_freeze: str = "endpoint",
    f_norm: float | None = None,
) -> ParametrixResult:
    """Truncated series sum_{m <= M} T_m for the density at z of the frozen equation started at (s, x).

    ``tail_estimate`` is the geometric tail of the majorant with ratio
    rho = C S ||f||_{L~} (t - s)^delta, where C is ``majorant_C`` (fitted by
    :func:`fit_majorant_constant` when omitted); rho >= 1 gives an infinite tail.
    ``series_untrusted`` is set when the tail exceeds |value|.
    """
    if not s < t:
        raise InvalidParameter("need s < t")
    if M < 0:
        raise InvalidParameter("M must be >= 0")
    d = coeffs.dim
    x, z = _as_point(x, d), _as_point(z, d)
    k0 = freeze_covariance(coeffs, phi_flow, z, s, t, n_quad=quad.cov_panels, check_band=False)
    terms = [float(frozen_density(k0, x, z))]
    if M > 0:
        ser = _Series(coeffs, mu_flow, phi_flow, s, t, quad, inner_freeze)
        terms += [float(v) for v in ser.chain(s, x, z, M, "p")[1:]]
    value = float(math.fsum(terms))
    if majorant_C is None:
        majorant_C = fit_majorant_constant(coeffs, mu_flow, phi_flow, s, t, center=0.5 * (x + z))
    if f_norm is None:
        centers = np.linspace(x, z, 3)
        f_norm = envelope_norm(coeffs, s, t, centers)
    S = _sup_moment(mu_flow, coeffs.theta, s, t, d)
    delta = coeffs.delta
    if majorant_C == 0.0 or f_norm == 0.0:
        rho = 0.0
    else:
        rho = majorant_C * S * f_norm * (t - s) ** delta
    if rho == 0.0:
        tail = 0.0
    elif rho >= 1.0 or not np.isfinite(rho):
        tail = float("inf")
    else:
        lead = max(abs(terms[m]) * rho ** (M - m) for m in range(M + 1))
        tail = lead * rho / (1.0 - rho)
    return ParametrixResult(
        value=value,
        terms=terms,
        tail_estimate=float(tail),
        M=M,
        series_untrusted=bool(tail > abs(value)),
        rho=float(rho),
        majorant_C=float(majorant_C),
        delta=float(delta),
        extras={"S": S, "f_norm": float(f_norm)},
    )


def write_density_csv(path, points, values) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 1 and points.shape[1] != 1 and np.ndim(values) == 1 and len(values) == points.shape[1]:
        points = points.T
    header = [f"x{i + 1}" for i in range(points.shape[1])] + ["value"]
    io.write_csv(path, header, [list(p) + [v] for p, v in zip(points, np.asarray(values).reshape(-1))])


# ------------------------------------------------------------------------- bounds


@dataclass
class BoundEntry:
    name: str
    worst_constant: float
    budget: float
    n_probes: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_constant) and self.worst_constant <= self.budget)

    def as_dict(self):
        return {"name": self.name, "worst_constant": self.worst_constant, "budget": self.budget, "pass": self.passed}


@dataclass
class BoundReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def get(self, name) -> BoundEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def as_dict(self):
        return {"entries": [e.as_dict() for e in self.entries], "pass": self.passed}

    def write_json(self, path):
        io.write_json(path, self.as_dict())


DEFAULT_BUDGETS = {
    "gaussian_domination": 50.0,
    "kernel_derivatives": 50.0,
    "kernel_flow_difference": 50.0,
    "derivative_flow_difference": 50.0,
    "convolution": 50.0,
    "h_kernel_majorant": 50.0,
    "h_iterated_majorant": 50.0,
}


def make_probes(d: int, n: int, seed: int = 0, horizon: float = 1.0, spread: float = 2.0):
    """Random (x, y, z, s, t) tuples with 0 <= s < t <= horizon and moderate |x - y| / sqrt(t - s)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s, t = np.sort(rng.uniform(0.0, horizon, size=2))
        if t - s < 1e-3 * horizon:
            t = min(horizon, s + 0.05 * horizon)
        x = rng.uniform(-spread, spread, size=d)
        y = x + math.sqrt(t - s) * rng.uniform(-3.0, 3.0, size=d)
        z = rng.uniform(-spread, spread, size=d)
        out.append((x, y, z, float(s), float(t)))
    return out


def _per_time_wasserstein(phi_mu, phi_nu, theta):
    if phi_mu is None or phi_nu is None or phi_mu is phi_nu:
        return None
    vals = []
    for a, b in zip(phi_mu.measures, phi_nu.measures):
        vals.append(0.0 if a is b else wasserstein(a, b, theta, allow_approximate=True))
    return np.array(vals)


def _window_sup(flow, values, s, t):
    if values is None:
        return 0.0
    sel = (flow.times >= s - 1e-12) & (flow.times <= t + 1e-12)
    if not np.any(sel):
        return float(values[flow.index_at(s)])
    return float(values[sel].max())


def _ratio(num, den):
    if num == 0.0:
        return 0.0
    if den <= 0.0:
        return float("inf")
    return num / den


def convolution_lhs(Kc, g, s, t, x, y, n_time=24, n_space=12) -> float:
    """int_s^t int p~^K_{s,r}(x,y') (r-s)^{-1/2} g(r,y') (t-r)^{-1/2} p~^{2K}_{r,t}(y',y) dy' dr by bridge quadrature."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    d = x.shape[0]
    rs, rw = quadrature.sin2_nodes(s, t, n_time)
    xi1, w1 = quadrature.gauss_hermite(n_space)
    xi, xw = quadrature.tensor_grid([xi1] * d, [w1] * d)
    total = 0.0
    for r, w in zip(rs, rw):
        v1, v2 = 2.0 * Kc * (r - s), 4.0 * Kc * (t - r)
        mean = x + v1 / (v1 + v2) * (y - x)
        var = v1 * v2 / (v1 + v2)
        pts = mean + math.sqrt(var) * xi
        # product of the two Gaussians = Gaussian(x -> y, v1 + v2) * bridge density
        joint = np.exp(-np.sum((y - x) ** 2) / (2.0 * (v1 + v2))) / (2.0 * math.pi * (v1 + v2)) ** (0.5 * d)
        gv = np.asarray(g(r, pts), dtype=np.float64).reshape(-1)
        total += w * (r - s) ** -0.5 * (t - r) ** -0.5 * joint * float(np.dot(xw, gv))
    return total


def verify_bounds(
    coeffs: CoefficientSet,
    mu_flow: MeasureFlow | None,
    nu_flow: MeasureFlow | None,
    phi_mu: MeasureFlow | None,
    phi_nu: MeasureFlow | None,
    probes,
    budgets: dict | None = None,
    g=None,
    include_iterated: bool = True,
    quad: KernelGrid = KernelGrid(n_time=10, n_space=6),
) -> BoundReport:
    """Empirical worst constants of the kernel inequalities over ``probes``.

    Entries (each the smallest constant making the inequality hold on the probes):

    * gaussian_domination: p^z (1 + |x-y|^4/(t-s)^2) <= c p~^K
    * kernel_derivatives: sqrt(t-s)|grad p^z| + (t-s)||hess p^z|| <= c p~^K
    * kernel_flow_difference: (1 + |x-y|^2/(t-s)) |p^{z,mu} - p^{z,nu}| <= c p~^K W
    * derivative_flow_difference: same with the derivative combination
    * convolution: time-space convolution of p~^K, g and p~^{2K} against
      c (t-s)^{-1/2+delta} p~^{2K} ||g||_{L~}; ``g`` defaults to 1
    * h_kernel_majorant: |H_{s,t}(y,z)| <= c (t-s)^{-1/2} (1 + ||mu_s||) f_s(y) p~^K(y,z)
    * h_iterated_majorant: |H^2_{s,t}(y,z)| <= f_s(y) (c S)^2 (t-s)^{-1/2+delta} p~^{2K}(y,z)

    W is the sup over [s, t] of the per-time W_theta between ``phi_mu`` and ``phi_nu``.
    """
    budgets = {**DEFAULT_BUDGETS, **(budgets or {})}
    K, d, th = coeffs.K, coeffs.dim, coeffs.theta
    if g is None:
        g = lambda r, pts: np.ones(pts.shape[0])  # noqa: E731
    w_vals = _per_time_wasserstein(phi_mu, phi_nu, th)
    worst = {k: 0.0 for k in DEFAULT_BUDGETS}
    delta = coeffs.delta
    for x, y, z, s, t in probes:
        x, y, z = _as_point(x, d), _as_point(y, d), _as_point(z, d)
        tau = t - s
        k_mu = freeze_covariance(coeffs, phi_mu, z, s, t, check_band=False)
        ref = reference_kernel(K, s, t, x, y)
        p = frozen_density(k_mu, x, y)
        du = float(np.sum((x - y) ** 2))
        worst["gaussian_domination"] = max(worst["gaussian_domination"], _ratio(p * (1 + du**2 / tau**2), ref))
        gr = frozen_density_grad(k_mu, x, y)
        hs = frozen_density_hess(k_mu, x, y)
        lhs = math.sqrt(tau) * np.linalg.norm(gr) + tau * np.linalg.norm(hs, 2)
        worst["kernel_derivatives"] = max(worst["kernel_derivatives"], _ratio(lhs, ref))
        if w_vals is not None:
            k_nu = freeze_covariance(coeffs, phi_nu, z, s, t, check_band=False)
            W = _window_sup(phi_mu, w_vals, s, t)
            diff = abs(p - frozen_density(k_nu, x, y)) * (1 + du / tau)
            worst["kernel_flow_difference"] = max(worst["kernel_flow_difference"], _ratio(diff, ref * W))
            dd = math.sqrt(tau) * np.linalg.norm(gr - frozen_density_grad(k_nu, x, y)) + tau * np.linalg.norm(
                hs - frozen_density_hess(k_nu, x, y), 2
            )
            worst["derivative_flow_difference"] = max(worst["derivative_flow_difference"], _ratio(dd, ref * W))
        conv = convolution_lhs(K, g, s, t, x, y)
        gnorm = tilde_lpq_norm(g, coeffs.p, coeffs.q, s, t, np.linspace(x, y, 3)).value
        rhs = tau ** (-0.5 + delta) * reference_kernel(2 * K, s, t, x, y) * gnorm
        worst["convolution"] = max(worst["convolution"], _ratio(conv, rhs))
        H = h_kernel(coeffs, mu_flow, phi_mu, s, t, y, z)
        mu_s = _flow_at(mu_flow, s, d)
        f_y = float(coeffs.f(s, y[None, :])[0])
        bound1 = tau**-0.5 * (1 + theta_moment(mu_s, th)) * f_y * reference_kernel(K, s, t, y, z)
        worst["h_kernel_majorant"] = max(worst["h_kernel_majorant"], _ratio(abs(H), bound1))
        if include_iterated:
            H2 = h_kernel_iterated(2, coeffs, mu_flow, phi_mu, s, t, y, z, quad)
            S = _sup_moment(mu_flow, th, s, t, d)
            bound2 = f_y * S**2 * tau ** (-0.5 + delta) * reference_kernel(2 * K, s, t, y, z)
            c2 = _ratio(abs(H2), bound2)
            worst["h_iterated_majorant"] = max(worst["h_iterated_majorant"], math.sqrt(c2))
    n = len(probes)
    entries = []
    for name, val in worst.items():
        if name in ("kernel_flow_difference", "derivative_flow_difference") and w_vals is None:
            val = 0.0
        if name == "h_iterated_majorant" and not include_iterated:
            continue
        entries.append(BoundEntry(name, float(val), float(budgets[name]), n))
    return BoundReport(entries)
