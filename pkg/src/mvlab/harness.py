"""Experiment configuration, dispatch and report emission.

A config is a mapping (YAML or JSON file) with an ``experiment`` key and the
parameters listed in :data:`SCHEMA`. Unknown keys are rejected. Relative
``output_dir`` values are resolved against ``$MVLAB_OUTPUT_ROOT`` (default:
the current directory).
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, coefficients, io, kernels, parametrix, presets, simulator, zvonkin
from .errors import ConfigError, MVLabError
from .measures import EmpiricalMeasure, MeasureFlow, flow_distance, theta_moment, wasserstein

OUTPUT_ROOT_ENV = "MVLAB_OUTPUT_ROOT"
EXPERIMENTS = ("contraction", "density_compare", "bounds", "moments", "zvonkin_gate", "assumptions")


def _int(lo=None):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise ConfigError(f"{key} must be an integer, got {v!r}", key=key)
        if lo is not None and v < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {v}", key=key)
        return int(v)

    return check


def _float(lo=None, strict=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
            raise ConfigError(f"{key} must be a number, got {v!r}", key=key)
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(f"{key} must be finite", key=key)
        if lo is not None and (v <= lo if strict else v < lo):
            raise ConfigError(f"{key} must be {'>' if strict else '>='} {lo}, got {v}", key=key)
        return v

    return check


def _str(choices=None):
    def check(key, v):
        if not isinstance(v, str):
            raise ConfigError(f"{key} must be a string", key=key)
        if choices is not None and v not in choices:
            raise ConfigError(f"{key} must be one of {', '.join(choices)}; got {v!r}", key=key)
        return v

    return check


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key} must be true or false", key=key)
    return v


def _mapping(key, v):
    if not isinstance(v, dict):
        raise ConfigError(f"{key} must be a mapping", key=key)
    return dict(v)


def _point(key, v):
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64)) if isinstance(v, (int, float, list)) else None
    if arr is None or arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} must be a number or a list of numbers", key=key)
    return [float(a) for a in arr]


def _range3(key, v):
    if not (isinstance(v, list) and len(v) == 3):
        raise ConfigError(f"{key} must be [low, high, count]", key=key)
    lo, hi = _float()(key, v[0]), _float()(key, v[1])
    n = _int(1)(key, v[2])
    if hi < lo:
        raise ConfigError(f"{key}: high < low", key=key)
    return [lo, hi, n]


# key -> (validator, default); None default means "derived"
SCHEMA = {
    "experiment": (_str(EXPERIMENTS), None),
    "preset": (_str(), None),
    "preset_params": (_mapping, {}),
    "constants": (_mapping, {}),
    "output_dir": (_str(), None),
    "seed": (_int(0), 0),
    "workers": (_int(1), 1),
    "particles": (_int(1), 10000),
    "steps": (_int(1), 50),
    "horizon": (_float(0, strict=True), None),
    "x0": (_point, [0.0]),
    "t0": (_float(0, strict=True), 0.1),
    "tol": (_float(0, strict=True), 1e-6),
    "max_iter": (_int(1), 20),
    "lattice_h": (_float(0, strict=True), 0.1),
    "cap_check": (_bool, True),
    "M": (_int(0), 3),
    "tau": (_float(0, strict=True), 0.5),
    "z_range": (_range3, [-1.5, 2.0, 20]),
    "n_time": (_int(2), 12),
    "n_space": (_int(2), 8),
    "mc_particles": (_int(10), 1_000_000),
    "mc_steps": (_int(1), 200),
    "kde_bandwidth": (_float(0, strict=True), 0.03),
    "probes": (_int(1), 20),
    "budgets": (_mapping, {}),
    "lambda_max": (_float(0), 256.0),
    "dx": (_float(0, strict=True), 0.05),
    "pde_steps": (_int(1), 1000),
    "theta": (_float(1), None),
    "n_probes": (_int(1), 200),
}

CONSTANT_KEYS = ("K", "theta", "p", "q", "horizon")

DEFAULT_PRESET = {
    "contraction": "bump_drift_mu_dependent",
    "density_compare": "constant_drift",
    "bounds": "constant_drift",
    "moments": "bump_drift_mu_dependent",
    "zvonkin_gate": "bump_drift_mu_dependent",
    "assumptions": "bump_drift_mu_dependent",
}


@dataclass
class ExperimentConfig:
    raw: dict
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def experiment(self) -> str:
        return self.values["experiment"]


@dataclass
class ExperimentReport:
    config: dict
    metrics: dict
    passed: bool
    artifacts: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 2

    def as_dict(self):
        return {
            "config": self.config,
            "metrics": self.metrics,
            "pass": self.passed,
            "artifacts": self.artifacts,
            "provenance": self.provenance,
        }


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="config") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", key="config") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level", key="config")
    return data


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", key=text)
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def validate_config(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key)
    if "experiment" not in raw:
        raise ConfigError("missing required key 'experiment'", key="experiment")
    values = {}
    for key, (check, default) in SCHEMA.items():
        if key in raw:
            values[key] = check(key, raw[key])
        else:
            values[key] = copy.deepcopy(default)
    exp = values["experiment"]
    if values["preset"] is None:
        values["preset"] = DEFAULT_PRESET[exp]
    presets.get_preset(values["preset"])
    for key in values["constants"]:
        if key not in CONSTANT_KEYS:
            raise ConfigError(f"unknown constant {key!r}; allowed: {', '.join(CONSTANT_KEYS)}", key=f"constants.{key}")
    if values["output_dir"] is None:
        values["output_dir"] = f"results/{exp}"
    return ExperimentConfig(raw, values)


def build_coefficients(cfg: ExperimentConfig):
    cs = presets.get(cfg["preset"], **cfg["preset_params"])
    changes = {k: float(v) for k, v in cfg["constants"].items()}
    if cfg["horizon"] is not None:
        changes["horizon"] = cfg["horizon"]
    if changes:
        try:
            cs = dataclasses.replace(cs, **changes)
        except MVLabError as exc:
            raise ConfigError(str(exc), key="constants") from None
    return cs


def output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["output_dir"])
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gamma(cfg, cs):
    x0 = cfg["x0"]
    if len(x0) == 1 and cs.dim > 1:
        x0 = x0 * cs.dim
    if len(x0) != cs.dim:
        raise ConfigError(f"x0 has {len(x0)} coordinates, preset has dim {cs.dim}", key="x0")
    return EmpiricalMeasure.dirac(x0)


def _plan(cfg, cs, n=None, seed=None, steps=None, horizon=None):
    T = cs.horizon if horizon is None else horizon
    return simulator.SimulationPlan.uniform(
        n or cfg["particles"],
        0.0,
        T,
        steps or cfg["steps"],
        seed=cfg["seed"] if seed is None else seed,
        workers=cfg["workers"],
    )


# ------------------------------------------------------------------- experiments


def _exp_contraction(cfg, cs, out):
    gamma = _gamma(cfg, cs)
    plan = _plan(cfg, cs)
    res = simulator.picard_solve(
        cs, gamma, plan, tol=cfg["tol"], max_iter=cfg["max_iter"], t0=cfg["t0"], lattice_h=cfg["lattice_h"]
    )
    rows = []
    for si, (dists, ratios) in enumerate(zip(res.segment_iterates, res.segment_ratios)):
        for k, dist in enumerate(dists):
            rows.append((si, k + 1, dist, ratios[k - 1] if k >= 1 else float("nan")))
    io.write_csv(out / "iterates.csv", ["segment", "iteration", "distance", "ratio"], rows)
    th = cs.theta
    io.write_csv(
        out / "flow_moments.csv",
        ["t", "theta_moment", "mean1"],
        [(t, theta_moment(m, th), m.mean()[0]) for t, m in zip(res.flow.times, res.flow.measures)],
    )
    ratios = [r for r in res.contraction_ratios if np.isfinite(r)]
    cap_gap = None
    if cfg["cap_check"]:
        # the fixed point's sensitivity to the drift cap, recorded rather than asserted
        free = simulator.picard_solve(
            cs, gamma, dataclasses.replace(plan, drift_cap_factor=None), tol=cfg["tol"], max_iter=cfg["max_iter"],
            t0=cfg["t0"], lattice_h=cfg["lattice_h"],
        )
        cap_gap = flow_distance(res.flow, free.flow, cs.theta, kind="lattice_weighted_tv", h=res.lattice_h)
    metrics = {
        "uncapped_fixed_point_distance": cap_gap,
        "segments": res.segments,
        "iterations": res.iterations,
        "first_ratio": res.first_ratio,
        "max_ratio": max(ratios) if ratios else None,
        "converged": res.converged,
        "t0": res.t0_used,
        "lattice_h": res.lattice_h,
    }
    passed = res.converged and all(r < 1 for r in ratios)
    return metrics, passed, ["iterates.csv", "flow_moments.csv"]


def _exact_density(cs, x, z, tau):
    if cs.name == "brownian":
        shift = np.zeros(cs.dim)
    elif cs.name == "constant_drift":
        shift = np.zeros(cs.dim)
        shift[0] = cs.params["magnitude"] * tau
    else:
        return None
    diff = np.asarray(z) - np.asarray(x) - shift
    return float(np.exp(-np.sum(diff**2) / (2 * tau)) / (2 * math.pi * tau) ** (cs.dim / 2))


def _exp_density_compare(cfg, cs, out):
    if cs.dim != 1:
        raise ConfigError("density_compare runs in dimension 1", key="preset")
    x = np.array(_gamma(cfg, cs).atoms[0])
    tau = cfg["tau"]
    lo, hi, n = cfg["z_range"]
    zs = np.linspace(lo, hi, n)
    quad = parametrix.KernelGrid(n_time=cfg["n_time"], n_space=cfg["n_space"])
    gamma = EmpiricalMeasure.dirac(x)
    grid = np.linspace(0.0, tau, cfg["mc_steps"] + 1)
    mu_flow = MeasureFlow.constant(gamma, grid)
    exact = [_exact_density(cs, x, [z], tau) for z in zs]
    use_exact = exact[0] is not None
    phi = None
    if not use_exact or not cs.state_independent_diffusion:
        plan = simulator.SimulationPlan(cfg["mc_particles"], grid, seed=cfg["seed"], workers=cfg["workers"])
        ens = simulator.simulate_frozen(cs, mu_flow, gamma, plan, keep_paths=False)
        X = np.ascontiguousarray(ens.terminal)
        w = np.full(X.shape[0], 1.0 / X.shape[0])
        kde, sq = kernels.kde_gauss(X, w, zs[:, None], cfg["kde_bandwidth"])
        se = np.sqrt(np.maximum(sq - kde**2, 0.0) / (X.shape[0] - 1))
        if not cs.state_independent_diffusion:
            phi = simulator.phi_map(cs, gamma, mu_flow, dataclasses.replace(plan, n_particles=min(plan.n_particles, 4000)))
    C = parametrix.fit_majorant_constant(cs, mu_flow, phi, 0.0, tau, center=x)
    rows, hits, worst_rel, untrusted = [], 0, 0.0, 0
    for i, z in enumerate(zs):
        res = parametrix.parametrix_density(cs, mu_flow, phi, x, [z], 0.0, tau, cfg["M"], quad, majorant_C=C)
        untrusted += res.series_untrusted
        if use_exact:
            ref, err = exact[i], 0.0
            worst_rel = max(worst_rel, abs(res.value / ref - 1.0))
        else:
            ref, err = float(kde[i]), float(se[i])
            hits += abs(res.value - ref) <= 3.0 * err
        rows.append((z, res.value, ref, err, res.tail_estimate))
    io.write_csv(out / "density.csv", ["z", "parametrix", "reference", "stderr", "tail_estimate"], rows)
    metrics = {"reference": "exact" if use_exact else "monte_carlo_kde", "M": cfg["M"], "tau": tau,
               "series_untrusted_points": int(untrusted), "majorant_C": C}
    if use_exact:
        metrics["max_relative_error"] = worst_rel
        passed = worst_rel < 1e-3
    else:
        metrics["within_3se_fraction"] = hits / len(zs)
        passed = hits >= 0.9 * len(zs)
    return metrics, passed, ["density.csv"]


def _exp_bounds(cfg, cs, out):
    gamma = _gamma(cfg, cs)
    plan = _plan(cfg, cs, n=min(cfg["particles"], 4000))
    mu = MeasureFlow.constant(gamma, plan.time_grid)
    phi_mu = simulator.phi_map(cs, gamma, mu, plan)
    shifted = EmpiricalMeasure(gamma.atoms + 0.5, gamma.weights)
    nu = MeasureFlow.constant(shifted, plan.time_grid)
    phi_nu = simulator.phi_map(cs, gamma, nu, plan)
    probes = parametrix.make_probes(cs.dim, cfg["probes"], seed=cfg["seed"], horizon=cs.horizon)
    quad = parametrix.KernelGrid(n_time=min(cfg["n_time"], 10), n_space=min(cfg["n_space"], 6))
    rep = parametrix.verify_bounds(cs, mu, nu, phi_mu, phi_nu, probes, budgets=cfg["budgets"], quad=quad)
    rep.write_json(out / "bounds.json")
    io.write_csv(out / "bounds.csv", ["index", "worst_constant", "budget"],
                 [(i, e.worst_constant, e.budget) for i, e in enumerate(rep.entries)])
    metrics = {e.name: {"worst_constant": e.worst_constant, "budget": e.budget, "pass": e.passed} for e in rep.entries}
    # Monte Carlo error bar on W(Phi(mu), Phi(nu)): the same flow under an independent seed
    phi_mu2 = simulator.phi_map(cs, gamma, mu, dataclasses.replace(plan, seed=plan.seed + 1))
    noise = max(wasserstein(a, b, cs.theta, allow_approximate=True) for a, b in zip(phi_mu.measures, phi_mu2.measures))
    signal = max(wasserstein(a, b, cs.theta, allow_approximate=True) for a, b in zip(phi_mu.measures, phi_nu.measures))
    metrics["flow_wasserstein"] = {"value": signal, "mc_noise_floor": noise}
    return metrics, rep.passed, ["bounds.json", "bounds.csv"]


def _exp_moments(cfg, cs, out):
    gamma = _gamma(cfg, cs)
    th = cfg["theta"] if cfg["theta"] is not None else cs.theta
    n = cfg["particles"]
    e1 = simulator.simulate_mckean_vlasov(cs, gamma, _plan(cfg, cs, n=n))
    e2 = simulator.simulate_mckean_vlasov(cs, gamma, _plan(cfg, cs, n=2 * n, seed=cfg["seed"] + 1))
    m1, m2 = simulator.moment_report(e1, th), simulator.moment_report(e2, th)
    io.write_csv(
        out / "moments.csv",
        ["t", "moment_n", "moment_2n", "sup_moment_n", "sup_moment_2n"],
        zip(e1.times, m1.per_time_moments, m2.per_time_moments, m1.horizon_moments, m2.horizon_moments),
    )
    gap = abs(m1.sup_moment_theta - m2.sup_moment_theta)
    pooled = math.hypot(m1.sup_moment_stderr, m2.sup_moment_stderr)
    finite = all(math.isfinite(v) for v in (m1.sup_moment_theta, m2.sup_moment_theta))
    stable = gap <= 4.0 * pooled
    metrics = {
        "sup_moment_n": m1.sup_moment_theta,
        "sup_moment_2n": m2.sup_moment_theta,
        "stderr_n": m1.sup_moment_stderr,
        "stderr_2n": m2.sup_moment_stderr,
        "gap_in_stderr": gap / pooled if pooled > 0 else 0.0,
        "fitted_growth_rate": m2.fitted_growth_rate,
        "cap_events": e1.cap_events + e2.cap_events,
        "finite": finite,
        "stable": stable,
    }
    return metrics, finite and stable, ["moments.csv"]


def _exp_zvonkin_gate(cfg, cs, out):
    if cs.dim != 1:
        raise ConfigError("zvonkin_gate runs in dimension 1", key="preset")
    gamma = _gamma(cfg, cs)
    plan = _plan(cfg, cs, n=min(cfg["particles"], 4000))
    mu = MeasureFlow.constant(gamma, plan.time_grid)
    phi = simulator.phi_map(cs, gamma, mu, plan)
    grid = zvonkin.GridSpec(dx=cfg["dx"], n_steps=cfg["pde_steps"])
    history = []
    try:
        lam = zvonkin.lambda_search(cs, mu, phi, grid, cfg["lambda_max"], rel_tol=1e-3, history=history)
    except MVLabError as exc:
        io.write_csv(out / "lambda_history.csv", ["lambda", "sup_u", "sup_du", "pass"],
                     [(h.lam, h.sup_u, h.sup_du, float(h.passed)) for h in history])
        return {"error": str(exc), "lambda": None}, False, ["lambda_history.csv"]
    sol = zvonkin.solve_backward_pde(cs, mu, phi, lam, grid)
    zvonkin.write_solution(out, sol)
    io.write_csv(out / "lambda_history.csv", ["lambda", "sup_u", "sup_du", "pass"],
                 [(h.lam, h.sup_u, h.sup_du, float(h.passed)) for h in history])
    gate = zvonkin.regularity_gate(sol)
    xs = sol.x[(sol.x > -5) & (sol.x < 5)]
    theta_vals = zvonkin.theta_transform(sol, sol.t[0], xs)
    min_slope = float(np.min(np.diff(theta_vals) / np.diff(xs)))
    metrics = {**gate.as_dict(), "theta_min_slope": min_slope,
               "lambda_monotonicity_rise": zvonkin.schedule_monotonicity(history)}
    return metrics, gate.passed and min_slope >= 0.8 - 1e-9, ["solution.csv", "gate.json", "lambda_history.csv"]


def _exp_assumptions(cfg, cs, out):
    plan = coefficients.SamplePlan(seed=cfg["seed"], n_probes=cfg["n_probes"])
    a1 = coefficients.verify_A1(cs, plan)
    a2 = coefficients.verify_A2(cs, plan, relaxed_K=cs.K)
    centers = np.linspace(-2.0, 2.0, 9)[:, None] if cs.dim == 1 else np.zeros((1, cs.dim))
    norm = coefficients.tilde_lpq_norm(lambda u, x: cs.f(u, x), cs.p, cs.q, 0.0, cs.horizon, centers,
                                       singular_points=cs.singular_points)
    clauses = [
        ("max_sigma_norm_sq", a1.max_sigma_norm_sq), ("max_inv_norm", a1.max_inv_norm),
        ("lipschitz_x_ratio", a1.lipschitz_x_ratio), ("lipschitz_measure_ratio", a1.lipschitz_measure_ratio),
        ("joint_lipschitz_ratio", a1.joint_lipschitz_ratio), ("mixed_ratio", a1.mixed_ratio),
        ("drift_envelope_ratio", a2.drift_envelope_ratio), ("drift_tv_lipschitz_ratio", a2.drift_tv_lipschitz_ratio),
        ("relaxed_growth_ratio", a2.relaxed_growth_ratio), ("envelope_norm", norm.value),
    ]
    io.write_csv(out / "assumptions.csv", ["index", "value"], [(i, v) for i, (_, v) in enumerate(clauses)])
    kato = coefficients.kato_class_check(cs.p, cs.q, cs.dim)
    metrics = {
        "A1": a1.as_dict(),
        "A2": a2.as_dict(),
        "kato_class": kato,
        "envelope_norm": norm.value,
        "envelope_norm_extrapolated": norm.extrapolated,
        "columns": [name for name, _ in clauses],
    }
    return metrics, a1.ok and a2.ok and kato, ["assumptions.csv"]


_DISPATCH = {
    "contraction": _exp_contraction,
    "density_compare": _exp_density_compare,
    "bounds": _exp_bounds,
    "moments": _exp_moments,
    "zvonkin_gate": _exp_zvonkin_gate,
    "assumptions": _exp_assumptions,
}


def run(config) -> ExperimentReport:
    """Validate, dispatch, write artifacts and ``report.json``; returns the report."""
    cfg = config if isinstance(config, ExperimentConfig) else validate_config(config)
    cs = build_coefficients(cfg)
    out = output_dir(cfg)
    start = time.perf_counter()
    metrics, passed, artifacts = _DISPATCH[cfg.experiment](cfg, cs, out)
    report = ExperimentReport(
        config=copy.deepcopy(cfg.raw),
        metrics=metrics,
        passed=bool(passed),
        artifacts=sorted(artifacts),
        provenance={
            "seed": cfg["seed"],
            "version": __version__,
            "backend": kernels.BACKEND_NAME,
            "python": platform.python_version(),
            "wall_time_s": time.perf_counter() - start,
            "coefficients": cs.metadata(),
        },
    )
    io.write_json(out / "report.json", report.as_dict())
    return report
