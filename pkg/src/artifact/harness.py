"""Experiment orchestration: plan validation, studies, persistence and plots.

A plan is a JSON object with exactly the keys of DEFAULT_PLAN (nested dicts
are checked too; unknown keys are rejected). Each study returns entries that
carry their own tolerance, plus CSV tables and plot series. Studies run on a
thread pool and are merged in plan order, so the outputs depend only on the
plan.
"""
from __future__ import annotations

import copy
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io as aio
from .fitting import MIN_POINTS, FitDataError, fit_slope

STUDIES = ("hk", "viscous-drift", "ns-l1", "pointwise", "selfsim", "burnett", "hilbert-residual")
KAPPA_STUDIES = ("viscous-drift", "ns-l1", "pointwise", "selfsim")

DEFAULT_PLAN = {
    "scenario": "default",
    "studies": list(STUDIES),
    "vortex": {
        "pair": {"positions": [[-0.5, 0.0], [0.5, 0.0]], "circulations": [1.0, 1.0]},
        "triple": {"positions": [[0.0, 0.0], [1.0, 0.2], [-0.3, 0.9]], "circulations": [1.0, -0.6, 0.8]},
        "eta0": 1.0,
    },
    "grids": {"ns": 512, "ns_box": 2.56, "oseen_box": 64.0, "velocity": 32, "velocity_coarse": 24,
              "hilbert": 32, "hilbert_levels": 3},
    "kappa_list": {
        "viscous-drift": [1 / 20, 1 / 28, 1 / 40, 1 / 56, 1 / 80],
        "ns-l1": [4e-3, 2e-3, 1e-3, 5e-4],
        "pointwise": [4e-3, 2e-3, 1e-3, 5e-4],
        "selfsim": [2e-3, 1e-3, 5e-4, 2.5e-4],
    },
    "eps_list": [1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
    "beta": 1.2,
    "p": 8.0,
    "horizons": {"hk": 10.0, "drift_tau": float(np.log(2.0)), "ns": 0.5, "oseen_steps": 500,
                 "oseen_dt": 1e-3, "pointwise": 1.0, "hilbert": 0.5},
    "tolerances": {
        "hk_invariants": 1e-8, "hk_period": 1e-6,
        "drift_slope_min": -0.5, "drift_slope_max": -0.05,
        "ns_slope_min": 0.8, "oseen_exact": 1e-6,
        "shape_rel": 1e-3, "farfield_slope": 0.5, "farfield_slope_tol": 0.15,
        "selfsim_identity": 1e-8, "selfsim_grid": 1e-10, "corrector_ode": 1e-8, "approx_slope_min": 0.8,
        "kernel_calibration": 1e-6, "ratio_tol": 0.01, "refinement": 0.02, "gamma_fg": 0.02,
        "kernel_sup": 0.02, "moments": 0.01,
        "div_b": 1e-10, "g3_slope_tol": 0.1, "g1_slope_margin": 0.1, "f2_micro": 1e-6,
    },
    "output_dir": "artifact-out",
    "seed": 0,
}

OUT_OF_SCOPE = ("final remainder bound and its triple-exponential smallness condition on eps "
                "against kappa are not reproducible at desk scale; criteria 6-9 cover their "
                "constructive inputs")

# entries whose failure is a recorded deviation of the stated coefficients, not of the code
EXPECTED_DEVIATIONS = ("bilinear moment row1 (eta0 coefficient)", "bilinear moment row2 (eta_c coefficient)")


class PlanError(ValueError):
    pass


def _check_keys(given: dict, ref: dict, where: str, exact: bool = True):
    if not isinstance(given, dict):
        raise PlanError(f"{where} must be an object")
    unknown = sorted(set(given) - set(ref))
    if unknown:
        raise PlanError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    if exact:
        missing = sorted(set(ref) - set(given))
        if missing:
            raise PlanError(f"missing key(s) in {where}: {', '.join(missing)}")


@dataclass
class ExperimentPlan:
    scenario: str
    studies: list
    vortex: dict
    grids: dict
    kappa_list: dict
    eps_list: list
    beta: float
    p: float
    horizons: dict
    tolerances: dict
    output_dir: str
    seed: int = 0

    @classmethod
    def default(cls, **overrides) -> "ExperimentPlan":
        d = copy.deepcopy(DEFAULT_PLAN)
        d.update(overrides)
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict, fill_defaults: bool = False) -> "ExperimentPlan":
        """Strict parse. With fill_defaults, missing keys (top level and nested) take DEFAULT_PLAN values."""
        if fill_defaults:
            base = copy.deepcopy(DEFAULT_PLAN)
            _check_keys(d, base, "plan", exact=False)
            for k, v in d.items():
                if isinstance(base[k], dict) and isinstance(v, dict):
                    _check_keys(v, base[k], k, exact=False)
                    base[k].update(v)
                else:
                    base[k] = v
            d = base
        _check_keys(d, DEFAULT_PLAN, "plan")
        plan = cls(**copy.deepcopy(d))
        plan.validate()
        return plan

    @classmethod
    def load(cls, path, fill_defaults: bool = False) -> "ExperimentPlan":
        try:
            d = aio.read_json(path)
        except (OSError, ValueError) as e:
            raise PlanError(f"cannot read plan: {e}") from e
        return cls.from_dict(d, fill_defaults)

    def to_dict(self) -> dict:
        return aio._plain(asdict(self))

    @property
    def config_hash(self) -> str:
        # output location does not change the numbers
        d = self.to_dict()
        d.pop("output_dir")
        return aio.config_hash(d)

    def validate(self):
        from .hilbert import ConfigError, check_delta_rule
        if not isinstance(self.scenario, str) or not self.scenario:
            raise PlanError("scenario must be a nonempty string")
        if not isinstance(self.studies, list):
            raise PlanError("studies must be a list")
        bad = [s for s in self.studies if s not in STUDIES]
        if bad:
            raise PlanError(f"unknown studies: {bad}")
        if len(set(self.studies)) != len(self.studies):
            raise PlanError("duplicate studies")
        _check_keys(self.vortex, DEFAULT_PLAN["vortex"], "vortex")
        for name in ("pair", "triple"):
            _check_keys(self.vortex[name], DEFAULT_PLAN["vortex"]["pair"], f"vortex.{name}")
            z = np.asarray(self.vortex[name]["positions"], float)
            a = np.asarray(self.vortex[name]["circulations"], float)
            if z.ndim != 2 or z.shape[1] != 2 or len(z) != len(a) or len(a) == 0:
                raise PlanError(f"vortex.{name}: positions (N,2) and N circulations required")
        if not self.vortex["eta0"] > 0:
            raise PlanError("vortex.eta0 must be positive")
        _check_keys(self.grids, DEFAULT_PLAN["grids"], "grids")
        for k, v in self.grids.items():
            if not (isinstance(v, (int, float)) and v > 0):
                raise PlanError(f"grids.{k} must be positive")
        _check_keys(self.kappa_list, DEFAULT_PLAN["kappa_list"], "kappa_list")
        for k, v in self.kappa_list.items():
            if not isinstance(v, list) or not v:
                raise PlanError(f"kappa_list.{k} must be a nonempty list")
            if not all(isinstance(x, (int, float)) and x > 0 for x in v):
                raise PlanError(f"kappa_list.{k} must hold positive numbers")
        if not isinstance(self.eps_list, list) or not self.eps_list:
            raise PlanError("eps_list must be a nonempty list")
        if not all(isinstance(x, (int, float)) and x > 0 for x in self.eps_list):
            raise PlanError("eps_list must hold positive numbers")
        try:
            check_delta_rule(self.beta, self.p)
        except ConfigError as e:
            raise PlanError(str(e)) from e
        _check_keys(self.horizons, DEFAULT_PLAN["horizons"], "horizons")
        for k, v in self.horizons.items():
            if not (isinstance(v, (int, float)) and v > 0):
                raise PlanError(f"horizons.{k} must be positive")
        _check_keys(self.tolerances, DEFAULT_PLAN["tolerances"], "tolerances")
        for k, v in self.tolerances.items():
            if not isinstance(v, (int, float)):
                raise PlanError(f"tolerances.{k} must be a number")
            # slope bounds are signed; every other tolerance must be positive
            if not k.startswith("drift_slope") and not v > 0:
                raise PlanError(f"tolerances.{k} must be positive")
        if self.tolerances["drift_slope_min"] >= self.tolerances["drift_slope_max"]:
            raise PlanError("drift slope window is empty")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise PlanError("output_dir must be a nonempty string")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise PlanError("seed must be a nonnegative integer")


# ------------------------------------------------------------------ report types

@dataclass
class Entry:
    study: str
    name: str
    criterion: int | None
    value: float | None
    tolerance: str
    status: str           # pass, fail, insufficient points, error, expected-deviation, out-of-scope, info
    points: int | None = None
    ci95: tuple | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status in ("pass", "expected-deviation", "out-of-scope", "info")


@dataclass
class Plot:
    name: str
    title: str
    xlabel: str
    ylabel: str
    series: list          # (label, xs, ys)
    logx: bool = False
    logy: bool = False


@dataclass
class StudyResult:
    study: str
    seed: int
    entries: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)   # file stem -> (columns, rows)
    plots: list = field(default_factory=list)
    error: str | None = None
    error_kind: str | None = None                 # "numerical" or "other"
    seconds: float = 0.0

    def check(self, name, criterion, value, op, bound, **details):
        value = float(value)
        if op == "<=":
            ok, tol = value <= bound, f"<= {bound:g}"
        elif op == ">=":
            ok, tol = value >= bound, f">= {bound:g}"
        elif op == ">":
            ok, tol = value > bound, f"> {bound:g}"
        elif op == "in":
            lo, hi = bound
            ok, tol = lo <= value <= hi, f"in [{lo:g}, {hi:g}]"
        else:
            raise ValueError(op)
        status = "pass" if ok else ("expected-deviation" if name in EXPECTED_DEVIATIONS else "fail")
        e = Entry(self.study, name, criterion, value, tol, status, details=details)
        self.entries.append(e)
        return e

    def slope(self, name, criterion, xs, ys, mode, op, bound, **details):
        """Slope entry; fewer than MIN_POINTS points is flagged rather than fitted."""
        xs, ys = list(map(float, xs)), list(map(float, ys))
        if len(xs) < MIN_POINTS:
            tol = f"{op} {bound}" if op != "in" else f"in [{bound[0]:g}, {bound[1]:g}]"
            e = Entry(self.study, name, criterion, None, tol, "insufficient points", len(xs),
                      details={"needs": MIN_POINTS, **details})
            self.entries.append(e)
            return e
        fit = fit_slope(xs, ys, mode)
        e = self.check(name, criterion, fit.slope, op, bound, r2=fit.r2, mode=mode, **details)
        e.points = fit.npoints
        e.ci95 = tuple(float(c) for c in fit.ci95())
        return e


@dataclass
class RunReport:
    scenario: str
    config_hash: str
    version: str
    plan: dict
    entries: list
    studies: dict        # study -> {"seed", "error", "error_kind"}
    plots: list
    out_of_scope: dict = field(default_factory=lambda: {"criterion": 10, "reason": OUT_OF_SCOPE})

    @property
    def failed_studies(self):
        return [s for s, v in self.studies.items() if v["error"]]

    @property
    def failures(self):
        return [e for e in self.entries if not e.passed]

    def exit_code(self) -> int:
        """0 success, 2 numerical failure, 3 partial (some studies raised)."""
        failed = self.failed_studies
        if failed and len(failed) < len(self.studies):
            return 3
        if failed or self.failures:
            return 2
        return 0

    def to_dict(self) -> dict:
        return aio._plain({
            "scenario": self.scenario, "config_hash": self.config_hash, "version": self.version,
            "plan": self.plan, "studies": self.studies,
            "entries": [asdict(e) for e in self.entries],
            "plots": [asdict(p) for p in self.plots],
            "out_of_scope": self.out_of_scope,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        entries = [Entry(**{**e, "ci95": tuple(e["ci95"]) if e["ci95"] else None}) for e in d["entries"]]
        plots = [Plot(**p) for p in d["plots"]]
        return cls(d["scenario"], d["config_hash"], d["version"], d["plan"], entries, d["studies"], plots,
                   d["out_of_scope"])

    def lines(self):
        out = [f"scenario {self.scenario}  config {self.config_hash}  version {self.version}"]
        for s, v in self.studies.items():
            if v["error"]:
                out.append(f"[ERROR] {s}: {v['error']}")
        out.append(f"[OUT-OF-SCOPE]  C{self.out_of_scope['criterion']} {self.out_of_scope['reason']}")
        for e in self.entries:
            crit = f"C{e.criterion}" if e.criterion else "--"
            val = "n/a" if e.value is None else f"{e.value:.6g}"
            out.append(f"[{e.status.upper()}] {crit:>4} {e.study}/{e.name}: {val} (tol {e.tolerance})")
        return out


# ------------------------------------------------------------------ shared NS runs

_memo: dict = {}
_memo_lock = threading.Lock()


def _memoized(key, fn):
    """Compute fn() once per key, also across threads."""
    with _memo_lock:
        slot = _memo.setdefault(key, [threading.Lock(), None, False])
    with slot[0]:
        if not slot[2]:
            slot[1], slot[2] = fn(), True
        return slot[1]


def _pair_config(plan):
    from .vortex_ode import VortexConfig
    v = plan.vortex["pair"]
    return VortexConfig(v["positions"], v["circulations"])


def _two_vortex_run(plan, ke):
    """L1 Lamb-Oseen error and far-field Oseen-superposition error of the NS pair run at kappa eta0 = ke."""
    from .biot_savart import grid_coords
    from .ns_spectral import (Grid, advance, init_gaussian_vortices, l1_lamb_oseen_error,
                              oseen_superposition_velocity)
    from .vortex_ode import ViscousParams, integrate_hk
    cfg = _pair_config(plan)
    n, L, T = int(plan.grids["ns"]), float(plan.grids["ns_box"]), float(plan.horizons["ns"])
    eta0 = float(plan.vortex["eta0"])
    key = ("pair", cfg.positions.tobytes(), cfg.circulations.tobytes(), ke, n, L, T)

    def work():
        ref = integrate_hk(cfg, T, 1e-12, n_out=2001, L=L)
        s = advance(init_gaussian_vortices(cfg, ViscousParams(ke / eta0, eta0), Grid(n, L),
                                           track_parts=False), T, cfl=0.5)
        l1 = l1_lamb_oseen_error(s, ref)
        # far field: annulus around vortex 1 on the side facing away from vortex 2
        z = ref.at(T)
        sc = np.sqrt(ke * (T + 1.0))
        X, Y = grid_coords(n, L)
        d1 = np.hypot(X - z[0, 0], Y - z[0, 1])
        e = z[1] - z[0]
        away = (X - z[0, 0]) * e[0] + (Y - z[0, 1]) * e[1] < -0.5 * d1 * np.linalg.norm(e)
        m = (d1 >= 2.5 * sc) & (d1 <= 3.5 * sc) & away
        pts = np.stack([X[m], Y[m]], axis=-1)
        u = s.velocity()
        uo = oseen_superposition_velocity(pts, z, cfg.circulations, 4.0 * ke * (T + 1.0), L)
        far = float(np.hypot(u[0][m] - uo[:, 0], u[1][m] - uo[:, 1]).max())
        return l1, far
    return _memoized(key, work)


# ------------------------------------------------------------------ studies

def study_hk(plan, res: StudyResult):
    from .vortex_ode import (VortexConfig, center_of_vorticity, corotation_period, hamiltonian,
                             integrate_hk)
    tol = plan.tolerances
    v = plan.vortex["triple"]
    cfg = VortexConfig(v["positions"], v["circulations"])
    tr = integrate_hk(cfg, plan.horizons["hk"], 1e-13, n_out=1001)
    a = cfg.circulations
    H = np.array([hamiltonian(z, a) for z in tr.positions])
    C = np.array([center_of_vorticity(z, a) for z in tr.positions])
    dH = float(np.abs(H - H[0]).max() / abs(H[0]))
    dC = float(np.linalg.norm(C - C[0], axis=-1).max() / max(np.linalg.norm(C[0]), np.abs(a).sum()))
    res.check("hamiltonian drift (relative)", 1, dH, "<=", tol["hk_invariants"])
    res.check("center of vorticity drift (relative)", 1, dC, "<=", tol["hk_invariants"])
    period = corotation_period(VortexConfig([[-0.5, 0.0], [0.5, 0.0]], [2 * np.pi, 2 * np.pi]), 1e-13)
    res.check("co-rotating pair period error", 1, abs(period - np.pi) / np.pi, "<=", tol["hk_period"],
              period=period)
    res.tables["hk_trajectories"] = tr
    res.plots.append(Plot("hk_hamiltonian", "Hamiltonian drift", "t", "|H - H0| / |H0|",
                          [("triple", tr.times.tolist(), (np.abs(H - H[0]) / abs(H[0]) + 1e-300).tolist())],
                          logy=True))


def study_drift(plan, res: StudyResult):
    from .vortex_ode import drift_study
    ks = plan.kappa_list["viscous-drift"]
    tab = drift_study(_pair_config(plan), ks, plan.horizons["drift_tau"], eta0=plan.vortex["eta0"])
    ok = tab.valid & (tab.drift > 0)
    inv = 1.0 / tab.kappa[ok]
    res.tables["drift"] = (["kappa", "inv_kappa", "drift", "valid"],
                           [[float(k), 1.0 / float(k), float(d), int(v)]
                            for k, d, v in zip(tab.kappa, tab.drift, tab.valid)])
    t = plan.tolerances
    res.slope("semilog slope of drift vs 1/kappa", 2, inv, tab.drift[ok], "semilog-x", "in",
              (t["drift_slope_min"], t["drift_slope_max"]))
    order = np.argsort(inv)
    d = tab.drift[ok][order]
    mono = bool(len(d) >= 2 and np.all(np.diff(d) < 0))
    res.entries.append(Entry(res.study, "drift strictly decreasing in 1/kappa", 2, float(mono),
                             "== 1", "pass" if mono else "fail", int(len(d))))
    res.plots.append(Plot("drift", "Viscous drift", "1/kappa", "max drift",
                          [("drift", inv.tolist(), tab.drift[ok].tolist())], logy=True))


def study_ns_l1(plan, res: StudyResult):
    from .ns_spectral import Grid, init_gaussian_vortices, lamb_oseen_field, step
    from .vortex_ode import VortexConfig, ViscousParams
    ks = plan.kappa_list["ns-l1"]
    tol = plan.tolerances
    eta0 = float(plan.vortex["eta0"])
    if len(ks) < MIN_POINTS:
        res.slope("log-log slope of L1 error vs kappa", 3, ks, [1.0] * len(ks), "log-log", ">=",
                  tol["ns_slope_min"])
    else:
        errs = [_two_vortex_run(plan, float(k))[0] for k in ks]
        res.tables["ns_l1"] = (["kappa_eta0", "l1_error"], [[float(k), e] for k, e in zip(ks, errs)])
        res.slope("log-log slope of L1 error vs kappa", 3, ks, errs, "log-log", ">=", tol["ns_slope_min"])
        res.plots.append(Plot("ns_l1", "L1 Lamb-Oseen error", "kappa eta0", "L1 error",
                              [("two vortices", list(ks), errs)], logx=True, logy=True))
    # single vortex against the widened Gaussian
    ke = float(ks[0])
    p = ViscousParams(ke / eta0, eta0)
    g = Grid(int(plan.grids["ns"]), plan.grids["oseen_box"] * np.sqrt(4 * ke))
    s = init_gaussian_vortices(VortexConfig([[0.0, 0.0]], [1.0]), p, g, track_parts=False)
    dt = float(plan.horizons["oseen_dt"])
    s = step(s, dt)
    for _ in range(int(plan.horizons["oseen_steps"]) - 1):
        s = step(s, dt, check=False)
    ref = lamb_oseen_field(g, [[0.0, 0.0]], [1.0], 4 * ke * (s.t + 1))
    w = s.field(0)
    res.check("single Oseen L1 deviation (relative)", 4, np.abs(w - ref).sum() / np.abs(ref).sum(),
              "<=", tol["oseen_exact"], steps=int(plan.horizons["oseen_steps"]), kappa_eta0=ke)
    res.check("single Oseen Linf deviation (relative)", 4, np.abs(w - ref).max() / ref.max(),
              "<=", tol["oseen_exact"], steps=int(plan.horizons["oseen_steps"]), kappa_eta0=ke)


def study_pointwise(plan, res: StudyResult):
    from .ns_spectral import single_vortex_far_field
    from .vortex_ode import ViscousParams
    ks = plan.kappa_list["pointwise"]
    tol = plan.tolerances
    eta0 = float(plan.vortex["eta0"])
    ke = float(ks[0])
    sh = single_vortex_far_field(ViscousParams(ke / eta0, eta0), T=plan.horizons["pointwise"])
    res.check("single-vortex error shape (relative, box-extrapolated)", 5, sh.max_rel, "<=",
              tol["shape_rel"], largest_box_alone=sh.raw_rel, kappa_eta0=ke)
    order = np.argsort(sh.distances)
    sc = np.sqrt(ke * sh.t)
    res.tables["pointwise_shape"] = (["d_over_scale", "measured", "predicted"],
                                     [[float(sh.distances[i] / sc), float(sh.measured[i]),
                                       float(sh.predicted[i])] for i in order])
    res.plots.append(Plot("pointwise_shape", "Single-vortex velocity error", "d / sqrt(kappa eta0 t)",
                          "|u - alpha K|",
                          [("measured", (sh.distances[order] / sc).tolist(), sh.measured[order].tolist()),
                           ("predicted", (sh.distances[order] / sc).tolist(), sh.predicted[order].tolist())],
                          logy=True))
    c, w = tol["farfield_slope"], tol["farfield_slope_tol"]
    if len(ks) < MIN_POINTS:
        res.slope("far-field error slope vs kappa", 5, ks, [1.0] * len(ks), "log-log", "in", (c - w, c + w))
        return
    far = [_two_vortex_run(plan, float(k))[1] for k in ks]
    res.tables["pointwise_farfield"] = (["kappa_eta0", "farfield_error"],
                                        [[float(k), f] for k, f in zip(ks, far)])
    res.slope("far-field error slope vs kappa", 5, ks, far, "log-log", "in", (c - w, c + w))
    res.plots.append(Plot("pointwise_farfield", "Two-vortex far-field error", "kappa eta0", "max error",
                          [("pair", list(ks), far)], logx=True, logy=True))


def random_polar_fields(grid, count: int, seed: int, degree: int = 5):
    """Polynomial times Gaussian test fields, resolved on the default polar grid."""
    from .self_similar import PolarField
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        c = rng.normal(size=(degree + 1, degree + 1))
        width = rng.uniform(2.0, 3.0)

        def f(X, Y, c=c, width=width):
            acc = 0.0
            for a in range(degree + 1):
                for b in range(degree + 1 - a):
                    acc = acc + c[a, b] * X**a * Y**b
            return acc * np.exp(-(X**2 + Y**2) / width)
        out.append(PolarField.from_function(grid, f))
    return out


def study_selfsim(plan, res: StudyResult):
    from .self_similar import (PolarField, PolarGrid, build_corrector, op_L_apply, op_Lambda_apply,
                               approximate_residual, solve_omega_profile, weighted_dirichlet, weighted_inner)
    from .vortex_ode import VortexConfig, ViscousParams, integrate_viscous, viscous_rhs
    tol = plan.tolerances
    g = PolarGrid()
    lam, dirich = 0.0, 0.0
    for w in random_polar_fields(g, 20, res.seed):
        nw = weighted_inner(w, w)
        lam = max(lam, abs(weighted_inner(op_Lambda_apply(w), w)) / nw)
        dirich = max(dirich, abs(weighted_inner(op_L_apply(w), w) - (nw - weighted_dirichlet(w))) / nw)
    res.check("<Lambda w, w> / |w|^2 over 20 fields", 6, lam, "<=", tol["selfsim_identity"])
    res.check("Dirichlet identity over 20 fields", 6, dirich, "<=", tol["selfsim_identity"])
    G = PolarField.from_function(g, lambda X, Y: np.exp(-(X**2 + Y**2) / 4) / (4 * np.pi))
    res.check("|L G|", 6, np.abs(op_L_apply(G).coeffs).max(), "<=", tol["selfsim_grid"])
    res.check("|Lambda G|", 6, np.abs(op_Lambda_apply(G).coeffs).max(), "<=", tol["selfsim_grid"])
    for n in (2, 3):
        res.check(f"corrector ODE residual n={n}", 6, solve_omega_profile(n).residual, "<=",
                  tol["corrector_ode"])
    ks = plan.kappa_list["selfsim"]
    cfg = _pair_config(plan)
    tau = float(np.log(1.0 + plan.horizons["ns"]))
    sups = []
    for ke in ks:
        b = build_corrector(ke, grid=g)
        p = ViscousParams(ke, 1.0)
        tr = integrate_viscous(cfg, tau, p)
        y = tr.positions[-1]
        v = viscous_rhs(VortexConfig(y, cfg.circulations), tau, p)
        sups.append(approximate_residual(b, y, v, cfg.circulations, 0, tau, ke).sup_weighted)
    res.tables["selfsim_residual"] = (["kappa_eta0", "sup_residual"], [[float(k), s] for k, s in zip(ks, sups)])
    res.slope("log-log slope of approximate-solution residual vs kappa", 6, ks, sups, "log-log", ">=",
              tol["approx_slope_min"])
    res.plots.append(Plot("selfsim_residual", "Approximate-solution residual", "kappa eta0", "weighted sup",
                          [("vortex 1", list(ks), sups)], logx=True, logy=True))


def study_burnett(plan, res: StudyResult):
    from . import collision as col
    tol = plan.tolerances
    kc = col.calibrate_kernel()
    res.check("kernel self-calibration |L phi| on invariants", 7, kc.residual, "<=",
              tol["kernel_calibration"])
    fine = col.grid_operator(8.0, int(plan.grids["velocity"]))
    coarse = col.grid_operator(8.0, int(plan.grids["velocity_coarse"]))
    cr = col.coercivity(fine, 100, res.seed)
    res.check("coercivity constant c0 over 100 fields", 7, cr.c0, ">", 0.0, seed=res.seed)
    tf = col.transport_coefficients("grid", fine)
    tc = col.transport_coefficients("grid", coarse)
    tr = col.transport_coefficients("radial")
    res.check("A-tensor ratio 1111/1212 against 4/3", 7, abs(tf.ratio_1111_1212 / (4 / 3) - 1), "<=",
              tol["ratio_tol"], ratio=tf.ratio_1111_1212)
    for name, a, b in (("eta0", tf.eta0, tc.eta0), ("eta_c", tf.eta_c, tc.eta_c)):
        res.check(f"{name} refinement change (coarse to fine grid)", 7, abs(a - b) / abs(a), "<=",
                  tol["refinement"], fine=a, coarse=b)
    res.check("eta0 grid vs isotropic reduction", 7, abs(tf.eta0 - tr.eta0) / tr.eta0, "<=",
              tol["refinement"], radial=tr.eta0)
    res.check("eta_c grid vs isotropic reduction", 7, abs(tf.eta_c - tr.eta_c) / tr.eta_c, "<=",
              tol["refinement"], radial=tr.eta_c)
    b = np.random.default_rng(res.seed).standard_normal(3)
    res.check("Gamma(f,f) identity for f = (b.v) sqrt mu", 7, col.gamma_fg_identity(b, seed=res.seed),
              "<=", tol["gamma_fg"])
    for rho0 in (0.0, 1 / 32, 1 / 16):
        kb = col.kernel_bound_check(rho0, seed=res.seed)
        res.check(f"weighted kernel sup under quadrature doubling (rho0={rho0:g})", 7,
                  abs(kb.sup_refined - kb.sup) / kb.sup, "<=", tol["kernel_sup"], sup=kb.sup)
    res.tables["burnett"] = (["quantity", "coarse", "fine", "radial"],
                             [["eta0", tc.eta0, tf.eta0, tr.eta0], ["eta_c", tc.eta_c, tf.eta_c, tr.eta_c]])
    mr = col.moment_identities_check(seed=res.seed, op=coarse, tol=tol["moments"])
    for name, val in mr.items.items():
        res.check(name, 8, val, "<=", tol["moments"])


def study_hilbert(plan, res: StudyResult):
    from . import hilbert as hb
    tol = plan.tolerances
    tab = hb.default_tables()
    cfg = hb.HierarchyConfig(n=int(plan.grids["hilbert"]), T=float(plan.horizons["hilbert"]),
                             beta=float(plan.beta), p=float(plan.p))
    rep = hb.hierarchy_residual_check(cfg, levels=int(plan.grids["hilbert_levels"]), tables=tab)
    rows = []
    for lv in rep.levels:
        rows.append([lv.n, lv.dt] + [lv.values[k] for k in hb.RESIDUAL_NAMES] + [lv.div_b2, lv.div_b3_plus_a2t])
    res.tables["hilbert_residuals"] = (["n", "dt"] + list(hb.RESIDUAL_NAMES) + ["div_b2", "div_b3_plus_a2t"], rows)
    for k in hb.RESIDUAL_NAMES:
        vals = [lv.values[k] for lv in rep.levels]
        e = Entry(res.study, f"residual {k} under doubling", 9, vals[-1],
                  "ratio >= 2 per doubling or at floor", "pass" if rep.passed[k] else "fail",
                  len(vals), details={"values": vals, "ratios": rep.ratios[k]})
        res.entries.append(e)
    fin = rep.levels[-1]
    res.check("|div b2| (finest level)", 9, fin.div_b2, "<=", tol["div_b"])
    res.check("|div b3 + d_t a2| (finest level)", 9, fin.div_b3_plus_a2t, "<=", tol["div_b"])
    res.plots.append(Plot("hilbert_residuals", "Hierarchy residuals", "n", "max residual",
                          [(k, [lv.n for lv in rep.levels], [max(lv.values[k], 1e-300) for lv in rep.levels])
                           for k in hb.RESIDUAL_NAMES], logx=True, logy=True))
    run = hb.run_hierarchy(cfg, tab)
    bundle = hb.assemble(run)
    sc = hb.remainder_forcing_scaling(bundle, plan.eps_list, seed=res.seed)
    res.tables["hilbert_scaling"] = (["eps", "g1", "g3"], [[float(e), a, b] for e, a, b in zip(sc.eps, sc.g1, sc.g3)])
    res.slope("g3 slope vs eps", 9, sc.eps, sc.g3, "log-log", "in",
              (2 - plan.beta - tol["g3_slope_tol"], 2 - plan.beta + tol["g3_slope_tol"]))
    res.slope("g1 slope vs eps", 9, sc.eps, sc.g1, "log-log", ">=", 1 - plan.beta - tol["g1_slope_margin"])
    res.plots.append(Plot("hilbert_scaling", "Remainder forcing", "eps", "weighted sup",
                          [("g1", sc.eps.tolist(), sc.g1.tolist()), ("g3", sc.eps.tolist(), sc.g3.tolist())],
                          logx=True, logy=True))
    f2 = hb.f2_micro_check(bundle.macro.u, cfg.kappa, bundle.spec, tab, seed=res.seed)
    res.check("microscopic f2 against L^-1 formula (relative)", 9, f2.relative, "<=", tol["f2_micro"])
    res.tables["hilbert_manifest"] = bundle.manifest()


STUDY_FUNCS = {
    "hk": study_hk, "viscous-drift": study_drift, "ns-l1": study_ns_l1, "pointwise": study_pointwise,
    "selfsim": study_selfsim, "burnett": study_burnett, "hilbert-residual": study_hilbert,
}


def study_seed(plan: ExperimentPlan, study: str) -> int:
    return plan.seed + STUDIES.index(study)


def _numerical_errors():
    from . import collision, hilbert, ns_spectral, self_similar
    return (FloatingPointError, ArithmeticError, FitDataError, np.linalg.LinAlgError,
            collision.NumericalError, hilbert.NumericalError, ns_spectral.DivergenceError,
            ns_spectral.CFLError, self_similar.NumericalFailure, self_similar.IterationDivergence)


def run_study(plan: ExperimentPlan, study: str) -> StudyResult:
    res = StudyResult(study, study_seed(plan, study))
    t0 = time.perf_counter()
    try:
        STUDY_FUNCS[study](plan, res)
    except Exception as e:  # recorded per entry; the report is still emitted
        res.error = f"{type(e).__name__}: {e}"
        res.error_kind = "numerical" if isinstance(e, _numerical_errors()) else "other"
        res.entries.append(Entry(study, "study error", None, None, "no exception", "error",
                                 details={"error": res.error}))
    res.seconds = time.perf_counter() - t0
    return res


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def run_plan(plan: ExperimentPlan, out_dir=None, threads: int = 1, write: bool = True) -> RunReport:
    plan.validate()
    if threads < 1:
        raise PlanError("threads must be >= 1")
    if threads == 1 or len(plan.studies) <= 1:
        results = [run_study(plan, s) for s in plan.studies]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: run_study(plan, s), plan.studies))
    entries, plots, studies = [], [], {}
    for r in results:          # deterministic merge: plan order
        entries.extend(r.entries)
        plots.extend(r.plots)
        studies[r.study] = {"seed": r.seed, "error": r.error, "error_kind": r.error_kind}
    report = RunReport(plan.scenario, plan.config_hash, code_version(), plan.to_dict(), entries,
                       studies, plots)
    if write:
        write_outputs(report, results, Path(out_dir or plan.output_dir))
    return report


# ------------------------------------------------------------------ persistence

ENTRY_COLUMNS = ["study", "name", "criterion", "status", "value", "tolerance", "points"]


def write_outputs(report: RunReport, results, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    aio.write_json(out / "plan.json", report.plan)
    aio.write_json(out / "report.json", report.to_dict())
    aio.write_csv(out / "entries.csv", ENTRY_COLUMNS,
                  [[e.study, e.name, e.criterion if e.criterion else "", e.status,
                    "" if e.value is None else float(e.value), e.tolerance,
                    "" if e.points is None else e.points] for e in report.entries])
    for r in results:
        for stem, table in r.tables.items():
            if stem == "hk_trajectories":
                aio.write_trajectories(out / f"{stem}.csv", table)
            elif isinstance(table, dict):
                aio.write_json(out / f"{stem}.json", table)
            else:
                aio.write_csv(out / f"{stem}.csv", *table)
    # wall-clock times live apart so the other files stay reproducible
    aio.write_json(out / "timing.json", {r.study: r.seconds for r in results})
    render_plots(report, out)
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n")


def render_plots(report: RunReport, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    with matplotlib.rc_context({"svg.hashsalt": "artifact", "svg.fonttype": "none"}):
        for p in report.plots:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for label, xs, ys in p.series:
                ax.plot(xs, ys, "o-" if len(xs) < 50 else "-", ms=3, label=label)
            ax.set_xscale("log" if p.logx else "linear")
            ax.set_yscale("log" if p.logy else "linear")
            ax.set_title(p.title)
            ax.set_xlabel(p.xlabel)
            ax.set_ylabel(p.ylabel)
            if len(p.series) > 1:
                ax.legend()
            fig.tight_layout()
            fig.savefig(out / f"{p.name}.svg", metadata={"Date": None})
            plt.close(fig)


def load_report(out_dir) -> RunReport:
    path = Path(out_dir) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report.json in {out_dir}")
    return RunReport.from_dict(aio.read_json(path))


def rerender(out_dir) -> RunReport:
    out = Path(out_dir)
    report = load_report(out)
    render_plots(report, out)
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
    return report
