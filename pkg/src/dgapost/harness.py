"""Benchmark drivers: exact and reference solutions, errors, EOC tables, studies."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.special import jv

from .basis import BrokenPolyField, Mesh1D, gauss_legendre, project
from .dg import Solver, TimeRule, time_levels, total_mass
from .estimator import EstimatorObserver, estimator_constants
from .models import DomainError, get_model, numerical_flux

# --- Burgers exact solution --------------------------------------------------------


def burgers_coefficients(t: float, tolerance: float = 1e-12, cap: int = 200) -> np.ndarray:
    """a_k(t) = 2 J_k(kt)/(kt), k = 1..K, with u = -sum a_k sin(kx).

    Stops after the first term below ``tolerance``; warns when ``cap`` is hit.
    """
    if t >= 1.0:
        raise ValueError(f"t = {t} is at or past shock formation (t = 1)")
    if t < 0:
        raise ValueError("time must be non-negative")
    if t == 0.0:
        return np.array([1.0])
    k = np.arange(1, cap + 1)
    a = 2.0 * jv(k, k * t) / (k * t)
    small = np.nonzero(np.abs(a) < tolerance)[0]
    if small.size == 0:
        warnings.warn(f"Bessel series truncated at the cap K = {cap} (last term {abs(a[-1]):.2e})", stacklevel=2)
        return a
    return a[: small[0] + 1]


def burgers_exact(x, t: float, tolerance: float = 1e-12, cap: int = 200) -> np.ndarray:
    """Entropy solution of Burgers with u(x, 0) = -sin(x) on the circle, t < 1."""
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return -np.sin(x)
    a = burgers_coefficients(t, tolerance, cap)
    k = np.arange(1, a.size + 1)
    return -(np.sin(np.multiply.outer(x, k)) @ a)


def burgers_characteristics(x, t: float, tol: float = 1e-15) -> np.ndarray:
    """Independent oracle: solve u = -sin(x - u t) by bisection.

    g(u) = u + sin(x - u t) is increasing for t < 1 and changes sign on [-1, 1].
    """
    if not 0.0 <= t < 1.0:
        raise ValueError("characteristics stay single-valued only for 0 <= t < 1")
    x = np.asarray(x, dtype=float)
    lo = np.full(x.shape, -1.0)
    hi = np.full(x.shape, 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pos = mid + np.sin(x - mid * t) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.max(hi - lo) < tol:
            break
    return 0.5 * (lo + hi)


class BurgersExact:
    """Exact solution at fixed points, reusing sin(kx) across times."""

    def __init__(self, x, tolerance: float = 1e-12, cap: int = 200):
        self.x = np.asarray(x, dtype=float)
        self.tolerance = tolerance
        self.cap = cap
        self._sin = None

    def __call__(self, t: float) -> np.ndarray:
        if t == 0.0:
            return -np.sin(self.x)
        a = burgers_coefficients(t, self.tolerance, self.cap)
        if self._sin is None or self._sin.shape[-1] < a.size:
            self._sin = np.sin(np.multiply.outer(self.x, np.arange(1, self.cap + 1)))
        return -(self._sin[..., : a.size] @ a)


# --- errors, EOC, effectivity ---------------------------------------------------


def eoc(values, h) -> np.ndarray:
    """log(a(i+1)/a(i)) / log(h(i+1)/h(i)) for consecutive levels."""
    a = np.asarray(values, dtype=float)
    h = np.asarray(h, dtype=float)
    if a.shape != h.shape:
        raise ValueError("values and mesh widths must match")
    if np.any(~(a > 0)):
        raise ValueError("EOC needs positive values")
    if np.any(np.diff(h) >= 0):
        raise ValueError("mesh widths must be strictly decreasing")
    return np.log(a[1:] / a[:-1]) / np.log(h[1:] / h[:-1])


def effectivity(indicator: float, error: float) -> float:
    if not error > 0:
        raise ValueError("effectivity index undefined for zero error")
    return indicator / error


def l2_difference(u_h: BrokenPolyField, exact_values: np.ndarray, quad) -> float:
    """L2 norm of exact - u_h with exact given at quad points, shape (d, N, q) or (N, q)."""
    exact_values = np.asarray(exact_values, dtype=float)
    approx = np.moveaxis(u_h.cell_values(quad.nodes), 1, 0)
    if exact_values.ndim == 2:
        exact_values = exact_values[None]
    diff2 = ((exact_values - approx) ** 2).sum(axis=0)
    return float(np.sqrt(np.sum(diff2 * quad.weights * (0.5 * u_h.mesh.widths)[:, None])))


class ErrorObserver:
    """Tracks the max over observed times of ||u(t) - u_h(t)||_{L2}.

    ``exact(t, points)`` returns values at physical points. For a reference
    solution on a nested finer mesh the norm is integrated cell by cell on
    that finer mesh, so neither field is evaluated across its own nodes.
    """

    def __init__(self, exact, mesh: Mesh1D, p: int, extra: int = 4):
        self.exact = exact
        self.quad = gauss_legendre(p + extra)
        self.fine = exact.mesh if isinstance(exact, ReferenceSolution) else None
        self.points = (self.fine or mesh).physical_points(self.quad.nodes)
        self.errors: list[tuple[float, float]] = []

    def __call__(self, state) -> None:
        vals = self.exact(state.t, self.points)
        if self.fine is None:
            e = l2_difference(state.u_h, vals, self.quad)
        else:
            approx = state.u_h(self.points.ravel()).T.reshape(vals.shape)
            diff2 = ((vals - approx) ** 2).sum(axis=0)
            e = float(np.sqrt(np.sum(diff2 * self.quad.weights * (0.5 * self.fine.widths)[:, None])))
        self.errors.append((state.t, e))

    @property
    def max_error(self) -> float:
        return max(e for _, e in self.errors)


def error_linf_l2(errors) -> float:
    """max over sampled times of the L2 error; accepts an ErrorObserver or (t, e) pairs."""
    if isinstance(errors, ErrorObserver):
        errors = errors.errors
    return max(e for _, e in errors)


# --- initial data and exact evaluators -------------------------------------------


def minus_sin(x):
    return -np.sin(x)


def psystem_pulse(x):
    x = np.asarray(x, dtype=float)
    return np.stack([np.exp(-10.0 * x**2), np.zeros_like(x)])


def sine_bump(x):
    return 0.5 + 0.25 * np.sin(x)


INITIAL_DATA = {"minus_sin": minus_sin, "psystem_pulse": psystem_pulse, "sine_bump": sine_bump}


class BesselEvaluator:
    """Exact Burgers values at the error observer's points, cached per point set."""

    def __init__(self, tolerance: float = 1e-12, cap: int = 200):
        self.tolerance = tolerance
        self.cap = cap
        self._cache: dict = {}

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        key = id(points)
        if key not in self._cache:
            self._cache[key] = (points, BurgersExact(points, self.tolerance, self.cap))
        return self._cache[key][1](t)


@dataclass
class ReferenceSolution:
    """Fine-grid snapshots keyed by rounded time."""

    mesh: Mesh1D
    p: int
    snapshots: dict  # round(t, 12) -> coeffs

    def field_at(self, t: float) -> BrokenPolyField:
        key = round(t, 12)
        if key not in self.snapshots:
            raise KeyError(f"no reference snapshot at t = {t}")
        return BrokenPolyField(self.mesh, self.snapshots[key])

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        f = self.field_at(t)
        vals = f(points.ravel())  # (n, d)
        return vals.T.reshape((f.components,) + points.shape)


def sample_times(config: "StudyConfig", N: int) -> list[float]:
    mesh = config.mesh(N)
    return [0.0] + time_levels(config.T, config.time_rule().step(mesh))


def march_through(solver: Solver, u_h: BrokenPolyField, targets, observers=()):
    """RK4 from t = 0 through every target time, stepping exactly onto each."""
    state = solver.state(0.0, u_h)
    for obs in observers:
        obs(state)
    t = 0.0
    for t_next in targets:
        if t_next <= t:
            continue
        state = solver.rk4_step(state, t_next - t)
        t = t_next
        state = type(state)(t_next, state.u_h, state.udot_h)
        for obs in observers:
            obs(state)
    return state


def psystem_reference(config: "StudyConfig", levels=None) -> ReferenceSolution:
    """High-resolution run with snapshots at every level's sample times.

    The reference takes its own uniform steps plus extra stops at the
    sample times, so coarse levels are compared at exactly their own times.
    """
    if config.ref_mult < 4:
        raise ValueError("reference multiplier must be at least 4")
    levels = config.level_cells() if levels is None else levels
    n_ref = config.ref_mult * max(levels)
    mesh = config.mesh(n_ref)
    model = config.model()
    flux = numerical_flux(model, config.flux)
    solver = Solver(model, flux)
    wanted = sorted({round(t, 12) for N in levels for t in sample_times(config, N)})
    own = time_levels(config.T, config.time_rule().step(mesh))
    targets = sorted(set(wanted) | {round(t, 12) for t in own})
    u_h = project(config.initial(), config.p, mesh)
    snapshots: dict = {}
    box = model.domain_box

    def keep(state):
        key = round(state.t, 12)
        if key in wanted:
            snapshots[key] = state.u_h.coeffs.copy()

    def check(state):
        vals = state.u_h.cell_values(np.array([-1.0, 0.0, 1.0]))
        if np.any(vals < box[None, :, :1]) or np.any(vals > box[None, :, 1:]):
            raise DomainError(f"reference run left the admissible box at t={state.t:.6g}")

    march_through(solver, u_h, targets, [keep, check] if config.abort_on_escape else [keep])
    return ReferenceSolution(mesh, config.p, snapshots)


# --- study configuration -----------------------------------------------------------


DEFAULTS = {
    "burgers": {"flux": "engquist_osher", "interval": (-math.pi, math.pi), "initial": "minus_sin", "T": 0.5},
    "p_system": {"flux": "roe", "interval": (-5.0, 5.0), "initial": "psystem_pulse", "T": 0.25},
    "advection": {"flux": "upwind", "interval": (-math.pi, math.pi), "initial": "sine_bump", "T": 0.5},
}


@dataclass
class StudyConfig:
    model_name: str = "burgers"
    flux: str | None = None
    p: int = 1
    levels: tuple = (3, 6)  # i = l..L, N(i) = n0 * 2^i
    n0: int = 1
    c: float | None = None
    k: float | None = None
    T: float | None = None
    interval: tuple | None = None
    box: list | None = None
    initial_data: str | None = None
    exact: str = "auto"  # auto | bessel | reference
    series_tol: float = 1e-12
    series_cap: int = 200
    ref_mult: int = 4
    sample_factor: int = 4
    check_every: int = 50
    use_sup_bound: bool = False
    abort_on_escape: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if self.model_name not in DEFAULTS:
            raise ValueError(f"unknown model {self.model_name!r}")
        d = DEFAULTS[self.model_name]
        self.flux = self.flux or d["flux"]
        self.interval = tuple(float(v) for v in (self.interval or d["interval"]))
        self.initial_data = self.initial_data or d["initial"]
        self.T = d["T"] if self.T is None else float(self.T)
        rule = TimeRule.default(self.p)
        self.c = rule.c if self.c is None else float(self.c)
        self.k = rule.k if self.k is None else float(self.k)
        self.levels = tuple(int(v) for v in self.levels)
        if self.p < 0:
            raise ValueError("degree must be non-negative")
        if len(self.levels) != 2 or self.levels[0] > self.levels[1] or self.levels[0] < 0:
            raise ValueError(f"levels must be l:L with 0 <= l <= L, got {self.levels}")
        if self.T < 0:
            raise ValueError("final time must be non-negative")
        if self.initial_data not in INITIAL_DATA:
            raise ValueError(f"unknown initial data {self.initial_data!r}")
        if self.exact not in ("auto", "bessel", "reference"):
            raise ValueError(f"unknown exact-solution mode {self.exact!r}")
        if self.box is not None:
            self.box = [[float(a), float(b)] for a, b in np.asarray(self.box, dtype=float).reshape(-1, 2)]
        # fail early on bad model/flux combinations
        numerical_flux(self.model(), self.flux)
        TimeRule(self.c, self.k)

    # constructors
    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        aliases = {"model": "model_name", "degree": "p", "tfinal": "T", "domain_box": "box", "out": "out_dir"}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = aliases.get(key, key)
            if key not in known:
                raise ValueError(f"unknown configuration key {key!r}")
            kwargs[key] = value
        if isinstance(kwargs.get("levels"), str):
            kwargs["levels"] = parse_levels(kwargs["levels"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path} does not hold a key-value mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["interval"] = list(self.interval)
        return d

    # derived objects
    def model(self):
        return get_model(self.model_name, self.box)

    def time_rule(self) -> TimeRule:
        return TimeRule(self.c, self.k)

    def mesh(self, N: int) -> Mesh1D:
        return Mesh1D.uniform(N, *self.interval)

    def initial(self):
        return INITIAL_DATA[self.initial_data]

    def level_cells(self) -> list[int]:
        lo, hi = self.levels
        return [self.n0 * 2**i for i in range(lo, hi + 1)]

    def exact_mode(self) -> str:
        if self.exact != "auto":
            return self.exact
        if self.model_name == "burgers" and self.initial_data == "minus_sin" and self.T < 1.0:
            return "bessel"
        return "reference"

    def advisories(self) -> list[str]:
        notes = []
        if self.model_name == "burgers" and self.initial_data == "minus_sin" and self.T >= 1.0:
            notes.append("final time is past shock formation at t = 1; no convergence is expected")
        if self.levels[1] - self.levels[0] < 1:
            notes.append("a single level gives no EOC")
        return notes


def parse_levels(text: str) -> tuple:
    try:
        lo, hi = (int(v) for v in str(text).split(":"))
    except ValueError as exc:
        raise ValueError(f"levels must look like l:L, got {text!r}") from exc
    return lo, hi


# --- running a study ---------------------------------------------------------------


@dataclass
class LevelResult:
    N: int
    h: float
    error: float
    max_indicator: float  # max over t of the squared-scale indicator
    series: list
    mass_drift: float
    reconstruction_violation: dict
    steps: int
    left_domain: bool
    failure: str | None = None

    @property
    def indicator(self) -> float:
        """Indicator on the error scale: sqrt(max_t indicator)."""
        return math.sqrt(self.max_indicator)


def run_level(config: StudyConfig, N: int, reference: ReferenceSolution | None = None) -> LevelResult:
    model = config.model()
    flux = numerical_flux(model, config.flux)
    mesh = config.mesh(N)
    consts = estimator_constants(model, flux, config.p, config.box)
    u0 = config.initial()
    est = EstimatorObserver(
        model,
        flux,
        consts,
        u0,
        box=config.box,
        use_sup_bound=config.use_sup_bound,
        check_every=config.check_every,
        abort_on_escape=config.abort_on_escape,
    )
    if reference is not None:
        exact = reference
    else:
        exact = BesselEvaluator(config.series_tol, config.series_cap)
    err = ErrorObserver(exact, mesh, config.p)
    masses = []
    observers = [err, est, lambda s: masses.append(total_mass(s.u_h))]
    solver = Solver(model, flux)
    failure = None
    targets = time_levels(config.T, config.time_rule().step(mesh))
    try:
        march_through(solver, project(u0, config.p, mesh), targets, observers)
    except DomainError as exc:
        failure = f"domain: {exc}"
    except (FloatingPointError, RuntimeError) as exc:
        failure = f"numerical: {exc}"
    masses = np.array(masses) if masses else np.zeros((1, model.d))
    drift = float(np.max(np.abs(masses - masses[0])))
    violation: dict = {}
    for rep in est.reconstruction_reports:
        for key, v in rep.items():
            if key != "t" and v is not None:
                violation[key] = max(violation.get(key, 0.0), v)
    return LevelResult(
        N=N,
        h=mesh.h,
        error=err.max_error if err.errors else math.nan,
        max_indicator=est.max_indicator,
        series=est.series,
        mass_drift=drift,
        reconstruction_violation=violation,
        steps=len(targets),
        left_domain=est.left_domain,
        failure=failure,
    )


@dataclass
class StudyReport:
    config: StudyConfig
    levels: list
    constants: dict
    wall_time: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def N(self):
        return [lv.N for lv in self.levels]

    @property
    def h(self):
        return np.array([lv.h for lv in self.levels])

    @property
    def errors(self):
        return np.array([lv.error for lv in self.levels])

    @property
    def indicators(self):
        return np.array([lv.indicator for lv in self.levels])

    @property
    def eoc_error(self):
        return _safe_eoc(self.errors, self.h)

    @property
    def eoc_indicator(self):
        return _safe_eoc(self.indicators, self.h)

    @property
    def ei(self):
        return np.array([lv.indicator / lv.error if lv.error > 0 else math.nan for lv in self.levels])

    def rows(self) -> list[dict]:
        out = []
        ee, ei_ = self.eoc_error, self.eoc_indicator
        for i, lv in enumerate(self.levels):
            out.append(
                {
                    "N": lv.N,
                    "h": lv.h,
                    "error": lv.error,
                    "eoc_error": None if i == 0 else ee[i - 1],
                    "indicator": lv.indicator,
                    "eoc_indicator": None if i == 0 else ei_[i - 1],
                    "ei": self.ei[i],
                }
            )
        return out

    def csv_text(self) -> str:
        return study_csv(self.rows())

    def table(self) -> str:
        lines = [f"{'N':>6} {'error':>11} {'EOC':>6} {'indicator':>11} {'EOC':>6} {'EI':>7}"]
        for r in self.rows():
            lines.append(
                f"{r['N']:>6} {r['error']:>11.4e} {_fmt_eoc(r['eoc_error']):>6} "
                f"{r['indicator']:>11.4e} {_fmt_eoc(r['eoc_indicator']):>6} {r['ei']:>7.3f}"
            )
        return "\n".join(lines)


def _safe_eoc(values, h):
    values = np.asarray(values, dtype=float)
    out = np.full(max(len(values) - 1, 0), math.nan)
    for i in range(len(out)):
        a, b = values[i], values[i + 1]
        if a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b):
            out[i] = eoc([a, b], [h[i], h[i + 1]])[0]
    return out


def _fmt_sci(v) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.4e}"


def _fmt_eoc(v) -> str:
    return "0.000" if v is None or not math.isfinite(v) else f"{v:.3f}"


STUDY_COLUMNS = ("N", "h", "error", "eoc_error", "indicator", "eoc_indicator", "ei")


def study_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STUDY_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r["N"],
                _fmt_sci(r["h"]),
                _fmt_sci(r["error"]),
                _fmt_eoc(r["eoc_error"]),
                _fmt_sci(r["indicator"]),
                _fmt_eoc(r["eoc_indicator"]),
                _fmt_eoc(r["ei"]),
            ]
        )
    return buf.getvalue()


SERIES_COLUMNS = ("t", "E", "Etilde", "gronwall", "gronwall_indicator", "indicator", "bound", "in_domain")


def series_csv(series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_COLUMNS)
    for row in series:
        w.writerow([row["t"] if c == "t" else row[c] if c == "in_domain" else f"{row[c]:.10e}" for c in SERIES_COLUMNS])
    return buf.getvalue()


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("DGAPOST_THREADS", "1")))
    except ValueError:
        return 1


def _run_level_job(args):
    config, N, reference = args
    return run_level(config, N, reference)


def run_study(config: StudyConfig, write: bool = True) -> StudyReport:
    """All levels of a convergence study; writes CSV and metadata if out_dir is set."""
    start = time.perf_counter()
    cells = config.level_cells()
    reference = None
    if config.exact_mode() == "reference":
        reference = psystem_reference(config, cells)
    jobs = [(config, N, reference) for N in cells]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_level_job, jobs))
    else:
        results = [_run_level_job(j) for j in jobs]
    model = config.model()
    consts = estimator_constants(model, numerical_flux(model, config.flux), config.p, config.box).to_dict()
    report = StudyReport(
        config=config,
        levels=results,
        constants=consts,
        wall_time=time.perf_counter() - start,
        failures=[f"N={r.N}: {r.failure}" for r in results if r.failure],
    )
    if write and config.out_dir:
        write_report(report, config.out_dir)
    return report


def write_report(report: StudyReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.csv").write_text(report.csv_text())
    for lv in report.levels:
        (out / f"series_N{lv.N}.csv").write_text(series_csv(lv.series))
    meta = {
        "config": report.config.to_dict(),
        "constants": report.constants,
        "wall_time_s": report.wall_time,
        "failures": report.failures,
        "advisories": report.config.advisories(),
        "levels": [
            {
                "N": lv.N,
                "steps": lv.steps,
                "mass_drift": lv.mass_drift,
                "left_domain": lv.left_domain,
                "reconstruction_violation": lv.reconstruction_violation,
                "failure": lv.failure,
            }
            for lv in report.levels
        ],
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def with_overrides(config: StudyConfig, **kw) -> StudyConfig:
    return replace(config, **kw)
