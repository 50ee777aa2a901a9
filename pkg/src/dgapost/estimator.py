"""Residual bounds, the accumulated error bound and the computable indicator.

Squared quantities throughout: E1, E2, E3, E(t), the theorem bound and the
indicator all estimate ||u - u_h||^2 (or pieces of the squared residual).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import (
    BasisConstants,
    BrokenPolyField,
    QuadratureRule,
    basis_constants,
    binomial,
    default_quadrature,
    gauss_legendre,
    project_cell_values,
    sample_points,
    sup_norms,
)
from .dg import SemidiscreteState, jumps, semidiscrete_rhs
from .models import (
    ConservationLawModel,
    NumericalFlux,
    bound_constants,
    composed_flux_row_sup,
    relative_entropy,
)
from .reconstruct import ReconstructionPair, reconstruct, reconstruct_u, uhat_sup_derivative


@dataclass(frozen=True)
class EstimatorConstants:
    """Everything the bounds need, frozen at run start."""

    p: int
    L: float
    c_f: float
    c_eta_lo: float
    c_eta_hi: float
    c_inv: float  # inverse constant for degree p
    b_k: tuple
    b: float
    c_p: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["b_k"] = [float(v) for v in self.b_k]
        return d


def estimator_constants(
    model: ConservationLawModel, flux: NumericalFlux, p: int, box=None, c_p: float = 1.0
) -> EstimatorConstants:
    bc = bound_constants(model, box)
    basis: BasisConstants = basis_constants(p, c_p)
    return EstimatorConstants(
        p=p,
        L=flux.L,
        c_f=bc.c_f,
        c_eta_lo=bc.c_eta_lo,
        c_eta_hi=bc.c_eta_hi,
        c_inv=basis.c_inv_p,
        b_k=tuple(float(v) for v in basis.b_k),
        b=basis.b,
        c_p=c_p,
    )


def _jump_pairs(field: BrokenPolyField):
    """|[[g]]_n| and |[[g]]_{n+1}| seen from every cell n."""
    j = np.linalg.norm(jumps(field), axis=1)
    return j, np.roll(j, -1)


def e1_term(udot_h: BrokenPolyField, L: float) -> float:
    jl, jr = _jump_pairs(udot_h)
    return float(L**2 * np.sum(udot_h.mesh.widths * (jl**2 + jr**2)))


def e2_cells(model: ConservationLawModel, u_h: BrokenPolyField, consts: EstimatorConstants, factor: int = 4):
    """Per-cell contributions to E2.

    First part: the Df(u_hat) - Df(u_h) defect, 8 C_f^2 L^2 h (j_n^2 + j_{n+1}^2) D1^2
    with D1 = ||d_x u_h|| + L b_1 (|j_n| + |j_{n+1}|)/h bounding ||d_x u_hat||.
    Second part: projection error of Df(u_h) d_x u_hat through Leibniz,
    2 C_p^2 h (sum_k C(p+1,k) h^{p+1}||d^{k+1} u_hat|| ||d^{p+1-k} Df(u_h)||)^2.
    """
    p = u_h.degree
    if p + 2 > model.smoothness_order:
        raise ValueError(f"model {model.name!r} is not smooth enough for degree {p}")
    h = u_h.mesh.widths
    L = consts.L
    jl, jr = _jump_pairs(u_h)
    jsum = jl + jr
    pts = sample_points(p, factor)
    d1 = sup_norms(u_h, 1, factor=factor) + L * consts.b_k[1] * jsum / h
    first = 8.0 * consts.c_f**2 * L**2 * h * (jl**2 + jr**2) * d1**2
    inner = np.zeros_like(h)
    for k in range(p + 1):
        uder = sup_norms(u_h, k + 1, factor=factor) if k + 1 <= p else np.zeros_like(h)
        # h^{p+1} ||d^{k+1} u_hat|| with the reconstruction bound expanded
        uhat_term = h ** (p + 1) * uder + L * 2.0**k * consts.b_k[k + 1] * h ** (p - k) * jsum
        inner += binomial(p + 1, k) * uhat_term * composed_flux_row_sup(model, u_h, p + 1 - k, pts)
    second = 2.0 * consts.c_p**2 * h * inner**2
    return first + second


def e2_term(model: ConservationLawModel, u_h: BrokenPolyField, consts: EstimatorConstants, factor: int = 4) -> float:
    return float(np.sum(e2_cells(model, u_h, consts, factor)))


def e3_term(u_h: BrokenPolyField, consts: EstimatorConstants, factor: int = 4) -> float:
    """2 C_inv^2 L^2 C_f^2 |u_h|^2 sum h (j^2 + j^2) + 16 C_inv^2 L^4 C_f^2 sum (j^4 + j^4)/h.

    |u_h|_{W^1,inf} is the largest cellwise sup of |d_x u_h|.
    """
    h = u_h.mesh.widths
    jl, jr = _jump_pairs(u_h)
    s = float(sup_norms(u_h, 1, factor=factor).max())
    ci2, L, cf2 = consts.c_inv**2, consts.L, consts.c_f**2
    a = 2.0 * ci2 * L**2 * cf2 * s**2 * np.sum(h * (jl**2 + jr**2))
    b = 16.0 * ci2 * L**4 * cf2 * np.sum((jl**4 + jr**4) / h)
    return float(a + b)


def jump_term(u_h: BrokenPolyField, L: float = 1.0) -> float:
    """L^2 sum h_n (|[[u_h]]_n|^2 + |[[u_h]]_{n+1}|^2)."""
    jl, jr = _jump_pairs(u_h)
    return float(L**2 * np.sum(u_h.mesh.widths * (jl**2 + jr**2)))


def indicator_bracket(u_h: BrokenPolyField, udot_h: BrokenPolyField, factor: int = 4) -> float:
    """The time integrand of the constant-free indicator accumulator."""
    h = u_h.mesh.widths
    dl, dr = _jump_pairs(udot_h)
    jl, jr = _jump_pairs(u_h)
    grad = sup_norms(u_h, 1, factor=factor)
    return float(np.sum(h * ((dl**2 + dr**2) + (jl**2 + jr**2) * ((jl + jr) / h + grad))))


def indicator_exponent_rate(u_h: BrokenPolyField, factor: int = 4) -> float:
    """max_n (||d_x u_h||_{L inf(I_n)} + (|[[u_h]]_n| + |[[u_h]]_{n+1}|)/h_n)."""
    jl, jr = _jump_pairs(u_h)
    return float(np.max(sup_norms(u_h, 1, factor=factor) + (jl + jr) / u_h.mesh.widths))


def initial_relative_entropy(
    model: ConservationLawModel, u0, u_hat0: BrokenPolyField, quad: QuadratureRule | None = None
) -> float:
    """int eta(u0 | u_hat0) dx with the exact datum sampled at quadrature points."""
    quad = quad or gauss_legendre(u_hat0.degree + 4)
    mesh = u_hat0.mesh
    x = mesh.physical_points(quad.nodes)
    exact = np.asarray(u0(x.ravel()), dtype=float).reshape((-1,) + x.shape)
    approx = np.moveaxis(u_hat0.cell_values(quad.nodes), 1, 0)
    eta, _ = relative_entropy(model, exact, approx)
    return float(np.sum(eta * quad.weights * (0.5 * mesh.widths)[:, None]))


def domain_check(pair_or_field, box, factor: int = 4):
    """Whether sampled u_hat stays in the box; also the largest excursion."""
    f = pair_or_field.u_hat if isinstance(pair_or_field, ReconstructionPair) else pair_or_field
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    vals = f.cell_values(sample_points(f.degree, factor))  # (N, d, s)
    lo = box[:, 0][None, :, None]
    hi = box[:, 1][None, :, None]
    excursion = float(np.max(np.maximum(np.maximum(lo - vals, vals - hi), 0.0)))
    return excursion == 0.0, excursion


@dataclass
class EstimatorAccumulators:
    t: float = 0.0
    E_running: float = 0.0
    Etilde_running: float = 0.0
    gronwall_integral: float = 0.0
    gronwall_integral_indicator: float = 0.0
    initial_term: float = 0.0  # C_eta_hi * int eta(u0 | u_hat0)
    initial_term_raw: float = 0.0  # int eta(u0 | u_hat0)
    jump_term_now: float = 0.0  # with the L^2 factor
    jump_term_raw: float = 0.0  # without it
    max_indicator: float = 0.0

    @property
    def E(self) -> float:
        return self.initial_term + self.E_running

    @property
    def Etilde(self) -> float:
        return self.initial_term_raw + self.Etilde_running


@dataclass(frozen=True)
class StepQuantities:
    """Integrands and point-in-time terms for one state."""

    t: float
    e1: float
    e2: float
    e3: float
    bracket: float
    gronwall_rate: float
    indicator_rate: float
    jump_term: float
    jump_term_raw: float
    in_domain: bool
    excursion: float


def step_quantities(
    model: ConservationLawModel,
    flux: NumericalFlux,
    state: SemidiscreteState,
    consts: EstimatorConstants,
    box=None,
    pair: ReconstructionPair | None = None,
    use_sup_bound: bool = False,
    factor: int = 4,
) -> StepQuantities:
    u_h, udot = state.u_h, state.udot_h
    pair = pair or reconstruct(model, flux, u_h)
    if use_sup_bound:
        basis = basis_constants(consts.p, consts.c_p)
        grad_hat = uhat_sup_derivative(pair.u_hat, u_h, 1, consts.L, basis, factor)["bound_max"]
    else:
        grad_hat = float(sup_norms(pair.u_hat, 1, p=u_h.degree, factor=factor).max())
    gronwall_rate = (consts.c_eta_hi * consts.c_f * grad_hat + consts.c_eta_hi**2) / consts.c_eta_lo
    ok, exc = domain_check(pair, model.domain_box if box is None else box, factor)
    raw = jump_term(u_h)
    return StepQuantities(
        t=state.t,
        e1=e1_term(udot, consts.L),
        e2=e2_term(model, u_h, consts, factor),
        e3=e3_term(u_h, consts, factor),
        bracket=indicator_bracket(u_h, udot, factor),
        gronwall_rate=gronwall_rate,
        indicator_rate=indicator_exponent_rate(u_h, factor),
        jump_term=consts.L**2 * raw,
        jump_term_raw=raw,
        in_domain=ok,
        excursion=exc,
    )


def accumulate_step(acc: EstimatorAccumulators, before: StepQuantities, after: StepQuantities) -> EstimatorAccumulators:
    """Trapezoid increments over [before.t, after.t]; returns a new object."""
    dt = after.t - before.t
    if dt < 0:
        raise ValueError("steps must move forward in time")
    half = 0.5 * dt
    new = EstimatorAccumulators(
        t=after.t,
        E_running=acc.E_running
        + half * 3.0 * ((before.e1 + before.e2 + before.e3) + (after.e1 + after.e2 + after.e3)),
        Etilde_running=acc.Etilde_running + half * (before.bracket + after.bracket),
        gronwall_integral=acc.gronwall_integral + half * (before.gronwall_rate + after.gronwall_rate),
        gronwall_integral_indicator=acc.gronwall_integral_indicator
        + half * (before.indicator_rate + after.indicator_rate),
        initial_term=acc.initial_term,
        initial_term_raw=acc.initial_term_raw,
        jump_term_now=after.jump_term,
        jump_term_raw=after.jump_term_raw,
        max_indicator=acc.max_indicator,
    )
    new.max_indicator = max(new.max_indicator, computable_indicator(new))
    return new


def _weighted(value: float, exponent: float) -> float:
    if value == 0.0:
        return 0.0
    try:
        return value * math.exp(exponent)
    except OverflowError:
        return math.inf


def theorem_bound(acc: EstimatorAccumulators, consts: EstimatorConstants) -> float:
    """E(t) exp(G(t)) / C_eta_lo + L^2 sum h (j^2 + j^2); +inf on overflow."""
    return _weighted(acc.E / consts.c_eta_lo, acc.gronwall_integral) + acc.jump_term_now


def computable_indicator(acc: EstimatorAccumulators) -> float:
    """E~(t) exp(int rate) + sum h (j^2 + j^2) at the current time."""
    return _weighted(acc.Etilde, acc.gronwall_integral_indicator) + acc.jump_term_raw


class EstimatorObserver:
    """Run observer that integrates the bound and the indicator in time.

    Keeps one row per observed state in ``series``.
    """

    def __init__(
        self,
        model: ConservationLawModel,
        flux: NumericalFlux,
        consts: EstimatorConstants,
        u0,
        box=None,
        use_sup_bound: bool = False,
        check_every: int = 0,
        abort_on_escape: bool = False,
    ):
        self.model = model
        self.flux = flux
        self.consts = consts
        self.u0 = u0
        self.box = model.domain_box if box is None else np.asarray(box, dtype=float).reshape(-1, 2)
        self.use_sup_bound = use_sup_bound
        self.check_every = check_every
        self.abort_on_escape = abort_on_escape
        self.acc = EstimatorAccumulators()
        self.series: list[dict] = []
        self.reconstruction_reports: list[dict] = []
        self._prev: StepQuantities | None = None
        self._count = 0
        self.left_domain = False

    def __call__(self, state: SemidiscreteState) -> None:
        from .models import DomainError
        from .reconstruct import verify_reconstruction

        pair = reconstruct(self.model, self.flux, state.u_h)
        q = step_quantities(self.model, self.flux, state, self.consts, self.box, pair, self.use_sup_bound)
        if self._prev is None:
            raw = initial_relative_entropy(self.model, self.u0, pair.u_hat)
            self.acc = EstimatorAccumulators(
                t=state.t,
                initial_term=self.consts.c_eta_hi * raw,
                initial_term_raw=raw,
                jump_term_now=q.jump_term,
                jump_term_raw=q.jump_term_raw,
            )
            self.acc.max_indicator = computable_indicator(self.acc)
        else:
            self.acc = accumulate_step(self.acc, self._prev, q)
        self._prev = q
        if self.check_every and self._count % self.check_every == 0:
            rep = verify_reconstruction(self.model, pair, state.u_h)
            rep["t"] = state.t
            self.reconstruction_reports.append(rep)
        self._count += 1
        if not q.in_domain:
            self.left_domain = True
        self.series.append(
            {
                "t": state.t,
                "E": self.acc.E,
                "Etilde": self.acc.Etilde,
                "gronwall": self.acc.gronwall_integral,
                "gronwall_indicator": self.acc.gronwall_integral_indicator,
                "indicator": computable_indicator(self.acc),
                "bound": theorem_bound(self.acc, self.consts),
                "in_domain": int(q.in_domain),
            }
        )
        if self.abort_on_escape and not q.in_domain:
            raise DomainError(f"reconstruction left the admissible box at t={state.t:.6g} by {q.excursion:.3g}")

    @property
    def max_indicator(self) -> float:
        return self.acc.max_indicator


# --- diagnostic residual -----------------------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    norm: float
    r1: float
    r2: float
    r3: float
    quad: QuadratureRule = field(repr=False)
    values: np.ndarray = field(repr=False)  # R at quad points, (N, d, q)
    parts: tuple = field(repr=False)  # (R1, R2, R3) values

    def evaluate(self):
        return self.values


def time_derivative_uhat(flux: NumericalFlux, u_h: BrokenPolyField, udot_h: BrokenPolyField) -> BrokenPolyField:
    """Directional derivative of the reconstruction map along udot_h, central differences."""
    delta = 1e-6 * (1.0 + float(np.max(np.abs(u_h.coeffs))))
    plus = reconstruct_u(flux, u_h.with_coeffs(u_h.coeffs + delta * udot_h.coeffs))
    minus = reconstruct_u(flux, u_h.with_coeffs(u_h.coeffs - delta * udot_h.coeffs))
    return plus.with_coeffs((plus.coeffs - minus.coeffs) / (2.0 * delta))


def residual_field(
    model: ConservationLawModel,
    flux: NumericalFlux,
    u_h: BrokenPolyField,
    udot_h: BrokenPolyField | None = None,
    pair: ReconstructionPair | None = None,
    quad: QuadratureRule | None = None,
) -> ResidualReport:
    """R = d_t u_hat + d_x f(u_hat) split into R1 + R2 + R3, with L2 norms.

    R1 = d_t u_hat - d_t u_h, R2 = d_x f(u_hat) - P_p d_x f(u_hat),
    R3 = P_p d_x f(u_hat) - d_x f_hat.
    """
    p = u_h.degree
    quad = quad or gauss_legendre(3 * p + 6)
    udot_h = udot_h if udot_h is not None else semidiscrete_rhs(model, flux, u_h, default_quadrature(p))
    pair = pair or reconstruct(model, flux, u_h)
    h = u_h.mesh.widths
    dt_hat = time_derivative_uhat(flux, u_h, udot_h)
    r1 = dt_hat.cell_values(quad.nodes) - udot_h.cell_values(quad.nodes)
    uhat = np.moveaxis(pair.u_hat.cell_values(quad.nodes), 1, 0)
    uhat_x = np.moveaxis(pair.u_hat.cell_values(quad.nodes, 1), 1, 0)
    dfx = np.einsum("ijnq,jnq->niq", model.flux_tensor(uhat, 1), uhat_x)  # (N, d, q)
    proj = u_h.with_coeffs(project_cell_values(dfx, p, quad)).cell_values(quad.nodes)
    r2 = dfx - proj
    r3 = proj - pair.f_hat.cell_values(quad.nodes, 1)
    total = r1 + r2 + r3

    def norm(v):
        return float(np.sqrt(np.sum((v**2).sum(axis=1) * quad.weights * (0.5 * h)[:, None])))

    return ResidualReport(norm(total), norm(r1), norm(r2), norm(r3), quad, total, (r1, r2, r3))
