"""Semidiscrete dG operator with intermediate-state fluxes and RK4 time marching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .basis import BrokenPolyField, Mesh1D, QuadratureRule, default_quadrature, legendre_table, project
from .models import ConservationLawModel, NonFiniteStateError, NumericalFlux, numerical_flux


def trace_pairs(field: BrokenPolyField):
    """(u(x_n^-), u(x_n^+)) at every node n = 0..N-1, each of shape (N, d).

    Node 0 takes its left trace from the last cell (periodic wrap).
    """
    right = field.right_traces()
    return np.roll(right, 1, axis=0), field.left_traces()


def jumps(field: BrokenPolyField) -> np.ndarray:
    """[[g]]_n = g(x_n^-) - g(x_n^+) for all nodes, shape (N, d)."""
    minus, plus = trace_pairs(field)
    return minus - plus


def averages(field: BrokenPolyField) -> np.ndarray:
    minus, plus = trace_pairs(field)
    return 0.5 * (minus + plus)


def jump(field: BrokenPolyField, n: int) -> np.ndarray:
    return jumps(field)[n % field.mesh.n_cells]


def average(field: BrokenPolyField, n: int) -> np.ndarray:
    return averages(field)[n % field.mesh.n_cells]


def node_states(flux: NumericalFlux, field: BrokenPolyField) -> np.ndarray:
    """w(u_h(x_n^-), u_h(x_n^+)) for every node, shape (N, d)."""
    minus, plus = trace_pairs(field)
    if not (np.all(np.isfinite(minus)) and np.all(np.isfinite(plus))):
        bad = int(np.argmax(~np.isfinite(minus).all(axis=1) | ~np.isfinite(plus).all(axis=1)))
        raise NonFiniteStateError(f"non-finite trace state at node {bad}")
    return flux.w(minus.T, plus.T).T


def semidiscrete_rhs(
    model: ConservationLawModel,
    flux: NumericalFlux,
    u_h: BrokenPolyField,
    quad: QuadratureRule | None = None,
) -> BrokenPolyField:
    """The discrete time derivative of u_h.

    Strong-form volume term plus interface corrections: for l_k^n,
    (2k+1)/h_n times
    ``-int d_x f(u_h) l_k^n - (F_{n+1} - f(u_h(x_{n+1}^-))) + (-1)^k (F_n - f(u_h(x_n^+)))``.
    """
    p = u_h.degree
    quad = quad or default_quadrature(p)
    h = u_h.mesh.widths
    vals = np.moveaxis(u_h.cell_values(quad.nodes), 1, 0)  # (d, N, q)
    dvals = np.moveaxis(u_h.cell_values(quad.nodes, 1), 1, 0)
    jac = model.flux_tensor(vals, 1)  # (d, d, N, q)
    dfx = np.einsum("ijnq,jnq->inq", jac, dvals)
    tab = legendre_table(p, quad.nodes)  # (p+1, q)
    # int_{I_n} g l_k dx = h_n / 2 * sum_q w_q g(xi_q) l_k(xi_q)
    volume = np.einsum("inq,q,kq->nik", dfx, quad.weights, tab) * (0.5 * h)[:, None, None]

    w = node_states(flux, u_h)  # (N, d)
    F = model.flux(w.T).T
    f_plus = model.flux(u_h.left_traces().T).T  # f(u_h(x_n^+)), cell n
    f_minus = model.flux(u_h.right_traces().T).T  # f(u_h(x_{n+1}^-)), cell n
    F_right = np.roll(F, -1, axis=0)  # node n+1
    signs = (-1.0) ** np.arange(p + 1)
    interface = -(F_right - f_minus)[:, :, None] + (F - f_plus)[:, :, None] * signs
    inv_mass = (2 * np.arange(p + 1) + 1)[None, None, :] / h[:, None, None]
    return u_h.with_coeffs(inv_mass * (interface - volume))


@dataclass(frozen=True)
class SemidiscreteState:
    t: float
    u_h: BrokenPolyField
    udot_h: BrokenPolyField


@dataclass(frozen=True)
class TimeRule:
    """tau = c * h^k with h the largest cell width."""

    c: float = 0.1
    k: float = 1.0

    def __post_init__(self):
        if self.c <= 0 or self.k <= 0:
            raise ValueError("time rule needs c > 0 and k > 0")

    def step(self, mesh: Mesh1D) -> float:
        return self.c * mesh.h**self.k

    @classmethod
    def default(cls, p: int) -> "TimeRule":
        return cls(0.1, 1.0) if p <= 1 else cls(0.05, 1.5)


class Solver:
    """Bundles model, flux and quadrature for repeated operator calls."""

    def __init__(self, model: ConservationLawModel, flux: NumericalFlux | str, quad: QuadratureRule | None = None):
        self.model = model
        self.flux = numerical_flux(model, flux) if isinstance(flux, str) else flux
        self.quad = quad

    def rhs(self, u_h: BrokenPolyField) -> BrokenPolyField:
        return semidiscrete_rhs(self.model, self.flux, u_h, self.quad)

    def state(self, t: float, u_h: BrokenPolyField) -> SemidiscreteState:
        return SemidiscreteState(t, u_h, self.rhs(u_h))

    def rk4_step(self, state: SemidiscreteState, tau: float) -> SemidiscreteState:
        if tau <= 0:
            raise ValueError("time step must be positive")
        u = state.u_h
        k1 = state.udot_h.coeffs
        k2 = self.rhs(u.with_coeffs(u.coeffs + 0.5 * tau * k1)).coeffs
        k3 = self.rhs(u.with_coeffs(u.coeffs + 0.5 * tau * k2)).coeffs
        k4 = self.rhs(u.with_coeffs(u.coeffs + tau * k3)).coeffs
        new = u.with_coeffs(u.coeffs + tau / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(new.coeffs)):
            raise FloatingPointError(f"non-finite solution after step to t={state.t + tau:.6g}")
        return self.state(state.t + tau, new)


def rk4_step(model, flux, state: SemidiscreteState, tau: float, quad=None) -> SemidiscreteState:
    return Solver(model, flux, quad).rk4_step(state, tau)


def time_levels(T: float, tau: float) -> list[float]:
    """Step end times: uniform tau, last step shortened to land on T."""
    if T < 0:
        raise ValueError("final time must be non-negative")
    n = math.ceil(T / tau - 1e-9)
    times = [min(i * tau, T) for i in range(1, n + 1)]
    if times and times[-1] != T:
        times[-1] = T
    return times


def run_simulation(
    model: ConservationLawModel,
    flux: NumericalFlux | str,
    u0: Callable,
    mesh: Mesh1D,
    p: int,
    time_rule: TimeRule,
    T: float,
    observers: Iterable[Callable[[SemidiscreteState], None]] = (),
    quad: QuadratureRule | None = None,
) -> SemidiscreteState:
    """Project u0, march with RK4 to T, calling every observer after each step.

    Observers also see the initial state at t = 0.
    """
    solver = Solver(model, flux, quad)
    observers = list(observers)
    u_h = project(u0, p, mesh, quad)
    if u_h.components != model.d:
        raise ValueError(f"initial datum has {u_h.components} components, model needs {model.d}")
    state = solver.state(0.0, u_h)
    for obs in observers:
        obs(state)
    tau = time_rule.step(mesh)
    t_prev = 0.0
    for i, t_next in enumerate(time_levels(T, tau), start=1):
        state = solver.rk4_step(state, t_next - t_prev)
        # pin the clock to i * tau so sample times are reproducible across levels
        state = SemidiscreteState(t_next, state.u_h, state.udot_h)
        t_prev = t_next
        for obs in observers:
            obs(state)
    return state


def total_mass(u_h: BrokenPolyField) -> np.ndarray:
    """Integral of each component over the domain."""
    return (u_h.coeffs[:, :, 0] * u_h.mesh.widths[:, None]).sum(axis=0)
