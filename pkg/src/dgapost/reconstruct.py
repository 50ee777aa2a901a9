"""Continuous degree-(p+1) reconstructions of u_h and f(u_h).

Both reconstructions differ from a degree-p polynomial only in the two top
Legendre modes of each cell, which are fixed by the node states
``w_n = w(u_h(x_n^-), u_h(x_n^+))``:

    alpha = ((-1)^p delta_minus + delta_plus) / 2
    beta  = ((-1)^(p+1) delta_minus + delta_plus) / 2

with ``delta_minus`` and ``delta_plus`` the gaps to the targets at the left and
right cell ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from .basis import (
    BasisConstants,
    BrokenPolyField,
    QuadratureRule,
    default_quadrature,
    gauss_legendre,
    legendre_table,
    project_cell_values,
    sample_points,
)
from .dg import node_states
from .models import ConservationLawModel, NumericalFlux


def top_mode_coefficients(delta_minus, delta_plus, p: int):
    sign = (-1.0) ** p
    alpha = 0.5 * (sign * delta_minus + delta_plus)
    beta = 0.5 * (-sign * delta_minus + delta_plus)
    return alpha, beta


def _attach_endpoints(base: np.ndarray, p: int, left_target: np.ndarray, right_target: np.ndarray) -> np.ndarray:
    """Extend degree-p coefficients ``base`` (N, d, p+1) to degree p+1.

    Mode p is adjusted and mode p+1 added so that the cell end values hit
    the targets; modes below p are untouched.
    """
    n, d, _ = base.shape
    out = np.zeros((n, d, p + 2))
    out[:, :, : p + 1] = base
    signs = (-1.0) ** np.arange(p + 1)
    left = base @ signs
    right = base.sum(axis=2)
    alpha, beta = top_mode_coefficients(left_target - left, right_target - right, p)
    out[:, :, p] += alpha
    out[:, :, p + 1] = beta
    return out


@dataclass(frozen=True)
class ReconstructionPair:
    u_hat: BrokenPolyField
    f_hat: BrokenPolyField
    node_states: np.ndarray  # (N, d)
    node_fluxes: np.ndarray  # (N, d)


def reconstruct_u(flux: NumericalFlux, u_h: BrokenPolyField, w: np.ndarray | None = None) -> BrokenPolyField:
    """u_hat = u_h + alpha l_p^n + beta l_{p+1}^n in each cell."""
    w = node_states(flux, u_h) if w is None else w
    p = u_h.degree
    coeffs = _attach_endpoints(u_h.coeffs, p, w, np.roll(w, -1, axis=0))
    return u_h.with_coeffs(coeffs)


def reconstruct_f(
    model: ConservationLawModel,
    flux: NumericalFlux,
    u_h: BrokenPolyField,
    quad: QuadratureRule | None = None,
    w: np.ndarray | None = None,
) -> BrokenPolyField:
    """f_hat: moments 0..p-1 of f(u_h), end values f(w_n), f(w_{n+1})."""
    w = node_states(flux, u_h) if w is None else w
    p = u_h.degree
    quad = quad or default_quadrature(p)
    vals = np.moveaxis(u_h.cell_values(quad.nodes), 1, 0)
    fvals = np.moveaxis(model.flux(vals), 0, 1)  # (N, d, q)
    base = np.zeros(u_h.coeffs.shape)
    if p >= 1:
        base[:, :, :p] = project_cell_values(fvals, p - 1, quad)
    fw = model.flux(w.T).T
    coeffs = _attach_endpoints(base, p, fw, np.roll(fw, -1, axis=0))
    return u_h.with_coeffs(coeffs)


def reconstruct(
    model: ConservationLawModel, flux: NumericalFlux, u_h: BrokenPolyField, quad: QuadratureRule | None = None
) -> ReconstructionPair:
    w = node_states(flux, u_h)
    fw = model.flux(w.T).T
    return ReconstructionPair(
        u_hat=reconstruct_u(flux, u_h, w),
        f_hat=reconstruct_f(model, flux, u_h, quad, w),
        node_states=w,
        node_fluxes=fw,
    )


def reconstruct_u_constrained(flux: NumericalFlux, u_h: BrokenPolyField) -> BrokenPolyField:
    """Reference route: solve the moment and end-value conditions directly.

    Per cell and component, unknown monomial coefficients of a degree-(p+1)
    polynomial on (-1, 1) satisfy ``int (u_hat - u_h) xi^j = 0`` for j < p
    together with the two end values; the result is converted back to the
    Legendre basis.
    """
    p = u_h.degree
    w = node_states(flux, u_h)
    w_right = np.roll(w, -1, axis=0)
    quad = gauss_legendre(p + 3)
    mono = np.vander(quad.nodes, p + 2, increasing=True)  # (q, p+2)
    rows = []
    for j in range(p):
        rows.append((quad.weights * quad.nodes**j) @ mono)
    rows.append(np.array([(-1.0) ** i for i in range(p + 2)]))
    rows.append(np.ones(p + 2))
    A = np.array(rows)
    uh_vals = u_h.cell_values(quad.nodes)  # (N, d, q)
    n, d, _ = uh_vals.shape
    out = np.zeros((n, d, p + 2))
    for cell in range(n):
        for i in range(d):
            rhs = [np.sum(quad.weights * quad.nodes**j * uh_vals[cell, i]) for j in range(p)]
            rhs += [w[cell, i], w_right[cell, i]]
            mono_coeffs = np.linalg.solve(A, np.array(rhs))
            leg = npleg.poly2leg(mono_coeffs)  # trims trailing zeros
            out[cell, i, : len(leg)] = leg
    return u_h.with_coeffs(out)


def uhat_sup_derivative(
    u_hat: BrokenPolyField,
    u_h: BrokenPolyField,
    k: int,
    L: float,
    consts: BasisConstants,
    factor: int = 4,
):
    """Sampled per-cell sup of |d^k u_hat| and the a priori bound from u_h.

    The bound reads ``||d^k u_h|| + L 2^(k-1) b_k (|[[u_h]]_n| + |[[u_h]]_{n+1}|) / h_n^k``;
    the 2^(k-1) accounts for b_k being measured on (-1, 1).
    """
    from .dg import jumps

    p = u_h.degree
    pts = sample_points(p, factor)
    sampled = np.sqrt((u_hat.cell_values(pts, k) ** 2).sum(axis=1)).max(axis=1)
    base = np.sqrt((u_h.cell_values(pts, k) ** 2).sum(axis=1)).max(axis=1) if k <= p else np.zeros(u_h.mesh.n_cells)
    j = np.linalg.norm(jumps(u_h), axis=1)
    jsum = j + np.roll(j, -1)
    h = u_h.mesh.widths
    bound = base + L * 2.0 ** (k - 1) * consts.b_k[k] * jsum / h**k
    return {"sampled": sampled, "bound": bound, "sampled_max": float(sampled.max()), "bound_max": float(bound.max())}


def verify_reconstruction(
    model: ConservationLawModel,
    pair: ReconstructionPair,
    u_h: BrokenPolyField,
    quad: QuadratureRule | None = None,
) -> dict:
    """Largest violations of continuity, node values and orthogonality.

    Orthogonality entries are ``None`` for p = 0 (no test functions).
    """
    p = u_h.degree
    w = pair.node_states
    fw = pair.node_fluxes
    report = {}
    for name, f, target in (("u", pair.u_hat, w), ("f", pair.f_hat, fw)):
        left = f.left_traces()
        right_prev = np.roll(f.right_traces(), 1, axis=0)
        report[f"{name}_continuity"] = float(np.max(np.abs(right_prev - left)))
        report[f"{name}_node_values"] = float(
            max(np.max(np.abs(left - target)), np.max(np.abs(right_prev - target)))
        )
    if p == 0:
        report["u_orthogonality"] = None
        report["f_orthogonality"] = None
        return report
    # moments below p of u_hat - u_h: the difference's low Legendre modes
    diff = pair.u_hat.coeffs[:, :, :p] - u_h.coeffs[:, :, :p]
    report["u_orthogonality"] = float(np.max(np.abs(diff * u_h.mesh.widths[:, None, None])))
    quad = quad or default_quadrature(p)
    vals = np.moveaxis(u_h.cell_values(quad.nodes), 1, 0)
    fvals = np.moveaxis(model.flux(vals), 0, 1)
    fhat_vals = pair.f_hat.cell_values(quad.nodes)
    tab = legendre_table(p - 1, quad.nodes)
    moments = ((fhat_vals - fvals) * quad.weights) @ tab.T * (0.5 * u_h.mesh.widths)[:, None, None]
    report["f_orthogonality"] = float(np.max(np.abs(moments)))
    return report


RECONSTRUCTION_TOLERANCES = {
    "u_continuity": 1e-11,
    "u_node_values": 1e-11,
    "f_continuity": 1e-11,
    "f_node_values": 1e-11,
    "u_orthogonality": 1e-11,
    "f_orthogonality": 1e-10,
}


def reconstruction_ok(report: dict, tolerances: dict = RECONSTRUCTION_TOLERANCES) -> bool:
    return all(v is None or v <= tolerances[k] for k, v in report.items())
