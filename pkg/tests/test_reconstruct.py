import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgapost.basis import BrokenPolyField, Mesh1D, basis_constants, l2_norms, project
from dgapost.dg import jumps, semidiscrete_rhs
from dgapost.models import get_model, numerical_flux
from dgapost.reconstruct import (
    ReconstructionPair,
    reconstruct,
    reconstruct_f,
    reconstruct_u,
    reconstruct_u_constrained,
    reconstruction_ok,
    top_mode_coefficients,
    uhat_sup_derivative,
    verify_reconstruction,
)

CASES = [("burgers", "engquist_osher"), ("burgers", "roe"), ("burgers", "godunov"), ("p_system", "roe")]


def random_state(model, N, p, rng, amp=0.1):
    mesh = Mesh1D.uniform(N, -1.0, 1.0)
    centre = model.domain_box.mean(axis=1)
    c = amp * rng.standard_normal((N, model.d, p + 1))
    c[:, :, 0] += centre
    return BrokenPolyField(mesh, c)


def test_top_mode_example():
    alpha, beta = top_mode_coefficients(0.2, -0.1, 1)
    assert alpha == pytest.approx(-0.15)
    assert beta == pytest.approx(0.05)


@pytest.mark.parametrize("name,kind", CASES)
@pytest.mark.parametrize("p", [0, 1, 2])
def test_constant_state(name, kind, p):
    model = get_model(name)
    flux = numerical_flux(model, kind)
    mesh = Mesh1D.uniform(5, 0.0, 1.0)
    u = BrokenPolyField.zeros(mesh, p, model.d)
    c = model.domain_box.mean(axis=1) + 0.05
    u.coeffs[:, :, 0] = c
    pair = reconstruct(model, flux, u)
    expected_u = np.zeros((5, model.d, p + 2))
    expected_u[:, :, 0] = c
    np.testing.assert_allclose(pair.u_hat.coeffs, expected_u, atol=1e-14)
    expected_f = np.zeros_like(expected_u)
    expected_f[:, :, 0] = model.flux(c)
    np.testing.assert_allclose(pair.f_hat.coeffs, expected_f, atol=1e-13)


@given(st.integers(0, 10_000), st.integers(0, 2), st.integers(1, 16), st.sampled_from(CASES))
@settings(max_examples=60, deadline=None)
def test_representation_matches_constraint_system(seed, p, N, case):
    model = get_model(case[0])
    flux = numerical_flux(model, case[1])
    u = random_state(model, N, p, np.random.default_rng(seed))
    np.testing.assert_allclose(reconstruct_u(flux, u).coeffs, reconstruct_u_constrained(flux, u).coeffs, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 2), st.sampled_from(CASES))
@settings(max_examples=40, deadline=None)
def test_contracts_hold(seed, p, case):
    model = get_model(case[0])
    flux = numerical_flux(model, case[1])
    u = random_state(model, 9, p, np.random.default_rng(seed))
    report = verify_reconstruction(model, reconstruct(model, flux, u), u)
    assert reconstruction_ok(report), report


@given(st.integers(0, 10_000), st.integers(0, 2), st.sampled_from(CASES))
@settings(max_examples=40, deadline=None)
def test_distance_to_uh_controlled_by_jumps(seed, p, case):
    model = get_model(case[0])
    flux = numerical_flux(model, case[1])
    u = random_state(model, 7, p, np.random.default_rng(seed))
    diff = reconstruct_u(flux, u).coeffs.copy()
    diff[:, :, : p + 1] -= u.coeffs
    lhs = l2_norms(u.with_coeffs(diff)) ** 2
    j = np.linalg.norm(jumps(u), axis=1)
    rhs = flux.L**2 * u.mesh.widths * (j**2 + np.roll(j, -1) ** 2)
    assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-15)


@pytest.mark.parametrize("name,kind", CASES)
@pytest.mark.parametrize("p", [0, 1, 2])
def test_time_derivative_is_minus_flux_gradient(name, kind, p):
    # the scheme reads d_t u_h = -d_x f_hat cell by cell
    model = get_model(name)
    flux = numerical_flux(model, kind)
    u = random_state(model, 6, p, np.random.default_rng(3))
    udot = semidiscrete_rhs(model, flux, u)
    fhat = reconstruct_f(model, flux, u)
    xi = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(udot.cell_values(xi), -fhat.cell_values(xi, 1), atol=1e-11)


def test_f_hat_moment_example():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    u = random_state(model, 5, 1, np.random.default_rng(4))
    fhat = reconstruct_f(model, flux, u)
    # mean of f_hat equals mean of f(u_h) computed by a fine independent rule
    xg, wg = np.polynomial.legendre.leggauss(10)
    fu = 0.5 * u.cell_values(xg)[:, 0] ** 2
    np.testing.assert_allclose(fhat.coeffs[:, 0, 0], (fu * wg).sum(axis=1) / 2, atol=1e-14)


def test_sup_derivative_examples():
    mesh = Mesh1D.uniform(4, 0.0, 2.0)
    p = 1
    consts = basis_constants(p)
    zero = BrokenPolyField.zeros(mesh, p)
    const = BrokenPolyField.zeros(mesh, p + 1)
    const.coeffs[:, 0, 0] = 0.3
    for k in (1, 2):
        assert uhat_sup_derivative(const, zero, k, 1.0, consts)["sampled_max"] == 0.0
    top = BrokenPolyField.zeros(mesh, p + 1)
    top.coeffs[2, 0, p + 1] = 1.0
    res = uhat_sup_derivative(top, zero, 1, 1.0, consts)
    alpha = (p + 1) * (p + 2) / 2
    assert res["sampled"][2] == pytest.approx(2 * alpha / 0.5)
    # dense sampling cross-check
    x = np.linspace(mesh.nodes[2], mesh.nodes[3], 20001)
    xi = 2 * (x - mesh.nodes[2]) / 0.5 - 1
    dense = np.max(np.abs(np.polynomial.legendre.legval(xi, np.polynomial.legendre.legder([0, 0, 1])) * 4))
    assert res["sampled"][2] == pytest.approx(dense, rel=1e-9)


@given(st.integers(0, 10_000), st.integers(0, 2), st.sampled_from(CASES))
@settings(max_examples=40, deadline=None)
def test_sup_derivative_below_bound(seed, p, case):
    model = get_model(case[0])
    flux = numerical_flux(model, case[1])
    u = random_state(model, 8, p, np.random.default_rng(seed))
    uhat = reconstruct_u(flux, u)
    consts = basis_constants(p)
    for k in range(1, p + 2):
        res = uhat_sup_derivative(uhat, u, k, flux.L, consts)
        assert np.all(res["sampled"] <= res["bound"] * (1 + 1e-12) + 1e-12)


def test_fault_injection_detected():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    u = random_state(model, 6, 1, np.random.default_rng(5))
    pair = reconstruct(model, flux, u)
    bad = pair.u_hat.coeffs.copy()
    bad[2, 0, 2] += 1e-3
    broken = ReconstructionPair(pair.u_hat.with_coeffs(bad), pair.f_hat, pair.node_states, pair.node_fluxes)
    report = verify_reconstruction(model, broken, u)
    assert report["u_continuity"] == pytest.approx(1e-3, rel=1e-6)
    assert not reconstruction_ok(report)


def test_p0_skips_orthogonality():
    model = get_model("burgers")
    flux = numerical_flux(model, "roe")
    u = random_state(model, 4, 0, np.random.default_rng(6))
    report = verify_reconstruction(model, reconstruct(model, flux, u), u)
    assert report["u_orthogonality"] is None and report["f_orthogonality"] is None
    assert report["u_continuity"] < 1e-11 and report["f_node_values"] < 1e-11


@pytest.mark.parametrize("p", [0, 1, 2])
def test_reconstruction_converges_for_smooth_data(p):
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    errs, hs = [], []
    for N in (16, 32, 64):
        mesh = Mesh1D.uniform(N, -np.pi, np.pi)
        u = project(lambda x: 0.5 * np.sin(x), p, mesh)
        uhat = reconstruct_u(flux, u)
        x = np.linspace(-np.pi, np.pi, 5001)[1:-1]
        errs.append(np.max(np.abs(uhat(x)[:, 0] - 0.5 * np.sin(x))))
        hs.append(mesh.h)
    rates = np.log(np.array(errs[:-1]) / np.array(errs[1:])) / np.log(2)
    assert np.all(rates >= p + 1 - 0.1), rates
