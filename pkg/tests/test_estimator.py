import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgapost.basis import BrokenPolyField, Mesh1D, gauss_legendre, inverse_constant, project, project_cell_values
from dgapost.dg import Solver, semidiscrete_rhs
from dgapost.estimator import (
    EstimatorAccumulators,
    EstimatorObserver,
    accumulate_step,
    computable_indicator,
    domain_check,
    e1_term,
    e2_term,
    e3_term,
    estimator_constants,
    initial_relative_entropy,
    jump_term,
    residual_field,
    step_quantities,
    theorem_bound,
    time_derivative_uhat,
)
from dgapost.models import advection_model, get_model, numerical_flux
from dgapost.reconstruct import reconstruct, reconstruct_u

CASES = [("burgers", "engquist_osher"), ("burgers", "roe"), ("burgers", "godunov"), ("p_system", "roe")]


def random_state(model, N, p, rng, amp=0.1):
    mesh = Mesh1D.uniform(N, -1.0, 1.0)
    c = amp * rng.standard_normal((N, model.d, p + 1))
    c[:, :, 0] += model.domain_box.mean(axis=1)
    return BrokenPolyField(mesh, c)


def step_field(N=4, p=0):
    # 1 on the left half, 0 on the right: unit jumps at nodes 0 and N/2
    mesh = Mesh1D.uniform(N, 0.0, 1.0)
    f = BrokenPolyField.zeros(mesh, p)
    f.coeffs[: N // 2, 0, 0] = 1.0
    return f


# --- single terms ------------------------------------------------------------------


def test_e1_step_example():
    f = step_field()
    # two unit jumps, each seen by both neighbouring cells
    assert e1_term(f, 2.0) == pytest.approx(4.0 * 4 * 0.25)
    assert jump_term(f) == pytest.approx(4 * 0.25)
    assert jump_term(f, 2.0) == pytest.approx(4.0 * 4 * 0.25)


def test_e3_hand_example():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    consts = estimator_constants(model, flux, 1)
    mesh = Mesh1D.uniform(2, 0.0, 1.0)
    # cell 0: 0.2 + 0.1 l_1, cell 1: -0.1 (slope 0.2/h = 0.4 in cell 0)
    u = BrokenPolyField(mesh, np.array([[[0.2, 0.1]], [[-0.1, 0.0]]]))
    j0 = abs(-0.1 - 0.1)  # node 0: u(0^-) from cell 1 is -0.1, u(0^+) = 0.1
    j1 = abs(-0.1 - 0.3)  # node 1
    h, s = 0.5, 0.4
    ci2, L, cf2 = inverse_constant(1) ** 2, consts.L, consts.c_f**2
    expected = 2 * ci2 * L**2 * cf2 * s**2 * h * 2 * (j0**2 + j1**2) + 16 * ci2 * L**4 * cf2 * 2 * (j0**4 + j1**4) / h
    assert e3_term(u, consts) == pytest.approx(expected, rel=1e-12)


def test_e3_zero_for_p0():
    model = get_model("burgers")
    consts = estimator_constants(model, numerical_flux(model, "roe"), 0)
    assert e3_term(step_field(), consts) == 0.0


@pytest.mark.parametrize("name,kind", CASES)
@pytest.mark.parametrize("p", [0, 1, 2])
def test_terms_vanish_on_constants(name, kind, p):
    model = get_model(name)
    flux = numerical_flux(model, kind)
    consts = estimator_constants(model, flux, p)
    u = BrokenPolyField.zeros(Mesh1D.uniform(5, 0.0, 1.0), p, model.d)
    u.coeffs[:, :, 0] = model.domain_box.mean(axis=1)
    udot = semidiscrete_rhs(model, flux, u)
    assert e1_term(udot, consts.L) == pytest.approx(0.0, abs=1e-26)
    assert e2_term(model, u, consts) == 0.0
    assert e3_term(u, consts) == 0.0


def test_e2_hand_example_linear_flux_part():
    # p = 0: the Leibniz part is 2 C_p^2 h (L b_1 jsum ||Df(u_h)'||)^2 = 0 on
    # piecewise constants, so only the defect part remains
    model = get_model("burgers")
    flux = numerical_flux(model, "roe")
    consts = estimator_constants(model, flux, 0)
    f = step_field()
    h = 0.25
    jl = np.array([1.0, 0.0, 1.0, 0.0])
    jr = np.array([0.0, 1.0, 0.0, 1.0])
    d1 = consts.L * consts.b_k[1] * (jl + jr) / h
    expected = np.sum(8 * consts.c_f**2 * consts.L**2 * h * (jl**2 + jr**2) * d1**2)
    assert e2_term(model, f, consts) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("p", [0, 1, 2])
def test_term_scaling_on_projected_data(p):
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    consts = estimator_constants(model, flux, p)
    rows = []
    for N in (32, 64, 128):
        u = project(lambda x: 0.5 * np.sin(x) + 0.1, p, Mesh1D.uniform(N, -np.pi, np.pi))
        udot = semidiscrete_rhs(model, flux, u)
        rows.append((e1_term(udot, consts.L), e2_term(model, u, consts), e3_term(u, consts)))
    r = np.array(rows)
    # jumps of u_h are O(h^{p+1}) but those of d_t u_h only O(h^p)
    assert np.log2(r[-2, 0] / r[-1, 0]) > 2 * max(p, 1) - 0.4
    assert np.log2(r[-2, 1] / r[-1, 1]) > 2 * p + 2 - 0.4
    if p > 0:
        assert np.log2(r[-2, 2] / r[-1, 2]) > 2 * p + 2 - 0.4
    else:
        assert np.all(r[:, 2] == 0.0)


# --- residual diagnostic -----------------------------------------------------------


def test_time_derivative_exact_for_linear_node_map():
    model = advection_model(1.0)
    flux = numerical_flux(model, "upwind")
    rng = np.random.default_rng(0)
    u = BrokenPolyField(Mesh1D.uniform(6, 0.0, 1.0), rng.standard_normal((6, 1, 3)))
    v = u.with_coeffs(rng.standard_normal((6, 1, 3)))
    np.testing.assert_allclose(time_derivative_uhat(flux, u, v).coeffs, reconstruct_u(flux, v).coeffs, atol=1e-9)


@pytest.mark.parametrize("name,kind", CASES)
def test_residual_sum_matches_direct_evaluation(name, kind):
    model = get_model(name)
    flux = numerical_flux(model, kind)
    u = random_state(model, 6, 1, np.random.default_rng(1))
    rep = residual_field(model, flux, u)
    quad = rep.quad
    udot = semidiscrete_rhs(model, flux, u)
    pair = reconstruct(model, flux, u)
    # d_x f(u_hat) by differentiating f(u_hat) values through a fine projection
    fine = gauss_legendre(20)
    uhat_f = np.moveaxis(pair.u_hat.cell_values(fine.nodes), 1, 0)
    fvals = np.moveaxis(model.flux(uhat_f), 0, 1)
    fpoly = pair.u_hat.with_coeffs(project_cell_values(fvals, 15, fine))
    dt = time_derivative_uhat(flux, u, udot).cell_values(quad.nodes)
    direct = dt + fpoly.cell_values(quad.nodes, 1)
    np.testing.assert_allclose(rep.values, direct, atol=1e-6)


@pytest.mark.parametrize("name,kind", CASES)
@pytest.mark.parametrize("p", [0, 1, 2])
def test_r3_lies_in_vp(name, kind, p):
    model = get_model(name)
    flux = numerical_flux(model, kind)
    u = random_state(model, 5, p, np.random.default_rng(2))
    rep = residual_field(model, flux, u)
    r3 = rep.parts[2]
    back = u.with_coeffs(project_cell_values(r3, p, rep.quad)).cell_values(rep.quad.nodes)
    np.testing.assert_allclose(back, r3, atol=1e-10)


def _split_ratios(model, flux, u):
    consts = estimator_constants(model, flux, u.degree)
    udot = semidiscrete_rhs(model, flux, u)
    rep = residual_field(model, flux, u, udot)
    e = (e1_term(udot, consts.L), e2_term(model, u, consts), e3_term(u, consts))
    return rep, e


@given(st.integers(0, 10_000), st.integers(0, 2), st.sampled_from(CASES))
@settings(max_examples=30, deadline=None)
def test_split_residual_bounds(seed, p, case):
    model = get_model(case[0])
    flux = numerical_flux(model, case[1])
    u = random_state(model, 8, p, np.random.default_rng(seed))
    rep, (e1, e2, e3) = _split_ratios(model, flux, u)
    floor = 1e-24  # R3 is pure roundoff when E3 vanishes (p = 0)
    assert rep.r1**2 <= 1.05 * e1 + floor
    assert rep.r2**2 <= 1.05 * e2 + floor
    assert rep.r3**2 <= 1.05 * e3 + floor
    assert rep.norm**2 <= 3 * 1.05 * (e1 + e2 + e3) + floor


def test_r1_bound_exact_for_linear_node_map():
    model = advection_model(1.0)
    flux = numerical_flux(model, "upwind")
    rng = np.random.default_rng(3)
    for p in (0, 1, 2):
        u = BrokenPolyField(Mesh1D.uniform(7, 0.0, 1.0), rng.standard_normal((7, 1, p + 1)))
        rep, (e1, _, _) = _split_ratios(model, flux, u)
        assert rep.r1**2 <= e1 * (1 + 1e-8)


# --- accumulation ------------------------------------------------------------------


def _quantities(model, flux, u, consts, t=0.0):
    solver = Solver(model, flux)
    return step_quantities(model, flux, solver.state(t, u), consts)


def test_zero_length_step_changes_nothing():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    consts = estimator_constants(model, flux, 1)
    u = random_state(model, 6, 1, np.random.default_rng(4))
    q = _quantities(model, flux, u, consts)
    acc = EstimatorAccumulators(initial_term=0.3, initial_term_raw=0.1, E_running=0.2, Etilde_running=0.05)
    new = accumulate_step(acc, q, q)
    assert new.E == acc.E and new.Etilde == acc.Etilde
    assert new.gronwall_integral == acc.gronwall_integral


def test_backward_step_rejected():
    model = get_model("burgers")
    flux = numerical_flux(model, "roe")
    consts = estimator_constants(model, flux, 0)
    u = random_state(model, 4, 0, np.random.default_rng(5))
    a = _quantities(model, flux, u, consts, 1.0)
    b = _quantities(model, flux, u, consts, 0.5)
    with pytest.raises(ValueError):
        accumulate_step(EstimatorAccumulators(), a, b)


def test_constant_state_gronwall_exponent():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    consts = estimator_constants(model, flux, 1)
    mesh = Mesh1D.uniform(8, 0.0, 1.0)
    u0 = BrokenPolyField.zeros(mesh, 1)
    u0.coeffs[:, 0, 0] = 0.4
    obs = EstimatorObserver(model, flux, consts, lambda x: 0.4 + 0 * x)
    solver = Solver(model, flux)
    state = solver.state(0.0, u0)
    obs(state)
    T, n = 0.5, 10
    for _ in range(n):
        state = solver.rk4_step(state, T / n)
        obs(state)
    expected = T * consts.c_eta_hi**2 / consts.c_eta_lo
    assert obs.acc.gronwall_integral == pytest.approx(expected, rel=1e-12)
    assert obs.acc.E == 0.0 and obs.max_indicator == 0.0
    assert theorem_bound(obs.acc, consts) == 0.0


def test_run_accumulators_are_monotone():
    model = get_model("burgers")
    flux = numerical_flux(model, "engquist_osher")
    consts = estimator_constants(model, flux, 1)
    mesh = Mesh1D.uniform(16, -np.pi, np.pi)

    def u0(x):
        return -np.sin(x)

    obs = EstimatorObserver(model, flux, consts, u0, check_every=5)
    solver = Solver(model, flux)
    state = solver.state(0.0, project(u0, 1, mesh))
    obs(state)
    for _ in range(40):
        state = solver.rk4_step(state, 0.1 * mesh.h)
        obs(state)
    for key in ("E", "Etilde", "gronwall", "gronwall_indicator"):
        vals = np.array([row[key] for row in obs.series])
        assert np.all(np.diff(vals) >= 0), key
    assert obs.max_indicator == max(row["indicator"] for row in obs.series)
    assert all(r["u_continuity"] < 1e-11 for r in obs.reconstruction_reports)
    assert len(obs.reconstruction_reports) == 9
    # E0 is the scaled initial relative entropy
    assert obs.series[0]["E"] == pytest.approx(consts.c_eta_hi * obs.series[0]["Etilde"])


def test_overflow_gives_inf():
    consts = estimator_constants(get_model("burgers"), numerical_flux(get_model("burgers"), "roe"), 1)
    acc = EstimatorAccumulators(initial_term=1.0, initial_term_raw=1.0, gronwall_integral=1e4, gronwall_integral_indicator=1e4)
    assert theorem_bound(acc, consts) == math.inf
    assert computable_indicator(acc) == math.inf
    acc0 = EstimatorAccumulators(gronwall_integral=1e4, gronwall_integral_indicator=1e4, jump_term_raw=0.5)
    assert computable_indicator(acc0) == 0.5


def test_initial_relative_entropy_of_projection():
    model = get_model("burgers")
    # eta = u^2/2: eta(u|v) = (u - v)^2 / 2, so a constant offset c gives c^2 |I| / 2
    mesh = Mesh1D.uniform(4, 0.0, 2.0)
    v = BrokenPolyField.zeros(mesh, 2)
    v.coeffs[:, 0, 0] = 0.1
    assert initial_relative_entropy(model, lambda x: 0.4 + 0 * x, v) == pytest.approx(0.09, rel=1e-12)


def test_domain_check_examples():
    model = get_model("burgers")
    box = model.domain_box
    mesh = Mesh1D.uniform(3, 0.0, 1.0)
    f = BrokenPolyField.zeros(mesh, 1)
    ok, exc = domain_check(f, box)
    assert ok and exc == 0.0
    f.coeffs[1, 0, 0] = box[0, 1] + 0.05
    ok, exc = domain_check(f, box)
    assert not ok and exc == pytest.approx(0.05)
