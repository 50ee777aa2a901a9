"""Conservation-law models and intermediate-state numerical fluxes.

States are arrays of shape ``(d, ...)``: the first axis is the component,
trailing axes index points. Flux derivative tensors ``D^m f`` have shape
``(d,) * (m + 1) + points``; axis 0 is the flux component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .basis import BrokenPolyField

FLUX_KINDS = ("engquist_osher", "roe", "godunov", "central", "upwind")


class DomainError(ValueError):
    """A state left the admissible set."""


class NonFiniteStateError(FloatingPointError, ValueError):
    """NaN or inf reached a trace or flux evaluation (the run blew up)."""


@dataclass(frozen=True)
class BoundConstants:
    c_f: float  # sup |v^T D^2 f(u) v| / |v|^2 over the box
    c_eta_lo: float  # min eigenvalue of D^2 eta over the box
    c_eta_hi: float  # max eigenvalue of D^2 eta over the box


@dataclass(frozen=True, eq=False)
class ConservationLawModel:
    name: str
    d: int
    flux: Callable
    flux_tensor: Callable  # (u, order) -> D^order f
    entropy: Callable
    entropy_grad: Callable
    entropy_hessian: Callable
    entropy_flux: Callable
    domain_box: np.ndarray
    smoothness_order: int = 1000
    intermediate_states: dict = field(default_factory=dict)  # kind -> w(um, up)
    lipschitz: dict = field(default_factory=dict)  # kind -> L, or None to sample
    analytic_bounds: Callable | None = None  # box -> BoundConstants

    def jacobian(self, u):
        return self.flux_tensor(u, 1)

    def check_states(self, u, where: str = "") -> None:
        if not np.all(np.isfinite(u)):
            raise NonFiniteStateError(f"non-finite state {where}".strip())

    @property
    def flux_kinds(self) -> tuple:
        return tuple(self.intermediate_states)


def _as_state(u, d: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[:1] != (d,):
        raise ValueError(f"state must have leading axis of size {d}, got shape {u.shape}")
    return u


# --- Burgers -----------------------------------------------------------------


def _nearest_branch(r, a, b):
    # +-r, whichever lies closer to the mean of a and b
    return np.where(a + b >= 0.0, r, -r)


def _w_burgers_eo(um, up):
    a, b = um[0], up[0]
    w2 = 0.5 * a**2 * (1 + np.sign(a)) + 0.5 * b**2 * (1 - np.sign(b))
    return _nearest_branch(np.sqrt(w2), a, b)[None]


def _w_burgers_roe(um, up):
    a, b = um[0], up[0]
    s = np.sign(a + b)
    w2 = 0.5 * a**2 * (1 + s) + 0.5 * b**2 * (1 - s)
    return _nearest_branch(np.sqrt(w2), a, b)[None]


def _w_burgers_godunov(um, up):
    a, b = um[0], up[0]
    shock = np.where(a + b > 0.0, a, b)
    fan = np.where(a > 0.0, a, np.where(b < 0.0, b, 0.0))
    return np.where(a > b, shock, fan)[None]


def _w_central(um, up):
    return 0.5 * (um + up)


def _w_upwind(um, up):
    return np.array(um, dtype=float, copy=True)


def _burgers_tensor(u, order):
    u = _as_state(u, 1)
    shape = (1,) * (order + 1) + u.shape[1:]
    if order == 0:
        return 0.5 * u**2
    if order == 1:
        return u.reshape(shape).copy()
    if order == 2:
        return np.ones(shape)
    return np.zeros(shape)


def burgers_model(box=(-1.1, 1.1)) -> ConservationLawModel:
    """Inviscid Burgers, f(u) = u^2/2 with the quadratic entropy pair."""
    return ConservationLawModel(
        name="burgers",
        d=1,
        flux=lambda u: 0.5 * _as_state(u, 1) ** 2,
        flux_tensor=_burgers_tensor,
        entropy=lambda u: 0.5 * _as_state(u, 1)[0] ** 2,
        entropy_grad=lambda u: np.array(_as_state(u, 1), copy=True),
        entropy_hessian=lambda u: np.ones((1, 1) + np.shape(u)[1:]),
        entropy_flux=lambda u: _as_state(u, 1)[0] ** 3 / 3.0,
        domain_box=np.array([box], dtype=float),
        intermediate_states={
            "engquist_osher": _w_burgers_eo,
            "roe": _w_burgers_roe,
            "godunov": _w_burgers_godunov,
            "central": _w_central,
            "upwind": _w_upwind,
        },
        lipschitz={
            # worst case of the signed branch at transonic pairs a = -b
            "engquist_osher": (1.0 + math.sqrt(2.0)) / 2.0,
            "roe": 1.0,
            "godunov": 1.0,
            "central": 0.5,
            "upwind": 1.0,
        },
        analytic_bounds=lambda box: BoundConstants(1.0, 1.0, 1.0),
    )


def advection_model(speed: float = 1.0, box=(-10.0, 10.0)) -> ConservationLawModel:
    """Linear advection f(u) = speed * u; used for operator cross-checks."""

    def tensor(u, order):
        u = _as_state(u, 1)
        shape = (1,) * (order + 1) + u.shape[1:]
        if order == 0:
            return speed * u
        if order == 1:
            return np.full(shape, float(speed))
        return np.zeros(shape)

    return ConservationLawModel(
        name="advection",
        d=1,
        flux=lambda u: speed * _as_state(u, 1),
        flux_tensor=tensor,
        entropy=lambda u: 0.5 * _as_state(u, 1)[0] ** 2,
        entropy_grad=lambda u: np.array(_as_state(u, 1), copy=True),
        entropy_hessian=lambda u: np.ones((1, 1) + np.shape(u)[1:]),
        entropy_flux=lambda u: 0.5 * speed * _as_state(u, 1)[0] ** 2,
        domain_box=np.array([box], dtype=float),
        intermediate_states={"upwind": _w_upwind, "central": _w_central},
        lipschitz={"upwind": 1.0, "central": 0.5},
        analytic_bounds=lambda box: BoundConstants(0.0, 1.0, 1.0),
    )


# --- p-system with p(u) = u^3 + u ----------------------------------------------


def pressure(u, order: int = 0):
    u = np.asarray(u, dtype=float)
    if order == 0:
        return u**3 + u
    if order == 1:
        return 3.0 * u**2 + 1.0
    if order == 2:
        return 6.0 * u
    if order == 3:
        return np.full_like(u, 6.0)
    return np.zeros_like(u)


def p_inverse(y, tol: float = 1e-14, max_iter: int = 100):
    """Unique real root of u^3 + u = y (safeguarded Newton, bracket [min(0,y), max(0,y)])."""
    y = np.asarray(y, dtype=float)
    lo = np.minimum(0.0, y)
    hi = np.maximum(0.0, y)
    u = np.clip(np.cbrt(y), lo, hi)
    scale = np.maximum(1.0, np.abs(y))
    for _ in range(max_iter):
        r = u**3 + u - y
        if np.all(np.abs(r) <= tol * scale):
            return u
        lo = np.where(r < 0, u, lo)
        hi = np.where(r > 0, u, hi)
        step = u - r / (3.0 * u**2 + 1.0)
        bad = (step < lo) | (step > hi)
        u = np.where(bad, 0.5 * (lo + hi), step)
        # bracket collapsed to roundoff: accept
        if np.all((hi - lo) <= 4 * np.finfo(float).eps * scale):
            return u
    raise RuntimeError("p_inverse: Newton iteration did not converge")


def roe_speed(ul, ur):
    # sqrt of the divided difference (p(ur) - p(ul)) / (ur - ul)
    return np.sqrt(ul**2 + ul * ur + ur**2 + 1.0)


def _w_psystem_roe(um, up):
    ul, vl = um[0], um[1]
    ur, vr = up[0], up[1]
    a = roe_speed(ul, ur)
    wu = p_inverse(0.5 * (pressure(ul) + pressure(ur)) + 0.5 * a * (vr - vl))
    wv = 0.5 * (vl + vr) + 0.5 * a * (ur - ul)
    return np.stack([wu, wv])


def _psystem_flux(u):
    u = _as_state(u, 2)
    return np.stack([-u[1], -pressure(u[0])])


def _psystem_tensor(u, order):
    u = _as_state(u, 2)
    if order == 0:
        return _psystem_flux(u)
    out = np.zeros((2,) * (order + 1) + u.shape[1:])
    if order == 1:
        out[0, 1] = -1.0
        out[1, 0] = -pressure(u[0], 1)
        return out
    out[(1,) + (0,) * order] = -pressure(u[0], order)
    return out


def _psystem_hessian(u):
    u = _as_state(u, 2)
    out = np.zeros((2, 2) + u.shape[1:])
    out[0, 0] = pressure(u[0], 1)
    out[1, 1] = 1.0
    return out


def _psystem_bounds(box):
    umax = np.max(np.abs(box[0]))
    umin2 = 0.0 if box[0][0] <= 0.0 <= box[0][1] else min(box[0][0] ** 2, box[0][1] ** 2)
    return BoundConstants(
        c_f=6.0 * umax,
        c_eta_lo=min(1.0, 3.0 * umin2 + 1.0),
        c_eta_hi=max(1.0, 3.0 * umax**2 + 1.0),
    )


def p_system_model(box=((-0.1, 1.1), (-1.2, 1.2))) -> ConservationLawModel:
    """p-system u_t - v_x = 0, v_t - p(u)_x = 0 with p(u) = u^3 + u.

    Entropy is the mechanical energy v^2/2 + W(u), W(u) = u^4/4 + u^2/2,
    with entropy flux -v p(u).
    """
    return ConservationLawModel(
        name="p_system",
        d=2,
        flux=_psystem_flux,
        flux_tensor=_psystem_tensor,
        entropy=lambda u: 0.5 * u[1] ** 2 + 0.25 * u[0] ** 4 + 0.5 * u[0] ** 2,
        entropy_grad=lambda u: np.stack([pressure(u[0]), np.asarray(u[1], dtype=float)]),
        entropy_hessian=_psystem_hessian,
        entropy_flux=lambda u: -u[1] * pressure(u[0]),
        domain_box=np.array(box, dtype=float),
        intermediate_states={"roe": _w_psystem_roe, "central": _w_central, "upwind": _w_upwind},
        lipschitz={"roe": None, "central": 0.5, "upwind": 1.0},
        analytic_bounds=_psystem_bounds,
    )


MODELS = {"burgers": burgers_model, "p_system": p_system_model, "advection": advection_model}


def get_model(name: str, box=None) -> ConservationLawModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory() if box is None else factory(box=box)


def register_model(name: str, factory: Callable[..., ConservationLawModel]) -> None:
    MODELS[name] = factory


# --- numerical fluxes --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NumericalFlux:
    """F(u, v) = f(w(u, v)) with |w - u|, |w - v| <= L |u - v|."""

    kind: str
    model: ConservationLawModel
    w: Callable
    L: float

    def __call__(self, um, up):
        return self.model.flux(self.w(um, up))


def _box_samples(box: np.ndarray, n: int, rng) -> np.ndarray:
    lo, hi = box[:, 0], box[:, 1]
    return lo[:, None] + (hi - lo)[:, None] * rng.random((box.shape[0], n))


def empirical_lipschitz(model: ConservationLawModel, kind: str, box=None, n: int = 20000, seed: int = 7) -> float:
    """Largest sampled max(|w-u|, |w-v|)/|u-v| over pairs in the box."""
    box = model.domain_box if box is None else np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)
    um = _box_samples(box, n, rng)
    up = _box_samples(box, n, rng)
    # near-coincident pairs probe the derivative of w
    near = um[:, : n // 4] + 1e-4 * (box[:, 1:] - box[:, :1]) * rng.standard_normal((box.shape[0], n // 4))
    um = np.concatenate([um, um[:, : n // 4]], axis=1)
    up = np.concatenate([up, np.clip(near, box[:, :1], box[:, 1:])], axis=1)
    w = model.intermediate_states[kind](um, up)
    dist = np.linalg.norm(um - up, axis=0)
    keep = dist > 1e-12
    r = np.maximum(np.linalg.norm(w - um, axis=0), np.linalg.norm(w - up, axis=0))
    return float(np.max(r[keep] / dist[keep]))


def numerical_flux(model: ConservationLawModel, kind: str) -> NumericalFlux:
    if kind not in model.intermediate_states:
        raise ValueError(f"flux {kind!r} not available for model {model.name!r}; options: {model.flux_kinds}")
    L = model.lipschitz.get(kind)
    if L is None:
        # 10% safety margin over the sampled constant
        L = 1.1 * empirical_lipschitz(model, kind)
    return NumericalFlux(kind, model, model.intermediate_states[kind], float(L))


def intermediate_state(model: ConservationLawModel, kind: str, um, up) -> np.ndarray:
    um = _as_state(um, model.d)
    up = _as_state(up, model.d)
    if kind not in model.intermediate_states:
        raise ValueError(f"flux {kind!r} not available for model {model.name!r}")
    if not (np.all(np.isfinite(um)) and np.all(np.isfinite(up))):
        raise NonFiniteStateError("non-finite trace state")
    return model.intermediate_states[kind](um, up)


def relative_entropy(model: ConservationLawModel, v, w):
    """(eta(v|w), q(v|w)) for states v, w of shape (d, ...)."""
    v = _as_state(v, model.d)
    w = _as_state(w, model.d)
    grad = model.entropy_grad(w)
    eta = model.entropy(v) - model.entropy(w) - np.sum(grad * (v - w), axis=0)
    q = model.entropy_flux(v) - model.entropy_flux(w) - np.sum(grad * (model.flux(v) - model.flux(w)), axis=0)
    return eta, q


def bound_constants(model: ConservationLawModel, box=None, density: int = 41, analytic: bool = True) -> BoundConstants:
    """C_f, C_eta_lo, C_eta_hi over the box.

    The sampled route uses a tensor grid of ``density`` points per
    component and, for C_f, ``4 * density`` unit directions (d = 2).
    """
    box = model.domain_box if box is None else np.asarray(box, dtype=float)
    if analytic and model.analytic_bounds is not None:
        consts = model.analytic_bounds(box)
    else:
        axes = [np.linspace(lo, hi, density if hi > lo else 1) for lo, hi in box]
        grid = np.array(list(product(*axes))).T
        hess = np.moveaxis(model.entropy_hessian(grid), -1, 0)
        eig = np.linalg.eigvalsh(hess)
        d2f = model.flux_tensor(grid, 2)
        if model.d == 1:
            c_f = float(np.max(np.abs(d2f)))
        else:
            theta = np.linspace(0.0, np.pi, 4 * density, endpoint=False)
            dirs = np.stack([np.cos(theta), np.sin(theta)])
            quad = np.einsum("ijkp,jt,kt->ipt", d2f, dirs, dirs)
            c_f = float(np.max(np.linalg.norm(quad, axis=0)))
        consts = BoundConstants(c_f, float(eig.min()), float(eig.max()))
    if consts.c_eta_lo <= 0.0:
        raise ValueError(f"entropy of {model.name!r} is not strictly convex on the box")
    return consts


# --- composition derivatives ----------------------------------------------------


def _integer_partitions(m: int, largest: int | None = None):
    largest = m if largest is None else largest
    if m == 0:
        yield ()
        return
    for part in range(min(m, largest), 0, -1):
        for rest in _integer_partitions(m - part, part):
            yield (part,) + rest


def _faa_di_bruno_coefficient(blocks) -> int:
    m = sum(blocks)
    denom = 1
    for b in blocks:
        denom *= math.factorial(b)
    for b in set(blocks):
        denom *= math.factorial(blocks.count(b))
    return math.factorial(m) // denom


def composed_flux_derivative(model: ConservationLawModel, u_h: BrokenPolyField, m: int, xi) -> np.ndarray:
    """d^m/dx^m [Df(u_h(x))] at reference points ``xi`` in every cell.

    Returns shape (N, d, d, len(xi)). Uses Faa di Bruno's formula with the
    model's higher flux derivatives and the exact x-derivatives of u_h.
    """
    if m + 1 > model.smoothness_order:
        raise ValueError(f"order {m} exceeds the smoothness of model {model.name!r}")
    vals = u_h.cell_values(xi)  # (N, d, s)
    state = np.moveaxis(vals, 1, 0)  # (d, N, s)
    if m == 0:
        return np.moveaxis(model.flux_tensor(state, 1), (0, 1), (1, 2))
    ders = {j: np.moveaxis(u_h.cell_values(xi, j), 1, 0) for j in range(1, m + 1)}
    d = model.d
    out = np.zeros((d, d) + vals.shape[::2])
    letters = "abcdefgh"
    for blocks in _integer_partitions(m):
        k = len(blocks)
        tensor = model.flux_tensor(state, k + 1)
        sub = "ij" + letters[:k] + "ns"
        operands = [tensor] + [ders[b] for b in blocks]
        spec = sub + "," + ",".join(letters[q] + "ns" for q in range(k)) + "->ijns"
        out += _faa_di_bruno_coefficient(list(blocks)) * np.einsum(spec, *operands)
    return np.moveaxis(out, (0, 1), (1, 2))


def composed_flux_row_sup(model: ConservationLawModel, u_h: BrokenPolyField, m: int, xi) -> np.ndarray:
    """Per-cell sqrt(sum_i sup_x |row_i(d^m Df(u_h))|^2), shape (N,).

    Dominates the sampled operator norm and keeps componentwise product
    bounds valid for systems.
    """
    mat = composed_flux_derivative(model, u_h, m, xi)  # (N, d, d, s)
    rows = np.sqrt((mat**2).sum(axis=2)).max(axis=2)  # (N, d)
    return np.sqrt((rows**2).sum(axis=1))
