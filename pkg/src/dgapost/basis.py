"""Legendre modal bases, Gauss quadrature and broken polynomial fields.

Cell ``n`` of a mesh is mapped onto the reference interval ``[-1, 1]`` by
``xi = 2 (x - x_n) / h_n - 1`` and a field is stored as Legendre
coefficients per cell and component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial

import numpy as np
from numpy.polynomial import legendre as npleg


def legendre_table(kmax: int, xi, m: int = 0) -> np.ndarray:
    """m-th derivatives of l_0..l_kmax at the points ``xi``.

    Returns an array of shape ``(kmax + 1, len(xi))``. Uses Bonnet's
    recurrence differentiated m times:
    ``(k+1) l_{k+1}^(m) = (2k+1) (x l_k^(m) + m l_k^(m-1)) - k l_{k-1}^(m)``.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    prev = None  # table for derivative order j - 1
    for j in range(m + 1):
        tab = np.zeros((kmax + 1, xi.size))
        if j == 0:
            tab[0] = 1.0
        if kmax >= 1:
            tab[1] = xi if j == 0 else (1.0 if j == 1 else 0.0)
        for k in range(1, kmax):
            acc = xi * tab[k]
            if j:
                acc = acc + j * prev[k]
            tab[k + 1] = ((2 * k + 1) * acc - k * tab[k - 1]) / (k + 1)
        prev = tab
    return prev


def legendre_eval(k: int, m: int, xi):
    """d^m l_k / d xi^m at ``xi`` (scalar in, scalar out)."""
    if k < 0 or m < 0:
        raise ValueError("degree and derivative order must be non-negative")
    out = legendre_table(k, xi, m)[k]
    return float(out[0]) if np.ndim(xi) == 0 else out


def legendre_endpoint_derivative(k: int, m: int) -> float:
    """Exact d^m l_k/d xi^m at xi = 1; zero for m > k."""
    if m > k:
        return 0.0
    return factorial(k + m) / (2**m * factorial(m) * factorial(k - m))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.size


@lru_cache(maxsize=None)
def gauss_legendre(m: int) -> QuadratureRule:
    """m-point Gauss-Legendre rule on (-1, 1); exact to degree 2m - 1."""
    if m < 1:
        raise ValueError("need at least one quadrature point")
    x, w = npleg.leggauss(m)
    x.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(x, w)


def default_quadrature(p: int, extra: int = 0) -> QuadratureRule:
    # p + 3 points: exact for products of two degree-(p+1) fields and more
    return gauss_legendre(p + 3 + extra)


@lru_cache(maxsize=None)
def sample_points(p: int, factor: int = 4) -> np.ndarray:
    """Chebyshev-Gauss points (``factor * (p + 2)`` of them) plus both ends.

    Sup-norms of piecewise polynomials are estimated as maxima over these.
    """
    n = factor * (p + 2)
    j = np.arange(n)
    cheb = np.cos((2 * j + 1) * np.pi / (2 * n))
    pts = np.sort(np.concatenate([[-1.0], cheb, [1.0]]))
    pts.flags.writeable = False
    return pts


@dataclass(frozen=True)
class Mesh1D:
    """Periodic partition of ``[a, b]``.

    ``unit_nodes`` live on [0, 1]; physical nodes and widths come from the
    affine map ``x = a + (b - a) * s``.
    """

    unit_nodes: np.ndarray
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.unit_nodes, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("mesh needs at least one cell")
        if not np.all(np.diff(s) > 0):
            raise ValueError("mesh nodes must be strictly increasing")
        if not self.b > self.a:
            raise ValueError("empty interval")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "unit_nodes", s)

    @classmethod
    def uniform(cls, n_cells: int, a: float = 0.0, b: float = 1.0) -> "Mesh1D":
        return cls(np.linspace(0.0, 1.0, n_cells + 1), a, b)

    @property
    def n_cells(self) -> int:
        return self.unit_nodes.size - 1

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def nodes(self) -> np.ndarray:
        return self.a + self.length * self.unit_nodes

    @property
    def widths(self) -> np.ndarray:
        return self.length * np.diff(self.unit_nodes)

    @property
    def h(self) -> float:
        return float(self.widths.max())

    def wrap(self, x):
        return self.a + np.mod(np.asarray(x, dtype=float) - self.a, self.length)

    def locate(self, x, side: str = "right"):
        """Cell index and reference coordinate of physical points.

        At a node, ``side="left"`` selects the cell to the left of the node
        (the x^- trace) and ``side="right"`` the cell to its right.
        """
        if side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s = np.mod((x - self.a) / self.length, 1.0)
        nodes = self.unit_nodes
        n = self.n_cells
        # snap points within roundoff of a node onto it
        idx = np.clip(np.searchsorted(nodes, s), 0, n)
        for cand in (idx, np.maximum(idx - 1, 0)):
            close = np.abs(s - nodes[cand]) <= 1e-13
            s = np.where(close, nodes[cand], s)
        s = np.where(s >= 1.0, 0.0, s)
        cell = np.clip(np.searchsorted(nodes, s, side="right") - 1, 0, n - 1)
        xi = 2.0 * (s - nodes[cell]) / (nodes[cell + 1] - nodes[cell]) - 1.0
        if side == "left":
            on_node = s == nodes[cell]
            cell = np.where(on_node, (cell - 1) % n, cell)
            xi = np.where(on_node, 1.0, xi)
        return cell, np.clip(xi, -1.0, 1.0)

    def physical_points(self, xi) -> np.ndarray:
        """Physical coordinates of reference points in every cell, (N, len(xi))."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        x0 = self.nodes[:-1]
        return x0[:, None] + 0.5 * (xi[None, :] + 1.0) * self.widths[:, None]


def scaled_basis_eval(mesh: Mesh1D, n: int, k: int, m: int, x):
    """d^m l_k^n / dx^m at physical ``x`` in cell ``n``."""
    if not 0 <= n < mesh.n_cells:
        raise IndexError(f"cell {n} out of range for {mesh.n_cells} cells")
    x0 = mesh.nodes[n]
    h = mesh.widths[n]
    xi = 2.0 * (np.asarray(x, dtype=float) - x0) / h - 1.0
    return (2.0 / h) ** m * legendre_eval(k, m, xi)


@dataclass(frozen=True)
class BrokenPolyField:
    """Piecewise polynomial with Legendre coefficients ``coeffs[n, i, k]``."""

    mesh: Mesh1D
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[0] != self.mesh.n_cells:
            raise ValueError(
                f"coefficients must have shape (N={self.mesh.n_cells}, d, degree+1), got {c.shape}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, mesh: Mesh1D, degree: int, components: int = 1) -> "BrokenPolyField":
        return cls(mesh, np.zeros((mesh.n_cells, components, degree + 1)))

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def components(self) -> int:
        return self.coeffs.shape[1]

    def with_coeffs(self, coeffs) -> "BrokenPolyField":
        return BrokenPolyField(self.mesh, coeffs)

    def raise_degree(self, degree: int) -> "BrokenPolyField":
        if degree < self.degree:
            raise ValueError("cannot lower the degree by padding")
        pad = degree - self.degree
        return self.with_coeffs(np.pad(self.coeffs, ((0, 0), (0, 0), (0, pad))))

    def cell_values(self, xi, m: int = 0) -> np.ndarray:
        """x-derivatives of order m at reference points in all cells, (N, d, s)."""
        tab = legendre_table(self.degree, xi, m)
        vals = self.coeffs @ tab
        if m:
            vals = vals * ((2.0 / self.mesh.widths) ** m)[:, None, None]
        return vals

    def left_traces(self) -> np.ndarray:
        """u(x_n^+) for every cell n, shape (N, d)."""
        signs = (-1.0) ** np.arange(self.degree + 1)
        return self.coeffs @ signs

    def right_traces(self) -> np.ndarray:
        """u(x_{n+1}^-) for every cell n, shape (N, d)."""
        return self.coeffs.sum(axis=2)

    def __call__(self, x, side: str = "right") -> np.ndarray:
        """Values at physical points, shape (len(x), d).

        ``side`` only matters at nodes: "left" gives the x^- trace.
        """
        cell, xi = self.mesh.locate(x, side)
        out = np.empty((cell.size, self.components))
        for q in range(cell.size):
            tab = legendre_table(self.degree, xi[q])[:, 0]
            out[q] = self.coeffs[cell[q]] @ tab
        return out

    def __add__(self, other: "BrokenPolyField") -> "BrokenPolyField":
        deg = max(self.degree, other.degree)
        return self.with_coeffs(self.raise_degree(deg).coeffs + other.raise_degree(deg).coeffs)

    def __sub__(self, other: "BrokenPolyField") -> "BrokenPolyField":
        deg = max(self.degree, other.degree)
        return self.with_coeffs(self.raise_degree(deg).coeffs - other.raise_degree(deg).coeffs)

    def scale(self, factor: float) -> "BrokenPolyField":
        return self.with_coeffs(factor * self.coeffs)


def project_cell_values(values: np.ndarray, degree: int, quad: QuadratureRule) -> np.ndarray:
    """Legendre coefficients of the L2 projection from values at quad nodes.

    ``values`` has shape (N, d, quad.size); result is (N, d, degree + 1).
    """
    tab = legendre_table(degree, quad.nodes)
    scale = (2 * np.arange(degree + 1) + 1) / 2.0
    return (values * quad.weights) @ tab.T * scale


def _as_components(vals, npts: int) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[None, :]
    if vals.shape[-1] != npts:
        raise ValueError("sampler must return shape (d, len(x)) or (len(x),)")
    return vals


def project(sampler, degree: int, mesh: Mesh1D, quad: QuadratureRule | None = None) -> BrokenPolyField:
    """L2 projection of ``sampler`` onto piecewise polynomials of ``degree``.

    ``sampler`` maps a 1-D array of physical points to an array of shape
    ``(d, len(x))`` (or ``(len(x),)`` for scalar fields).
    """
    quad = quad or default_quadrature(degree)
    x = mesh.physical_points(quad.nodes)
    vals = _as_components(sampler(x.ravel()), x.size)
    d = vals.shape[0]
    vals = vals.reshape(d, mesh.n_cells, quad.size).transpose(1, 0, 2)
    return BrokenPolyField(mesh, project_cell_values(vals, degree, quad))


@lru_cache(maxsize=None)
def _reference_inverse_ratio(k: int) -> float:
    if k == 0:
        return 0.0
    from scipy.linalg import eigh

    quad = gauss_legendre(k + 2)
    vals = legendre_table(k, quad.nodes)
    ders = legendre_table(k, quad.nodes, 1)
    mass = (vals * quad.weights) @ vals.T
    stiff = (ders * quad.weights) @ ders.T
    return float(np.sqrt(eigh(stiff, mass, eigvals_only=True)[-1]))


def inverse_constant(k: int) -> float:
    """Sharp C_inv with ||phi'||_{L2(J)} <= C_inv / |J| * ||phi||_{L2(J)} on P^k.

    The reference ratio on (-1, 1) is the square root of the largest
    generalised eigenvalue of stiffness against mass; mapping onto an
    interval of length |J| multiplies derivatives by 2/|J|, so the returned
    value is twice the reference ratio (k = 1 gives 2*sqrt(3)).
    """
    if k < 0:
        raise ValueError("degree must be non-negative")
    return 2.0 * _reference_inverse_ratio(k)


@lru_cache(maxsize=None)
def projection_lebesgue_constant(p: int) -> float:
    """L-infinity operator norm of the L2 projection onto P^p on one cell."""
    xs = np.linspace(-1.0, 1.0, 801)
    tab_x = legendre_table(p, xs)
    scale = (2 * np.arange(p + 1) + 1) / 2.0
    # the kernel is only piecewise smooth in y after taking |.|: dense midpoint sum
    ys = np.linspace(-1.0, 1.0, 20001)
    ym = 0.5 * (ys[1:] + ys[:-1])
    kernel = (tab_x.T * scale) @ legendre_table(p, ym)
    return float(np.max(np.abs(kernel).sum(axis=1) * (ys[1] - ys[0])))


def projection_constant_bound(p: int) -> float:
    """Upper bound for C_p in ||psi - P_p psi||_inf <= C_p h^{p+1} |psi|_{W^{p+1,inf}}.

    (1 + Lebesgue constant) times the Chebyshev interpolation error
    constant ``2 / (4^{p+1} (p+1)!)`` on an interval of length h.
    """
    return (1.0 + projection_lebesgue_constant(p)) * 2.0 / (4.0 ** (p + 1) * factorial(p + 1))


@dataclass(frozen=True)
class BasisConstants:
    """Analytic constants for scheme degree ``p``.

    ``b_k[k] = |l_p|_{k,inf} + |l_{p+1}|_{k,inf}`` on (-1, 1), k = 0..p+1,
    ``b`` is the corresponding full W^{p+1,inf} sum, ``alpha[k] = l_k'(1)``.
    """

    p: int
    alpha: np.ndarray
    b_k: np.ndarray
    b: float
    c_inv: np.ndarray
    c_p: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def c_inv_p(self) -> float:
        return float(self.c_inv[self.p])


def basis_constants(p: int, c_p: float = 1.0) -> BasisConstants:
    if p < 0:
        raise ValueError("degree must be non-negative")
    alpha = np.array([k * (k + 1) / 2.0 for k in range(p + 3)])
    b_k = np.array(
        [legendre_endpoint_derivative(p, k) + legendre_endpoint_derivative(p + 1, k) for k in range(p + 2)]
    )
    c_inv = np.array([inverse_constant(k) for k in range(p + 2)])
    return BasisConstants(p=p, alpha=alpha, b_k=b_k, b=float(b_k.sum()), c_inv=c_inv, c_p=c_p)


def binomial(n: int, k: int) -> int:
    return comb(n, k)


# --- norms -----------------------------------------------------------------


def l2_norms(f: BrokenPolyField) -> np.ndarray:
    """Per-cell L2 norms (Euclidean over components), exact for the polynomial."""
    k = np.arange(f.degree + 1)
    cell_sq = (f.coeffs**2 * (1.0 / (2 * k + 1))).sum(axis=(1, 2)) * f.mesh.widths
    return np.sqrt(cell_sq)


def l2_norm(f: BrokenPolyField) -> float:
    return float(np.sqrt(np.sum(l2_norms(f) ** 2)))


def sup_norms(f: BrokenPolyField, m: int = 0, p: int | None = None, factor: int = 4) -> np.ndarray:
    """Sampled per-cell sup of |d^m f / dx^m| (Euclidean over components)."""
    pts = sample_points(f.degree if p is None else p, factor)
    vals = f.cell_values(pts, m)
    return np.sqrt((vals**2).sum(axis=1)).max(axis=1)


def norms(f: BrokenPolyField, cell: int | None = None, factor: int = 4) -> dict:
    """L2, sampled L-infinity and sampled W^{1,inf} norms, per cell or global."""
    l2 = l2_norms(f)
    linf = sup_norms(f, 0, factor=factor)
    d1 = sup_norms(f, 1, factor=factor)
    if cell is not None:
        return {"l2": float(l2[cell]), "linf": float(linf[cell]), "w1inf": float(linf[cell] + d1[cell])}
    return {
        "l2": float(np.sqrt(np.sum(l2**2))),
        "linf": float(linf.max()),
        "w1inf": float(linf.max() + d1.max()),
    }
