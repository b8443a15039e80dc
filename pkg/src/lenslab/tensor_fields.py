"""Symmetric 2-tensor and 1-form fields on a square grid over the disc.

Fields live on the nodes of an ``n x n`` grid on ``[-a, a]^2``. Values are
kept on the *support*: the disc plus a collar of nodes just outside it, wide
enough that the interpolation stencil (4 x 4 for the default local bicubic
rule, 2 x 2 for bilinear) of every point of the closed disc carries data. Integrals over the disc use a node quadrature whose weights are
cut-cell areas corrected so that polynomial moments are reproduced exactly.

Vector fields are stored covariantly (as 1-forms), which is the natural
index position for ``dv`` and for the divergence of a 2-tensor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as L
from scipy import sparse
from scipy.special import roots_legendre

from .metric_chart import MetricChart

DEFAULT_N = 65
DEFAULT_HALF_WIDTH = 1.05
COLLAR = {"linear": np.sqrt(2.0), "cubic": 3.0 * np.sqrt(2.0)}
INTERPOLATION_ORDERS = tuple(COLLAR)
_PAIRS = ((0, 0), (0, 1), (1, 1))


class GridMismatchError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# grid and quadrature
# --------------------------------------------------------------------------


def disc_moments(degree: int) -> np.ndarray:
    """Integrals over the unit disc of ``P_i(x) P_j(y)`` for ``i + j <= degree``."""
    r, wr = roots_legendre(degree // 2 + 4)
    r = 0.5 * (r + 1.0)
    wr = 0.5 * wr
    nt = 2 * degree + 8
    t = 2.0 * np.pi * np.arange(nt) / nt
    R, T = np.meshgrid(r, t, indexing="ij")
    W = (wr[:, None] * R) * (2.0 * np.pi / nt)
    x, y = (R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()
    return legendre_products(x, y, degree).T @ W.ravel()


def legendre_products(x, y, degree: int) -> np.ndarray:
    """Columns ``P_i(x) P_j(y)``, ``i + j <= degree``, ordered by total degree."""
    vx = L.legvander(x, degree)
    vy = L.legvander(y, degree)
    cols = [vx[:, i] * vy[:, d - i] for d in range(degree + 1) for i in range(d + 1)]
    return np.stack(cols, axis=1)


class TensorGrid:
    """Square node grid with the disc mask, the interpolation support and the
    disc quadrature.

    Parameters
    ----------
    n : int
        Nodes per side.
    half_width : float
        The grid covers ``[-half_width, half_width]^2``.
    quad_degree : int
        Highest total polynomial degree integrated exactly by the weights
        (lowered automatically if the corrected weights would turn negative).
    interp : {"cubic", "linear"}
        Interpolation rule used to evaluate grid fields off the nodes; it
        sets the collar width.
    """

    def __init__(self, n: int = DEFAULT_N, half_width: float = DEFAULT_HALF_WIDTH,
                 quad_degree: int = 30, interp: str = "cubic"):
        if n < 5:
            raise ValueError("grid needs at least 5 nodes per side")
        if half_width <= 1.0:
            raise ValueError("grid must cover the closed unit disc")
        if interp not in COLLAR:
            raise ValueError(f"interp must be one of {INTERPOLATION_ORDERS}")
        self.interp = interp
        self.n = int(n)
        self.half_width = float(half_width)
        self.xs = np.linspace(-half_width, half_width, n)
        self.h = float(self.xs[1] - self.xs[0])
        X, Y = np.meshgrid(self.xs, self.xs, indexing="ij")
        self.X, self.Y = X, Y
        self.points = np.stack([X.ravel(), Y.ravel()], axis=1)
        self.radius = np.hypot(X, Y)
        self.inside = self.radius <= 1.0 + 1e-12
        self.support = self.radius <= 1.0 + COLLAR[interp] * self.h * (1 + 1e-9)
        self.support_idx = np.flatnonzero(self.support.ravel())
        self.quad_degree_requested = int(quad_degree)
        self._geometry: dict = {}

    def __eq__(self, other):
        return (isinstance(other, TensorGrid) and self.n == other.n
                and self.half_width == other.half_width and self.interp == other.interp)

    def __hash__(self):
        return hash((self.n, self.half_width, self.interp))

    def __repr__(self):
        return f"TensorGrid(n={self.n}, half_width={self.half_width}, interp={self.interp!r})"

    @property
    def n_support(self) -> int:
        return self.support_idx.size

    @property
    def support_points(self) -> np.ndarray:
        return self.points[self.support_idx]

    def _cut_cell_areas(self, sub: int = 24) -> np.ndarray:
        off = (np.arange(sub) + 0.5) / sub - 0.5
        ox, oy = np.meshgrid(off * self.h, off * self.h, indexing="ij")
        ox, oy = ox.ravel(), oy.ravel()
        pts = self.points[self.inside.ravel()]
        px = pts[:, 0:1] + ox[None]
        py = pts[:, 1:2] + oy[None]
        frac = np.mean(px * px + py * py <= 1.0, axis=1)
        return frac * self.h * self.h

    @cached_property
    def _quadrature(self):
        idx = np.flatnonzero(self.inside.ravel())
        pts = self.points[idx]
        w0 = self._cut_cell_areas()
        for deg in range(self.quad_degree_requested, -1, -1):
            V = legendre_products(pts[:, 0], pts[:, 1], deg).T
            if V.shape[0] >= idx.size:
                continue
            rhs = disc_moments(deg) - V @ w0
            z, *_ = np.linalg.lstsq(V * w0[None], rhs, rcond=None)
            w = w0 + w0 * z
            if np.all(w > 0):
                return idx, w, deg
        return idx, w0, -1

    @property
    def quad_degree(self) -> int:
        return self._quadrature[2]

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weight per grid node (zero off the disc), shape ``(n, n)``."""
        idx, w, _ = self._quadrature
        out = np.zeros(self.n * self.n)
        out[idx] = w
        return out.reshape(self.n, self.n)

    def integrate(self, values) -> float:
        return float(np.sum(self.weights * np.asarray(values)))

    def geometry(self, chart: MetricChart) -> "GridGeometry":
        key = chart.fingerprint()
        geo = self._geometry.get(key)
        if geo is None:
            geo = GridGeometry(chart, self)
            self._geometry[key] = geo
        return geo

    def check(self, other: "TensorGrid") -> None:
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self!r} vs {other!r}")


def clamp_to_chart(chart: MetricChart, pts: np.ndarray) -> np.ndarray:
    """Radially pull points beyond the extended chart back onto its edge.

    Charts with closed-form metrics defined on the whole plane are left
    alone, so collar values stay smooth.
    """
    if getattr(chart, "defined_everywhere", False):
        return pts
    r = np.hypot(pts[..., 0], pts[..., 1])
    lim = chart.extended_radius
    scale = np.where(r > lim, lim / np.maximum(r, 1e-300), 1.0)
    return pts * scale[..., None]


class GridGeometry:
    """Metric quantities at every grid node (collar nodes beyond a tabulated
    chart use the radially clamped point)."""

    def __init__(self, chart: MetricChart, grid: TensorGrid):
        pts = clamp_to_chart(chart, grid.points)
        self.g = chart._metric(pts).reshape(grid.n, grid.n, 2, 2)
        self.ginv = np.linalg.inv(self.g)
        self.sqrt_det = np.sqrt(np.linalg.det(self.g))
        self.gamma = chart._christoffel(pts).reshape(grid.n, grid.n, 2, 2, 2)
        h = self.ginv
        G = np.empty((grid.n, grid.n, 3, 3))
        G[..., 0, 0] = h[..., 0, 0] ** 2
        G[..., 0, 1] = G[..., 1, 0] = 2 * h[..., 0, 0] * h[..., 0, 1]
        G[..., 0, 2] = G[..., 2, 0] = h[..., 0, 1] ** 2
        G[..., 1, 1] = 2 * (h[..., 0, 0] * h[..., 1, 1] + h[..., 0, 1] ** 2)
        G[..., 1, 2] = G[..., 2, 1] = 2 * h[..., 0, 1] * h[..., 1, 1]
        G[..., 2, 2] = h[..., 1, 1] ** 2
        # pointwise pairing <a, b> = a^T G b on (f11, f12, f22)
        self.tensor_gram = G


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------


@dataclass
class SymTensorField:
    """Components ``f11, f12, f22`` on the grid nodes, zero off the support."""

    grid: TensorGrid
    f11: np.ndarray
    f12: np.ndarray
    f22: np.ndarray

    def __post_init__(self):
        for name in ("f11", "f12", "f22"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (self.grid.n, self.grid.n):
                raise GridMismatchError(f"{name} has shape {a.shape}")
            a[~self.grid.support] = 0.0
            setattr(self, name, a)

    @classmethod
    def zeros(cls, grid: TensorGrid) -> "SymTensorField":
        z = np.zeros((grid.n, grid.n))
        return cls(grid, z, z, z)

    @classmethod
    def from_callable(cls, grid: TensorGrid, fn) -> "SymTensorField":
        """Sample ``fn(points) -> (..., 2, 2)`` at every support node."""
        vals = np.zeros((grid.n * grid.n, 2, 2))
        vals[grid.support_idx] = np.asarray(fn(grid.support_points), dtype=float)
        vals = vals.reshape(grid.n, grid.n, 2, 2)
        return cls(grid, vals[..., 0, 0], 0.5 * (vals[..., 0, 1] + vals[..., 1, 0]), vals[..., 1, 1])

    @classmethod
    def from_vector(cls, grid: TensorGrid, vec: np.ndarray) -> "SymTensorField":
        """Inverse of :meth:`to_vector`."""
        vec = np.asarray(vec, dtype=float)
        m = grid.n_support
        comps = []
        for c in range(3):
            a = np.zeros(grid.n * grid.n)
            a[grid.support_idx] = vec[c * m:(c + 1) * m]
            comps.append(a.reshape(grid.n, grid.n))
        return cls(grid, *comps)

    def to_vector(self) -> np.ndarray:
        """Stack the support values as ``[f11, f12, f22]``."""
        idx = self.grid.support_idx
        return np.concatenate([self.f11.ravel()[idx], self.f12.ravel()[idx], self.f22.ravel()[idx]])

    def stacked(self) -> np.ndarray:
        return np.stack([self.f11, self.f12, self.f22], axis=-1)

    def matrix(self) -> np.ndarray:
        out = np.empty((self.grid.n, self.grid.n, 2, 2))
        out[..., 0, 0] = self.f11
        out[..., 0, 1] = out[..., 1, 0] = self.f12
        out[..., 1, 1] = self.f22
        return out

    def _binary(self, other, op):
        self.grid.check(other.grid)
        return SymTensorField(self.grid, op(self.f11, other.f11), op(self.f12, other.f12),
                              op(self.f22, other.f22))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, a: float):
        return SymTensorField(self.grid, a * self.f11, a * self.f12, a * self.f22)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def max_abs(self, where: np.ndarray | None = None) -> float:
        m = self.grid.support if where is None else where
        return float(max(np.max(np.abs(c[m])) for c in (self.f11, self.f12, self.f22)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "f11", "f12", "f22"])
            for i in range(self.grid.n):
                for j in range(self.grid.n):
                    w.writerow([repr(float(self.grid.xs[i])), repr(float(self.grid.xs[j])),
                                repr(float(self.f11[i, j])), repr(float(self.f12[i, j])),
                                repr(float(self.f22[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "SymTensorField":
        with open(path, newline="") as fh:
            rows = [[float(r[k]) for k in ("x", "y", "f11", "f12", "f22")]
                    for r in csv.DictReader(ln for ln in fh if not ln.startswith("#"))]
        data = np.array(rows)
        xs = np.unique(data[:, 0])
        if xs.size * xs.size != data.shape[0]:
            raise GridMismatchError(f"{path}: not a full square grid")
        grid = TensorGrid(xs.size, float(xs[-1]))
        ix = np.rint((data[:, 0] - xs[0]) / grid.h).astype(int)
        iy = np.rint((data[:, 1] - xs[0]) / grid.h).astype(int)
        comps = [np.zeros((xs.size, xs.size)) for _ in range(3)]
        for c in range(3):
            comps[c][ix, iy] = data[:, 2 + c]
        return cls(grid, *comps)


@dataclass
class VectorFieldGrid:
    """Covariant components ``v1, v2`` on the grid nodes."""

    grid: TensorGrid
    v1: np.ndarray
    v2: np.ndarray
    dirichlet: bool = False

    def __post_init__(self):
        for name in ("v1", "v2"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (self.grid.n, self.grid.n):
                raise GridMismatchError(f"{name} has shape {a.shape}")
            a[~self.grid.support] = 0.0
            setattr(self, name, a)

    @classmethod
    def from_callable(cls, grid: TensorGrid, fn, dirichlet: bool = False) -> "VectorFieldGrid":
        vals = np.zeros((grid.n * grid.n, 2))
        vals[grid.support_idx] = np.asarray(fn(grid.support_points), dtype=float)
        vals = vals.reshape(grid.n, grid.n, 2)
        return cls(grid, vals[..., 0], vals[..., 1], dirichlet)

    def stacked(self) -> np.ndarray:
        return np.stack([self.v1, self.v2], axis=-1)

    def max_abs(self, where: np.ndarray | None = None) -> float:
        m = self.grid.support if where is None else where
        return float(max(np.max(np.abs(self.v1[m])), np.max(np.abs(self.v2[m]))))

    def boundary_violation(self) -> float:
        """Largest |v| on nodes within one cell of the circle."""
        band = np.abs(self.grid.radius - 1.0) <= self.grid.h
        return float(np.max(np.hypot(self.v1, self.v2)[band & self.grid.support]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "v1", "v2"])
            for i in range(self.grid.n):
                for j in range(self.grid.n):
                    w.writerow([repr(float(self.grid.xs[i])), repr(float(self.grid.xs[j])),
                                repr(float(self.v1[i, j])), repr(float(self.v2[i, j]))])


# --------------------------------------------------------------------------
# inner products
# --------------------------------------------------------------------------


def l2_inner(chart: MetricChart, a: SymTensorField, b: SymTensorField) -> float:
    """``int_M g^ik g^jl a_ij b_kl dV_g`` by the grid quadrature."""
    a.grid.check(b.grid)
    geo = a.grid.geometry(chart)
    dens = np.einsum("...a,...ab,...b->...", a.stacked(), geo.tensor_gram, b.stacked())
    return a.grid.integrate(dens * geo.sqrt_det)


def l2_norm(chart: MetricChart, a: SymTensorField) -> float:
    return float(np.sqrt(max(l2_inner(chart, a, a), 0.0)))


def vector_inner(chart: MetricChart, u: VectorFieldGrid, v: VectorFieldGrid) -> float:
    u.grid.check(v.grid)
    geo = u.grid.geometry(chart)
    dens = np.einsum("...i,...ij,...j->...", u.stacked(), geo.ginv, v.stacked())
    return u.grid.integrate(dens * geo.sqrt_det)


def vector_norm(chart: MetricChart, v: VectorFieldGrid) -> float:
    return float(np.sqrt(max(vector_inner(chart, v, v), 0.0)))


def tensor_mass_diagonal_blocks(chart: MetricChart, grid: TensorGrid,
                                collar_weight: float = 0.25) -> np.ndarray:
    """Per-support-node 3x3 blocks of the tensor mass matrix.

    Nodes off the disc carry no quadrature weight; they get
    ``collar_weight * h^2`` so that the matrix is positive definite on the
    whole support.
    """
    geo = grid.geometry(chart)
    w = grid.weights.copy()
    collar = grid.support & ~grid.inside
    w[collar] = collar_weight * grid.h**2
    blocks = geo.tensor_gram * (w * geo.sqrt_det)[..., None, None]
    return blocks.reshape(-1, 3, 3)[grid.support_idx]


def tensor_mass_matrix(chart: MetricChart, grid: TensorGrid, collar_weight: float = 0.25):
    """Sparse mass matrix on ``SymTensorField.to_vector`` coordinates."""
    blocks = tensor_mass_diagonal_blocks(chart, grid, collar_weight)
    m = grid.n_support
    rows, cols, vals = [], [], []
    base = np.arange(m)
    for a in range(3):
        for b in range(3):
            rows.append(a * m + base)
            cols.append(b * m + base)
            vals.append(blocks[:, a, b])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(3 * m, 3 * m))


# --------------------------------------------------------------------------
# finite-difference operators
# --------------------------------------------------------------------------


def _fd_weights(offsets: np.ndarray) -> np.ndarray:
    """First-derivative weights (unit spacing) on the given integer offsets."""
    k = offsets.size
    V = np.vander(offsets.astype(float), k, increasing=True).T
    rhs = np.zeros(k)
    rhs[1] = 1.0
    return np.linalg.solve(V, rhs)


@dataclass
class _DiffOps:
    dx: sparse.csr_matrix
    dy: sparse.csr_matrix


def _diff_ops(grid: TensorGrid) -> _DiffOps:
    cached = getattr(grid, "_diff_cache", None)
    if cached is not None:
        return cached
    n = grid.n
    sup = grid.support
    out = []
    for axis in (0, 1):
        rows, cols, vals = [], [], []
        for i in range(n):
            for j in range(n):
                if not sup[i, j]:
                    continue
                # contiguous supported run through the node along the axis
                lo = 0
                while lo > -4:
                    ii, jj = (i + lo - 1, j) if axis == 0 else (i, j + lo - 1)
                    if 0 <= ii < n and 0 <= jj < n and sup[ii, jj]:
                        lo -= 1
                    else:
                        break
                hi = 0
                while hi < 4:
                    ii, jj = (i + hi + 1, j) if axis == 0 else (i, j + hi + 1)
                    if 0 <= ii < n and 0 <= jj < n and sup[ii, jj]:
                        hi += 1
                    else:
                        break
                if hi - lo + 1 < 2:
                    continue
                width = min(5, hi - lo + 1)
                start = min(max(-(width // 2), lo), hi - width + 1)
                offs = np.arange(start, start + width)
                wts = _fd_weights(offs) / grid.h
                r = i * n + j
                for o, wt in zip(offs, wts):
                    c = (i + o) * n + j if axis == 0 else i * n + j + o
                    rows.append(r)
                    cols.append(c)
                    vals.append(wt)
        out.append(sparse.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n)))
    ops = _DiffOps(*out)
    grid._diff_cache = ops
    return ops


def _grad(grid: TensorGrid, a: np.ndarray) -> np.ndarray:
    ops = _diff_ops(grid)
    flat = a.ravel()
    return np.stack([(ops.dx @ flat).reshape(a.shape), (ops.dy @ flat).reshape(a.shape)], axis=-1)


def sym_differential(chart: MetricChart, v: VectorFieldGrid) -> SymTensorField:
    """``(dv)_ij = 1/2 (d_i v_j + d_j v_i) - Gamma^k_ij v_k`` with fourth-order
    differences (one-sided near the edge of the support)."""
    grid = v.grid
    geo = grid.geometry(chart)
    d1 = _grad(grid, v.v1)  # [..., i] = d_i v_1
    d2 = _grad(grid, v.v2)
    vv = v.stacked()
    corr = np.einsum("...kij,...k->...ij", geo.gamma, vv)
    f11 = d1[..., 0] - corr[..., 0, 0]
    f22 = d2[..., 1] - corr[..., 1, 1]
    f12 = 0.5 * (d1[..., 1] + d2[..., 0]) - corr[..., 0, 1]
    return SymTensorField(grid, f11, f12, f22)


def divergence(chart: MetricChart, f: SymTensorField) -> VectorFieldGrid:
    """``(delta f)_i = g^jk nabla_k f_ij`` as a 1-form field."""
    grid = f.grid
    geo = grid.geometry(chart)
    F = f.matrix()
    dF = np.empty(F.shape + (2,))  # [..., i, j, k] = d_k f_ij
    for i, j in _PAIRS:
        d = _grad(grid, F[..., i, j])
        dF[..., i, j, :] = d
        dF[..., j, i, :] = d
    gam = geo.gamma
    # nabla_k f_ij = d_k f_ij - Gamma^m_ki f_mj - Gamma^m_kj f_im
    nab = (dF
           - np.einsum("...mki,...mj->...ijk", gam, F)
           - np.einsum("...mkj,...im->...ijk", gam, F))
    out = np.einsum("...jk,...ijk->...i", geo.ginv, nab)
    return VectorFieldGrid(grid, out[..., 0], out[..., 1])


def divergence_profile(chart: MetricChart, f: SymTensorField, band: float = 2.0) -> dict:
    """RMS of the strong divergence in the interior and in a band of ``band``
    cells along the circle; extending by zero makes the edge value spike."""
    div = divergence(chart, f)
    mag = np.hypot(div.v1, div.v2)
    r = f.grid.radius
    edge = f.grid.inside & (r > 1.0 - band * f.grid.h)
    inner = f.grid.inside & ~edge
    rms = lambda m: float(np.sqrt(np.mean(mag[m] ** 2))) if np.any(m) else 0.0  # noqa: E731
    return {"interior_rms": rms(inner), "edge_rms": rms(edge)}


# --------------------------------------------------------------------------
# Dirichlet polynomial basis and solenoidal decomposition
# --------------------------------------------------------------------------


def default_basis_degree(grid: TensorGrid) -> int:
    """Polynomial degree of the Dirichlet basis: about four nodes per degree,
    at most 14."""
    return int(min(14, (grid.n - 1) // 4))


class DirichletBasis:
    """1-forms ``(1 - |x|^2) P_i(x) P_j(y) e^c`` with ``i + j <= degree``.

    Every member vanishes on the circle. ``dv`` of a member is available in
    closed form from the chart's Christoffel symbols, so potential tensors
    are exact at any point, on or off the grid.
    """

    def __init__(self, degree: int):
        self.degree = int(degree)
        self.n_scalar = (self.degree + 1) * (self.degree + 2) // 2
        self.size = 2 * self.n_scalar

    def _scalar(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        vx, vy = L.legvander(x, self.degree), L.legvander(y, self.degree)
        dvx = np.stack([L.legval(x, L.legder(np.eye(self.degree + 1)[k])) for k in range(self.degree + 1)], 1)
        dvy = np.stack([L.legval(y, L.legder(np.eye(self.degree + 1)[k])) for k in range(self.degree + 1)], 1)
        idx = [(i, d - i) for d in range(self.degree + 1) for i in range(d + 1)]
        P = np.stack([vx[:, i] * vy[:, j] for i, j in idx], 1)
        Px = np.stack([dvx[:, i] * vy[:, j] for i, j in idx], 1)
        Py = np.stack([vx[:, i] * dvy[:, j] for i, j in idx], 1)
        b = (1.0 - x * x - y * y)[:, None]
        phi = b * P
        phix = -2.0 * x[:, None] * P + b * Px
        phiy = -2.0 * y[:, None] * P + b * Py
        return phi, phix, phiy

    def values(self, pts) -> np.ndarray:
        """``(npts, size, 2)`` covariant components of every basis 1-form."""
        phi, _, _ = self._scalar(pts)
        out = np.zeros((pts.shape[0], self.size, 2))
        out[:, :self.n_scalar, 0] = phi
        out[:, self.n_scalar:, 1] = phi
        return out

    def sym_differentials(self, chart: MetricChart, pts) -> np.ndarray:
        """``(npts, size, 3)``: ``(dv)_11, (dv)_12, (dv)_22`` of every member."""
        phi, phix, phiy = self._scalar(pts)
        gam = chart._christoffel(clamp_to_chart(chart, pts))
        m = self.n_scalar
        out = np.zeros((pts.shape[0], self.size, 3))
        for c in range(2):
            sl = slice(c * m, (c + 1) * m)
            dphi = (phix, phiy)
            # 1/2 (d_i phi delta_jc + d_j phi delta_ic) - Gamma^c_ij phi
            for a, (i, j) in enumerate(_PAIRS):
                lin = 0.5 * ((dphi[i] if j == c else 0.0) + (dphi[j] if i == c else 0.0))
                out[:, sl, a] = lin - gam[:, c, i, j][:, None] * phi
        return out


@dataclass
class PotentialField:
    """A Dirichlet 1-form given by basis coefficients; evaluates anywhere."""

    chart: MetricChart
    basis: DirichletBasis
    coef: np.ndarray

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.einsum("pbc,b->pc", self.basis.values(pts), self.coef)

    def sym_differential(self, pts) -> np.ndarray:
        """``(npts, 2, 2)`` values of ``dv``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        comp = np.einsum("pba,b->pa", self.basis.sym_differentials(self.chart, pts), self.coef)
        out = np.empty((pts.shape[0], 2, 2))
        out[:, 0, 0] = comp[:, 0]
        out[:, 0, 1] = out[:, 1, 0] = comp[:, 1]
        out[:, 1, 1] = comp[:, 2]
        return out

    def on_grid(self, grid: TensorGrid) -> VectorFieldGrid:
        # collar nodes keep the polynomial extension (|v| = O(h) there) so
        # that difference stencils see a smooth field across the circle
        return VectorFieldGrid.from_callable(grid, self, dirichlet=True)

    def dv_on_grid(self, grid: TensorGrid) -> SymTensorField:
        return SymTensorField.from_callable(grid, self.sym_differential)


def random_dirichlet_field(chart: MetricChart, degree: int = 4, seed: int = 0,
                           decay: float = 1.0) -> PotentialField:
    """Random smooth Dirichlet 1-form; coefficients decay with polynomial degree."""
    basis = DirichletBasis(degree)
    rng = np.random.default_rng(seed)
    deg = np.concatenate([[d] * (d + 1) for d in range(degree + 1)] * 2)
    coef = rng.standard_normal(basis.size) / (1.0 + deg) ** decay
    return PotentialField(chart, basis, coef)


class _Projector:
    """Weighted least-squares projection onto ``d(span basis)`` on one grid."""

    def __init__(self, chart: MetricChart, grid: TensorGrid, basis: DirichletBasis):
        self.grid = grid
        self.basis = basis
        geo = grid.geometry(chart)
        sup = grid.support_idx
        pts = grid.points[sup]
        self.B = basis.sym_differentials(chart, pts)  # (m, K, 3)
        w = (grid.weights * geo.sqrt_det).ravel()[sup]
        G = geo.tensor_gram.reshape(-1, 3, 3)[sup]
        Lc = np.linalg.cholesky(G)  # G = L L^T
        self.rows = np.flatnonzero(w > 0)
        # whitened design: sqrt(w) L^T B
        self.Lt = np.transpose(Lc, (0, 2, 1))[self.rows] * np.sqrt(w[self.rows])[:, None, None]
        D = np.einsum("rab,rkb->rak", self.Lt, self.B[self.rows]).reshape(-1, basis.size)
        Q, R = np.linalg.qr(D)
        d = np.abs(np.diag(R))
        if d.min() <= 1e-12 * d.max():
            raise SolverError("Dirichlet basis is rank deficient on this grid; lower the degree")
        self.Q, self.R = Q, R

    def rhs(self, fvals: np.ndarray) -> np.ndarray:
        return np.einsum("rab,rb->ra", self.Lt, fvals[self.rows]).ravel()

    def solve(self, fvals: np.ndarray) -> np.ndarray:
        from scipy.linalg import solve_triangular

        return solve_triangular(self.R, self.Q.T @ self.rhs(fvals))


def _projector(chart, grid, degree):
    cache = grid.__dict__.setdefault("_proj_cache", {})
    key = (chart.fingerprint(), degree)
    if key not in cache:
        cache[key] = _Projector(chart, grid, DirichletBasis(degree))
    return cache[key]


@dataclass
class Decomposition:
    fs: SymTensorField
    v: VectorFieldGrid
    dv: SymTensorField
    potential: PotentialField
    weak_divergence: float
    diagnostics: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.fs
        yield self.v


def decompose(chart: MetricChart, f: SymTensorField, tol: float = 1e-10,
              degree: int | None = None) -> Decomposition:
    """Split ``f = fs + dv`` with ``v`` vanishing on the circle and ``fs``
    orthogonal to every potential tensor of the Dirichlet basis.

    This is the Galerkin form of ``delta d v = delta f``: ``v`` minimises
    ``||f - dv||`` over the basis, so ``fs`` has zero weak divergence against
    all Dirichlet test fields. The dense normal system is solved through a QR
    factorisation of the whitened design, which is the SPD direct route.

    ``weak_divergence`` is ``max_b |<fs, d phi_b>| / (||fs|| ||d phi_b||)``;
    a value above ``tol`` raises :class:`SolverError`.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    grid = f.grid
    deg = default_basis_degree(grid) if degree is None else int(degree)
    proj = _projector(chart, grid, deg)
    sup = grid.support_idx
    fvals = f.stacked().reshape(-1, 3)[sup]
    coef = proj.solve(fvals)
    pot = PotentialField(chart, proj.basis, coef)
    dvals = np.einsum("mka,k->ma", proj.B, coef)
    full = np.zeros((grid.n * grid.n, 3))
    full[sup] = dvals
    full = full.reshape(grid.n, grid.n, 3)
    dv = SymTensorField(grid, full[..., 0], full[..., 1], full[..., 2])
    fs = f - dv
    r = proj.rhs(fs.stacked().reshape(-1, 3)[sup])
    design = proj.Q @ proj.R  # whitened d(phi_b), one column per basis member
    scale = max(np.linalg.norm(r), np.linalg.norm(proj.rhs(fvals)))
    if scale == 0.0:
        weak = 0.0  # f vanishes on the disc: nothing to split
    else:
        weak = float(np.max(np.abs(design.T @ r) / np.linalg.norm(design, axis=0)) / scale)
    if weak > tol:
        raise SolverError(f"weak divergence {weak:.3g} of the solenoidal part exceeds {tol}")
    v = pot.on_grid(grid)
    return Decomposition(fs, v, dv, pot, weak, {"basis_degree": deg, "basis_size": proj.basis.size})


# --------------------------------------------------------------------------
# common analytic test fields
# --------------------------------------------------------------------------


def saint_venant(h_hess_fn):
    """Tensor field ``(h_yy, -h_xy; -h_xy, h_xx)`` from the Hessian of a scalar ``h``.

    ``h_hess_fn(points) -> (npts, 2, 2)``. The result is divergence free for
    the flat metric because mixed partials commute.
    """
    def fn(pts):
        H = h_hess_fn(pts)
        out = np.empty_like(H)
        out[:, 0, 0] = H[:, 1, 1]
        out[:, 1, 1] = H[:, 0, 0]
        out[:, 0, 1] = out[:, 1, 0] = -H[:, 0, 1]
        return out
    return fn
