"""Geodesic ray transform of symmetric 2-tensors and its discrete normal operator.

The forward map integrates ``f_ij(gamma) gamma'^i gamma'^j`` along each
geodesic with composite (non-uniform) Simpson weights on the recorded
samples, interpolating grid tensors with the grid's rule (local bicubic
Lagrange by default, bilinear on request). Rows are scaled by the
aperture cutoff ``alpha``; the normal operator is ``A^T W A`` with ``W`` the
per-path measure. For paths indexed by a uniform ``(s, mu)`` grid,
``W = sqrt(g_11(s)) ds dmu`` reproduces the ``|<nu, xi>| dSigma`` measure
because ``dmu = |<nu, xi>| dbeta`` for the incidence angle ``beta``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, eigsh

from .geodesic_flow import DEFAULT_STEP, GeodesicPath, PathStatus, _rk4, _normalize, shoot_batch
from .lens_data import GridSpec, LensDataset, generate_dataset, lift_batch, project_batch
from .metric_chart import MetricChart
from .tensor_fields import (
    DirichletBasis,
    SolverError,
    SymTensorField,
    TensorGrid,
    decompose,
    default_basis_degree,
    tensor_mass_diagonal_blocks,
    tensor_mass_matrix,
)

MAGIC = b"LLFS1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<5sBHQQQIIdII")


class EmptySystemError(ValueError):
    pass


class UndefinedIntegralError(ValueError):
    pass


# --------------------------------------------------------------------------
# quadrature and cutoffs
# --------------------------------------------------------------------------


def simpson_weights(t: np.ndarray) -> np.ndarray:
    """Composite Simpson weights for samples at (possibly non-uniform) ``t``.

    Pairs of intervals use the non-uniform three-point rule; an odd trailing
    interval gets the integral of the parabola through the last three
    samples. Quadratics are integrated exactly on any nodes, cubics on pairs
    of equal intervals, and the error is fourth order in the spacing.
    """
    t = np.asarray(t, dtype=float)
    n = t.size
    w = np.zeros(n)
    if n == 1:
        return w
    if n == 2:
        dt = t[1] - t[0]
        return np.array([0.5 * dt, 0.5 * dt])
    dt = np.diff(t)
    m = n - 1 if (n - 1) % 2 == 0 else n - 2  # last index covered by pairs
    for i in range(0, m, 2):
        h0, h1 = dt[i], dt[i + 1]
        c = (h0 + h1) / 6.0
        w[i] += c * (2.0 - h1 / h0)
        w[i + 1] += c * (h0 + h1) ** 2 / (h0 * h1)
        w[i + 2] += c * (2.0 - h0 / h1)
    if m != n - 1:
        h0, h1 = dt[-2], dt[-1]
        w[-1] += (2 * h1 * h1 + 3 * h0 * h1) / (6 * (h0 + h1))
        w[-2] += (h1 * h1 + 3 * h0 * h1) / (6 * h0)
        w[-3] -= h1**3 / (6 * h0 * (h0 + h1))
    return w


def smootherstep(u):
    """C^2 ramp: 0 for u <= 0, 1 for u >= 1, ``6u^5 - 15u^4 + 10u^3`` between."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


@dataclass(frozen=True)
class Aperture:
    """Smooth cutoff ``alpha(s, mu) = B_s(s) B_mu(|mu|)`` on boundary data.

    ``alpha`` vanishes outside ``D = {mu_abs_min <= |mu| <= mu_abs_max}``
    (intersected with the optional ``s`` arc) and equals 1 on ``D'``, which
    is ``D`` shrunk by ``transition`` on every finite side. Sides left at
    their full-range defaults carry no cutoff.
    """

    mu_abs_min: float = 0.0
    mu_abs_max: float = 1.0
    s_min: float | None = None
    s_max: float | None = None
    transition: float = 0.02

    def __call__(self, s, mu) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        a = np.abs(np.asarray(mu, dtype=float))
        out = np.ones(np.broadcast(s, a).shape)
        w = self.transition
        if self.mu_abs_min > 0:
            out = out * smootherstep((a - self.mu_abs_min) / w)
        if self.mu_abs_max < 1:
            out = out * smootherstep((self.mu_abs_max - a) / w)
        if self.s_min is not None and self.s_max is not None:
            u = np.mod(s - self.s_min, 2 * np.pi)
            span = np.mod(self.s_max - self.s_min, 2 * np.pi) or 2 * np.pi
            out = out * smootherstep(u / w) * smootherstep((span - u) / w)
        return out

    @property
    def full(self) -> bool:
        return self.mu_abs_min <= 0 and self.mu_abs_max >= 1 and self.s_min is None


FULL_APERTURE = Aperture()


# --------------------------------------------------------------------------
# forward system
# --------------------------------------------------------------------------


def _lagrange_axis(u: np.ndarray, n: int, width: int):
    """First node and Lagrange weights of a ``width``-point stencil around ``u``."""
    base = np.clip(np.floor(u).astype(int) - (width // 2 - 1), 0, n - width)
    x = u - base
    W = np.ones((u.size, width))
    for a in range(width):
        for b in range(width):
            if a != b:
                W[:, a] *= (x - b) / (a - b)
    return base, W


def interpolation_stencil(grid: TensorGrid, pts: np.ndarray):
    """Flat node indices and weights, both ``(k, s)``, interpolating at ``pts``.

    ``grid.interp == "cubic"`` gives the tensor product of 4-point Lagrange
    rules (fourth order, stencil shifted inward at the grid edge);
    ``"linear"`` gives bilinear interpolation.
    """
    if grid.interp == "linear":
        return _bilinear(grid, pts)
    u = (pts[:, 0] - grid.xs[0]) / grid.h
    v = (pts[:, 1] - grid.xs[0]) / grid.h
    bi, wi = _lagrange_axis(u, grid.n, 4)
    bj, wj = _lagrange_axis(v, grid.n, 4)
    off = np.arange(4)
    idx = ((bi[:, None] + off)[:, :, None] * grid.n + (bj[:, None] + off)[:, None, :]).reshape(-1, 16)
    wts = (wi[:, :, None] * wj[:, None, :]).reshape(-1, 16)
    return idx, wts


def _bilinear(grid: TensorGrid, pts: np.ndarray):
    """Corner flat indices (k, 4) and weights (k, 4) of bilinear interpolation."""
    u = (pts[:, 0] - grid.xs[0]) / grid.h
    v = (pts[:, 1] - grid.xs[0]) / grid.h
    i = np.clip(np.floor(u).astype(int), 0, grid.n - 2)
    j = np.clip(np.floor(v).astype(int), 0, grid.n - 2)
    a = u - i
    b = v - j
    n = grid.n
    idx = np.stack([i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1], axis=1)
    wts = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    return idx, wts


def _velocity_weights(xi: np.ndarray) -> np.ndarray:
    """Coefficients of (f11, f12, f22) in f_ij xi^i xi^j."""
    return np.stack([xi[:, 0] ** 2, 2.0 * xi[:, 0] * xi[:, 1], xi[:, 1] ** 2], axis=1)


def path_row(grid: TensorGrid, path: GeodesicPath, support_pos: np.ndarray):
    """Column indices and values of one (unscaled) forward-matrix row."""
    q = simpson_weights(path.t)
    idx, wts = interpolation_stencil(grid, path.x)
    pos = support_pos[idx]
    if np.any(pos[wts != 0] < 0):
        raise UndefinedIntegralError("path samples fall outside the tensor support")
    vel = _velocity_weights(path.xi)
    m = grid.n_support
    cols = (pos[:, :, None] + m * np.arange(3)[None, None, :])
    vals = q[:, None, None] * wts[:, :, None] * vel[:, None, :]
    keep = wts[:, :, None].repeat(3, axis=2) != 0
    return cols[keep], vals[keep]


@dataclass
class ForwardSystem:
    """Sparse forward map ``A`` (paths x tensor unknowns) with weights.

    Tensor unknowns are ordered as ``SymTensorField.to_vector``. ``alpha``
    already scales the rows of ``A``; ``weights`` is the path measure used in
    the normal operator.
    """

    grid: TensorGrid
    A: sparse.csr_matrix
    weights: np.ndarray
    alpha: np.ndarray
    lengths: np.ndarray
    s_in: np.ndarray | None = None
    mu_in: np.ndarray | None = None
    fingerprint: str = ""
    paths: list | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.A.shape[0]

    def apply(self, f) -> np.ndarray:
        vec = f.to_vector() if isinstance(f, SymTensorField) else np.asarray(f, dtype=float)
        return self.A @ vec

    def normal_matrix(self) -> sparse.csr_matrix:
        N = (self.A.T @ sparse.diags(self.weights) @ self.A).tocsr()
        # the sparse product sums (i, j) and (j, i) in different orders
        return ((N + N.T) * 0.5).tocsr()

    # -- binary container ------------------------------------------------
    def save(self, path) -> None:
        A = self.A.tocsr()
        A.sort_indices()
        fp = self.fingerprint.encode()
        payload = b"".join([
            A.indptr.astype("<i8").tobytes(),
            A.indices.astype("<i4").tobytes(),
            A.data.astype("<f8").tobytes(),
            self.weights.astype("<f8").tobytes(),
            self.alpha.astype("<f8").tobytes(),
            self.lengths.astype("<f8").tobytes(),
        ])
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, A.shape[0], A.shape[1], A.nnz,
                              self.grid.n, zlib.crc32(payload) & 0xFFFFFFFF,
                              self.grid.half_width, len(fp), 0)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(fp)
            fh.write(payload)

    @classmethod
    def load(cls, path) -> "ForwardSystem":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise ValueError("truncated LLFS1 file")
        (magic, version, _flags, rows, cols, nnz, grid_n, crc, half_width, fp_len,
         _res) = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError("not an LLFS1 container")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported LLFS1 version {version}")
        off = _HEADER.size
        fp = raw[off:off + fp_len].decode()
        off += fp_len
        payload = raw[off:]
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ValueError("LLFS1 checksum mismatch")

        def take(count, dtype):
            nonlocal off
            size = np.dtype(dtype).itemsize * count
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
            off += size
            return arr

        indptr = take(rows + 1, "<i8")
        indices = take(nnz, "<i4")
        data = take(nnz, "<f8")
        weights = take(rows, "<f8")
        alpha = take(rows, "<f8")
        lengths = take(rows, "<f8")
        grid = TensorGrid(grid_n, half_width)
        A = sparse.csr_matrix((data, indices, indptr), shape=(rows, cols))
        return cls(grid, A, weights, alpha, lengths, fingerprint=fp)


def _assemble_rows(grid: TensorGrid, paths: list, alpha: np.ndarray) -> sparse.csr_matrix:
    support_pos = -np.ones(grid.n * grid.n, dtype=int)
    support_pos[grid.support_idx] = np.arange(grid.n_support)
    indptr = [0]
    indices, data = [], []
    for p, a in zip(paths, alpha):
        if a == 0.0:
            indptr.append(indptr[-1])
            continue
        cols, vals = path_row(grid, p, support_pos)
        # merge repeated columns along the path
        uniq, inv = np.unique(cols, return_inverse=True)
        summed = np.bincount(inv, weights=vals, minlength=uniq.size) * a
        indices.append(uniq)
        data.append(summed)
        indptr.append(indptr[-1] + uniq.size)
    if indices:
        ind = np.concatenate(indices)
        dat = np.concatenate(data)
    else:
        ind = np.zeros(0, dtype=int)
        dat = np.zeros(0)
    return sparse.csr_matrix((dat, ind, np.array(indptr)), shape=(len(paths), 3 * grid.n_support))


def sample_spacing(grid: TensorGrid, step: float) -> int:
    """Record every k-th integrator step so samples are about h/8 apart."""
    return max(1, int(round(grid.h / (8.0 * step))))


def assemble(chart: MetricChart, spec: GridSpec | LensDataset, grid: TensorGrid,
             aperture: Aperture = FULL_APERTURE, *, step: float = DEFAULT_STEP,
             record_every: int | None = None, keep_paths: bool = False) -> ForwardSystem:
    """Forward system for the geodesics of a lens grid (or an existing dataset's inputs).

    Trapped or failed rays get ``alpha = 0``. Raises :class:`EmptySystemError`
    when no path survives the cutoff.
    """
    if isinstance(spec, LensDataset):
        s_in, mu_in, gspec = spec.s_in, spec.mu_in, spec.spec
    else:
        gspec = spec
        s_in, mu_in = spec.nodes()
        # same jitter convention as generated datasets
        rng = np.random.default_rng(0x5EED)
        mu_in = np.clip(mu_in + 1e-7 * rng.uniform(-1, 1, mu_in.size), -1, 1)
    rec = sample_spacing(grid, step) if record_every is None else record_every
    alpha = aperture(s_in, mu_in)
    live = np.flatnonzero(alpha > 0)
    if live.size == 0:
        raise EmptySystemError("aperture removes every path")
    x0, xi0 = lift_batch(chart, s_in[live], mu_in[live])
    shot = shoot_batch(chart, x0, xi0, step=step, record_every=rec)
    paths: list = [None] * s_in.size
    lengths = np.zeros(s_in.size)
    for k, p in zip(live, shot):
        if p.status != PathStatus.EXITED or p.length == 0.0:
            alpha[k] = 0.0
            lengths[k] = p.length
            continue
        paths[k] = p
        lengths[k] = p.length
    if not np.any(alpha > 0):
        raise EmptySystemError("no exited path inside the aperture")
    A = _assemble_rows(grid, paths, alpha)
    weights = np.sqrt(chart.boundary_metric(s_in)) * gspec.ds * gspec.dmu
    return ForwardSystem(grid, A, weights, alpha, lengths, s_in, mu_in, chart.fingerprint(),
                         paths if keep_paths else None)


# --------------------------------------------------------------------------
# exterior-circle parametrisation
# --------------------------------------------------------------------------


def _enter_disc(chart: MetricChart, x: np.ndarray, xi: np.ndarray, step: float,
                max_length: float = 10.0):
    """Advance rays from outside until they cross ``|x| = 1`` inward.

    Returns (x, xi, hit) at the crossing; rays missing the disc have ``hit = False``.
    """
    S = np.concatenate([x, xi], axis=1)
    S = _normalize(chart, S)
    B = S.shape[0]
    hit = np.zeros(B, dtype=bool)
    out = S.copy()
    idx = np.arange(B)
    t = 0.0
    ext2 = chart.extended_radius**2
    while idx.size and t < max_length:
        S_new = _normalize(chart, _rk4(chart, S, step, False))
        r_new = np.sum(S_new[:, :2] ** 2, axis=1)
        crossed = r_new < 1.0
        if np.any(crossed):
            sel = np.flatnonzero(crossed)
            lo = np.zeros(sel.size)  # outside
            hi = np.full(sel.size, step)  # inside
            S0 = S[sel]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                f = np.sum(_rk4(chart, S0, mid, False)[:, :2] ** 2, axis=1) - 1.0
                lo = np.where(f > 0, mid, lo)
                hi = np.where(f > 0, hi, mid)
            Se = _normalize(chart, _rk4(chart, S0, hi, False))
            out[idx[sel]] = Se
            hit[idx[sel]] = True
        gone = (~crossed) & (r_new > ext2 * (1 - 1e-12))
        keep = ~(crossed | gone)
        idx, S = idx[keep], S_new[keep]
        t += step
    return out[:, :2], out[:, 2:4], hit


def assemble_exterior(chart: MetricChart, grid: TensorGrid, n_s: int = 64, n_mu: int = 64,
                      radius: float | None = None, aperture: Aperture = FULL_APERTURE, *,
                      step: float = DEFAULT_STEP, record_every: int | None = None,
                      keep_paths: bool = False) -> ForwardSystem:
    """Forward system for geodesics launched from the circle ``|x| = radius > 1``.

    Rays start at angle ``s`` on the outer circle with tangential component
    ``mu``; the part inside ``M`` is integrated. ``alpha`` is evaluated on the
    exterior launch data. The measure ``sqrt(g(c', c')) ds dmu`` on the
    exterior circle matches the boundary measure by Liouville invariance.
    """
    if radius is None:
        radius = 1.0 + 0.5 * chart.margin
    spec = GridSpec(n_s, n_mu)
    s, mu = spec.nodes()
    p, t, nrm = chart.frames_on_circle(s, radius)
    xi = mu[:, None] * t + np.sqrt(1 - mu * mu)[:, None] * nrm
    alpha = aperture(s, mu)
    xe, xie, hit = _enter_disc(chart, p, xi, step)
    alpha = np.where(hit, alpha, 0.0)
    live = np.flatnonzero(alpha > 0)
    if live.size == 0:
        raise EmptySystemError("no exterior ray meets the disc")
    rec = sample_spacing(grid, step) if record_every is None else record_every
    shot = shoot_batch(chart, xe[live], xie[live], step=step, record_every=rec)
    paths: list = [None] * s.size
    lengths = np.zeros(s.size)
    for k, q in zip(live, shot):
        if q.status != PathStatus.EXITED or q.length == 0.0:
            alpha[k] = 0.0
            continue
        paths[k] = q
        lengths[k] = q.length
    A = _assemble_rows(grid, paths, alpha)
    c1 = np.stack([-np.sin(s), np.cos(s)], axis=1) * radius
    g = chart._metric(p)
    speed = np.sqrt(np.einsum("bi,bij,bj->b", c1, g, c1))
    s_b, mu_b = np.full(s.size, np.nan), np.full(s.size, np.nan)
    if np.any(hit):
        s_b[hit], mu_b[hit] = project_batch(chart, xe[hit], xie[hit])
    return ForwardSystem(grid, A, speed * spec.ds * spec.dmu, alpha, lengths, s_b, mu_b,
                         chart.fingerprint(), paths if keep_paths else None)


# --------------------------------------------------------------------------
# pointwise transform
# --------------------------------------------------------------------------


def xray(chart: MetricChart, f, path: GeodesicPath) -> float:
    """``int <f(gamma), gamma'^2> dt`` along one exited path.

    ``f`` is a :class:`SymTensorField` (interpolated with the grid's rule) or
    a callable ``points -> (k, 2, 2)`` evaluated exactly at the samples.
    """
    if path.status != PathStatus.EXITED:
        raise UndefinedIntegralError(f"path status {path.status.value}: integral undefined")
    q = simpson_weights(path.t)
    if isinstance(f, SymTensorField):
        idx, wts = interpolation_stencil(f.grid, path.x)
        comps = [np.sum(c.ravel()[idx] * wts, axis=1) for c in (f.f11, f.f12, f.f22)]
        vals = np.stack(comps, axis=1)
    else:
        F = np.asarray(f(path.x), dtype=float)
        vals = np.stack([F[:, 0, 0], 0.5 * (F[:, 0, 1] + F[:, 1, 0]), F[:, 1, 1]], axis=1)
    integrand = np.sum(vals * _velocity_weights(path.xi), axis=1)
    return float(q @ integrand)


# --------------------------------------------------------------------------
# normal operator, spectrum, stability
# --------------------------------------------------------------------------


class NormalOperator(LinearOperator):
    """``N = A^T W A`` applied matrix-free (dense assembly on demand)."""

    def __init__(self, system: ForwardSystem):
        self.system = system
        n = system.A.shape[1]
        super().__init__(np.float64, (n, n))

    def _matvec(self, x):
        A = self.system.A
        return A.T @ (self.system.weights * (A @ np.ravel(x)))

    def _rmatvec(self, x):
        return self._matvec(x)

    def matrix(self) -> sparse.csr_matrix:
        return self.system.normal_matrix()


def normal_operator(system: ForwardSystem) -> NormalOperator:
    return NormalOperator(system)


def _mass_inverse_apply(blocks: np.ndarray, vec: np.ndarray) -> np.ndarray:
    m = blocks.shape[0]
    r = vec.reshape(3, m).T
    sol = np.linalg.solve(blocks, r[..., None])[..., 0]
    return sol.T.ravel()


def _mass_apply(blocks: np.ndarray, vec: np.ndarray) -> np.ndarray:
    m = blocks.shape[0]
    r = vec.reshape(3, m).T
    return np.einsum("mab,mb->ma", blocks, r).T.ravel()


def spanning_fields(degree: int = 3, half_width: float = 1.0):
    """Smooth tensor fields ``T_a(x) T_b(y) E_c`` (Chebyshev products, a + b <= degree,
    ``E_c`` the three component units) used to span the solenoidal subspace."""
    from numpy.polynomial import chebyshev as Ch

    out = []
    for d in range(degree + 1):
        for a in range(d + 1):
            b = d - a
            for c in range(3):
                def fn(pts, a=a, b=b, c=c):
                    x = pts[:, 0] / half_width
                    y = pts[:, 1] / half_width
                    val = Ch.chebval(x, np.eye(a + 1)[a]) * Ch.chebval(y, np.eye(b + 1)[b])
                    F = np.zeros((pts.shape[0], 2, 2))
                    i, j = ((0, 0), (0, 1), (1, 1))[c]
                    F[:, i, j] = val
                    F[:, j, i] = val
                    return F
                out.append(fn)
    return out


def _orthonormalize(F: np.ndarray, blocks: np.ndarray, rel_cut: float = 1e-10) -> np.ndarray:
    """M-orthonormal basis of the column span of ``F`` (columns are tensor vectors)."""
    MF = np.stack([_mass_apply(blocks, F[:, k]) for k in range(F.shape[1])], axis=1)
    G = F.T @ MF
    G = 0.5 * (G + G.T)
    lam, U = np.linalg.eigh(G)
    keep = lam > rel_cut * lam.max()
    return F @ (U[:, keep] / np.sqrt(lam[keep]))


def solenoidal_basis(chart: MetricChart, grid: TensorGrid, degree: int = 3) -> np.ndarray:
    """M-orthonormal columns spanning the solenoidal parts of :func:`spanning_fields`."""
    cols = []
    for fn in spanning_fields(degree):
        f = SymTensorField.from_callable(grid, fn)
        cols.append(decompose(chart, f).fs.to_vector())
    # orthonormal in L2(M): collar values are extensions, not extra freedom
    blocks = tensor_mass_diagonal_blocks(chart, grid, collar_weight=0.0)
    return _orthonormalize(np.stack(cols, axis=1), blocks)


def potential_basis(chart: MetricChart, grid: TensorGrid, degree: int | None = None) -> np.ndarray:
    """M-orthonormal columns spanning ``d`` of the Dirichlet polynomial basis."""
    deg = default_basis_degree(grid) if degree is None else degree
    basis = DirichletBasis(deg)
    vals = basis.sym_differentials(chart, grid.support_points)  # (m, K, 3)
    F = np.concatenate([vals[:, :, 0], vals[:, :, 1], vals[:, :, 2]], axis=0)
    return _orthonormalize(F, tensor_mass_diagonal_blocks(chart, grid, collar_weight=0.0))


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    sigma_min: float
    sigma_max: float
    potential_sigma_max: float | None
    stability_constant: float | None
    diagnostics: dict = field(default_factory=dict)


def sinjectivity_spectrum(chart: MetricChart, system: ForwardSystem, solenoidal: np.ndarray | None = None,
                          *, degree: int = 3, potential: np.ndarray | None = None,
                          potential_degree: int | None = None, check_tol: float = 1e-6,
                          probes: list | None = None) -> SpectrumReport:
    """Singular values of ``sqrt(W) A`` on the solenoidal subspace.

    ``solenoidal`` columns must be M-orthonormal and solenoidal; each is
    checked by re-decomposing it (``||dv|| / ||f|| <= check_tol``). The
    potential subspace defaults to ``d`` of the Dirichlet basis. The
    stability surrogate is ``max ||f||_M / ||N f||_{M^-1}`` over ``probes``
    (default: the solenoidal parts of :func:`spanning_fields`).
    """
    grid = system.grid
    if solenoidal is None:
        solenoidal = solenoidal_basis(chart, grid, degree)
    else:
        for k in range(solenoidal.shape[1]):
            f = SymTensorField.from_vector(grid, solenoidal[:, k])
            d = decompose(chart, f)
            from .tensor_fields import l2_norm

            if l2_norm(chart, d.dv) > check_tol * max(l2_norm(chart, f), 1e-300):
                raise ValueError(f"basis column {k} is not solenoidal")
    sw = np.sqrt(system.weights)[:, None]
    S = np.linalg.svd(sw * (system.A @ solenoidal), compute_uv=False)
    if potential is None:
        potential = potential_basis(chart, grid, potential_degree)
    P = np.linalg.svd(sw * (system.A @ potential), compute_uv=False) if potential.shape[1] else np.zeros(1)
    c_hat = stability_constant(chart, system, probes)
    return SpectrumReport(S, float(S.min()), float(S.max()), float(P.max()), c_hat,
                          {"solenoidal_dim": int(solenoidal.shape[1]),
                           "potential_dim": int(potential.shape[1]), "n_paths": system.n_paths})


def stability_constant(chart: MetricChart, system: ForwardSystem, probes: list | None = None,
                       degree: int = 3) -> float:
    """Empirical ``C`` in ``||f^s|| <= C ||N f||`` with the discrete dual norm
    ``||y||_{M^-1}`` on the right-hand side."""
    grid = system.grid
    disc = tensor_mass_diagonal_blocks(chart, grid, collar_weight=0.0)
    blocks = tensor_mass_diagonal_blocks(chart, grid)
    if probes is None:
        probes = [decompose(chart, SymTensorField.from_callable(grid, fn)).fs
                  for fn in spanning_fields(degree)]
    N = normal_operator(system)
    worst = 0.0
    for f in probes:
        vec = f.to_vector() if isinstance(f, SymTensorField) else np.asarray(f)
        num = np.sqrt(vec @ _mass_apply(disc, vec))
        if num == 0:
            continue
        y = N @ vec
        den = np.sqrt(y @ _mass_inverse_apply(blocks, y))
        worst = max(worst, num / den if den > 0 else np.inf)
    return float(worst)


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------


@dataclass
class Reconstruction:
    f: SymTensorField
    fs: SymTensorField
    relative_residual: float
    iterations: int
    lam: float


def largest_singular_value_sq(chart: MetricChart, system: ForwardSystem) -> float:
    """Largest eigenvalue of ``N`` relative to the tensor mass matrix."""
    M = tensor_mass_matrix(chart, system.grid).tocsc()
    N = system.normal_matrix().tocsc()
    val = eigsh(N, k=1, M=M, which="LA", return_eigenvectors=False, tol=1e-6)
    return float(val[0])


def reconstruct(chart: MetricChart, system: ForwardSystem, data, lam: float | None = None,
                tol: float = 1e-10, maxiter: int = 20000) -> Reconstruction:
    """Tikhonov solution of ``min ||sqrt(W)(A f - d)||^2 + lam ||f||_M^2`` by CG,
    followed by the solenoidal projection.

    ``lam`` defaults to ``1e-6 sigma_max^2``.
    """
    data = np.asarray(data, dtype=float)
    if data.shape != (system.n_paths,):
        raise ValueError(f"expected {system.n_paths} data values, got {data.shape}")
    if lam is None:
        lam = 1e-6 * largest_singular_value_sq(chart, system)
    if lam <= 0:
        raise ValueError("regularisation must be positive")
    grid = system.grid
    M = tensor_mass_matrix(chart, grid)
    A, W = system.A, system.weights
    rhs = A.T @ (W * data)
    n = A.shape[1]
    if not np.any(rhs):
        zero = SymTensorField.zeros(grid)
        return Reconstruction(zero, zero, 0.0, 0, lam)
    op = LinearOperator((n, n), matvec=lambda x: A.T @ (W * (A @ x)) + lam * (M @ x), dtype=float)
    blocks = tensor_mass_diagonal_blocks(chart, grid)
    # block-diagonal preconditioner from the mass term plus the diagonal of N
    diagN = np.asarray((A.multiply(A)).T @ W).ravel()
    pre_blocks = lam * blocks.copy()
    m = grid.n_support
    for c in range(3):
        pre_blocks[:, c, c] += diagN[c * m:(c + 1) * m]
    precond = LinearOperator((n, n), matvec=lambda y: _mass_inverse_apply(pre_blocks, y), dtype=float)
    count = {"it": 0}

    def cb(_):
        count["it"] += 1

    x, info = cg(op, rhs, rtol=tol, maxiter=maxiter, M=precond, callback=cb)
    if info != 0:
        res = np.linalg.norm(op @ x - rhs) / np.linalg.norm(rhs)
        raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {res:.3g})")
    f = SymTensorField.from_vector(grid, x)
    fs = decompose(chart, f).fs
    resid = np.linalg.norm(np.sqrt(W) * (A @ x - data)) / max(np.linalg.norm(np.sqrt(W) * data), 1e-300)
    return Reconstruction(f, fs, float(resid), count["it"], float(lam))


def reconstruct_discrepancy(chart: MetricChart, system: ForwardSystem, data, noise: float, *,
                            safety: float = 1.1, factor: float = 0.1, max_steps: int = 10,
                            tol: float = 1e-10, maxiter: int = 20000) -> Reconstruction:
    """Morozov's discrepancy principle on a geometric ladder of ``lam``.

    Starts at ``1e-2 sigma_max^2`` and divides by ``1 / factor`` until the
    relative weighted misfit drops below ``safety * noise`` (``noise`` is the
    relative data error level). The last solve is returned if the target is
    never met.
    """
    if noise <= 0:
        raise ValueError("noise level must be positive")
    lam = 1e-2 * largest_singular_value_sq(chart, system)
    rec = None
    for _ in range(max_steps):
        rec = reconstruct(chart, system, data, lam=lam, tol=tol, maxiter=maxiter)
        if rec.relative_residual <= safety * noise:
            break
        lam *= factor
    return rec
