"""Gauge experiments: boundary-fixing diffeomorphisms and what they leave invisible.

A diffeomorphism ``psi`` of the closed disc that fixes the boundary circle
pointwise cannot be detected from lens data: geodesics of ``psi^* g`` are
``psi``-preimages of geodesics of ``g`` and start/end at the same boundary
points with the same tangential components. This module builds such maps
(``psi_eps(x) = exp_x(eps w(x))`` with ``w = 0`` on the circle), tabulates the
pulled-back metric, and measures

* the quadratic remainder of the linearization ``psi^* g - g = 2 d(w^flat) eps + O(eps^2)``,
* the quadratic size of ray-transform values of ``psi^* g - g`` along ``g``-geodesics,
* the energy functional along an interpolating family of curves, and its
  Taylor identity,
* record-wise agreement of the lens data of ``g`` and ``psi^* g``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .geodesic_flow import GeodesicPath, PathStatus, exp_map
from .lens_data import (GridSpec, LensDataset, angle_diff, generate_dataset,
                        scatter_batch, DEFAULT_STEP)
from .metric_chart import EuclideanChart, MetricChart, TabulatedChart
from .ray_transform import ForwardSystem, simpson_weights, xray
from .tensor_fields import SymTensorField, TensorGrid, l2_norm

DEFAULT_LADDER = (0.08, 0.04, 0.02, 0.01)
DEFAULT_DIRECTION = (0.3, -0.1)
TABLE_NODES = 161
TABLE_HALF_WIDTH = 1.12


class NonDiffeomorphismError(ValueError):
    """The Jacobian determinant of ``psi`` changes sign on the check grid."""


# --------------------------------------------------------------------------
# the diffeomorphism
# --------------------------------------------------------------------------


def _bump_field(direction):
    a = np.asarray(direction, dtype=float)

    def w(x):
        x = np.atleast_2d(x)
        return (1.0 - np.sum(x * x, axis=1))[:, None] * a

    def dw(x):
        # [p, i, j] = d_j w^i
        x = np.atleast_2d(x)
        return -2.0 * a[None, :, None] * x[:, None, :]

    return w, dw


@dataclass(frozen=True)
class BoundaryFixingDiffeo:
    """``psi_eps(x) = exp_x(eps * w(x))`` for a vector field ``w`` vanishing on the circle.

    ``field`` and ``jacobian`` are vectorized callables (``(k, 2) -> (k, 2)``
    and ``(k, 2) -> (k, 2, 2)`` with ``[.., i, j] = d_j w^i``). The default
    is ``w = (1 - |x|^2) * direction``.
    """

    eps: float = 0.05
    direction: tuple = DEFAULT_DIRECTION
    field: Callable | None = None
    jacobian: Callable | None = None
    n_steps: int = 32

    def _w(self):
        if self.field is not None:
            return self.field, self.jacobian
        return _bump_field(self.direction)

    def with_eps(self, eps: float) -> "BoundaryFixingDiffeo":
        return BoundaryFixingDiffeo(float(eps), self.direction, self.field, self.jacobian,
                                    self.n_steps)

    def w(self, x) -> np.ndarray:
        return self._w()[0](np.atleast_2d(np.asarray(x, dtype=float)))

    def dw(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fn, jac = self._w()
        if jac is not None:
            return jac(x)
        return _fd_jacobian(fn, x)

    def describe(self) -> str:
        if self.field is None:
            a = ",".join(repr(float(c)) for c in self.direction)
            return f"bump[{a}]*{self.eps!r}"
        return f"custom*{self.eps!r}"

    def apply(self, chart: MetricChart, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.eps == 0.0:
            return x.copy()
        v = self.eps * self.w(x)
        if isinstance(chart, EuclideanChart):
            return x + v
        return exp_map(chart, x, v, n_steps=self.n_steps)

    def differential(self, chart: MetricChart, x) -> np.ndarray:
        """``D psi`` as ``(k, 2, 2)`` with ``[.., i, j] = d_j psi^i``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eye = np.broadcast_to(np.eye(2), (x.shape[0], 2, 2))
        if self.eps == 0.0:
            return eye.copy()
        if isinstance(chart, EuclideanChart):
            return eye + self.eps * self.dw(x)
        return _fd_jacobian(lambda p: self.apply(chart, p), x)

    def lipschitz_bound(self, n: int = 81, half_width: float = TABLE_HALF_WIDTH) -> float:
        """``1 / max ||Dw||`` over a check grid.

        For the flat metric ``x + eps w(x)`` is injective whenever ``eps`` is
        below this number (the perturbation is then a contraction).
        """
        pts = _check_grid(n, half_width)
        J = self.dw(pts)
        op = np.linalg.norm(J, ord=2, axis=(1, 2))
        m = float(op.max())
        return np.inf if m == 0.0 else 1.0 / m

    def check(self, chart: MetricChart, n: int = 81,
              half_width: float = TABLE_HALF_WIDTH) -> float:
        """Minimum of ``det D psi`` over a check grid; raises if it is not positive."""
        pts = _check_grid(n, half_width)
        pts = pts[np.sum(pts * pts, axis=1) <= chart.extended_radius ** 2]
        det = np.linalg.det(self.differential(chart, pts))
        dmin = float(det.min())
        if not np.all(np.isfinite(det)) or dmin <= 0.0:
            raise NonDiffeomorphismError(
                f"det(D psi) reaches {dmin:.3e} at eps={self.eps!r}; not a diffeomorphism")
        return dmin


def _check_grid(n, half_width):
    xs = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def _fd_jacobian(fn, x, delta: float = 1e-3) -> np.ndarray:
    # fourth-order central differences, columns = partial derivatives
    out = np.empty((x.shape[0], 2, 2))
    c = (1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0)
    offs = (-2, -1, 1, 2)
    for j in range(2):
        e = np.zeros(2)
        e[j] = delta
        acc = sum(ck * fn(x + o * e) for ck, o in zip(c, offs))
        out[:, :, j] = acc / delta
    return out


# --------------------------------------------------------------------------
# pullback
# --------------------------------------------------------------------------


def pullback_values(chart: MetricChart, psi: BoundaryFixingDiffeo, pts) -> np.ndarray:
    """``(psi^* g)_ij(x) = g_kl(psi(x)) d_i psi^k d_j psi^l`` at arbitrary points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    J = psi.differential(chart, pts)
    G = chart._metric(psi.apply(chart, pts))
    return np.einsum("pki,pkl,plj->pij", J, G, J)


def pullback_metric(chart: MetricChart, psi: BoundaryFixingDiffeo, *, n: int = TABLE_NODES,
                    half_width: float = TABLE_HALF_WIDTH, check: bool = True) -> TabulatedChart:
    """Tabulate ``psi^* g`` on an ``n x n`` box grid as a quintic-spline chart.

    The table covers the extended chart so geodesics may overshoot the
    circle during exit bisection. Raises :class:`NonDiffeomorphismError`
    when ``det D psi`` is not positive on the check grid.
    """
    if half_width < chart.extended_radius:
        raise ValueError("the table must cover the extended chart")
    if check:
        psi.check(chart)
    xs = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    G = pullback_values(chart, psi, pts).reshape(n, n, 2, 2)
    if np.any(np.linalg.det(G) <= 0.0):
        raise NonDiffeomorphismError("pulled-back metric is not positive definite")
    label = f"pullback[{chart.fingerprint()};{psi.describe()}]"
    return TabulatedChart(xs, xs, G[..., 0, 0], G[..., 0, 1], G[..., 1, 1],
                          margin=chart.margin, extension="table", degree=5, label=label)


def lie_derivative(chart: MetricChart, psi: BoundaryFixingDiffeo, pts) -> np.ndarray:
    """``(L_w g)_ij = w^k d_k g_ij + g_kj d_i w^k + g_ik d_j w^k``.

    This equals ``2 d(w^flat)`` with ``d`` the symmetrized covariant
    derivative, the linear part of ``psi_eps^* g - g`` per unit ``eps``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    w = psi.w(pts)
    Dw = psi.dw(pts)
    g = chart._metric(pts)
    dg = chart._metric_grad(pts)  # [p, k, i, j] = d_k g_ij
    out = np.einsum("pk,pkij->pij", w, dg)
    gd = np.einsum("pkj,pki->pij", g, Dw)
    return out + gd + np.swapaxes(gd, 1, 2)


# --------------------------------------------------------------------------
# slope reports
# --------------------------------------------------------------------------


def fit_slope(eps, values) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log values`` against ``log eps``."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = (eps > 0) & (values > 0)
    if ok.sum() < 2:
        return float("nan"), float("nan")
    slope, icpt = np.polyfit(np.log(eps[ok]), np.log(values[ok]), 1)
    return float(slope), float(icpt)


@dataclass
class SlopeReport:
    """Per-amplitude measurements with log-log fits."""

    name: str
    eps: np.ndarray
    remainder: np.ndarray
    linear: np.ndarray
    slope: float
    linear_slope: float
    extra: dict = field(default_factory=dict)

    def within(self, lo: float = 1.8, hi: float = 2.2) -> bool:
        return bool(lo <= self.slope <= hi)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "eps": [float(e) for e in self.eps],
            "remainder": [float(r) for r in self.remainder],
            "linear": [float(v) for v in self.linear],
            "slope": self.slope,
            "linear_slope": self.linear_slope,
            **self.extra,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "remainder", "linear"])
            for e, r, v in zip(self.eps, self.remainder, self.linear):
                w.writerow([repr(float(e)), repr(float(r)), repr(float(v))])


def _ladder(ladder) -> np.ndarray:
    eps = np.asarray(ladder, dtype=float)
    if eps.size < 4:
        raise ValueError("an amplitude ladder needs at least 4 points")
    return eps


def linearization_split(chart: MetricChart, psi: BoundaryFixingDiffeo,
                        ladder: Sequence[float] = DEFAULT_LADDER,
                        grid: TensorGrid | None = None) -> SlopeReport:
    """Size of ``psi_eps^* g - g - 2 eps d(w^flat)`` over the disc, per amplitude.

    Both terms are evaluated exactly at the grid nodes; norms use the disc
    quadrature of ``grid``. The remainder should shrink like ``eps^2`` and
    the linear part like ``eps``.
    """
    eps = _ladder(ladder)
    grid = grid or TensorGrid(33)
    pts = grid.support_points
    lin_unit = SymTensorField.from_vector(grid, _pack(lie_derivative(chart, psi, pts)))
    g0 = chart._metric(pts)
    rem = np.empty(eps.size)
    lin = np.empty(eps.size)
    for k, e in enumerate(eps):
        p = psi.with_eps(e)
        if e != 0.0:
            p.check(chart)
        f = SymTensorField.from_vector(grid, _pack(pullback_values(chart, p, pts) - g0))
        linear = lin_unit * float(e)
        rem[k] = l2_norm(chart, f - linear)
        lin[k] = l2_norm(chart, linear)
    slope, _ = fit_slope(eps, rem)
    lslope, _ = fit_slope(eps, lin)
    return SlopeReport("linearization_split", eps, rem, lin, slope, lslope,
                       {"grid_n": grid.n, "diffeo": psi.describe()})


def _pack(F: np.ndarray) -> np.ndarray:
    return np.concatenate([F[:, 0, 0], 0.5 * (F[:, 0, 1] + F[:, 1, 0]), F[:, 1, 1]])


def _system_paths(chart: MetricChart, system) -> list[GeodesicPath]:
    if isinstance(system, ForwardSystem):
        if system.paths is not None:
            paths = system.paths
        else:
            if system.s_in is None:
                raise ValueError("forward system carries neither paths nor inputs")
            res = scatter_batch(chart, system.s_in, system.mu_in, keep_paths=True)
            paths = res.paths
    elif isinstance(system, LensDataset):
        paths = system.paths
        if paths is None:
            paths = scatter_batch(chart, system.s_in, system.mu_in, system.max_length,
                                  system.step, keep_paths=True).paths
    else:
        paths = list(system)
    return [p for p in paths if p is not None and p.status == PathStatus.EXITED and p.t.size > 2]


def xray_gauge_remainder(chart: MetricChart, system, psi: BoundaryFixingDiffeo,
                         ladder: Sequence[float] = DEFAULT_LADDER) -> SlopeReport:
    """``max |I(psi_eps^* g - g)|`` over the data paths of ``g``, per amplitude.

    ``system`` is a :class:`ForwardSystem`, a :class:`LensDataset` or a list
    of paths. Integrands are evaluated exactly at the path samples. The
    potential part ``2 eps d(w^flat)`` alone integrates to quadrature noise;
    its maxima are reported as ``linear``.
    """
    eps = _ladder(ladder)
    paths = _system_paths(chart, system)
    if not paths:
        raise ValueError("no exited paths to integrate over")
    rem = np.empty(eps.size)
    lin = np.empty(eps.size)
    lin_unit = [abs(xray(chart, lambda p: lie_derivative(chart, psi, p), path)) for path in paths]
    for k, e in enumerate(eps):
        p = psi.with_eps(e)
        if e != 0.0:
            p.check(chart)

        def ftilde(x, p=p):
            return pullback_values(chart, p, x) - chart._metric(x)

        rem[k] = max(abs(xray(chart, ftilde, path)) for path in paths)
        lin[k] = abs(float(e)) * max(lin_unit)
    slope, _ = fit_slope(eps, rem)
    return SlopeReport("xray_gauge_remainder", eps, rem, lin, slope, float("nan"),
                       {"n_paths": len(paths), "diffeo": psi.describe()})


# --------------------------------------------------------------------------
# energy functional
# --------------------------------------------------------------------------


def unit_time_curve(path: GeodesicPath, n: int | None = None):
    """Reparametrize an exited path to ``t in [0, 1]`` at constant speed.

    Returns ``(t, x, xdot)``; with ``n`` the curve is resampled on a uniform
    grid through cubic Hermite interpolation of positions and velocities.
    """
    L = float(path.t[-1])
    t = path.t / L
    x = path.x
    xdot = L * path.xi
    if n is None:
        return t, x, xdot
    herm = CubicHermiteSpline(t, x, xdot, axis=0)
    u = np.linspace(0.0, 1.0, n)
    return u, herm(u), herm(u, 1)


def energy(chart: MetricChart, t, x, xdot=None, other: MetricChart | None = None,
           tau: float = 0.0) -> float:
    """``E = int_0^1 <c', c'>`` under ``g_tau = g + tau (other - g)``.

    ``xdot`` defaults to the derivative of a cubic interpolant through the
    samples. Simpson weights on the given (possibly non-uniform) ``t``.
    """
    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if xdot is None:
        from scipy.interpolate import CubicSpline
        xdot = CubicSpline(t, x, axis=0)(t, 1)
    xdot = np.asarray(xdot, dtype=float)
    G = chart._metric(x)
    if other is not None and tau != 0.0:
        G = G + tau * (other._metric(x) - G)
    integrand = np.einsum("pi,pij,pj->p", xdot, G, xdot)
    return float(simpson_weights(t) @ integrand)


@dataclass
class TaylorReport:
    """Energy along ``c_tau = (1 - tau) gamma + tau gamma_hat`` under ``g_tau``."""

    tau: np.ndarray
    E: np.ndarray
    dE0: float
    remainder_integral: float
    length: float
    length_hat: float

    @property
    def taylor_residual(self) -> float:
        """``E(1) - E(0) - E'(0) - int (1 - tau) E''``; zero up to discretization."""
        return float(self.E[-1] - self.E[0] - self.dE0 - self.remainder_integral)

    @property
    def endpoint_gap(self) -> float:
        return float(self.E[-1] - self.E[0])

    def to_dict(self) -> dict:
        return {"tau": self.tau.tolist(), "E": self.E.tolist(), "dE0": self.dE0,
                "remainder_integral": self.remainder_integral,
                "taylor_residual": self.taylor_residual, "endpoint_gap": self.endpoint_gap,
                "length": self.length, "length_hat": self.length_hat}


def taylor_identity(chart: MetricChart, other: MetricChart, s0: float, mu0: float, *,
                    n_tau: int = 41, n_t: int = 1001, step: float = DEFAULT_STEP) -> TaylorReport:
    """Energy identities between the geodesics of ``g`` and ``other`` with shared lens input.

    The two geodesics start from the same boundary point with the same
    tangential component ``mu0``. When the lens data agree they also end
    together, so ``E(0) = L^2 = E(1)`` and ``E'(0) = -int (1 - tau) E''``.
    ``E'`` and ``E''`` come from finite differences on a uniform tau grid.
    """
    curves = []
    lengths = []
    for ch in (chart, other):
        res = scatter_batch(ch, [s0], [mu0], step=step, keep_paths=True)
        path = res.paths[0]
        if path is None or path.status != PathStatus.EXITED:
            raise ValueError("geodesic did not exit; energy identity undefined")
        curves.append(unit_time_curve(path, n_t))
        lengths.append(float(path.t[-1]))
    (u, x0, v0), (_, x1, v1) = curves
    tau = np.linspace(0.0, 1.0, n_tau)
    E = np.array([energy(chart, u, (1 - a) * x0 + a * x1, (1 - a) * v0 + a * v1, other, a)
                  for a in tau])
    h = tau[1] - tau[0]
    dE0 = float((-25 * E[0] + 48 * E[1] - 36 * E[2] + 16 * E[3] - 3 * E[4]) / (12 * h))
    d2 = np.empty_like(E)
    d2[1:-1] = (E[2:] - 2 * E[1:-1] + E[:-2]) / h ** 2
    # second-order one-sided second differences at both ends
    d2[0] = (2 * E[0] - 5 * E[1] + 4 * E[2] - E[3]) / h ** 2
    d2[-1] = (2 * E[-1] - 5 * E[-2] + 4 * E[-3] - E[-4]) / h ** 2
    integral = float(simpson_weights(tau) @ ((1 - tau) * d2))
    return TaylorReport(tau, E, dE0, integral, lengths[0], lengths[1])


# --------------------------------------------------------------------------
# lens gauge invariance
# --------------------------------------------------------------------------


@dataclass
class GaugeLensReport:
    n_records: int
    n_compared: int
    max_s_diff: float
    max_mu_diff: float
    max_ell_diff: float
    status_mismatch: int

    @property
    def max_diff(self) -> float:
        return max(self.max_s_diff, self.max_mu_diff, self.max_ell_diff)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("n_records", "n_compared", "max_s_diff",
                                               "max_mu_diff", "max_ell_diff",
                                               "status_mismatch")} | {"max_diff": self.max_diff}


def compare_lens(a: LensDataset, b: LensDataset) -> GaugeLensReport:
    """Record-wise comparison of two datasets over the same input grid."""
    if a.s_in.shape != b.s_in.shape or np.any(a.s_in != b.s_in) or np.any(a.mu_in != b.mu_in):
        raise ValueError("datasets were generated on different input grids")
    both = (a.status == "exited") & (b.status == "exited")
    mism = int(np.sum(a.status != b.status))
    if not np.any(both):
        return GaugeLensReport(len(a), 0, np.nan, np.nan, np.nan, mism)
    ds = np.abs(angle_diff(a.s_out[both], b.s_out[both]))
    dm = np.abs(a.mu_out[both] - b.mu_out[both])
    dl = np.abs(a.ell[both] - b.ell[both])
    return GaugeLensReport(len(a), int(both.sum()), float(ds.max()), float(dm.max()),
                           float(dl.max()), mism)


def lens_gauge_check(chart: MetricChart, psi: BoundaryFixingDiffeo,
                     spec: GridSpec | None = None, step: float = DEFAULT_STEP,
                     pulled: MetricChart | None = None) -> GaugeLensReport:
    """Generate lens data of ``g`` and ``psi^* g`` on one grid and compare them."""
    spec = spec or GridSpec(24, 24)
    pulled = pulled or pullback_metric(chart, psi)
    a = generate_dataset(chart, spec, step=step)
    b = generate_dataset(pulled, spec, step=step)
    return compare_lens(a, b)


def report_json(*reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
