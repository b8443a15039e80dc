"""Riemannian metrics on the closed unit disc chart.

Every chart evaluates on arrays of points with shape ``(..., 2)`` and returns
arrays with the matching leading shape. The boundary of M is the unit circle,
parametrized by the chart polar angle ``s``; the chart is defined up to
``|x| <= 1 + margin`` so geodesics may be continued slightly outside M.

Index conventions::

    metric(x)[..., i, j]            g_ij
    metric_grad(x)[..., k, i, j]    d_k g_ij
    christoffel(x)[..., k, i, j]    Gamma^k_ij
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline

DIM = 2
DEFAULT_MARGIN = 0.1
_DOMAIN_SLACK = 1e-9


class ChartDomainError(ValueError):
    """A point lies outside the extended chart ``|x| <= 1 + margin``."""


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != DIM:
        raise ValueError(f"points must have trailing dimension {DIM}, got {x.shape}")
    return x


def _sq(x):
    # |x|^2 over the trailing pair; cheaper than np.sum on the per-step hot path
    return x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1]


# --------------------------------------------------------------------------
# conformal factors phi, for g = exp(2 phi) * delta
# --------------------------------------------------------------------------


class ConformalFactor:
    """Scalar function phi with analytic gradient and Hessian."""

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def laplacian(self, x):
        h = self.hess(x)
        return h[..., 0, 0] + h[..., 1, 1]

    def gauss_curvature(self, x):
        """Curvature of exp(2 phi) delta: K = -exp(-2 phi) Lap phi."""
        return -np.exp(-2.0 * self.value(x)) * self.laplacian(x)

    def describe(self) -> str:
        return type(self).__name__

    def __add__(self, other: "ConformalFactor") -> "SumFactor":
        return SumFactor((self, other))


@dataclass(frozen=True)
class QuadraticFactor(ConformalFactor):
    """phi(x) = amplitude * (1 - |x|^2) + tilt . x + offset."""

    amplitude: float = 0.0
    tilt: tuple[float, float] = (0.0, 0.0)
    offset: float = 0.0

    def value(self, x):
        x = _as_points(x)
        r2 = _sq(x)
        return self.amplitude * (1.0 - r2) + x @ np.asarray(self.tilt) + self.offset

    def grad(self, x):
        x = _as_points(x)
        return -2.0 * self.amplitude * x + np.asarray(self.tilt)

    def hess(self, x):
        x = _as_points(x)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = out[..., 1, 1] = -2.0 * self.amplitude
        return out

    def describe(self) -> str:
        return f"quadratic(a={self.amplitude!r},b={tuple(self.tilt)!r},c={self.offset!r})"


@dataclass(frozen=True)
class SphereFactor(ConformalFactor):
    """phi = log 2 - log(1 + c |x|^2): constant curvature c in stereographic form."""

    curvature: float = 1.0

    def value(self, x):
        x = _as_points(x)
        return np.log(2.0) - np.log1p(self.curvature * _sq(x))

    def grad(self, x):
        x = _as_points(x)
        q = 1.0 + self.curvature * _sq(x)
        return -2.0 * self.curvature * x / q[..., None]

    def hess(self, x):
        x = _as_points(x)
        c = self.curvature
        q = 1.0 + c * _sq(x)
        eye = np.eye(2)
        outer = x[..., :, None] * x[..., None, :]
        return -2.0 * c * eye / q[..., None, None] + 4.0 * c * c * outer / (q * q)[..., None, None]

    def laplacian(self, x):
        x = _as_points(x)
        q = 1.0 + self.curvature * _sq(x)
        return -4.0 * self.curvature / (q * q)

    def gauss_curvature(self, x):
        # constant; skips the per-step Hessian in the Jacobi equation
        return np.full(_as_points(x).shape[:-1], float(self.curvature))

    def describe(self) -> str:
        return f"sphere(c={self.curvature!r})"


@dataclass(frozen=True)
class BumpFactor(ConformalFactor):
    """Compactly supported smooth bump ``A exp(1 - 1/(1 - q))``, q = |x-c|^2/r^2.

    The value at the centre equals ``amplitude``; phi vanishes identically for
    ``|x - center| >= radius``.
    """

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.3
    amplitude: float = 0.1

    def _parts(self, x):
        x = _as_points(x)
        d = x - np.asarray(self.center)
        q = np.sum(d * d, axis=-1) / self.radius**2
        inside = q < 1.0
        u = np.where(inside, 1.0 - q, 1.0)
        e = np.where(inside, self.amplitude * np.exp(1.0 - 1.0 / u), 0.0)
        return d, q, u, e, inside

    def value(self, x):
        return self._parts(x)[3]

    def grad(self, x):
        d, q, u, e, inside = self._parts(x)
        # d phi / dq = -e / u^2 ;  dq/dx = 2 d / r^2
        dphi_dq = -e / (u * u)
        return (dphi_dq * 2.0 / self.radius**2)[..., None] * d

    def hess(self, x):
        d, q, u, e, inside = self._parts(x)
        r2 = self.radius**2
        dphi_dq = -e / (u * u)
        # d^2 phi / dq^2 = e (1 - 2u) / u^4
        d2phi_dq2 = e * (1.0 - 2.0 * u) / u**4
        outer = d[..., :, None] * d[..., None, :]
        eye = np.eye(2)
        return (d2phi_dq2 * 4.0 / r2**2)[..., None, None] * outer + (
            dphi_dq * 2.0 / r2
        )[..., None, None] * eye

    def describe(self) -> str:
        return f"bump(c={tuple(self.center)!r},r={self.radius!r},a={self.amplitude!r})"


@dataclass(frozen=True)
class SumFactor(ConformalFactor):
    terms: tuple[ConformalFactor, ...] = ()

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def grad(self, x):
        return sum(t.grad(x) for t in self.terms)

    def hess(self, x):
        return sum(t.hess(x) for t in self.terms)

    def describe(self) -> str:
        return "+".join(t.describe() for t in self.terms)


# --------------------------------------------------------------------------
# charts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryFrame:
    """Base point, unit tangent and unit interior normal at boundary angle s."""

    s: float
    point: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray


def christoffel_from_metric(g: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)."""
    ginv = np.linalg.inv(g)
    lower = np.empty(dg.shape)  # [..., l, i, j]
    for l in range(DIM):
        for i in range(DIM):
            for j in range(DIM):
                lower[..., l, i, j] = dg[..., i, j, l] + dg[..., j, i, l] - dg[..., l, i, j]
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, lower)


class MetricChart:
    """Base class for metrics on the disc chart.

    Subclasses implement ``_metric`` and ``_metric_grad`` on raw point arrays;
    the public methods add the extended-domain check.
    """

    family = "abstract"
    # closed-form metrics that stay valid (positive definite) beyond the margin
    defined_everywhere = False

    def __init__(self, margin: float = DEFAULT_MARGIN, smoothness: int = 4):
        if margin <= 0:
            raise ValueError("margin must be positive")
        self.margin = float(margin)
        self.smoothness = int(smoothness)

    # -- to be provided by subclasses ------------------------------------
    def _metric(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _metric_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _christoffel(self, x: np.ndarray) -> np.ndarray:
        return christoffel_from_metric(self._metric(x), self._metric_grad(x))

    def _gauss_curvature(self, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
        # R^l_{2 1 2} = d_1 G^l_22 - d_2 G^l_12 + G^l_1m G^m_22 - G^l_2m G^m_12
        gam = self._christoffel(x)
        e0 = np.array([step, 0.0])
        e1 = np.array([0.0, step])

        def d(e):
            return (
                -self._christoffel(x + 2 * e)
                + 8 * self._christoffel(x + e)
                - 8 * self._christoffel(x - e)
                + self._christoffel(x - 2 * e)
            ) / (12 * step)

        d0 = d(e0)
        d1 = d(e1)
        r = (
            d0[..., :, 1, 1]
            - d1[..., :, 0, 1]
            + np.einsum("...lm,...m->...l", gam[..., :, 0, :], gam[..., :, 1, 1])
            - np.einsum("...lm,...m->...l", gam[..., :, 1, :], gam[..., :, 0, 1])
        )
        g = self._metric(x)
        r1212 = np.einsum("...l,...l->...", g[..., 0, :], r)
        return r1212 / np.linalg.det(g)

    def _geodesic_accel(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """-Gamma^k_ij v^i v^j, the right-hand side of the geodesic equation."""
        return -np.einsum("...kij,...i,...j->...k", self._christoffel(x), v, v)

    def fingerprint_fields(self) -> dict:
        return {"family": self.family, "margin": self.margin}

    # -- public API ------------------------------------------------------
    @property
    def extended_radius(self) -> float:
        return 1.0 + self.margin

    def check_domain(self, x) -> np.ndarray:
        x = _as_points(x)
        r = np.sqrt(_sq(x))
        if np.any(r > self.extended_radius + _DOMAIN_SLACK):
            raise ChartDomainError(
                f"point with |x| = {float(np.max(r)):.6g} outside the extended chart "
                f"|x| <= {self.extended_radius:.6g}"
            )
        return x

    def eval_metric(self, x) -> np.ndarray:
        return self._metric(self.check_domain(x))

    metric = eval_metric

    def metric_grad(self, x) -> np.ndarray:
        return self._metric_grad(self.check_domain(x))

    def inverse_metric(self, x) -> np.ndarray:
        return np.linalg.inv(self.eval_metric(x))

    def christoffel(self, x) -> np.ndarray:
        """Christoffel symbols of the second kind, ``[..., k, i, j] = Gamma^k_ij``."""
        return self._christoffel(self.check_domain(x))

    def gauss_curvature(self, x) -> np.ndarray:
        return self._gauss_curvature(self.check_domain(x))

    def norm(self, x, v) -> np.ndarray:
        g = self.eval_metric(x)
        v = np.asarray(v, dtype=float)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))

    def inner(self, x, u, v) -> np.ndarray:
        g = self.eval_metric(x)
        return np.einsum("...i,...ij,...j->...", np.asarray(u, float), g, np.asarray(v, float))

    def boundary_frame(self, s) -> BoundaryFrame:
        """Unit tangent (counterclockwise) and unit interior normal at angle ``s``.

        Both vectors are unit with respect to ``g``; the normal is the
        ``g``-gradient direction of ``-|x|^2``, which is ``g``-orthogonal to
        the circle.
        """
        s_arr = np.asarray(s, dtype=float)
        p, t, n = self.boundary_frames(s_arr)
        if s_arr.ndim == 0:
            return BoundaryFrame(float(s_arr), p, t, n)
        return BoundaryFrame(s_arr, p, t, n)

    def boundary_frames(self, s: np.ndarray):
        s = np.asarray(s, dtype=float)
        p = np.stack([np.cos(s), np.sin(s)], axis=-1)
        return self._frames_at(p, np.stack([-np.sin(s), np.cos(s)], axis=-1), -p)

    def frames_on_circle(self, s: np.ndarray, radius: float):
        """Frames on the circle ``|x| = radius`` (used for exterior hypersurfaces)."""
        s = np.asarray(s, dtype=float)
        u = np.stack([np.cos(s), np.sin(s)], axis=-1)
        return self._frames_at(radius * u, np.stack([-np.sin(s), np.cos(s)], axis=-1), -u)

    def _frames_at(self, p, tangent_dir, inward_conormal):
        g = self._metric(p)
        ginv = np.linalg.inv(g)
        t = tangent_dir / np.sqrt(np.einsum("...i,...ij,...j->...", tangent_dir, g, tangent_dir))[..., None]
        nvec = np.einsum("...ij,...j->...i", ginv, inward_conormal)
        nvec = nvec / np.sqrt(np.einsum("...i,...ij,...j->...", nvec, g, nvec))[..., None]
        return p, t, nvec

    def boundary_metric(self, s) -> np.ndarray:
        """g(d/ds, d/ds) on the boundary: the 1x1 tangential block ``g_11``."""
        s = np.asarray(s, dtype=float)
        p = np.stack([np.cos(s), np.sin(s)], axis=-1)
        c1 = np.stack([-np.sin(s), np.cos(s)], axis=-1)
        return np.einsum("...i,...ij,...j->...", c1, self._metric(p), c1)

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(self.fingerprint_fields().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def __repr__(self) -> str:
        fields = ", ".join(f"{k}={v}" for k, v in self.fingerprint_fields().items())
        return f"{type(self).__name__}({fields})"


class ConformalChart(MetricChart):
    """g = exp(2 phi) delta with an analytic conformal factor."""

    family = "conformal"

    def __init__(self, factor: ConformalFactor, margin: float = DEFAULT_MARGIN,
                 smoothness: int = 4, family: str | None = None):
        super().__init__(margin, smoothness)
        self.factor = factor
        if family is not None:
            self.family = family

    @property
    def defined_everywhere(self) -> bool:
        # negative stereographic curvature blows up at |x| = 1/sqrt(-c)
        return not (isinstance(self.factor, SphereFactor) and self.factor.curvature < 0)

    def _metric(self, x):
        e = np.exp(2.0 * self.factor.value(x))
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = e
        out[..., 1, 1] = e
        return out

    def _metric_grad(self, x):
        e = np.exp(2.0 * self.factor.value(x))
        gp = self.factor.grad(x)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        for k in range(2):
            out[..., k, 0, 0] = 2.0 * e * gp[..., k]
            out[..., k, 1, 1] = 2.0 * e * gp[..., k]
        return out

    def _christoffel(self, x):
        # Gamma^k_ij = delta^k_i phi_j + delta^k_j phi_i - delta_ij phi_k
        p = self.factor.grad(x)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        for k in range(2):
            for i in range(2):
                for j in range(2):
                    v = np.zeros(x.shape[:-1])
                    if k == i:
                        v = v + p[..., j]
                    if k == j:
                        v = v + p[..., i]
                    if i == j:
                        v = v - p[..., k]
                    out[..., k, i, j] = v
        return out

    def _gauss_curvature(self, x, step=None):
        return self.factor.gauss_curvature(x)

    def _geodesic_accel(self, x, v):
        p = self.factor.grad(x)
        pv = p[..., 0] * v[..., 0] + p[..., 1] * v[..., 1]
        vv = _sq(v)
        return -2.0 * pv[..., None] * v + vv[..., None] * p

    def fingerprint_fields(self):
        d = super().fingerprint_fields()
        d["phi"] = self.factor.describe()
        return d


class EuclideanChart(ConformalChart):
    family = "euclidean"

    def __init__(self, margin: float = DEFAULT_MARGIN, smoothness: int = 4):
        super().__init__(QuadraticFactor(), margin, smoothness)

    def _metric(self, x):
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def _metric_grad(self, x):
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def _christoffel(self, x):
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def _gauss_curvature(self, x, step=None):
        return np.zeros(x.shape[:-1])

    def _geodesic_accel(self, x, v):
        return np.zeros(np.broadcast_shapes(x.shape, v.shape))


def sphere_chart(curvature: float = 1.0, margin: float = DEFAULT_MARGIN) -> ConformalChart:
    """Constant curvature ``curvature`` in stereographic coordinates."""
    chart = ConformalChart(SphereFactor(curvature), margin=margin, family="sphere")
    return chart


class PolarNormalChart(MetricChart):
    """Rotationally symmetric test metric ``dr^2 + a(r)^2 dtheta^2``, a = r + beta r^3.

    In Cartesian form ``g = I + (2 beta + beta^2 r^2)(r^2 I - x x^T)``, which
    is polynomial and therefore smooth through the origin. Its boundary
    normal coordinates are ``(theta, 1 - r)`` with ``g_11 = a(1 - x^n)^2``,
    which makes it a closed-form oracle for boundary jets.
    """

    family = "polar"
    defined_everywhere = True

    def __init__(self, beta: float = 0.1, margin: float = DEFAULT_MARGIN, smoothness: int = 4):
        super().__init__(margin, smoothness)
        self.beta = float(beta)

    def _metric(self, x):
        b = self.beta
        r2 = _sq(x)
        c = 2 * b + b * b * r2
        out = c[..., None, None] * (r2[..., None, None] * np.eye(2) - x[..., :, None] * x[..., None, :])
        return out + np.eye(2)

    def _metric_grad(self, x):
        b = self.beta
        r2 = _sq(x)
        c = 2 * b + b * b * r2
        p = r2[..., None, None] * np.eye(2) - x[..., :, None] * x[..., None, :]
        out = np.empty(x.shape[:-1] + (2, 2, 2))
        eye = np.eye(2)
        for k in range(2):
            dc = 2 * b * b * x[..., k]
            dp = 2 * x[..., k][..., None, None] * eye
            dp = dp - eye[k][:, None] * x[..., None, :] - x[..., :, None] * eye[k][None, :]
            out[..., k, :, :] = dc[..., None, None] * p + c[..., None, None] * dp
        return out

    def _gauss_curvature(self, x, step=None):
        r2 = _sq(x)
        return -6.0 * self.beta / (1.0 + self.beta * r2)

    def a(self, r):
        return r + self.beta * r**3

    def fingerprint_fields(self):
        d = super().fingerprint_fields()
        d["beta"] = self.beta
        return d


class TabulatedChart(MetricChart):
    """Metric tabulated on a tensor-product grid, interpolated by quintic splines.

    ``extension='radial'`` evaluates points with ``|x| > 1`` at ``x/|x|``
    (constant along rays, hence only C^0 across the circle);
    ``extension='table'`` trusts the table on its whole box.
    """

    family = "tabulated"

    def __init__(self, xs, ys, g11, g12, g22, margin: float = DEFAULT_MARGIN,
                 extension: str = "radial", degree: int = 5, label: str = "table"):
        super().__init__(margin, smoothness=degree - 1)
        if extension not in ("radial", "table"):
            raise ValueError("extension must be 'radial' or 'table'")
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.extension = extension
        self.label = label
        k = min(degree, len(self.xs) - 1, len(self.ys) - 1)
        self._splines = [
            RectBivariateSpline(self.xs, self.ys, np.asarray(c, dtype=float), kx=k, ky=k)
            for c in (g11, g12, g22)
        ]
        digest = hashlib.sha256()
        for c in (g11, g12, g22):
            digest.update(np.ascontiguousarray(c, dtype=float).tobytes())
        self._digest = digest.hexdigest()[:16]
        if extension == "table":
            lim = min(abs(self.xs[0]), self.xs[-1], abs(self.ys[0]), self.ys[-1])
            if lim < 1.0:
                raise ValueError("table extension requires the table to cover the unit disc")

    def _project(self, x):
        if self.extension == "table":
            return x, None
        r = np.sqrt(_sq(x))
        outside = r > 1.0
        if not np.any(outside):
            return x, None
        scale = np.where(outside, 1.0 / np.maximum(r, 1e-300), 1.0)
        return x * scale[..., None], (outside, r)

    def _eval(self, x, dx=0, dy=0):
        flat = x.reshape(-1, 2)
        comps = [sp.ev(flat[:, 0], flat[:, 1], dx=dx, dy=dy) for sp in self._splines]
        out = np.empty((flat.shape[0], 2, 2))
        out[:, 0, 0] = comps[0]
        out[:, 0, 1] = out[:, 1, 0] = comps[1]
        out[:, 1, 1] = comps[2]
        return out.reshape(x.shape[:-1] + (2, 2))

    def _metric(self, x):
        p, _ = self._project(x)
        return self._eval(p)

    def _metric_grad(self, x):
        p, info = self._project(x)
        d0 = self._eval(p, 1, 0)
        d1 = self._eval(p, 0, 1)
        grad = np.stack([d0, d1], axis=-3)
        if info is None:
            return grad
        outside, r = info
        # chain rule through P(x) = x / |x|:  dP/dx = (I - u u^T) / r
        u = p
        jac = (np.eye(2) - u[..., :, None] * u[..., None, :]) / np.maximum(r, 1e-300)[..., None, None]
        chained = np.einsum("...mk,...mij->...kij", jac, grad)
        return np.where(outside[..., None, None, None], chained, grad)

    def fingerprint_fields(self):
        d = super().fingerprint_fields()
        d.update(extension=self.extension, table=self._digest, label=self.label)
        return d

    @classmethod
    def from_chart(cls, chart: MetricChart, n: int = 161, half_width: float | None = None,
                   **kwargs) -> "TabulatedChart":
        """Sample an analytic chart on an ``n x n`` grid (test and pullback helper)."""
        hw = chart.extended_radius if half_width is None else half_width
        xs = np.linspace(-hw, hw, n)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        g = chart._metric(np.stack([X, Y], axis=-1))
        kwargs.setdefault("margin", chart.margin)
        return cls(xs, xs, g[..., 0, 0], g[..., 0, 1], g[..., 1, 1], **kwargs)

    def to_csv(self, path) -> None:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        g = self._eval(np.stack([X, Y], axis=-1))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "g11", "g12", "g22"])
            for idx in np.ndindex(X.shape):
                w.writerow([repr(float(X[idx])), repr(float(Y[idx])),
                            repr(float(g[idx][0, 0])), repr(float(g[idx][0, 1])),
                            repr(float(g[idx][1, 1]))])

    @classmethod
    def from_csv(cls, path, **kwargs) -> "TabulatedChart":
        """Read a metric table with columns ``x, y, g11, g12, g22`` on a full grid."""
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(row for row in fh if not row.startswith("#"))
            for row in reader:
                rows.append([float(row[k]) for k in ("x", "y", "g11", "g12", "g22")])
        if not rows:
            raise ValueError(f"{path}: empty metric table")
        data = np.array(rows)
        xs = np.unique(data[:, 0])
        ys = np.unique(data[:, 1])
        if len(xs) * len(ys) != len(data):
            raise ValueError(f"{path}: table is not a full tensor-product grid")
        grid = np.full((len(xs), len(ys), 3), np.nan)
        ix = np.searchsorted(xs, data[:, 0])
        iy = np.searchsorted(ys, data[:, 1])
        grid[ix, iy] = data[:, 2:]
        kwargs.setdefault("label", Path(path).name)
        return cls(xs, ys, grid[..., 0], grid[..., 1], grid[..., 2], **kwargs)


class FunctionChart(MetricChart):
    """Metric given by user callables for ``g`` and ``dg`` (analytic closures)."""

    family = "function"

    def __init__(self, metric_fn, metric_grad_fn, margin: float = DEFAULT_MARGIN,
                 label: str = "function", smoothness: int = 4):
        super().__init__(margin, smoothness)
        self._g = metric_fn
        self._dg = metric_grad_fn
        self.label = label

    def _metric(self, x):
        return self._g(x)

    def _metric_grad(self, x):
        return self._dg(x)

    def fingerprint_fields(self):
        d = super().fingerprint_fields()
        d["label"] = self.label
        return d


# --------------------------------------------------------------------------
# construction from config values
# --------------------------------------------------------------------------

FAMILIES = ("euclidean", "conformal", "sphere", "polar", "tabulated")


def make_chart(family: str = "euclidean", *, phi_amplitude: float = 0.0,
               phi_tilt: tuple[float, float] = (0.0, 0.0), phi_offset: float = 0.0,
               curvature: float = 1.0, beta: float = 0.1, margin: float = DEFAULT_MARGIN,
               smoothness: int = 4, table: str | None = None) -> MetricChart:
    if family == "euclidean":
        return EuclideanChart(margin=margin, smoothness=smoothness)
    if family == "conformal":
        factor = QuadraticFactor(phi_amplitude, tuple(phi_tilt), phi_offset)
        return ConformalChart(factor, margin=margin, smoothness=smoothness)
    if family == "sphere":
        return sphere_chart(curvature, margin=margin)
    if family == "polar":
        return PolarNormalChart(beta, margin=margin, smoothness=smoothness)
    if family == "tabulated":
        if not table:
            raise ValueError("tabulated family needs a table path")
        return TabulatedChart.from_csv(table, margin=margin)
    raise ValueError(f"unknown metric family {family!r}; expected one of {FAMILIES}")


def positive_definite_on_grid(chart: MetricChart, n: int = 64) -> bool:
    """Check g > 0 on an n x n grid covering the extended disc."""
    hw = chart.extended_radius
    xs = np.linspace(-hw, hw, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    pts = pts[np.sum(pts * pts, axis=-1) <= hw * hw]
    eig = np.linalg.eigvalsh(chart._metric(pts))
    return bool(np.all(eig > 0))
