"""Recovery of the boundary metric and its first normal derivative from lens data.

Coordinates near the anchor are boundary normal coordinates ``(theta, n)``:
``theta`` is the chart angle along the boundary and ``n`` the distance to it.
For a boundary point ``y`` reached by a near-tangential geodesic, the travel
time ``tau(x) = d(x, y)`` satisfies the eikonal equation

    g^11 tau_theta^2 + tau_n^2 = 1.

Boundary values of ``tau`` and of its tangential gradient come from lens
data alone: rays shot backwards from ``y`` land at boundary points ``x``
near the anchor with length ``tau(x)`` and outgoing tangential component
``mu``, the latter fixing ``tau_n = -sqrt(1 - mu^2)`` on the visible side.

Order 0 reads ``g_11 = (tau_theta / mu_0)^2``. Order 1 differentiates the
eikonal equation in ``n``:

    d_n g^11 tau_theta^2 + 2 g^11 tau_theta tau_theta_n + 2 tau_n tau_nn = 0.

``tau_nn`` is not available from boundary data. It is replaced by the
distance-Hessian estimate ``(1 - tau_n^2) / ell``, which is exact on flat
discs and tends to zero with ``tau_n`` on long geodesics; the remaining
error is removed by extrapolating along the epsilon ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import quad

from .geodesic_flow import DEFAULT_MAX_LENGTH, PathStatus, shoot_batch
from .lens_data import angle_diff, lift_batch, project_batch, scatter_batch
from .metric_chart import MetricChart

DEFAULT_LADDER = (0.2, 0.1, 0.05, 0.025)
DEFAULT_FAN = 3
DEFAULT_FAN_SPREAD = 0.02
JET_STEP = 2.5e-4


class JetRecoveryError(RuntimeError):
    pass


class UnrecoverableError(JetRecoveryError):
    """The near-tangential family does not return to the boundary."""


class ViolatedHypothesisError(JetRecoveryError):
    """A conjugate point sits on a geodesic used by the recovery."""


class IllConditionedError(JetRecoveryError):
    pass


class VisibilityError(JetRecoveryError):
    pass


class DegenerateDirectionsError(ValueError):
    pass


# --------------------------------------------------------------------------
# quadratic forms
# --------------------------------------------------------------------------


def _sym_design(directions: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    n = directions.shape[1]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    cols = [directions[:, i] * directions[:, j] * (1.0 if i == j else 2.0) for i, j in pairs]
    return np.stack(cols, axis=1), pairs


def quad_form_solve(directions, values, rcond: float = 1e-10):
    """Least-squares symmetric tensor ``f`` from samples ``f(v_k, v_k) = values[k]``.

    Returns ``(f, residual)`` with ``residual`` the Euclidean norm of the
    misfit. Raises :class:`DegenerateDirectionsError` when the directions do
    not determine all ``n(n+1)/2`` entries.
    """
    V = np.asarray(directions, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    b = np.asarray(values, dtype=float)
    if V.shape[0] != b.size:
        raise ValueError("one value per direction is required")
    A, pairs = _sym_design(V)
    if V.shape[0] < len(pairs):
        raise DegenerateDirectionsError(f"need at least {len(pairs)} directions")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= rcond * sv[0]:
        raise DegenerateDirectionsError("direction set has rank below n(n+1)/2")
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    n = V.shape[1]
    f = np.zeros((n, n))
    for c, (i, j) in zip(coef, pairs):
        f[i, j] = f[j, i] = c
    return f, float(np.linalg.norm(A @ coef - b))


# --------------------------------------------------------------------------
# travel-time patches
# --------------------------------------------------------------------------


@dataclass
class PatchLevel:
    """Data for one rung of the epsilon ladder."""

    eps: float
    mu0: float
    y_s: float
    y_mu: float
    ell: float
    s: np.ndarray  # landing points of the reverse fan
    tau: np.ndarray
    mu_toward: np.ndarray  # tangential component of the unit vector from x towards y

    @property
    def tau_n(self) -> np.ndarray:
        return -np.sqrt(np.clip(1.0 - self.mu_toward**2, 0.0, None))


@dataclass
class TravelTimePatch:
    s0: float
    orientation: int
    levels: list[PatchLevel]
    step: float

    @property
    def ladder(self) -> np.ndarray:
        return np.array([lv.eps for lv in self.levels])


def build_travel_time_patch(chart: MetricChart, s0: float, ladder=DEFAULT_LADDER,
                            orientation: int = 1, *, fan: int = DEFAULT_FAN,
                            fan_spread: float = DEFAULT_FAN_SPREAD, step: float = JET_STEP,
                            max_length: float = DEFAULT_MAX_LENGTH,
                            conjugate_tol: float = 1e-7) -> TravelTimePatch:
    """Shoot the family ``xi_eps = orientation * t + eps * nu`` from ``s0`` and
    sample ``tau(., y_eps)`` near ``s0`` by a reverse fan from each endpoint.

    ``fan`` rays on either side of the exact reversal are used, with angular
    offsets ``k * fan_spread * beta`` where ``beta`` is the angle between the
    reversed ray and the boundary at ``y_eps``.
    """
    eps = np.asarray(ladder, dtype=float)
    if eps.ndim != 1 or eps.size == 0:
        raise ValueError("ladder must be a nonempty sequence")
    if np.any(eps <= 0):
        raise ValueError("ladder entries must be positive")
    if np.any(np.diff(eps) >= 0):
        raise ValueError("ladder must be strictly decreasing")
    if orientation not in (1, -1):
        raise ValueError("orientation is +1 or -1")
    mu0 = orientation / np.sqrt(1.0 + eps**2)
    s_arr = np.full(eps.size, float(s0))
    x0, xi0 = lift_batch(chart, s_arr, mu0)
    paths = shoot_batch(chart, x0, xi0, max_length, step, jacobi=True)
    ys, ymu, ell = [], [], []
    for e, p in zip(eps, paths):
        if p.status != PathStatus.EXITED:
            raise UnrecoverableError(f"ray with eps={e} from s={s0} is {p.status.value}")
        J = p.jacobi[1:, 0]
        if np.min(J) <= conjugate_tol * np.max(np.abs(J)):
            raise ViolatedHypothesisError(
                f"conjugate point on the eps={e} geodesic from s={s0} (J reaches {np.min(J):.3g})")
        s_y, mu_y = project_batch(chart, p.x[-1:], p.xi[-1:])
        ys.append(s_y[0])
        ymu.append(mu_y[0])
        ell.append(p.length)
    ys, ymu, ell = np.array(ys), np.array(ymu), np.array(ell)

    k = np.arange(-fan, fan + 1)
    beta = np.arccos(np.clip(np.abs(ymu), 0.0, 1.0))
    ang = beta[:, None] + fan_spread * beta[:, None] * k[None, :]
    mu_rev = -np.sign(ymu)[:, None] * np.cos(ang)
    res = scatter_batch(chart, np.repeat(ys, k.size), mu_rev.ravel(), max_length, step)
    levels = []
    for i, e in enumerate(eps):
        sl = slice(i * k.size, (i + 1) * k.size)
        if np.any(res.status[sl] != "exited"):
            raise VisibilityError(f"reverse fan at eps={e} does not return to the boundary")
        s_land = s0 + angle_diff(res.s_out[sl], s0)
        if np.any(np.abs(s_land - s0) > 0.5 * np.pi) or np.any(np.diff(s_land) == 0):
            raise VisibilityError(f"reverse fan at eps={e} leaves the neighbourhood of the anchor")
        levels.append(PatchLevel(float(e), float(mu0[i]), float(ys[i]), float(ymu[i]),
                                 float(ell[i]), s_land, res.ell[sl].copy(), -res.mu_out[sl]))
    return TravelTimePatch(float(s0), orientation, levels, step)


def _derivative_at(s, values, s0, degree=4):
    deg = min(degree, s.size - 1)
    p = Polynomial.fit(s - s0, values, deg)
    return float(p(0.0)), float(p.deriv()(0.0))


# --------------------------------------------------------------------------
# recovery
# --------------------------------------------------------------------------


@dataclass
class BoundaryJet:
    s0: float
    g11: float
    dn_g11: float | None = None
    diagnostics: dict = field(default_factory=dict)


def _extrapolate(eps: np.ndarray, values: np.ndarray, power: int = 2):
    """Two-term fit ``a + b eps**power``; returns (a, rms residual).

    The rung estimates are even in eps to leading order (the two
    orientations mirror each other), hence the default ``power=2``.
    """
    A = np.stack([np.ones_like(eps), eps**power], axis=1)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - values) ** 2)))
    return float(coef[0]), resid


def _level_order0(lv: PatchLevel, s0: float) -> tuple[float, float]:
    _, tau_theta = _derivative_at(lv.s, lv.tau, s0)
    return (tau_theta / lv.mu0) ** 2, tau_theta


def recover_boundary_metric(patches, tol: float = 1e-3) -> BoundaryJet:
    """Order-0 jet ``g_11(x0)`` from one or more patches at the same anchor.

    Each patch contributes one extrapolated value of ``g_11``; they are
    combined by the quadratic-form least-squares solve with the unit
    tangential covector of each orientation as direction.
    """
    if not isinstance(patches, (list, tuple)):
        patches = [patches]
    if any(len(p.levels) < 3 for p in patches):
        raise ValueError("each patch needs at least three eps levels")
    s0 = patches[0].s0
    dirs, vals, per = [], [], []
    worst = 0.0
    for p in patches:
        g = np.array([_level_order0(lv, s0)[0] for lv in p.levels])
        a, r = _extrapolate(p.ladder, g)
        worst = max(worst, r / max(abs(a), 1e-300))
        dirs.append([float(p.orientation)])
        vals.append(a)
        per.append({"orientation": p.orientation, "per_eps": g.tolist(), "limit": a,
                    "fit_residual": r})
    if worst > tol:
        raise IllConditionedError(f"order-0 extrapolation residual {worst:.3g} exceeds {tol}")
    f, resid = quad_form_solve(dirs, vals)
    return BoundaryJet(s0, float(f[0, 0]), None,
                       {"order0": per, "order0_residual": resid, "ladder": patches[0].ladder.tolist()})


def recover_normal_derivative(patches, jet0: BoundaryJet, tol: float = 0.05,
                              hessian_estimate: bool = True) -> BoundaryJet:
    """Order-1 jet ``d g_11 / d n`` at the anchor.

    With ``hessian_estimate=False`` the ``tau_n tau_nn`` term is dropped at
    every rung, relying only on the eps -> 0 limit.
    """
    if not isinstance(patches, (list, tuple)):
        patches = [patches]
    s0 = jet0.s0
    g11 = jet0.g11
    ginv = 1.0 / g11
    dirs, vals, per = [], [], []
    worst = 0.0
    for p in patches:
        est = []
        for lv in p.levels:
            tau_n_all = lv.tau_n
            if np.any(lv.mu_toward * lv.mu0 <= 0):
                raise VisibilityError("fan contains rays arriving from the wrong side")
            _, tau_theta = _derivative_at(lv.s, lv.tau, s0)
            tau_n, tau_thn = _derivative_at(lv.s, tau_n_all, s0)
            if tau_n > 0:
                raise VisibilityError("tau_n must be non-positive on the visible side")
            A = 2.0 * ginv * tau_theta * tau_thn
            C = 2.0 * tau_n * (1.0 - tau_n**2) / lv.ell if hessian_estimate else 0.0
            dn_ginv = -(A + C) / tau_theta**2
            est.append(-g11**2 * dn_ginv)
        est = np.array(est)
        a, r = _extrapolate(p.ladder, est)
        worst = max(worst, r)
        dirs.append([float(p.orientation)])
        vals.append(a)
        per.append({"orientation": p.orientation, "per_eps": est.tolist(), "limit": a,
                    "fit_residual": r})
    if worst > tol:
        raise IllConditionedError(f"order-1 extrapolation residual {worst:.3g} exceeds {tol}")
    f, resid = quad_form_solve(dirs, vals)
    diag = dict(jet0.diagnostics)
    diag.update({"order1": per, "order1_residual": resid, "hessian_estimate": hessian_estimate})
    return BoundaryJet(s0, g11, float(f[0, 0]), diag)


def recover_jet(chart: MetricChart, s0: float, ladder=DEFAULT_LADDER, **kwargs) -> BoundaryJet:
    """Orders 0 and 1 at ``s0`` using both tangential orientations."""
    hess = kwargs.pop("hessian_estimate", True)
    patches = [build_travel_time_patch(chart, s0, ladder, o, **kwargs) for o in (1, -1)]
    return recover_normal_derivative(patches, recover_boundary_metric(patches), hessian_estimate=hess)


def eta_integration_check(chart: MetricChart, patch: TravelTimePatch, g11=None) -> float:
    """Largest gap between ``tau`` differences along the fan and the integral
    of the tangential gradient ``sqrt(g_11) mu`` along the boundary.

    ``g11`` is a callable of the boundary angle; by default the chart's own
    boundary metric.
    """
    if g11 is None:
        g11 = chart.boundary_metric
    worst = 0.0
    for lv in patch.levels:
        order = np.argsort(lv.s)
        s, tau, mu = lv.s[order], lv.tau[order], lv.mu_toward[order]
        deg = min(4, s.size - 1)
        mu_fit = Polynomial.fit(s, mu, deg)
        ref = int(np.argmin(np.abs(s - patch.s0)))
        for j in range(s.size):
            val, _ = quad(lambda u: np.sqrt(float(g11(u))) * mu_fit(u), s[ref], s[j],
                          epsabs=1e-13, epsrel=1e-12)
            # tau decreases when moving toward y, i.e. along -mu
            worst = max(worst, abs((tau[j] - tau[ref]) + val))
    return worst


# --------------------------------------------------------------------------
# direct jets from the chart
# --------------------------------------------------------------------------


def direct_boundary_jet(chart: MetricChart, s0: float) -> tuple[float, float]:
    """``(g_11, d g_11 / d n)`` at angle ``s0`` computed from the metric itself.

    With ``c(s) = (cos s, sin s)`` and ``nu`` the unit interior normal,
    ``d_n g_11 = -2 <c'' + Gamma(c', c'), nu>_g``.
    """
    c = np.array([np.cos(s0), np.sin(s0)])
    c1 = np.array([-np.sin(s0), np.cos(s0)])
    g = chart.eval_metric(c)
    gam = chart.christoffel(c)
    acc = -c + np.einsum("kij,i,j->k", gam, c1, c1)
    _, _, nu = chart.boundary_frames(np.array([s0]))
    return float(c1 @ g @ c1), float(-2.0 * (acc @ g @ nu[0]))
