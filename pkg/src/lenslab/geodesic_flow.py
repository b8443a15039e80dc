"""Unit-speed geodesic flow with boundary exit detection and Jacobi fields.

Geodesics are integrated with fixed-step RK4 on the first-order system

    x' = xi,  xi'^k = -Gamma^k_ij xi^i xi^j,  J'' = -K(x) J

where J is the scalar normal Jacobi field with J(0) = 0, J'(0) = 1. After
every step xi is rescaled to unit g-length. Many rays are integrated at once;
every array carries a leading batch axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .metric_chart import MetricChart

DEFAULT_STEP = 1e-3
DEFAULT_MAX_LENGTH = 50.0
_BISECTION_ITERS = 60
_SHORT_SEARCH_LEVELS = 48


class PathStatus(str, Enum):
    EXITED = "exited"
    TRAPPED = "trapped"
    LEFT_CHART = "left-extended-chart"


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))

    def reversed(self) -> "PhasePoint":
        return PhasePoint(self.x.copy(), -self.xi)


@dataclass
class GeodesicPath:
    """Samples of one geodesic; the last sample is the exit (or stopping) state.

    ``jacobi`` holds ``(J, J')`` per sample when the Jacobi field was tracked.
    ``length`` is ``inf`` for trapped rays.
    """

    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    status: PathStatus
    length: float
    jacobi: np.ndarray | None = None
    step: float = DEFAULT_STEP

    @property
    def start(self) -> PhasePoint:
        return PhasePoint(self.x[0], self.xi[0])

    @property
    def end(self) -> PhasePoint:
        return PhasePoint(self.x[-1], self.xi[-1])

    @property
    def exited(self) -> bool:
        return self.status == PathStatus.EXITED

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "y", "xi1", "xi2", "J"])
            jac = self.jacobi[:, 0] if self.jacobi is not None else np.full(len(self.t), np.nan)
            for k in range(len(self.t)):
                w.writerow([repr(float(v)) for v in (self.t[k], *self.x[k], *self.xi[k], jac[k])])


# --------------------------------------------------------------------------
# integrator core
# --------------------------------------------------------------------------


def _rhs(chart: MetricChart, S: np.ndarray, jacobi: bool) -> np.ndarray:
    X = S[:, 0:2]
    V = S[:, 2:4]
    out = np.empty_like(S)
    out[:, 0:2] = V
    out[:, 2:4] = chart._geodesic_accel(X, V)
    if jacobi:
        out[:, 4] = S[:, 5]
        out[:, 5] = -chart._gauss_curvature(X) * S[:, 4]
    return out


def _rk4(chart, S, h, jacobi):
    """One RK4 step; ``h`` may be a scalar or a per-ray array."""
    h = np.asarray(h, dtype=float)
    hc = h[:, None] if h.ndim else h
    k1 = _rhs(chart, S, jacobi)
    k2 = _rhs(chart, S + 0.5 * hc * k1, jacobi)
    k3 = _rhs(chart, S + 0.5 * hc * k2, jacobi)
    k4 = _rhs(chart, S + hc * k3, jacobi)
    return S + hc / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _normalize(chart, S):
    X = S[:, 0:2]
    V = S[:, 2:4]
    g = chart._metric(X)
    n = np.sqrt(np.einsum("bi,bij,bj->b", V, g, V))
    S = S.copy()
    S[:, 2:4] = V / n[:, None]
    return S


def _radial_excess(S, radius):
    return S[:, 0] * S[:, 0] + S[:, 1] * S[:, 1] - radius * radius


def _bisect_exit(chart, S0, lo, hi, radius, jacobi):
    """Locate |x(tau)| = radius on [lo, hi] (f(lo) < 0 <= f(hi)) by bisection."""
    lo = lo.copy()
    hi = hi.copy()
    for _ in range(_BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        f = _radial_excess(_rk4(chart, S0, mid, jacobi), radius)
        inside = f < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1e-300)):
            break
    # pick the endpoint closer to the circle
    S_lo = _rk4(chart, S0, lo, jacobi)
    S_hi = _rk4(chart, S0, hi, jacobi)
    use_hi = np.abs(_radial_excess(S_hi, radius)) <= np.abs(_radial_excess(S_lo, radius))
    tau = np.where(use_hi, hi, lo)
    S = np.where(use_hi[:, None], S_hi, S_lo)
    return _normalize(chart, S), tau


def shoot_batch(chart: MetricChart, x0, xi0, max_length: float = DEFAULT_MAX_LENGTH,
                step: float = DEFAULT_STEP, *, boundary_radius: float = 1.0,
                record_every: int = 1, jacobi: bool = False,
                record: bool = True) -> list[GeodesicPath]:
    """Integrate unit-speed geodesics from ``x0`` (B, 2) in directions ``xi0`` (B, 2).

    Each ray runs until it first crosses ``|x| = boundary_radius`` from the
    inside (status ``exited``), reaches ``max_length`` (``trapped``) or leaves
    the extended chart (``left-extended-chart``). Rays starting on the circle
    pointing inward are handled even when the chord is shorter than one step;
    a ray that cannot enter is reported as exited with length 0.

    With ``record=False`` only the start and end states are kept.
    """
    if step <= 0 or max_length <= 0:
        raise ValueError("step and max_length must be positive")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    B = x0.shape[0]
    chart.check_domain(x0)
    d = 6 if jacobi else 4
    S = np.zeros((B, d))
    S[:, 0:2] = x0
    S[:, 2:4] = xi0
    if jacobi:
        S[:, 5] = 1.0
    S = _normalize(chart, S)
    S_start = S.copy()

    ext_r2 = chart.extended_radius**2
    status = np.full(B, "", dtype=object)
    length = np.zeros(B)
    final = np.zeros((B, d))
    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    if record:
        chunks.append((np.arange(B), np.zeros(B), S.copy()))

    idx = np.arange(B)
    t = np.zeros(B)
    entered = _radial_excess(S, boundary_radius) < 0
    nstep = 0
    while idx.size:
        S_new = _normalize(chart, _rk4(chart, S, step, jacobi))
        t_new = t + step
        nstep += 1
        f_new = _radial_excess(S_new, boundary_radius)
        crossed = entered & (f_new >= 0)
        fresh = (~entered) & (f_new >= 0)
        entered = entered | (f_new < 0)
        done = np.zeros(idx.size, dtype=bool)

        if np.any(crossed):
            sel = np.flatnonzero(crossed)
            Se, tau = _bisect_exit(chart, S[sel], np.zeros(sel.size), np.full(sel.size, step),
                                   boundary_radius, jacobi)
            gi = idx[sel]
            final[gi] = Se
            length[gi] = t[sel] + tau
            status[gi] = PathStatus.EXITED.value
            done[sel] = True

        if np.any(fresh):
            # never been inside: look for an interior point inside the first step
            sel = np.flatnonzero(fresh)
            S0 = S[sel]
            lo = np.full(sel.size, np.nan)
            hi = np.full(sel.size, step)
            for level in range(1, _SHORT_SEARCH_LEVELS):
                tau = step * 0.5**level
                open_ = np.isnan(lo)
                if not np.any(open_):
                    break
                f = _radial_excess(_rk4(chart, S0[open_], tau, jacobi), boundary_radius)
                sub = np.flatnonzero(open_)
                inside = f < 0
                lo[sub[inside]] = tau
                hi[sub[~inside]] = tau
            ok = ~np.isnan(lo)
            gi = idx[sel]
            if np.any(ok):
                Se, tau = _bisect_exit(chart, S0[ok], lo[ok], hi[ok], boundary_radius, jacobi)
                final[gi[ok]] = Se
                length[gi[ok]] = t[sel][ok] + tau
            if np.any(~ok):
                final[gi[~ok]] = S0[~ok]
                length[gi[~ok]] = t[sel][~ok]
            status[gi] = PathStatus.EXITED.value
            done[sel] = True

        left = (~done) & (S_new[:, 0] * S_new[:, 0] + S_new[:, 1] * S_new[:, 1] > ext_r2)
        if np.any(left):
            sel = np.flatnonzero(left)
            final[idx[sel]] = S[sel]
            length[idx[sel]] = t[sel]
            status[idx[sel]] = PathStatus.LEFT_CHART.value
            done |= left

        trapped = (~done) & (t_new >= max_length)
        if np.any(trapped):
            sel = np.flatnonzero(trapped)
            final[idx[sel]] = S_new[sel]
            length[idx[sel]] = np.inf
            status[idx[sel]] = PathStatus.TRAPPED.value
            done |= trapped

        keep = ~done
        if record and nstep % record_every == 0 and np.any(keep):
            chunks.append((idx[keep], t_new[keep], S_new[keep]))
        idx = idx[keep]
        S = S_new[keep]
        t = t_new[keep]
        entered = entered[keep]

    paths = []
    if record:
        ray = np.concatenate([c[0] for c in chunks])
        tt = np.concatenate([c[1] for c in chunks])
        SS = np.concatenate([c[2] for c in chunks])
        order = np.argsort(ray, kind="stable")
        ray, tt, SS = ray[order], tt[order], SS[order]
        bounds = np.searchsorted(ray, np.arange(B + 1))
    for b in range(B):
        st = PathStatus(status[b])
        t_end = length[b] if np.isfinite(length[b]) else max_length
        if record:
            tb = tt[bounds[b]:bounds[b + 1]]
            Sb = SS[bounds[b]:bounds[b + 1]]
            if tb[-1] < t_end:
                tb = np.append(tb, t_end)
                Sb = np.vstack([Sb, final[b]])
        else:
            tb = np.array([0.0, t_end])
            Sb = np.vstack([S_start[b], final[b]])
        if st == PathStatus.EXITED and len(tb) == 2 and tb[-1] > 0:
            # quadrature needs a midpoint on very short chords
            mid = _normalize(chart, _rk4(chart, S_start[b:b + 1], 0.5 * tb[-1], jacobi))
            tb = np.array([0.0, 0.5 * tb[-1], tb[-1]])
            Sb = np.vstack([Sb[0], mid[0], Sb[-1]])
        paths.append(GeodesicPath(
            t=tb, x=Sb[:, 0:2].copy(), xi=Sb[:, 2:4].copy(), status=st, length=float(length[b]),
            jacobi=Sb[:, 4:6].copy() if jacobi else None, step=step * record_every,
        ))
    return paths


def shoot(chart: MetricChart, start: PhasePoint, max_length: float = DEFAULT_MAX_LENGTH,
          step: float = DEFAULT_STEP, **kwargs) -> GeodesicPath:
    """Shoot one unit-speed geodesic from ``start`` until it leaves the disc.

    ``start.xi`` is rescaled to unit length. See :func:`shoot_batch` for the
    keyword arguments.
    """
    kwargs.setdefault("jacobi", True)
    return shoot_batch(chart, start.x[None], start.xi[None], max_length, step, **kwargs)[0]


def jacobi_first_conjugate(chart: MetricChart, path: GeodesicPath,
                           rel_tol: float = 1e-9) -> float | None:
    """First time t* > 0 where the normal Jacobi field J (J(0)=0, J'(0)=1) vanishes.

    Zero crossings between samples are refined by bisection with RK4
    sub-steps from the preceding sample. A field that touches zero at the
    final sample (within ``rel_tol`` of its maximum) counts as conjugate there.
    """
    if len(path.t) < 2:
        raise ValueError("path needs at least two samples")
    if path.jacobi is None:
        path = shoot(chart, path.start, max_length=max(path.length, path.t[-1]) * (1 + 1e-9) + path.step,
                     step=min(path.step, DEFAULT_STEP), jacobi=True)
    J = path.jacobi[:, 0]
    scale = max(float(np.max(np.abs(J))), 1e-300)
    for k in range(1, len(J)):
        if J[k] <= 0.0:
            a, b = path.t[k - 1], path.t[k]
            S0 = np.concatenate([path.x[k - 1], path.xi[k - 1], path.jacobi[k - 1]])[None]
            lo, hi = 0.0, b - a
            for _ in range(_BISECTION_ITERS):
                mid = 0.5 * (lo + hi)
                if _rk4(chart, S0, mid, True)[0, 4] > 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-14:
                    break
            return float(a + 0.5 * (lo + hi))
    if abs(J[-1]) <= rel_tol * scale and path.jacobi[-1, 1] < 0:
        return float(path.t[-1] - J[-1] / path.jacobi[-1, 1])
    return None


def exp_map(chart: MetricChart, x, v, n_steps: int = 64) -> np.ndarray:
    """exp_x(v) for batches of base points and (not necessarily unit) vectors."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    S = np.concatenate([x, v], axis=1)
    h = 1.0 / n_steps
    for _ in range(n_steps):
        S = _rk4(chart, S, h, False)
    return S[:, 0:2]
