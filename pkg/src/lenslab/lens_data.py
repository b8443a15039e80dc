"""Scattering relation, lengths and lens datasets in boundary polar coordinates.

A point of the open ball bundle over the boundary is written ``(s, mu)`` with
``s`` the chart angle of the base point and ``mu = <xi, t(s)>_g`` the signed
tangential component of a unit vector; ``|mu|`` is the length of the
tangential projection and ``sign(mu)`` its orientation.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .geodesic_flow import (
    DEFAULT_MAX_LENGTH,
    DEFAULT_STEP,
    GeodesicPath,
    PathStatus,
    PhasePoint,
    shoot_batch,
)
from .metric_chart import MetricChart

TWO_PI = 2.0 * np.pi
DEFAULT_SEED = 0x5EED
DEFAULT_JITTER = 1e-7
_BATCH = 256


def thread_count() -> int:
    """Worker threads for batched work, capped by ``LENSLAB_THREADS``."""
    env = os.environ.get("LENSLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


class LensStatus(str, Enum):
    EXITED = "exited"
    TRAPPED = "trapped"
    TANGENTIAL = "tangential-identity"
    ERROR = "error"


@dataclass(frozen=True)
class BallPoint:
    s: float
    mu: float

    @property
    def lam(self) -> float:
        return abs(self.mu)

    @property
    def theta(self) -> float:
        return float(np.sign(self.mu))


@dataclass(frozen=True)
class LensRecord:
    input: BallPoint
    output: BallPoint
    length: float
    status: LensStatus


def wrap_angle(a):
    """Map angles to [0, 2 pi)."""
    return np.mod(a, TWO_PI)


def angle_diff(a, b):
    """Signed difference a - b folded into (-pi, pi]."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi
    return d


# --------------------------------------------------------------------------
# kappa maps
# --------------------------------------------------------------------------


def lift_batch(chart: MetricChart, s, mu):
    """Base points and inward unit vectors for arrays of ``(s, mu)``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.any(np.abs(mu) > 1.0):
        raise ValueError("|mu| must not exceed 1")
    p, t, n = chart.boundary_frames(s)
    xi = mu[:, None] * t + np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))[:, None] * n
    return p, xi


def lift(chart: MetricChart, b: BallPoint) -> PhasePoint:
    p, xi = lift_batch(chart, [b.s], [b.mu])
    return PhasePoint(p[0], xi[0])


def project_batch(chart: MetricChart, x, xi):
    """Project boundary phase points to ``(s, mu)``; inverse of :func:`lift_batch`
    on inward vectors and the outgoing projection at exit points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    s = wrap_angle(np.arctan2(x[:, 1], x[:, 0]))
    _, t, _ = chart.boundary_frames(s)
    # evaluate at the actual point: it lies on the circle to bisection accuracy
    g = chart._metric(x)
    mu = np.einsum("bi,bij,bj->b", xi, g, t)
    return s, np.clip(mu, -1.0, 1.0)


def project(chart: MetricChart, phase: PhasePoint) -> BallPoint:
    s, mu = project_batch(chart, phase.x[None], phase.xi[None])
    return BallPoint(float(s[0]), float(mu[0]))


# --------------------------------------------------------------------------
# scattering
# --------------------------------------------------------------------------


@dataclass
class ScatterResult:
    s_in: np.ndarray
    mu_in: np.ndarray
    s_out: np.ndarray
    mu_out: np.ndarray
    ell: np.ndarray
    status: np.ndarray
    paths: list | None = None


def scatter_batch(chart: MetricChart, s, mu, max_length: float = DEFAULT_MAX_LENGTH,
                  step: float = DEFAULT_STEP, *, keep_paths: bool = False,
                  jacobi: bool = False, record_every: int = 1,
                  threads: int | None = None) -> ScatterResult:
    """Lens data for arrays of input ball points.

    Records with ``|mu| = 1`` are the identity with zero length. Integrator
    failures become per-record ``error`` statuses instead of exceptions.
    """
    s = wrap_angle(np.atleast_1d(np.asarray(s, dtype=float)))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.any(np.abs(mu) > 1.0):
        raise ValueError("|mu| must not exceed 1")
    n = s.size
    s_out = s.copy()
    mu_out = mu.copy()
    ell = np.zeros(n)
    status = np.full(n, LensStatus.TANGENTIAL.value, dtype=object)
    paths: list | None = [None] * n if keep_paths else None

    live = np.flatnonzero(np.abs(mu) < 1.0)
    chunks = [live[i:i + _BATCH] for i in range(0, live.size, _BATCH)]

    def work(idx):
        x0, xi0 = lift_batch(chart, s[idx], mu[idx])
        return idx, shoot_batch(chart, x0, xi0, max_length, step, jacobi=jacobi,
                                record_every=record_every, record=keep_paths or jacobi)

    nthreads = thread_count() if threads is None else max(1, threads)
    if nthreads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    for idx, batch in results:
        ends_x = np.array([p.x[-1] for p in batch])
        ends_xi = np.array([p.xi[-1] for p in batch])
        so, mo = project_batch(chart, ends_x, ends_xi)
        for k, (i, p) in enumerate(zip(idx, batch)):
            if p.status == PathStatus.EXITED:
                status[i] = LensStatus.EXITED.value
                ell[i] = p.length
                if p.length == 0.0:
                    s_out[i], mu_out[i] = s[i], mu[i]
                else:
                    s_out[i], mu_out[i] = so[k], mo[k]
            elif p.status == PathStatus.TRAPPED:
                status[i] = LensStatus.TRAPPED.value
                ell[i] = np.inf
                s_out[i] = mu_out[i] = np.nan
            else:
                status[i] = LensStatus.ERROR.value
                ell[i] = np.nan
                s_out[i] = mu_out[i] = np.nan
            if keep_paths:
                paths[i] = p
    return ScatterResult(s, mu, s_out, mu_out, ell, status, paths)


def scatter(chart: MetricChart, b: BallPoint, max_length: float = DEFAULT_MAX_LENGTH,
            step: float = DEFAULT_STEP) -> LensRecord:
    r = scatter_batch(chart, [b.s], [b.mu], max_length, step)
    return LensRecord(b, BallPoint(float(r.s_out[0]), float(r.mu_out[0])), float(r.ell[0]),
                      LensStatus(r.status[0]))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Product grid over (s, mu) with nodes at cell midpoints.

    ``mu_abs_min``/``mu_abs_max`` mask the grid to a band of tangential
    components, e.g. ``mu_abs_min=0.9`` keeps only near-tangential rays.
    """

    n_s: int = 32
    n_mu: int = 32
    s_min: float = 0.0
    s_max: float = TWO_PI
    mu_min: float = -1.0
    mu_max: float = 1.0
    mu_abs_min: float = 0.0
    mu_abs_max: float = 1.0

    def __post_init__(self):
        if self.n_s < 1 or self.n_mu < 1:
            raise ValueError("grid must be nonempty")
        if not (-1.0 <= self.mu_min < self.mu_max <= 1.0):
            raise ValueError("mu range must lie inside [-1, 1]")
        if self.s_max <= self.s_min:
            raise ValueError("empty s range")

    @property
    def ds(self) -> float:
        return (self.s_max - self.s_min) / self.n_s

    @property
    def dmu(self) -> float:
        return (self.mu_max - self.mu_min) / self.n_mu

    def nodes(self):
        s = self.s_min + (np.arange(self.n_s) + 0.5) * self.ds
        mu = self.mu_min + (np.arange(self.n_mu) + 0.5) * self.dmu
        S, MU = np.meshgrid(s, mu, indexing="ij")
        S, MU = S.ravel(), MU.ravel()
        keep = (np.abs(MU) >= self.mu_abs_min) & (np.abs(MU) <= self.mu_abs_max)
        return S[keep], MU[keep]

    def describe(self) -> str:
        return (f"n_s={self.n_s};n_mu={self.n_mu};s=[{self.s_min!r},{self.s_max!r}];"
                f"mu=[{self.mu_min!r},{self.mu_max!r}];|mu|=[{self.mu_abs_min!r},{self.mu_abs_max!r}]")


@dataclass
class LensDataset:
    spec: GridSpec
    s_in: np.ndarray
    mu_in: np.ndarray
    s_out: np.ndarray
    mu_out: np.ndarray
    ell: np.ndarray
    status: np.ndarray
    fingerprint: str
    step: float = DEFAULT_STEP
    max_length: float = DEFAULT_MAX_LENGTH
    paths: list | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.s_in.size)

    @property
    def records(self) -> list[LensRecord]:
        return [
            LensRecord(BallPoint(float(self.s_in[i]), float(self.mu_in[i])),
                       BallPoint(float(self.s_out[i]), float(self.mu_out[i])),
                       float(self.ell[i]), LensStatus(self.status[i]))
            for i in range(len(self))
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# chart={self.fingerprint} grid={self.spec.describe()} "
                     f"h={self.step!r} L_max={self.max_length!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s_in", "mu_in", "s_out", "mu_out", "ell", "status"])
            for i in range(len(self)):
                w.writerow([repr(float(self.s_in[i])), repr(float(self.mu_in[i])),
                            repr(float(self.s_out[i])), repr(float(self.mu_out[i])),
                            repr(float(self.ell[i])), self.status[i]])

    @classmethod
    def from_csv(cls, path) -> "LensDataset":
        with open(path, newline="") as fh:
            lines = fh.read().split("\n")
        comments = [ln for ln in lines if ln.startswith("#")]
        rows = list(csv.DictReader(ln for ln in lines if ln and not ln.startswith("#")))
        fp = ""
        for ln in comments:
            if "chart=" in ln:
                fp = ln.split("chart=")[1].split()[0]
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(GridSpec(), col("s_in"), col("mu_in"), col("s_out"), col("mu_out"),
                   col("ell"), np.array([r["status"] for r in rows], dtype=object), fp)


def generate_dataset(chart: MetricChart, spec: GridSpec, max_length: float = DEFAULT_MAX_LENGTH,
                     step: float = DEFAULT_STEP, *, seed: int = DEFAULT_SEED,
                     jitter: float = DEFAULT_JITTER, keep_paths: bool = False,
                     jacobi: bool = False, record_every: int = 1) -> LensDataset:
    """One lens record per grid node; ``mu`` is jittered by at most ``jitter``."""
    s, mu = spec.nodes()
    if jitter > 0:
        rng = np.random.default_rng(seed)
        mu = mu + jitter * rng.uniform(-1.0, 1.0, size=mu.size)
        mu = np.clip(mu, max(spec.mu_min, -1.0), min(spec.mu_max, 1.0))
    r = scatter_batch(chart, s, mu, max_length, step, keep_paths=keep_paths, jacobi=jacobi,
                      record_every=record_every)
    return LensDataset(spec, r.s_in, r.mu_in, r.s_out, r.mu_out, r.ell, r.status,
                       chart.fingerprint(), step, max_length, r.paths)


def euclidean_lens(s, mu):
    """Closed-form lens data of the flat unit disc: (s_out, mu_out, ell)."""
    s = np.asarray(s, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return wrap_angle(s + 2.0 * np.arccos(mu)), mu.copy(), 2.0 * np.sqrt(np.clip(1 - mu * mu, 0, None))


# --------------------------------------------------------------------------
# audits
# --------------------------------------------------------------------------


@dataclass
class CoverageReport:
    covered_fraction: float
    n_cells: int
    n_covered: int
    worst_point: tuple[float, float] | None
    worst_codirection: float | None
    worst_angle: float
    uncovered: list = field(default_factory=list, repr=False)


def audit_completeness(chart: MetricChart, dataset: LensDataset, n_points: int = 16,
                       n_dirs: int = 8, rho: float | None = None, tau_ang: float = 0.1,
                       interior_radius: float = 0.95, record_every: int = 5) -> CoverageReport:
    """Check that every sampled interior conormal is met by a dataset geodesic.

    Cells are ``(z, zeta)`` with ``z`` on an ``n_points`` x ``n_points``
    grid clipped to ``|z| <= interior_radius`` and codirection angles
    ``k pi / n_dirs``. A cell is covered when a sample of some exited,
    conjugate-point-free geodesic lies within ``rho`` of ``z`` and its velocity
    is ``g``-orthogonal to ``zeta`` up to angle ``tau_ang``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if rho is None:
        rho = 2.0 / n_points
    ok = np.array([st == LensStatus.EXITED.value for st in dataset.status]) & (dataset.ell > 0)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise ValueError("dataset has no exited geodesics")
    x0, xi0 = lift_batch(chart, dataset.s_in[idx], dataset.mu_in[idx])
    paths: list[GeodesicPath] = shoot_batch(chart, x0, xi0, dataset.max_length, dataset.step,
                                            jacobi=True, record_every=record_every)
    pts, vel = [], []
    for p in paths:
        if p.status != PathStatus.EXITED:
            continue
        # conjugate points along the path disqualify it
        if np.any(p.jacobi[1:-1, 0] <= 0.0):
            continue
        pts.append(p.x)
        vel.append(p.xi)
    pts = np.concatenate(pts)
    vel = np.concatenate(vel)
    tree = cKDTree(pts)

    g1 = np.linspace(-interior_radius, interior_radius, n_points)
    Z = np.array([(a, b) for a in g1 for b in g1 if a * a + b * b <= interior_radius**2])
    angles = np.arange(n_dirs) * np.pi / n_dirs
    zeta = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    n_cov = 0
    worst = (None, None, -1.0)
    uncovered = []
    near_lists = tree.query_ball_point(Z, rho)
    for z, near in zip(Z, near_lists):
        if near:
            v = vel[near]
            ginv = chart.inverse_metric(z)
            g = chart.eval_metric(z)
            vn = np.sqrt(np.einsum("bi,ij,bj->b", v, g, v))
        for k, zt in enumerate(zeta):
            if near:
                zn = np.sqrt(zt @ ginv @ zt)
                c = np.abs(v @ zt) / (vn * zn)
                dev = float(np.min(np.arcsin(np.clip(c, 0.0, 1.0))))
            else:
                dev = np.pi / 2
            if dev <= tau_ang:
                n_cov += 1
            else:
                uncovered.append((float(z[0]), float(z[1]), float(angles[k])))
                if dev > worst[2]:
                    worst = ((float(z[0]), float(z[1])), float(angles[k]), dev)
    n_cells = Z.shape[0] * n_dirs
    return CoverageReport(n_cov / n_cells, n_cells, n_cov, worst[0], worst[1],
                          max(worst[2], 0.0), uncovered)


@dataclass
class ReversalReport:
    max_deviation: float
    max_length_deviation: float
    n_checked: int
    n_skipped: int


def time_reversal_check(chart: MetricChart, dataset: LensDataset, n_samples: int | None = None,
                        seed: int = DEFAULT_SEED) -> ReversalReport:
    """Scatter ``(s_out, -mu_out)`` and compare with ``(s_in, -mu_in)``."""
    idx = np.flatnonzero(np.array([st == LensStatus.EXITED.value for st in dataset.status])
                         & (dataset.ell > 0))
    skipped = len(dataset) - idx.size
    if n_samples is not None and n_samples < idx.size:
        idx = np.sort(np.random.default_rng(seed).choice(idx, n_samples, replace=False))
    if idx.size == 0:
        return ReversalReport(0.0, 0.0, 0, skipped)
    r = scatter_batch(chart, dataset.s_out[idx], -dataset.mu_out[idx], dataset.max_length,
                      dataset.step)
    ds = np.abs(angle_diff(r.s_out, dataset.s_in[idx]))
    dmu = np.abs(r.mu_out + dataset.mu_in[idx])
    dl = np.abs(r.ell - dataset.ell[idx])
    return ReversalReport(float(np.max(np.maximum(ds, dmu))), float(np.max(dl)), int(idx.size),
                          int(skipped))
