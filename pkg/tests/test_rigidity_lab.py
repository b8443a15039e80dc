import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslab.geodesic_flow import PhasePoint, shoot
from lenslab.lens_data import GridSpec, generate_dataset
from lenslab.metric_chart import EuclideanChart
from lenslab.rigidity_lab import (BoundaryFixingDiffeo, NonDiffeomorphismError, compare_lens,
                                  energy, fit_slope, lens_gauge_check, lie_derivative,
                                  linearization_split, pullback_metric, pullback_values,
                                  report_json, taylor_identity, unit_time_curve,
                                  xray_gauge_remainder)

PSI = BoundaryFixingDiffeo(0.05)
CIRCLE = np.linspace(0, 2 * np.pi, 13)


def circle_points(r=1.0):
    return r * np.stack([np.cos(CIRCLE), np.sin(CIRCLE)], 1)


@pytest.fixture(scope="module")
def flat_pulled():
    return pullback_metric(EuclideanChart(), PSI)


# --- the diffeomorphism -----------------------------------------------------------

@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_boundary_points_are_fixed(name, request):
    chart = request.getfixturevalue(name)
    assert np.max(np.abs(PSI.apply(chart, circle_points()) - circle_points())) == 0.0


def test_generating_field_vanishes_on_circle():
    assert np.max(np.abs(PSI.w(circle_points()))) <= 1e-15


def test_interior_points_move(flat):
    moved = PSI.apply(flat, np.array([[0.0, 0.0], [0.3, -0.2]]))
    assert np.linalg.norm(moved[0] - [0.015, -0.005]) <= 1e-15


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_zero_amplitude_is_identity(name, request):
    chart = request.getfixturevalue(name)
    pts = 0.6 * circle_points()
    psi0 = PSI.with_eps(0.0)
    assert np.array_equal(psi0.apply(chart, pts), pts)
    assert np.array_equal(pullback_values(chart, psi0, pts), chart._metric(pts))


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_jacobian_determinant_positive(name, request):
    chart = request.getfixturevalue(name)
    assert PSI.check(chart) > 0.9


def test_large_amplitude_folds_the_disc(flat):
    assert PSI.lipschitz_bound() < 5.0
    with pytest.raises(NonDiffeomorphismError):
        PSI.with_eps(5.0).check(flat)
    with pytest.raises(NonDiffeomorphismError):
        pullback_metric(flat, PSI.with_eps(5.0))


def test_flat_differential_matches_difference_quotients(flat, rng):
    x = rng.uniform(-0.7, 0.7, size=(6, 2))
    h = 1e-6
    fd = np.stack([(PSI.apply(flat, x + h * e) - PSI.apply(flat, x - h * e)) / (2 * h)
                   for e in np.eye(2)], axis=-1)
    assert np.allclose(PSI.differential(flat, x), fd, atol=1e-9)


# --- pulled-back metric -----------------------------------------------------------

def test_pullback_differs_inside(flat, flat_pulled):
    x = np.array([[0.0, 0.0], [0.4, 0.2]])
    assert np.max(np.abs(flat_pulled.eval_metric(x) - np.eye(2))) > 1e-3


def test_pullback_keeps_boundary_lengths(flat, conformal):
    # the tangential block is fixed on the circle; the normal rows are not,
    # because w has a nonzero normal derivative there
    T = np.stack([-np.sin(CIRCLE), np.cos(CIRCLE)], 1)
    for chart in (flat, conformal):
        diff = pullback_values(chart, PSI, circle_points()) - chart._metric(circle_points())
        assert np.max(np.abs(np.einsum("pi,pij,pj->p", T, diff, T))) <= 1e-10


def test_pulled_table_matches_pointwise_pullback(flat, flat_pulled, rng):
    x = rng.uniform(-0.7, 0.7, size=(10, 2))
    assert np.allclose(flat_pulled.eval_metric(x), pullback_values(flat, PSI, x), atol=1e-9)


def test_pulled_metric_positive_definite(flat_pulled, rng):
    x = rng.uniform(-0.75, 0.75, size=(200, 2))
    assert np.all(np.linalg.eigvalsh(flat_pulled.eval_metric(x)) > 0)


def test_table_must_cover_extended_chart(flat):
    with pytest.raises(ValueError):
        pullback_metric(flat, PSI, half_width=1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_lie_derivative_is_first_order_term(x, y):
    flat = EuclideanChart()
    p = np.array([[x, y]])
    eps = 1e-4
    quotient = (pullback_values(flat, PSI.with_eps(eps), p) - np.eye(2)) / eps
    assert np.allclose(quotient, lie_derivative(flat, PSI, p), atol=1e-3)


# --- slope reports -------------------------------------------------------------------

def test_fit_slope_of_power_law():
    e = np.array([0.08, 0.04, 0.02, 0.01])
    assert fit_slope(e, 3 * e**2)[0] == pytest.approx(2.0, abs=1e-12)
    assert np.isnan(fit_slope([0.1], [1.0])[0])


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_linearization_remainder_is_quadratic(name, request):
    chart = request.getfixturevalue(name)
    rep = linearization_split(chart, PSI)
    assert 1.85 <= rep.slope <= 2.15
    assert abs(rep.linear_slope - 1.0) <= 0.05


def test_linearization_at_zero_amplitude(flat):
    rep = linearization_split(flat, PSI, (0.04, 0.02, 0.01, 0.0))
    assert rep.remainder[-1] == 0.0 and rep.linear[-1] == 0.0
    assert 1.85 <= rep.slope <= 2.15


def test_ladder_needs_four_points(flat):
    with pytest.raises(ValueError):
        linearization_split(flat, PSI, (0.04, 0.02, 0.01))


def test_xray_remainder_is_quadratic_on_flat_disc(flat):
    ds = generate_dataset(flat, GridSpec(8, 8), keep_paths=True)
    rep = xray_gauge_remainder(flat, ds, PSI)
    assert 1.8 <= rep.slope <= 2.2
    # the potential part alone integrates to quadrature noise at every amplitude
    assert np.all(rep.linear <= 1e-10)


def test_xray_remainder_is_quadratic_on_curved_chart(conformal):
    starts = [([0.0, -1.0], [0.3, 1.0]), ([-1.0, 0.0], [1.0, 0.4]), ([0.6, 0.8], [-0.9, -0.2])]
    paths = [shoot(conformal, PhasePoint(x, v), 10.0, 1e-3, record_every=4) for x, v in starts]
    rep = xray_gauge_remainder(conformal, paths, PSI)
    assert 1.8 <= rep.slope <= 2.2


def test_xray_remainder_vanishes_at_zero_amplitude(flat):
    paths = [shoot(flat, PhasePoint([0.0, -1.0], [0.3, 1.0]), 10.0, 1e-3)]
    rep = xray_gauge_remainder(flat, paths, PSI, (0.02, 0.01, 0.005, 0.0))
    assert rep.remainder[-1] == 0.0


def test_slope_report_serialises(flat, tmp_path):
    rep = linearization_split(flat, PSI)
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "eps,remainder,linear"
    back = json.loads(report_json(rep))
    assert back[0]["slope"] == pytest.approx(rep.slope)


# --- energy ------------------------------------------------------------------------------

def test_energy_of_unit_speed_geodesic_is_length_squared(conformal):
    p = shoot(conformal, PhasePoint([0.0, -1.0], [0.3, 1.0]), 10.0, 1e-3)
    t, x, xdot = unit_time_curve(p, 1001)
    assert energy(conformal, t, x, xdot) == pytest.approx(p.length**2, rel=1e-9)


def test_energy_of_straight_segment(flat):
    t = np.linspace(0, 1, 11)
    x = np.stack([-1 + 2 * t, np.zeros_like(t)], 1)
    assert energy(flat, t, x) == pytest.approx(4.0, abs=1e-12)


def test_energy_interpolates_metrics_linearly(flat, flat_pulled):
    t = np.linspace(0, 1, 101)
    x = np.stack([0.5 * t - 0.2, 0.3 * t], 1)
    e0, e1 = energy(flat, t, x), energy(flat, t, x, other=flat_pulled, tau=1.0)
    assert energy(flat, t, x, other=flat_pulled, tau=0.25) == pytest.approx(0.75 * e0 + 0.25 * e1,
                                                                             rel=1e-12)


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_energy_endpoints_and_taylor_identity(name, request):
    chart = request.getfixturevalue(name)
    pulled = pullback_metric(chart, PSI)
    rep = taylor_identity(chart, pulled, 1.0, 0.3)
    assert abs(rep.E[0] - rep.length**2) <= 1e-6
    assert abs(rep.endpoint_gap) <= 1e-6
    assert abs(rep.length - rep.length_hat) <= 1e-6
    # E(1) = E(0) + E'(0) + int (1 - tau) E''; with E(1) = E(0) the slope is minus the integral
    assert abs(rep.taylor_residual) <= 1e-6
    assert abs(rep.dE0 + rep.remainder_integral) <= 1e-6
    assert abs(rep.dE0) > 1e-4


# --- lens gauge invariance ------------------------------------------------------------------

def test_lens_data_is_gauge_invariant(flat, flat_pulled):
    rep = lens_gauge_check(flat, PSI, GridSpec(8, 8), pulled=flat_pulled)
    assert rep.n_compared == 64 and rep.status_mismatch == 0
    assert rep.max_diff <= 1e-5


def test_compare_lens_rejects_different_grids(flat):
    a = generate_dataset(flat, GridSpec(4, 4))
    b = generate_dataset(flat, GridSpec(4, 5))
    with pytest.raises(ValueError):
        compare_lens(a, b)


def test_compare_lens_detects_a_different_metric(flat, conformal):
    a = generate_dataset(flat, GridSpec(6, 6))
    b = generate_dataset(conformal, GridSpec(6, 6))
    assert compare_lens(a, b).max_diff > 1e-3
