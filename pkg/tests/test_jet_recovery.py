import numpy as np
import pytest

from lenslab.jet_recovery import (DegenerateDirectionsError, ViolatedHypothesisError,
                                  build_travel_time_patch, direct_boundary_jet,
                                  eta_integration_check, quad_form_solve, recover_boundary_metric,
                                  recover_jet)
from lenslab.metric_chart import BumpFactor, ConformalChart, sphere_chart

S0 = 0.7


# --- quadratic forms -------------------------------------------------------

def test_quad_form_identity_from_three_directions():
    d = np.array([[1.0, 0.0], [0.0, 1.0], [1 / np.sqrt(2), 1 / np.sqrt(2)]])
    f, res = quad_form_solve(d, [1.0, 1.0, 1.0])
    assert np.allclose(f, np.eye(2), atol=1e-14) and res <= 1e-14


def test_quad_form_recovers_known_tensor():
    f0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    d = np.array([[1.0, 0.0], [0.6, 0.8], [-0.28, 0.96]])
    f, _ = quad_form_solve(d, np.einsum("ki,ij,kj->k", d, f0, d))
    assert np.max(np.abs(f - f0)) <= 1e-12


def test_quad_form_redundant_directions_report_residual():
    d = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, -0.6]])
    vals = np.einsum("ki,ki->k", d, d) + np.array([0.0, 0.0, 0.0, 1e-3])
    _, res = quad_form_solve(d, vals)
    assert 0 < res < 1e-3


def test_quad_form_rank_one_directions_rejected():
    with pytest.raises(DegenerateDirectionsError):
        quad_form_solve([[1.0, 0.0]] * 3, [1.0, 1.0, 1.0])


# --- patches -----------------------------------------------------------------

def test_flat_patch_lengths_are_chords(flat):
    patch = build_travel_time_patch(flat, 0.0, (0.2, 0.1, 0.05))
    for lv in patch.levels:
        assert abs(lv.ell - 2 * np.sqrt(1 - lv.mu0**2)) <= 1e-10
        # tau(x, y) is the chord between two boundary points
        chord = 2 * np.abs(np.sin(0.5 * (lv.s - lv.y_s)))
        assert np.max(np.abs(lv.tau - chord)) <= 1e-10


def test_sphere_patch_lengths_are_arcs():
    # curvature 1/4: rescaled unit sphere; reference by a tenfold finer step
    chart = sphere_chart(0.25)
    coarse = build_travel_time_patch(chart, 1.0, (0.2, 0.1, 0.05))
    fine = build_travel_time_patch(chart, 1.0, (0.2, 0.1, 0.05), step=2.5e-5)
    for a, b in zip(coarse.levels, fine.levels):
        assert abs(a.ell - b.ell) <= 1e-9
        assert np.max(np.abs(a.tau - b.tau)) <= 1e-9


@pytest.mark.parametrize("ladder", [(0.1, 0.05, 0.0), (0.05, 0.1, 0.2), (), (0.1, -0.1)])
def test_bad_ladders_rejected(flat, ladder):
    with pytest.raises(ValueError):
        build_travel_time_patch(flat, 0.0, ladder)


def test_recovery_needs_three_levels(flat):
    patch = build_travel_time_patch(flat, 0.0, (0.2, 0.1))
    with pytest.raises(ValueError):
        recover_boundary_metric(patch)


def test_unit_sphere_violates_non_conjugacy(sphere):
    # every geodesic of the unit-sphere cap ends at its conjugate point
    with pytest.raises(ViolatedHypothesisError):
        build_travel_time_patch(sphere, S0, (0.2, 0.1, 0.05))


def test_tau_from_boundary_gradient_integration(flat, conformal):
    for chart in (flat, conformal):
        patch = build_travel_time_patch(chart, S0, (0.2, 0.1, 0.05))
        assert eta_integration_check(chart, patch) <= 1e-8


# --- recovered jets ----------------------------------------------------------

def test_flat_jet(flat):
    jet = recover_jet(flat, S0)
    assert abs(jet.g11 - 1.0) <= 1e-4 and abs(jet.dn_g11 + 2.0) <= 1e-2


def test_zero_boundary_conformal_jet(conformal_zero_boundary):
    # phi = 0.1(1 - |x|^2): g11 = 1 and d_n g11 = -2 + 2 * 0.2 on the circle
    jet = recover_jet(conformal_zero_boundary, S0)
    assert abs(jet.g11 - 1.0) <= 1e-4
    assert abs(jet.dn_g11 + 1.6) <= 1e-2


def test_tilted_conformal_order_zero_matches_exp_two_phi(conformal):
    jet = recover_jet(conformal, S0)
    x0 = np.array([np.cos(S0), np.sin(S0)])
    assert abs(jet.g11 - np.exp(2 * conformal.factor.value(x0[None])[0])) <= 1e-3


@pytest.mark.parametrize("name", ["conformal", "polar"])
def test_jet_agrees_with_direct_expansion(name, request):
    chart = request.getfixturevalue(name)
    jet = recover_jet(chart, S0)
    g11, dn = direct_boundary_jet(chart, S0)
    assert abs(jet.g11 - g11) <= 1e-4 and abs(jet.dn_g11 - dn) <= 1e-2


def test_small_sphere_jet_matches_pinned_value():
    # g = lam(r)^2 delta with lam = 2/(1 + r^2/4); in boundary normal coordinates
    # g11 = (r lam)^2 and d/dn = -(1/lam) d/dr, so at r = 1:
    # g11 = 1.6^2 and d_n g11 = -2 (lam + lam') = -2 (1.6 - 0.64)
    chart = sphere_chart(0.25)
    jet = recover_jet(chart, 1.0)
    assert abs(jet.g11 - 2.56) <= 1e-4
    assert abs(jet.dn_g11 + 1.92) <= 1e-2


def test_order_one_error_shrinks_along_ladder(conformal):
    jet = recover_jet(conformal, S0)
    _, dn = direct_boundary_jet(conformal, S0)
    for side in jet.diagnostics["order1"]:
        err = np.abs(np.array(side["per_eps"]) - dn)
        assert np.all(np.diff(err) < 0)


def test_flat_rungs_are_exact(flat):
    jet = recover_jet(flat, S0)
    for side in jet.diagnostics["order1"]:
        assert np.max(np.abs(np.array(side["per_eps"]) + 2.0)) <= 1e-8


def test_recovery_ignores_metric_away_from_the_geodesics(flat):
    # a bump supported in |x| < 0.4 is never visited by the near-tangential rays
    bumped = ConformalChart(BumpFactor((0.0, 0.0), 0.4, 0.3))
    a, b = recover_jet(flat, S0), recover_jet(bumped, S0)
    assert abs(a.g11 - b.g11) < 1e-8 and abs(a.dn_g11 - b.dn_g11) < 1e-8


def test_recovery_sees_metric_near_the_boundary(flat):
    bumped = ConformalChart(BumpFactor((np.cos(S0), np.sin(S0)), 0.3, 0.1))
    assert abs(recover_jet(bumped, S0).dn_g11 - recover_jet(flat, S0).dn_g11) > 1e-3


def test_diagnostics_carry_ladder_and_residuals(flat):
    jet = recover_jet(flat, S0)
    assert jet.diagnostics["ladder"] == [0.2, 0.1, 0.05, 0.025]
    assert jet.diagnostics["order0_residual"] >= 0.0
    assert len(jet.diagnostics["order1"]) == 2
