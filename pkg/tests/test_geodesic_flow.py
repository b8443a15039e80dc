import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslab.geodesic_flow import (PathStatus, PhasePoint, exp_map, jacobi_first_conjugate, shoot,
                                   shoot_batch)
from lenslab.metric_chart import sphere_chart


def test_flat_diameter(flat):
    start = PhasePoint([-1.0 + 1e-12, 0.0], [1.0, 0.0])
    p = shoot(flat, start, 10.0, 1e-3)
    assert p.status == PathStatus.EXITED
    assert np.allclose(p.x[-1], [1.0, 0.0], atol=1e-8)
    assert abs(p.length - 2.0) <= 1e-8


def test_flat_sixty_degree_chord(flat):
    p = shoot(flat, PhasePoint([0.0, -1.0], [0.5, np.sqrt(3) / 2]), 10.0, 1e-3)
    assert np.allclose(p.x[-1], [np.sqrt(3) / 2, 0.5], atol=1e-10)
    assert abs(p.length - np.sqrt(3)) <= 1e-10


def test_sphere_half_great_circle(sphere):
    p = shoot(sphere, PhasePoint([-1.0, 0.0], [1.0, 0.0]), 10.0, 1e-3)
    assert abs(p.length - np.pi) <= 1e-6
    assert np.allclose(p.x[-1], [1.0, 0.0], atol=1e-8)


def test_invalid_step_or_length_rejected(flat):
    start = PhasePoint([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        shoot(flat, start, 10.0, 0.0)
    with pytest.raises(ValueError):
        shoot(flat, start, -1.0, 1e-3)


def test_direction_is_normalised(conformal):
    p = shoot(conformal, PhasePoint([0.1, 0.2], [3.0, -1.0]), 10.0, 1e-3)
    g = conformal._metric(p.x[:1])
    assert abs(np.einsum("bi,bij,bj->b", p.xi[:1], g, p.xi[:1])[0] - 1.0) <= 1e-12


def test_trapped_when_length_budget_runs_out(flat):
    p = shoot(flat, PhasePoint([0.0, 0.0], [1.0, 0.0]), 0.5, 1e-3)
    assert p.status == PathStatus.TRAPPED and np.isinf(p.length)


def test_leaving_extended_chart_is_a_status(flat):
    p = shoot(flat, PhasePoint([0.0, 0.0], [1.0, 0.0]), 5.0, 1e-2, boundary_radius=1.5)
    assert p.status == PathStatus.LEFT_CHART


@pytest.mark.parametrize("name", ["flat", "sphere", "conformal", "polar"])
def test_speed_conserved(name, request):
    chart = request.getfixturevalue(name)
    p = shoot(chart, PhasePoint([0.05, -0.3], [0.4, 1.0]), 10.0, 1e-3)
    speed = np.einsum("bi,bij,bj->b", p.xi, chart._metric(p.x), p.xi)
    assert np.max(np.abs(np.sqrt(speed) - 1.0)) <= 1e-9


@pytest.mark.parametrize("name", ["sphere", "conformal", "polar"])
def test_exit_on_circle_and_interior_samples(name, request):
    chart = request.getfixturevalue(name)
    p = shoot(chart, PhasePoint([0.2, 0.1], [-0.3, 1.0]), 10.0, 1e-3)
    r = np.hypot(p.x[:, 0], p.x[:, 1])
    assert abs(r[-1] - 1.0) <= 1e-10
    assert np.all(r[:-1] < 1.0)


def test_step_halving_is_fourth_order(conformal):
    start = PhasePoint([0.0, -1.0], [0.6, 0.8])
    ends = [shoot(conformal, start, 10.0, h).x[-1] for h in (0.08, 0.04, 0.02)]
    e1 = np.linalg.norm(ends[0] - ends[1])
    e2 = np.linalg.norm(ends[1] - ends[2])
    assert e1 / e2 >= 8.0


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2 * np.pi), st.floats(-0.95, 0.95))
def test_time_reversal_returns_to_start(s, mu):
    from lenslab.metric_chart import make_chart
    chart = make_chart("conformal", phi_amplitude=0.2, phi_tilt=(0.1, -0.05))
    from lenslab.lens_data import lift_batch
    x0, xi0 = lift_batch(chart, [s], [mu])
    fwd = shoot(chart, PhasePoint(x0[0], xi0[0]), 20.0, 2e-3)
    back = shoot(chart, fwd.end.reversed(), 20.0, 2e-3)
    assert np.linalg.norm(back.x[-1] - x0[0]) <= 1e-6
    assert abs(back.length - fwd.length) <= 1e-6


def test_batch_matches_single_shots(conformal):
    x0 = np.array([[0.0, -1.0], [-1.0, 0.0], [0.3, 0.3]])
    xi0 = np.array([[0.3, 1.0], [1.0, 0.2], [1.0, -1.0]])
    batch = shoot_batch(conformal, x0, xi0, 10.0, 1e-3)
    for k in range(3):
        single = shoot(conformal, PhasePoint(x0[k], xi0[k]), 10.0, 1e-3, jacobi=False)
        assert np.allclose(batch[k].x[-1], single.x[-1], atol=1e-13)


def test_record_every_thins_samples(flat):
    full = shoot(flat, PhasePoint([0.0, -1.0], [0.0, 1.0]), 10.0, 1e-3)
    thin = shoot(flat, PhasePoint([0.0, -1.0], [0.0, 1.0]), 10.0, 1e-3, record_every=10)
    assert thin.t.size < full.t.size / 5
    assert thin.t[-1] == pytest.approx(full.t[-1], abs=1e-13)


def test_path_csv_columns(flat, tmp_path):
    p = shoot(flat, PhasePoint([0.0, -1.0], [0.0, 1.0]), 10.0, 0.1)
    out = tmp_path / "p.csv"
    p.to_csv(out)
    head = out.read_text().splitlines()
    assert head[0] == "t,x,y,xi1,xi2,J"
    assert len(head) == p.t.size + 1


# --- conjugate points --------------------------------------------------------

def test_flat_chord_has_no_conjugate_point(flat):
    p = shoot(flat, PhasePoint([-1.0, 0.0], [1.0, 0.3]), 10.0, 1e-3)
    assert jacobi_first_conjugate(flat, p) is None


def test_sphere_diameter_conjugate_at_pi(sphere):
    p = shoot(sphere, PhasePoint([-1.0, 0.0], [1.0, 0.0]), 10.0, 1e-3)
    assert abs(jacobi_first_conjugate(sphere, p) - np.pi) <= 1e-4


def test_jacobi_field_is_sine_on_unit_sphere(sphere):
    p = shoot(sphere, PhasePoint([-1.0, 0.0], [1.0, 0.0]), 10.0, 1e-3)
    assert np.max(np.abs(p.jacobi[:, 0] - np.sin(p.t))) <= 1e-9


@pytest.mark.parametrize("c", [0.25, 0.5])
def test_short_geodesics_of_positive_curvature_have_no_conjugate_point(c):
    chart = sphere_chart(c)
    p = shoot(chart, PhasePoint([-1.0, 0.0], [1.0, 0.0]), 10.0, 1e-3)
    assert p.length < np.pi / np.sqrt(c)
    assert jacobi_first_conjugate(chart, p) is None


def test_jacobi_recomputed_for_untracked_path(sphere):
    p = shoot(sphere, PhasePoint([-1.0, 0.0], [1.0, 0.0]), 10.0, 1e-3, jacobi=False)
    assert p.jacobi is None
    assert abs(jacobi_first_conjugate(sphere, p) - np.pi) <= 1e-4


def test_exp_map_flat_is_translation(flat):
    x = np.array([[0.1, 0.2], [-0.5, 0.3]])
    v = np.array([[0.3, -0.1], [0.0, 0.2]])
    assert np.allclose(exp_map(flat, x, v), x + v, atol=1e-15)


def test_exp_map_follows_geodesic(conformal):
    x = np.array([0.0, -1.0])
    xi = np.array([0.6, 0.8])
    path = shoot(conformal, PhasePoint(x, xi), 10.0, 1e-3)
    k = 500
    v = path.xi[0] * path.t[k]
    assert np.allclose(exp_map(conformal, x[None], v[None], 256)[0], path.x[k], atol=1e-9)
