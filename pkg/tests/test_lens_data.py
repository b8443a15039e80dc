import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslab.lens_data import (BallPoint, GridSpec, LensDataset, LensStatus, audit_completeness,
                               angle_diff, euclidean_lens, generate_dataset, lift, lift_batch,
                               project_batch, scatter, scatter_batch, time_reversal_check)

SOUTH = 1.5 * np.pi


def test_lift_normal_and_oblique(flat):
    ph = lift(flat, BallPoint(SOUTH, 0.0))
    assert np.allclose(ph.x, [0, -1], atol=1e-15) and np.allclose(ph.xi, [0, 1], atol=1e-15)
    ph = lift(flat, BallPoint(SOUTH, 0.5))
    assert np.allclose(ph.xi, [0.5, np.sqrt(3) / 2], atol=1e-15)


@pytest.mark.parametrize("name", ["flat", "sphere", "conformal", "polar"])
def test_lift_at_unit_mu_is_tangent(name, request):
    chart = request.getfixturevalue(name)
    s = np.array([0.3, 2.0])
    _, xi = lift_batch(chart, s, np.ones(2))
    _, t, _ = chart.boundary_frames(s)
    assert np.allclose(xi, t, atol=1e-15)


def test_lift_rejects_mu_above_one(flat):
    with pytest.raises(ValueError):
        lift(flat, BallPoint(0.0, 1.0001))


def test_scatter_sixty_degree_chord(flat):
    rec = scatter(flat, BallPoint(SOUTH, 0.5))
    assert rec.status == LensStatus.EXITED
    assert abs(angle_diff(rec.output.s, np.pi / 6)) <= 1e-10
    assert abs(rec.output.mu - 0.5) <= 1e-10
    assert abs(rec.length - np.sqrt(3)) <= 1e-10


def test_scatter_diameter(flat):
    rec = scatter(flat, BallPoint(np.pi, 0.0))
    assert abs(angle_diff(rec.output.s, 0.0)) <= 1e-10
    assert abs(rec.output.mu) <= 1e-10 and abs(rec.length - 2.0) <= 1e-10


@pytest.mark.parametrize("name", ["flat", "sphere", "conformal"])
@pytest.mark.parametrize("mu", [1.0, -1.0])
def test_unit_mu_is_tangential_identity(name, mu, request):
    chart = request.getfixturevalue(name)
    rec = scatter(chart, BallPoint(0.7, mu))
    assert rec.status == LensStatus.TANGENTIAL
    assert rec.output == rec.input and rec.length == 0.0


def test_trapped_records_flagged_with_infinite_length(flat):
    r = scatter_batch(flat, [0.0], [0.0], max_length=1.0)
    assert r.status[0] == "trapped" and np.isinf(r.ell[0])


def test_dataset_small_grid(flat):
    ds = generate_dataset(flat, GridSpec(8, 8))
    assert len(ds) == 64
    assert not np.any(ds.status == "trapped")
    assert np.all(np.abs(ds.mu_in) < 1.0)


def test_dataset_matches_chord_formula(flat):
    ds = generate_dataset(flat, GridSpec(16, 16))
    assert np.max(np.abs(ds.ell - 2 * np.sqrt(1 - ds.mu_in**2))) <= 1e-6
    s_out, mu_out, _ = euclidean_lens(ds.s_in, ds.mu_in)
    assert np.max(np.abs(angle_diff(ds.s_out, s_out))) <= 1e-6
    assert np.max(np.abs(ds.mu_out - mu_out)) <= 1e-6


def test_sphere_diameter_records(sphere):
    spec = GridSpec(4, 5)  # mu midpoints include 0
    ds = generate_dataset(sphere, spec, jitter=0.0)
    centre = np.abs(ds.mu_in) < 1e-12
    assert centre.sum() == 4
    assert np.allclose(ds.ell[centre], np.pi, atol=1e-6)


def test_dataset_is_deterministic(conformal):
    a = generate_dataset(conformal, GridSpec(6, 6))
    b = generate_dataset(conformal, GridSpec(6, 6))
    assert np.array_equal(a.s_out, b.s_out) and np.array_equal(a.ell, b.ell)
    c = generate_dataset(conformal, GridSpec(6, 6), seed=7)
    assert not np.array_equal(a.mu_in, c.mu_in)


def test_band_mask_keeps_inputs_inside(flat):
    spec = GridSpec(8, 40, mu_abs_min=0.9)
    ds = generate_dataset(flat, spec)
    assert len(ds) > 0 and np.all(np.abs(ds.mu_in) >= 0.9 - 1e-6)


def test_csv_round_trip(conformal, tmp_path):
    ds = generate_dataset(conformal, GridSpec(5, 4))
    out = tmp_path / "lens.csv"
    ds.to_csv(out)
    text = out.read_text()
    assert text.startswith(f"# chart={conformal.fingerprint()}")
    assert "\r" not in text
    back = LensDataset.from_csv(out)
    assert back.fingerprint == conformal.fingerprint()
    assert np.array_equal(back.ell, ds.ell) and np.array_equal(back.s_out, ds.s_out)


def test_length_symmetric_under_reversal(conformal):
    ds = generate_dataset(conformal, GridSpec(10, 10))
    rep = time_reversal_check(conformal, ds)
    assert rep.n_checked == len(ds)
    assert rep.max_deviation <= 1e-6 and rep.max_length_deviation <= 1e-6


def test_reversal_skips_tangential_records(flat):
    r = scatter_batch(flat, [0.2, 0.4], [1.0, 0.3])
    ds = LensDataset(GridSpec(1, 2), r.s_in, r.mu_in, r.s_out, r.mu_out, r.ell, r.status, "x")
    rep = time_reversal_check(flat, ds)
    assert rep.n_skipped == 1 and rep.n_checked == 1


def test_diameter_reversal_is_exact(flat):
    r = scatter_batch(flat, [np.pi], [0.0])
    back = scatter_batch(flat, r.s_out, -r.mu_out)
    assert abs(angle_diff(back.s_out[0], np.pi)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-0.999, 0.999))
def test_lift_project_round_trip(s, mu):
    from lenslab.metric_chart import make_chart
    chart = make_chart("conformal", phi_amplitude=0.2, phi_tilt=(0.1, -0.05))
    x, xi = lift_batch(chart, [s], [mu])
    s2, mu2 = project_batch(chart, x, xi)
    assert abs(angle_diff(s2[0], s)) <= 1e-10 and abs(mu2[0] - mu) <= 1e-10


def test_lengths_vary_continuously(flat):
    ds = generate_dataset(flat, GridSpec(4, 64))
    ell = ds.ell.reshape(4, 64)
    spec = GridSpec(4, 64)
    # |d ell / d mu| is unbounded only at |mu| = 1; midpoints stay away from it
    jumps = np.abs(np.diff(ell, axis=1))
    assert np.max(jumps) <= 2.0 * np.sqrt(2 * spec.dmu)


# --- completeness audit ------------------------------------------------------

def test_audit_full_aperture_covers_everything(flat):
    ds = generate_dataset(flat, GridSpec(48, 48), keep_paths=True, jacobi=True, record_every=5)
    rep = audit_completeness(flat, ds, 16, 8)
    assert rep.covered_fraction == 1.0


def test_audit_near_tangential_band_leaves_centre_uncovered(flat):
    spec = GridSpec(48, 200, mu_abs_min=0.9)
    ds = generate_dataset(flat, spec, keep_paths=True, jacobi=True, record_every=5)
    rep = audit_completeness(flat, ds, 16, 8)
    assert rep.covered_fraction < 1.0
    # chords with |mu| > 0.9 never come closer than 0.9 to the centre, so
    # every codirection at every audit point with |z| < 0.8 stays uncovered
    g1 = np.linspace(-0.95, 0.95, 16)
    central = {(a, b) for a in g1 for b in g1 if np.hypot(a, b) < 0.8}
    missing = {}
    for a, b, _ in rep.uncovered:
        missing[(a, b)] = missing.get((a, b), 0) + 1
    assert central and all(missing.get(c, 0) == 8 for c in central)


def test_audit_empty_dataset_rejected(flat):
    e = np.array([])
    ds = LensDataset(GridSpec(), e, e, e, e, e, np.array([], dtype=object), "")
    with pytest.raises(ValueError):
        audit_completeness(flat, ds)
