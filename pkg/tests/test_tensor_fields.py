import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslab.metric_chart import EuclideanChart, make_chart
from lenslab.tensor_fields import (GridMismatchError, SymTensorField, TensorGrid, VectorFieldGrid,
                                   decompose, divergence, divergence_profile, l2_inner, l2_norm,
                                   random_dirichlet_field, saint_venant, sym_differential,
                                   vector_inner, vector_norm)

G33 = TensorGrid(33)


def hess_cos_exp(p):
    # Hessian of h = -cos(x) exp(y)
    x, y = p[:, 0], p[:, 1]
    H = np.empty((len(p), 2, 2))
    H[:, 0, 0] = np.cos(x) * np.exp(y)
    H[:, 0, 1] = H[:, 1, 0] = np.sin(x) * np.exp(y)
    H[:, 1, 1] = -np.cos(x) * np.exp(y)
    return H


def smooth_a(p):
    x, y = p[:, 0], p[:, 1]
    out = np.empty((len(p), 2, 2))
    out[:, 0, 0] = np.exp(-x * x) * np.cos(y)
    out[:, 0, 1] = out[:, 1, 0] = 0.3 * np.sin(x + 2 * y)
    out[:, 1, 1] = 1 + x * y**2
    return out


def smooth_b(p):
    x, y = p[:, 0], p[:, 1]
    out = np.empty((len(p), 2, 2))
    out[:, 0, 0] = x**3 - y
    out[:, 0, 1] = out[:, 1, 0] = np.cos(3 * x * y)
    out[:, 1, 1] = np.exp(y) * x
    return out


def identity_field(grid):
    return SymTensorField.from_callable(grid, lambda p: np.broadcast_to(np.eye(2), (len(p), 2, 2)))


# --- grids and containers --------------------------------------------------

def test_grid_arguments_validated():
    with pytest.raises(ValueError):
        TensorGrid(4)
    with pytest.raises(ValueError):
        TensorGrid(17, half_width=0.9)
    with pytest.raises(ValueError):
        TensorGrid(17, interp="quintic")


def test_collar_is_wider_for_cubic_interpolation():
    assert TensorGrid(33).n_support > TensorGrid(33, interp="linear").n_support
    assert np.all(TensorGrid(33).support[TensorGrid(33).inside])


def test_field_shape_mismatch_rejected():
    with pytest.raises(GridMismatchError):
        SymTensorField(G33, np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_mixing_grids_rejected(flat):
    a = identity_field(G33)
    b = identity_field(TensorGrid(17))
    with pytest.raises(GridMismatchError):
        l2_inner(flat, a, b)


def test_values_off_support_are_zeroed():
    f = SymTensorField(G33, np.ones((33, 33)), np.ones((33, 33)), np.ones((33, 33)))
    assert np.all(f.f11[~G33.support] == 0) and np.all(f.f11[G33.support] == 1)


def test_vector_round_trip():
    f = SymTensorField.from_callable(G33, smooth_a)
    back = SymTensorField.from_vector(G33, f.to_vector())
    assert np.array_equal(back.f12, f.f12) and np.array_equal(back.f22, f.f22)


def test_csv_round_trip(tmp_path):
    f = SymTensorField.from_callable(G33, smooth_b)
    out = tmp_path / "f.csv"
    f.to_csv(out)
    assert out.read_text().splitlines()[0] == "x,y,f11,f12,f22"
    back = SymTensorField.from_csv(out)
    assert back.grid == G33 and np.array_equal(back.f11, f.f11)


# --- symmetric differential and divergence -----------------------------------

def test_dv_of_position_field_is_identity(flat):
    d = sym_differential(flat, VectorFieldGrid.from_callable(G33, lambda p: p))
    m = G33.inside
    assert np.max(np.abs(d.f11[m] - 1)) <= 1e-12 and np.max(np.abs(d.f22[m] - 1)) <= 1e-12
    assert np.max(np.abs(d.f12[m])) <= 1e-12


def test_rotation_is_killing(flat):
    rot = VectorFieldGrid.from_callable(G33, lambda p: np.stack([-p[:, 1], p[:, 0]], 1))
    assert sym_differential(flat, rot).max_abs(G33.inside) <= 1e-12


def test_conformal_dv_has_christoffel_correction(conformal):
    # dv = I - (x dphi^T + dphi x^T - (x . dphi) I) for v = x in the chart e^{2 phi} delta
    d = sym_differential(conformal, VectorFieldGrid.from_callable(G33, lambda p: p))
    for i, j in [(16, 16), (20, 10), (8, 20), (24, 18), (12, 12)]:
        x = np.array([G33.X[i, j], G33.Y[i, j]])
        dphi = conformal.factor.grad(x[None])[0]
        expect = np.eye(2) - (np.outer(x, dphi) + np.outer(dphi, x) - (x @ dphi) * np.eye(2))
        got = np.array([[d.f11[i, j], d.f12[i, j]], [d.f12[i, j], d.f22[i, j]]])
        assert np.allclose(got, expect, atol=1e-12)
    assert (d - identity_field(G33)).max_abs(G33.inside) > 1e-2


def test_divergence_of_identity_vanishes(flat):
    assert divergence(flat, identity_field(G33)).max_abs(G33.inside) <= 1e-12


def test_saint_venant_is_divergence_free(flat):
    g = TensorGrid(65)
    f = SymTensorField.from_callable(g, saint_venant(hess_cos_exp))
    assert divergence(flat, f).max_abs(g.inside) <= 1e-6


def test_delta_d_of_cubic_field(flat):
    # v = (x^2 y, x y^2): delta d v = 1/2 (Lap v + grad div v) = (3y, 3x)
    v = VectorFieldGrid.from_callable(
        G33, lambda p: np.stack([p[:, 0]**2 * p[:, 1], p[:, 0] * p[:, 1]**2], 1))
    dd = divergence(flat, sym_differential(flat, v))
    m = G33.inside
    assert np.max(np.abs(dd.v1 - 3 * G33.Y)[m]) <= 1e-10
    assert np.max(np.abs(dd.v2 - 3 * G33.X)[m]) <= 1e-10


@pytest.mark.parametrize("name", ["flat", "conformal"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_d_and_minus_delta_are_adjoint(name, seed, request):
    chart = request.getfixturevalue(name)
    v = random_dirichlet_field(chart, 4, seed).on_grid(G33)
    f = SymTensorField.from_callable(G33, smooth_a)
    lhs = l2_inner(chart, sym_differential(chart, v), f) + vector_inner(chart, v, divergence(chart, f))
    assert abs(lhs) <= 1e-4 * vector_norm(chart, v) * l2_norm(chart, f)


# --- pairings ----------------------------------------------------------------

def test_identity_pairing_is_two_pi(flat):
    assert abs(l2_inner(flat, identity_field(G33), identity_field(G33)) - 2 * np.pi) <= 1e-10


def test_components_in_different_slots_are_orthogonal(flat):
    z = np.zeros((33, 33))
    a = SymTensorField(G33, (G33.X > 0.2).astype(float), z, z)
    b = SymTensorField(G33, z, z, (G33.X < -0.2).astype(float))
    assert l2_inner(flat, a, b) == 0.0


def test_pairing_converges_under_refinement(conformal):
    vals = {}
    for n in (33, 129):
        g = TensorGrid(n)
        vals[n] = l2_inner(conformal, SymTensorField.from_callable(g, smooth_a),
                           SymTensorField.from_callable(g, smooth_b))
    assert abs(vals[33] - vals[129]) <= 1e-3 * abs(vals[129])


def test_pairing_is_symmetric(conformal):
    a = SymTensorField.from_callable(G33, smooth_a)
    b = SymTensorField.from_callable(G33, smooth_b)
    assert l2_inner(conformal, a, b) == pytest.approx(l2_inner(conformal, b, a), rel=1e-13)


# --- decomposition -----------------------------------------------------------

def v0(p):
    return (1 - np.sum(p * p, axis=1))[:, None] * np.array([1.0, 0.0])


def test_potential_input_has_no_solenoidal_part(flat):
    vg = VectorFieldGrid.from_callable(G33, v0, dirichlet=True)
    f = sym_differential(flat, vg)
    dec = decompose(flat, f)
    err = VectorFieldGrid(G33, dec.v.v1 - vg.v1, dec.v.v2 - vg.v2)
    assert l2_norm(flat, dec.fs) <= 1e-3 * l2_norm(flat, f)
    assert vector_norm(flat, err) <= 1e-3 * vector_norm(flat, vg)


def test_saint_venant_input_is_already_solenoidal(flat):
    f = SymTensorField.from_callable(G33, saint_venant(hess_cos_exp))
    dec = decompose(flat, f)
    assert vector_norm(flat, dec.v) <= 1e-3 * l2_norm(flat, f)
    assert l2_norm(flat, dec.fs - f) <= 1e-3 * l2_norm(flat, f)


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_reassembly_and_orthogonality(name, request):
    chart = request.getfixturevalue(name)
    f = SymTensorField.from_callable(G33, smooth_a)
    dec = decompose(chart, f)
    assert (f - (dec.fs + dec.dv)).max_abs() <= 1e-8
    assert abs(l2_inner(chart, dec.fs, dec.dv)) <= 1e-6 * l2_norm(chart, f) ** 2
    assert dec.v.dirichlet and dec.weak_divergence <= 1e-10


@pytest.mark.parametrize("name", ["flat", "conformal"])
def test_projection_is_idempotent(name, request):
    chart = request.getfixturevalue(name)
    f = SymTensorField.from_callable(G33, smooth_b)
    once = decompose(chart, f)
    twice = decompose(chart, once.fs)
    assert l2_norm(chart, twice.fs - once.fs) <= 1e-10 * l2_norm(chart, f)
    assert vector_norm(chart, twice.v) <= 1e-10 * l2_norm(chart, f)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_decomposition_is_linear(a, b):
    chart = make_chart("conformal", phi_amplitude=0.2, phi_tilt=(0.1, -0.05))
    f = SymTensorField.from_callable(G33, smooth_a)
    h = SymTensorField.from_callable(G33, smooth_b)
    whole = decompose(chart, f * a + h * b).fs
    parts = decompose(chart, f).fs * a + decompose(chart, h).fs * b
    scale = l2_norm(chart, f) * abs(a) + l2_norm(chart, h) * abs(b) + 1e-300
    assert l2_norm(chart, whole - parts) <= 1e-10 * scale


def test_decompose_rejects_nonpositive_tolerance(flat):
    with pytest.raises(ValueError):
        decompose(flat, identity_field(G33), tol=0.0)


def test_edge_divergence_exceeds_interior(flat):
    # extending fs by zero across the circle concentrates the strong divergence there
    prof = divergence_profile(flat, decompose(flat, SymTensorField.from_callable(G33, smooth_a)).fs)
    assert prof["edge_rms"] > prof["interior_rms"]


def test_random_dirichlet_field_vanishes_on_circle(flat):
    pv = random_dirichlet_field(flat, 5, seed=3)
    s = np.linspace(0, 2 * np.pi, 50)
    assert np.max(np.abs(pv(np.stack([np.cos(s), np.sin(s)], 1)))) <= 1e-14


def test_grid_dv_converges_to_closed_form(conformal):
    # the difference stencils are fourth order; one-sided edge stencils lose
    # a little, so ask for better than a factor 8 per halving of h
    pv = random_dirichlet_field(conformal, 4, seed=1)
    err = []
    for n in (33, 65, 129):
        g = TensorGrid(n)
        err.append((pv.dv_on_grid(g) - sym_differential(conformal, pv.on_grid(g))).max_abs(g.inside))
    assert err[0] / err[1] > 8 and err[1] / err[2] > 8


def test_zero_field_splits_into_zeros(flat):
    dec = decompose(flat, SymTensorField.zeros(G33))
    assert dec.fs.max_abs() == 0.0 and dec.v.max_abs() == 0.0 and dec.weak_divergence == 0.0
