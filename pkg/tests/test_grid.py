import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import chipfield as cf
from chipfield.errors import DomainError, ValidationError


def unit_grid(n=11):
    return cf.Grid2D(0.0, 1.0, 0.0, 1.0, n, n)


def default_grid():
    return cf.Grid2D(-4.0, 4.0, -4.0, 4.0, 20, 20)


# -- construction --------------------------------------------------------------


def test_grid_invariants():
    g = default_grid()
    assert g.hx == pytest.approx(8.0 / 19.0)
    assert g.n_nodes == 400
    assert g.quad_weights.sum() == pytest.approx(64.0)
    with pytest.raises(ValidationError):
        cf.Grid2D(0, 1, 0, 1, 2, 5)
    with pytest.raises(ValidationError):
        cf.Grid2D(1, 0, 0, 1, 5, 5)


def test_field_shape_and_finiteness():
    g = unit_grid(5)
    f = cf.ScalarField(g, np.arange(25.0))  # flat row-major accepted
    assert f.values.shape == (5, 5)
    assert f.values[1, 0] == 5.0  # index = iy*nx + ix
    with pytest.raises(ValidationError):
        cf.ScalarField(g, np.full((5, 5), np.nan))
    with pytest.raises(ValidationError):
        cf.ScalarField(g, np.zeros((4, 5)))


# -- integrate ------------------------------------------------------------------


def test_integrate_constant_is_area():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: np.ones_like(X))
    assert cf.integrate(f) == pytest.approx(64.0, abs=1e-12)


def test_integrate_odd_function_vanishes():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: X)
    assert cf.integrate(f) == pytest.approx(0.0, abs=1e-12)


def test_integrate_quadratic_against_analytic_value():
    # oracle: int over [-1,1]^2 of x^2 dx dy = (2/3) * 2 = 4/3, and the composite
    # trapezoid rule for constant second derivative carries the exact correction
    # (b-a) h^2 f''/12 = h^2/3 per x-line (y is exact for a field constant in y)
    g = cf.Grid2D(-1, 1, -1, 1, 51, 51)
    h = g.hx
    f = cf.field_from_function(g, lambda X, Y: X**2)
    analytic = 4.0 / 3.0
    assert cf.integrate(f) == pytest.approx(analytic, abs=1.2e-3)
    assert cf.integrate(f) == pytest.approx(analytic + 2 * h**2 / 3, abs=1e-12)


# -- gradient / divergence / laplacian ------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5)
)
def test_gradient_exact_for_affine_fields(a, b, c):
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: a * X + b * Y + c)
    grad = cf.gradient(f)
    scale = 1.0 + abs(a) + abs(b) + abs(c)
    assert np.abs(grad.vx - a).max() < 1e-12 * scale
    assert np.abs(grad.vy - b).max() < 1e-12 * scale


def test_gradient_quadratic_central_difference_value():
    # ((x+h)^2 - (x-h)^2) / 2h = 2x exactly; at x=1, h=0.1 this is 2.0
    g = cf.Grid2D(0.0, 2.0, 0.0, 1.0, 21, 5)
    assert g.hx == pytest.approx(0.1)
    f = cf.field_from_function(g, lambda X, Y: X**2)
    grad = cf.gradient(f)
    ix = 10  # x = 1.0, interior
    assert grad.vx[2, ix] == pytest.approx(2.0, abs=1e-13)


def test_gradient_constant_field_is_zero():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: 3.7 * np.ones_like(X))
    grad = cf.gradient(f)
    # boundary stencils combine equal values with different coefficients, so
    # only roundoff survives
    assert np.abs(grad.vx).max() < 1e-14
    assert np.abs(grad.vy).max() < 1e-14


def test_divergence_of_identity_field_is_two():
    g = default_grid()
    X, Y = g.mesh
    v = cf.VectorField(g, X, Y)
    div = cf.divergence(v)
    assert np.allclose(div.values, 2.0, atol=1e-12)


def test_divergence_constant_zero_and_quadratic_value():
    g = cf.Grid2D(0.0, 2.0, 0.0, 1.0, 21, 5)
    v = cf.VectorField(g, np.ones((5, 21)), np.full((5, 21), -2.0))
    assert np.abs(cf.divergence(v).values).max() == 0.0
    X, _ = g.mesh
    v2 = cf.VectorField(g, X**2, np.zeros_like(X))
    assert cf.divergence(v2).values[2, 10] == pytest.approx(2.0, abs=1e-13)


def test_laplacian_values():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: X**2 + Y**2)
    lap = cf.laplacian(f)
    assert np.allclose(lap.values[1:-1, 1:-1], 4.0, atol=1e-10)
    lin = cf.field_from_function(g, lambda X, Y: 2 * X - Y)
    assert np.abs(cf.laplacian(lin).values).max() < 1e-11


def test_laplacian_quartic_stencil_value():
    # stencil of x^4 at x with spacing h gives 12 x^2 + 2 h^2; at x=1, h=0.1: 12.02
    g = cf.Grid2D(0.0, 2.0, 0.0, 0.4, 21, 5)
    f = cf.field_from_function(g, lambda X, Y: X**4)
    lap = cf.laplacian(f)
    assert lap.values[2, 10] == pytest.approx(12.02, abs=1e-6)


def test_divergence_of_gradient_matches_laplacian_interior():
    g = cf.Grid2D(-1, 1, -1, 1, 41, 41)
    f = cf.field_from_function(g, lambda X, Y: X**4 - X * Y**3 + 2 * Y**2)
    a = cf.divergence(cf.gradient(f)).values[2:-2, 2:-2]
    b = cf.laplacian(f).values[2:-2, 2:-2]
    # one stencil truncation: C h^2 max|f''''|, with max f'''' = 24 and C = 1
    assert np.abs(a - b).max() <= 24 * g.hx**2


# -- interpolate -----------------------------------------------------------------


def test_interpolate_reproduces_node_values():
    g = default_grid()
    rng = np.random.default_rng(7)
    f = cf.ScalarField(g, rng.normal(size=(g.ny, g.nx)))
    vals = cf.interpolate(f, g.nodes)
    assert np.allclose(vals, f.values.ravel(), atol=1e-14)


def test_interpolate_bilinear_product_value():
    # bilinear interpolation is exact for f = x*y: at (0.05, 0.05) it gives 0.0025
    g = unit_grid(11)
    f = cf.field_from_function(g, lambda X, Y: X * Y)
    assert cf.interpolate(f, np.array([0.05, 0.05])) == pytest.approx(0.0025, abs=1e-15)
    center = cf.interpolate(f, np.array([0.55, 0.35]))
    assert center == pytest.approx(0.55 * 0.35, abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-3, 3), beta_=st.floats(-3, 3))
def test_interpolate_is_linear_in_the_field(alpha, beta_):
    g = unit_grid(9)
    rng = np.random.default_rng(11)
    f1 = cf.ScalarField(g, rng.normal(size=(9, 9)))
    f2 = cf.ScalarField(g, rng.normal(size=(9, 9)))
    combo = cf.ScalarField(g, alpha * f1.values + beta_ * f2.values)
    pts = rng.uniform(0, 1, size=(20, 2))
    lhs = cf.interpolate(combo, pts)
    rhs = alpha * cf.interpolate(f1, pts) + beta_ * cf.interpolate(f2, pts)
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + abs(alpha) + abs(beta_)))


def test_interpolate_outside_domain_raises():
    g = unit_grid(5)
    f = cf.field_from_function(g, lambda X, Y: X)
    with pytest.raises(DomainError):
        cf.interpolate(f, np.array([1.5, 0.5]))


# -- normalize -------------------------------------------------------------------


def test_normalize_constant_density():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: np.ones_like(X))
    d = cf.normalize(f)
    assert np.allclose(d.values, 1.0 / 64.0, atol=1e-15)


def test_normalize_idempotent():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: np.exp(-(X**2) - Y**2))
    d = cf.normalize(f)
    d2 = cf.normalize(d)
    assert np.abs(d2.values - d.values).max() < 1e-12


def test_normalize_gaussian_mass_is_one():
    g = default_grid()
    f = cf.field_from_function(g, lambda X, Y: 17.3 * np.exp(-((X - 0.5) ** 2 + Y**2) / 0.2))
    d = cf.normalize(f)
    assert abs(cf.integrate(d) - 1.0) < 1e-9


def test_normalize_rejects_bad_inputs():
    g = unit_grid(5)
    with pytest.raises(ValidationError):
        cf.normalize(cf.ScalarField(g, -np.ones((5, 5))))
    with pytest.raises(ValidationError):
        cf.normalize(cf.ScalarField(g, np.zeros((5, 5))))


def test_density_field_validates_mass():
    g = unit_grid(5)
    with pytest.raises(ValidationError):
        cf.DensityField(g, np.full((5, 5), 3.0))


# -- CSV round trip ---------------------------------------------------------------


def test_field_csv_round_trip(tmp_path):
    g = cf.Grid2D(-2.0, 3.0, 0.5, 1.5, 7, 5)
    rng = np.random.default_rng(3)
    f = cf.ScalarField(g, rng.normal(size=(5, 7)))
    path = tmp_path / "field.csv"
    cf.write_field_csv(f, path)
    back = cf.read_field_csv(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
    header = path.read_text().splitlines()[0]
    assert header == "ix,iy,x,y,value"
