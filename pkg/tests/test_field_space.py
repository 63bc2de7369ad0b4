import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stochks.field_space import (
    Field,
    GridSpec,
    NegativeValueError,
    SpectralField,
    apply_heat_semigroup,
    chemotactic_divergence,
    gradient,
    integrate_heat_semigroup,
    neumann_laplacian,
    norm,
    read_field_csv,
    to_spectral,
    trapezoid,
    write_field_csv,
)


def richardson_slope(errors, ns):
    return np.polyfit(np.log(1.0 / np.asarray(ns, float)), np.log(errors), 1)[0]


def field_arrays(n):
    return arrays(np.float64, n + 1, elements=st.floats(-10, 10, allow_nan=False))


def test_grid_invariants():
    g = GridSpec(8)
    assert g.spacing * g.n_cells == 1.0
    assert g.n_nodes == 9
    npt.assert_allclose(g.nodes, np.arange(9) / 8)
    assert g.weights.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        GridSpec(3)


def test_field_rejects_bad_values():
    g = GridSpec(4)
    with pytest.raises(ValueError):
        Field(g, np.zeros(4))
    with pytest.raises(ValueError):
        Field(g, [0, 1, np.nan, 0, 0])
    f = Field(g, np.zeros(5))
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_laplacian_of_constant_is_zero():
    g = GridSpec(16)
    out = neumann_laplacian(Field.constant(g, 3.7), 2.5)
    assert np.all(out.values == 0.0)


def test_laplacian_cos_order_two():
    errs, ns = [], [16, 32, 64, 128]
    for n in ns:
        g = GridSpec(n)
        f = Field.from_function(g, lambda x: np.cos(np.pi * x))
        errs.append(np.max(np.abs(neumann_laplacian(f).values + np.pi**2 * np.cos(np.pi * g.nodes))))
    assert 1.8 <= richardson_slope(errs, ns) <= 2.2


def test_laplacian_of_x_squared_stencil():
    n = 8
    g = GridSpec(n)
    out = neumann_laplacian(Field.from_function(g, lambda x: x**2)).values
    npt.assert_allclose(out[1:-1], 2.0, rtol=1e-12)
    # ghost reflection: f(-h) = f(h), f(1+h) = f(1-h)
    h = 1.0 / n
    assert out[0] == pytest.approx(2 * (h**2 - 0.0) / h**2)
    assert out[-1] == pytest.approx(2 * ((1 - h) ** 2 - 1.0) / h**2)


def test_gradient_examples():
    g = GridSpec(16)
    assert np.all(gradient(Field.constant(g, 2.0)).values == 0.0)
    npt.assert_allclose(gradient(Field.from_function(g, lambda x: x)).values, 1.0, rtol=1e-12)
    errs, ns = [], [16, 32, 64, 128]
    for n in ns:
        gg = GridSpec(n)
        f = Field.from_function(gg, lambda x: np.cos(2 * np.pi * x))
        errs.append(np.max(np.abs(gradient(f).values + 2 * np.pi * np.sin(2 * np.pi * gg.nodes))))
    assert 1.8 <= richardson_slope(errs, ns) <= 2.2


def test_gradient_vanishes_at_neumann_boundary():
    errs = []
    for n in (32, 64, 128):
        g = GridSpec(n)
        d = gradient(Field.from_function(g, lambda x: np.cos(np.pi * x))).values
        errs.append(max(abs(d[0]), abs(d[-1])))
    assert errs[-1] < 1e-3 and errs[0] > errs[1] > errs[2]


def test_divergence_examples():
    g = GridSpec(32)
    u = Field.from_function(g, lambda x: 1 + x * (1 - x))
    assert np.all(chemotactic_divergence(u, Field.constant(g, 4.0), 2.0).values == 0.0)
    v = Field.from_function(g, lambda x: np.cos(3 * x) + x**3)
    c, chi = 1.7, 0.8
    lhs = chemotactic_divergence(Field.constant(g, c), v, chi).values
    npt.assert_allclose(lhs, c * chi * neumann_laplacian(v).values, rtol=1e-12, atol=1e-10)


def test_divergence_consistency_order_two():
    # div(u v') for u = 1 + x^2, v = cos(pi x): analytic right-hand side
    def exact(x):
        return 2 * x * (-np.pi * np.sin(np.pi * x)) + (1 + x**2) * (-np.pi**2 * np.cos(np.pi * x))

    errs, ns = [], [32, 64, 128, 256]
    for n in ns:
        g = GridSpec(n)
        u = Field.from_function(g, lambda x: 1 + x**2)
        v = Field.from_function(g, lambda x: np.cos(np.pi * x))
        d = chemotactic_divergence(u, v).values
        errs.append(np.max(np.abs(d[1:-1] - exact(g.nodes[1:-1]))))
    assert 1.8 <= richardson_slope(errs, ns) <= 2.2


@settings(max_examples=60, deadline=None)
@given(field_arrays(12), field_arrays(12), st.floats(0, 5))
def test_divergence_and_laplacian_conserve_mass(u, v, chi):
    g = GridSpec(12)
    scale = max(1.0, np.max(np.abs(u)) * np.max(np.abs(v)) * 12**2)
    d = chemotactic_divergence(Field(g, u), Field(g, v), chi).values
    assert abs(trapezoid(d, 12)) <= 1e-12 * scale * max(chi, 1.0)
    lap = neumann_laplacian(Field(g, u)).values
    assert abs(trapezoid(lap, 12)) <= 1e-12 * max(1.0, np.max(np.abs(u))) * 12**2


def test_heat_semigroup_examples():
    g = GridSpec(32)
    f = Field.from_function(g, lambda x: np.cos(np.pi * x))
    assert apply_heat_semigroup(f, 0.0, 1.0) is f
    out = apply_heat_semigroup(f, 0.1, 1.0, 0.0).values
    npt.assert_allclose(out, np.exp(-np.pi**2 * 0.1) * np.cos(np.pi * g.nodes), atol=1e-10)
    c = apply_heat_semigroup(Field.constant(g, 2.0), 0.7, 3.0, -0.4).values
    npt.assert_allclose(c, 2.0 * math.exp(-0.4 * 0.7), rtol=1e-13)
    with pytest.raises(ValueError):
        apply_heat_semigroup(f, -0.1, 1.0)


@settings(max_examples=40, deadline=None)
@given(field_arrays(16), st.floats(0, 0.3), st.floats(0, 0.3), st.floats(0.1, 2), st.floats(-1, 1))
def test_semigroup_property(vals, s, t, d, z):
    g = GridSpec(16)
    f = Field(g, vals)
    a = apply_heat_semigroup(f, s + t, d, z).values
    b = apply_heat_semigroup(apply_heat_semigroup(f, s, d, z), t, d, z).values
    npt.assert_allclose(a, b, atol=1e-11 * max(1.0, np.max(np.abs(vals))))


def test_semigroup_spectrally_exact_on_low_modes():
    g = GridSpec(16)
    x = g.nodes
    f = Field(g, 0.3 + np.cos(np.pi * x) - 2 * np.cos(5 * np.pi * x) + 0.5 * np.cos(8 * np.pi * x))
    out = apply_heat_semigroup(f, 0.01, 0.5).values
    exact = (0.3 + np.exp(-0.005 * np.pi**2) * np.cos(np.pi * x)
             - 2 * np.exp(-0.005 * 25 * np.pi**2) * np.cos(5 * np.pi * x)
             + 0.5 * np.exp(-0.005 * 64 * np.pi**2) * np.cos(8 * np.pi * x))
    npt.assert_allclose(out, exact, atol=1e-13)


def test_integrated_semigroup_on_eigenfunction():
    g = GridSpec(16)
    f = Field.from_function(g, lambda x: np.cos(2 * np.pi * x))
    mu = -(2 * np.pi) ** 2 + 0.3
    out = integrate_heat_semigroup(f, 0.05, 1.0, 0.3).values
    npt.assert_allclose(out, np.expm1(0.05 * mu) / mu * f.values, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(field_arrays(10))
def test_spectral_round_trip(vals):
    g = GridSpec(10)
    back = to_spectral(Field(g, vals)).to_field().values
    npt.assert_allclose(back, vals, rtol=1e-12, atol=1e-12 * max(1.0, np.max(np.abs(vals))))


def test_spectral_coefficients_of_cosine():
    g = GridSpec(8)
    a = to_spectral(Field.from_function(g, lambda x: 2 * np.cos(3 * np.pi * x))).cos_coeffs
    expect = np.zeros(9)
    expect[3] = 2.0
    npt.assert_allclose(a, expect, atol=1e-14)
    assert isinstance(to_spectral(Field.constant(g, 1.0)), SpectralField)


def test_norm_examples():
    g = GridSpec(64)
    one = Field.constant(g, 1.0)
    assert norm(one, "L1") == pytest.approx(1.0, abs=1e-15)
    assert norm(one, "L2") == pytest.approx(1.0, abs=1e-15)
    assert norm(one, "H1seminorm") == 0.0
    assert norm(one, "LlogL") == pytest.approx(math.log(3.0), abs=1e-15)
    c2 = Field.from_function(g, lambda x: np.cos(2 * np.pi * x))
    assert norm(c2, "L2") == pytest.approx(1 / math.sqrt(2), rel=1e-12)
    with pytest.raises(ValueError):
        norm(one, "Hkappa")
    with pytest.raises(ValueError):
        norm(one, "sup")


def test_hkappa_weights():
    g = GridSpec(32)
    x = g.nodes
    f = Field(g, 0.5 + np.cos(np.pi * x))
    # constant mode weight 1, cos(pi x) carries mass 1/2 and weight (1 + pi^2)^kappa
    for kappa in (0.0, 0.5, 2.0):
        expect = math.sqrt(0.25 + 0.5 * (1 + np.pi**2) ** kappa)
        assert norm(f, "Hkappa", kappa=kappa) == pytest.approx(expect, rel=1e-12)
    assert norm(f, "Hkappa", kappa=0.0) == pytest.approx(norm(f, "L2"), rel=1e-13)


def test_llogl_rejects_negative_values():
    g = GridSpec(8)
    vals = np.ones(9)
    vals[4] = -0.5
    with pytest.raises(NegativeValueError) as err:
        norm(Field(g, vals), "LlogL")
    assert err.value.min_value == -0.5
    vals[4] = -1e-12
    assert norm(Field(g, vals), "LlogL") > 0


def test_batched_norms_match_rows():
    g = GridSpec(8)
    rows = np.random.default_rng(3).normal(size=(4, 9))
    out = norm(Field(g, rows), "L2")
    assert out.shape == (4,)
    for i in range(4):
        assert out[i] == norm(Field(g, rows[i]), "L2")


def test_field_csv_round_trip(tmp_path):
    g = GridSpec(8)
    f = Field.from_function(g, lambda x: np.exp(x) / 3)
    p = tmp_path / "f.csv"
    write_field_csv(p, f)
    assert p.read_text().splitlines()[0] == "x,value"
    back = read_field_csv(p)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
