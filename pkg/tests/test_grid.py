import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from diffeovar import (
    CoordinateMap,
    GridMismatchError,
    GridSpec,
    ScalarField,
    VectorField,
    compose,
    divergence,
    gradient,
    identity_map,
    jacobian_determinant,
    jacobian_matrix,
    sample,
)


def make_spec(n=16, d=0.125):
    return GridSpec(n, n, dx=d, dy=d)


def coords(spec):
    return spec.coordinate_arrays()


class TestGridSpec:
    def test_rejects_tiny_grids(self):
        with pytest.raises(ValueError):
            GridSpec(3, 8)
        with pytest.raises(ValueError):
            GridSpec(8, 3)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            GridSpec(8, 8, dx=0.0)
        with pytest.raises(ValueError):
            GridSpec(8, 8, dy=-1.0)

    def test_mismatched_grids_rejected(self):
        f = ScalarField.zeros(make_spec(8))
        m = identity_map(make_spec(9))
        with pytest.raises(GridMismatchError):
            sample(f, m)

    def test_fields_reject_non_finite(self):
        spec = make_spec(8)
        bad = np.zeros(spec.shape)
        bad[2, 2] = np.nan
        with pytest.raises(ValueError):
            ScalarField(spec, bad)

    def test_fields_are_immutable(self):
        f = ScalarField.zeros(make_spec(8))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0


class TestSample:
    def test_identity_is_exact(self):
        spec = make_spec()
        rng = np.random.default_rng(0)
        f = ScalarField(spec, rng.standard_normal(spec.shape))
        out = sample(f, identity_map(spec))
        np.testing.assert_array_equal(out.values, f.values)

    def test_constant_field_any_map(self):
        spec = make_spec()
        f = ScalarField.full(spec, 3.25)
        rng = np.random.default_rng(1)
        xx, yy = coords(spec)
        m = CoordinateMap(
            spec,
            xx + 0.3 * spec.dx * rng.standard_normal(spec.shape),
            yy + 0.3 * spec.dy * rng.standard_normal(spec.shape),
        )
        np.testing.assert_allclose(sample(f, m).values, 3.25, atol=1e-14)

    def test_linear_ramp_half_pixel_shift(self):
        # bilinear interpolation reproduces an affine field exactly
        spec = make_spec()
        xx, yy = coords(spec)
        f = ScalarField(spec, xx.copy())
        m = CoordinateMap(spec, xx + 0.5 * spec.dx, yy.copy())
        out = sample(f, m)
        expected = np.minimum(xx + 0.5 * spec.dx, xx.max())  # clamp at right edge
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_vector_field_sampling(self):
        spec = make_spec()
        xx, yy = coords(spec)
        v = VectorField(spec, xx.copy(), 2.0 * yy)
        out = sample(v, identity_map(spec))
        np.testing.assert_allclose(out.x, v.x, atol=1e-14)
        np.testing.assert_allclose(out.y, v.y, atol=1e-14)


class TestGradient:
    def test_constant_gives_zero(self):
        spec = make_spec()
        g = gradient(ScalarField.full(spec, 7.0))
        np.testing.assert_allclose(g.x, 0.0, atol=1e-14)
        np.testing.assert_allclose(g.y, 0.0, atol=1e-14)

    def test_affine_is_exact(self):
        spec = make_spec()
        xx, yy = coords(spec)
        g = gradient(ScalarField(spec, 3.0 * xx + 2.0 * yy))
        np.testing.assert_allclose(g.x, 3.0, atol=1e-10)
        np.testing.assert_allclose(g.y, 2.0, atol=1e-10)

    def test_second_order_convergence(self):
        # grid-refinement oracle on f = sin(x)
        errs = []
        for n in (32, 64):
            spec = GridSpec(n, n, dx=2 * np.pi / n, dy=2 * np.pi / n)
            xx, _ = coords(spec)
            g = gradient(ScalarField(spec, np.sin(xx)))
            err = np.max(np.abs(g.x - np.cos(xx))[1:-1, :])
            errs.append(err)
        assert errs[1] <= errs[0] / 3.0  # ~4x drop for a second-order stencil
        assert errs[0] <= 1.0 * (2 * np.pi / 32) ** 2

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**31))
    def test_linearity(self, a, b, seed):
        spec = make_spec(8)
        rng = np.random.default_rng(seed)
        f = rng.standard_normal(spec.shape)
        g = rng.standard_normal(spec.shape)
        lhs = gradient(ScalarField(spec, a * f + b * g))
        gf = gradient(ScalarField(spec, f))
        gg = gradient(ScalarField(spec, g))
        np.testing.assert_allclose(lhs.x, a * gf.x + b * gg.x, atol=1e-9)
        np.testing.assert_allclose(lhs.y, a * gf.y + b * gg.y, atol=1e-9)


class TestJacobian:
    def test_identity_determinant_is_one(self):
        spec = make_spec()
        det = jacobian_determinant(identity_map(spec))
        np.testing.assert_allclose(det.values, 1.0, atol=1e-12)

    def test_affine_stretch(self):
        spec = make_spec()
        xx, yy = coords(spec)
        det = jacobian_determinant(CoordinateMap(spec, 1.1 * xx, yy.copy()))
        np.testing.assert_allclose(det.values[1:-1, 1:-1], 1.1, atol=1e-10)

    def test_against_symbolic_oracle(self):
        # det computed by sympy for phi(x) = x + 0.1 (sin y, sin x)
        x, y = sympy.symbols("x y")
        phi = sympy.Matrix([x + sympy.Rational(1, 10) * sympy.sin(y),
                            y + sympy.Rational(1, 10) * sympy.sin(x)])
        det_expr = phi.jacobian(sympy.Matrix([x, y])).det()
        det_fn = sympy.lambdify((x, y), det_expr, "numpy")
        errs = []
        for n in (32, 64):
            spec = GridSpec(n, n, dx=2 * np.pi / n, dy=2 * np.pi / n)
            xx, yy = coords(spec)
            m = CoordinateMap(spec, xx + 0.1 * np.sin(yy), yy + 0.1 * np.sin(xx))
            det = jacobian_determinant(m)
            errs.append(np.max(np.abs(det.values - det_fn(xx, yy))[1:-1, 1:-1]))
        assert errs[1] <= errs[0] / 3.0
        assert errs[0] <= 0.05 * (2 * np.pi / 32) ** 2

    def test_jacobian_matrix_of_affine_map(self):
        spec = make_spec()
        xx, yy = coords(spec)
        m = CoordinateMap(spec, 2.0 * xx + 0.5 * yy, 0.25 * xx + yy)
        jac = jacobian_matrix(m)
        np.testing.assert_allclose(jac[1:-1, 1:-1, 0, 0], 2.0, atol=1e-10)
        np.testing.assert_allclose(jac[1:-1, 1:-1, 0, 1], 0.5, atol=1e-10)
        np.testing.assert_allclose(jac[1:-1, 1:-1, 1, 0], 0.25, atol=1e-10)
        np.testing.assert_allclose(jac[1:-1, 1:-1, 1, 1], 1.0, atol=1e-10)


class TestDivergence:
    def test_constant_field(self):
        spec = make_spec()
        v = VectorField(spec, np.full(spec.shape, 2.0), np.full(spec.shape, -1.0))
        np.testing.assert_allclose(divergence(v).values, 0.0, atol=1e-12)

    def test_linear_field(self):
        spec = make_spec()
        xx, yy = coords(spec)
        v = VectorField(spec, xx.copy(), yy.copy())
        np.testing.assert_allclose(divergence(v).values[1:-1, 1:-1], 2.0, atol=1e-10)

    def test_gradient_divergence_is_laplacian(self):
        # div(grad f) matches the analytic Laplacian at second order
        errs = []
        for n in (32, 64):
            spec = GridSpec(n, n, dx=2 * np.pi / n, dy=2 * np.pi / n)
            xx, yy = coords(spec)
            f = ScalarField(spec, np.sin(xx) * np.cos(yy))
            lap = divergence(gradient(f))
            exact = -2.0 * np.sin(xx) * np.cos(yy)
            errs.append(np.max(np.abs(lap.values - exact)[2:-2, 2:-2]))
        assert errs[1] <= errs[0] / 3.0


class TestCompose:
    def test_identity_is_neutral(self):
        spec = make_spec()
        rng = np.random.default_rng(3)
        xx, yy = coords(spec)
        m = CoordinateMap(
            spec,
            xx + 0.2 * spec.dx * rng.standard_normal(spec.shape),
            yy + 0.2 * spec.dy * rng.standard_normal(spec.shape),
        )
        ident = identity_map(spec)
        for out in (compose(ident, m), compose(m, ident)):
            np.testing.assert_allclose(out.map_x, m.map_x, atol=1e-12)
            np.testing.assert_allclose(out.map_y, m.map_y, atol=1e-12)

    def test_translations_add(self):
        spec = make_spec()
        xx, yy = coords(spec)
        t1 = CoordinateMap(spec, xx + 0.4 * spec.dx, yy - 0.2 * spec.dy)
        t2 = CoordinateMap(spec, xx - 0.1 * spec.dx, yy + 0.7 * spec.dy)
        out = compose(t1, t2)
        np.testing.assert_allclose(out.map_x, xx + 0.3 * spec.dx, atol=1e-12)
        np.testing.assert_allclose(out.map_y, yy + 0.5 * spec.dy, atol=1e-12)
