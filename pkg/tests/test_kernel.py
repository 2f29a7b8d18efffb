import numpy as np
import pytest

from diffeovar import GridSpec, KernelOperator, VectorField, inner_product


def make_op(n=32, scale=0.25, power=4):
    return KernelOperator(GridSpec(n, n), scale=scale, power=power)


def random_field(spec, seed):
    rng = np.random.default_rng(seed)
    return VectorField(spec, rng.standard_normal(spec.shape), rng.standard_normal(spec.shape))


def stencil_apply(op, values):
    """Direct application of (1 - a^2 Laplacian)^p with the periodic
    5-point stencil; independent oracle for the Fourier path."""
    spec = op.spec
    out = values.copy()
    for _ in range(op.power):
        lap = (
            (np.roll(out, -1, 0) - 2 * out + np.roll(out, 1, 0)) / spec.dx**2
            + (np.roll(out, -1, 1) - 2 * out + np.roll(out, 1, 1)) / spec.dy**2
        )
        out = out - op.scale**2 * lap
    return out


class TestApplyA:
    def test_zero_maps_to_zero(self):
        op = make_op()
        out = op.apply_a(VectorField.zeros(op.spec))
        np.testing.assert_array_equal(out.x, 0.0)
        np.testing.assert_array_equal(out.y, 0.0)

    def test_zero_scale_is_identity(self):
        op = make_op(scale=0.0)
        v = random_field(op.spec, 0)
        out = op.apply_a(v)
        np.testing.assert_allclose(out.x, v.x, atol=1e-12)
        np.testing.assert_allclose(out.y, v.y, atol=1e-12)

    def test_fourier_mode_eigenvalue_matches_stencil(self):
        op = make_op(n=16)
        spec = op.spec
        xx = np.arange(spec.nx)[:, None]
        yy = np.arange(spec.ny)[None, :]
        for kx, ky in [(1, 0), (3, 2), (0, 5)]:
            mode = np.cos(2 * np.pi * (kx * xx / spec.nx + ky * yy / spec.ny)) * np.ones(
                spec.shape
            )
            v = VectorField(spec, mode, np.zeros(spec.shape))
            got = op.apply_a(v).x
            want = stencil_apply(op, mode)
            rel = np.max(np.abs(got - want)) / np.max(np.abs(want))
            assert rel <= 1e-10

    def test_random_field_matches_stencil(self):
        op = make_op(n=16)
        rng = np.random.default_rng(7)
        arr = rng.standard_normal(op.spec.shape)
        got = op.apply_a_scalar(arr)
        want = stencil_apply(op, arr)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


class TestApplyK:
    def test_zero_maps_to_zero(self):
        op = make_op()
        out = op.apply_k(VectorField.zeros(op.spec))
        np.testing.assert_array_equal(out.x, 0.0)

    def test_inverse_pair(self):
        op = make_op()
        v = random_field(op.spec, 1)
        back = op.apply_k(op.apply_a(v))
        rel = np.max(np.abs(back.x - v.x)) / np.max(np.abs(v.x))
        assert rel <= 1e-10

    def test_kinetic_energy_dominates_l2(self):
        # s >= 1 implies <Av, v> >= ||v||^2 for every field
        op = make_op(n=16)
        area = op.spec.pixel_area
        for seed in range(100):
            v = random_field(op.spec, seed)
            av_v = 2.0 * op.kinetic_energy(v)
            l2 = float(np.sum(v.x**2 + v.y**2)) * area
            assert av_v >= l2 * (1 - 1e-12)


class TestSelfAdjointness:
    def test_symmetric_in_l2(self):
        op = make_op(n=16)
        for seed in range(10):
            u = random_field(op.spec, 2 * seed)
            v = random_field(op.spec, 2 * seed + 1)
            lhs = inner_product(op.apply_a(u), v)
            rhs = inner_product(u, op.apply_a(v))
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_positive_definite(self):
        op = make_op(n=16)
        for seed in range(10):
            v = random_field(op.spec, seed + 100)
            assert op.kinetic_energy(v) > 0.0


class TestKernelColumn:
    def test_peak_at_center(self):
        op = make_op()
        psi = op.kernel_column((10, 20), "x")
        assert psi.x[10, 20] == np.max(psi.x)
        assert psi.x[10, 20] > 0.0
        np.testing.assert_array_equal(psi.y, 0.0)

    def test_even_symmetry(self):
        op = make_op()
        c = (16, 16)
        psi = op.kernel_column(c, "y").y
        for delta in [(1, 0), (3, 2), (0, 5)]:
            plus = psi[c[0] + delta[0], c[1] + delta[1]]
            minus = psi[c[0] - delta[0], c[1] - delta[1]]
            np.testing.assert_allclose(plus, minus, rtol=1e-12)

    def test_reproducing_property(self):
        # <A psi_i, psi_j> equals psi_j evaluated at center i
        op = make_op(n=24)
        centers = [((5, 7), "x"), ((12, 3), "x"), ((20, 20), "y"), ((5, 7), "y")]
        for ci, compi in centers:
            for cj, compj in centers:
                psi_i = op.kernel_column(ci, compi)
                psi_j = op.kernel_column(cj, compj)
                lhs = inner_product(op.apply_a(psi_i), psi_j)
                comp = psi_j.x if compi == "x" else psi_j.y
                rhs = comp[ci]
                assert abs(lhs - rhs) <= 1e-8 * max(abs(rhs), 1e-8)

    def test_out_of_range_center_rejected(self):
        op = make_op(n=8)
        with pytest.raises(ValueError):
            op.kernel_column((8, 0), "x")
        with pytest.raises(ValueError):
            op.kernel_column((0, 0), "z")
