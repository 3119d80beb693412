import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullspace_recon import _radon
from nullspace_recon.checks import dense_projection, dot_test, quadrature_line_integrals
from nullspace_recon.exceptions import DimensionError, DivergenceError, StateError
from nullspace_recon.operators import (
    DenseMatrixOp, LandweberConfig, LimitedAngleRadonOp, MaskedFourierOp, estimate_opnorm,
    landweber_project, load_descriptor, save_descriptor)
from nullspace_recon.validation import real_inner


def _rand_meas(op, rng):
    y = rng.standard_normal(op.range_shape)
    if isinstance(op, MaskedFourierOp):
        y = y + 1j * rng.standard_normal(op.range_shape)
    return y


class TestApply:
    def test_zero_maps_to_zero(self, radon8, fourier8, dense64):
        for op in (radon8, fourier8, dense64):
            assert np.all(op.apply(np.zeros(op.domain_shape)) == 0)

    def test_shape_mismatch(self, radon8):
        with pytest.raises(DimensionError):
            radon8.apply(np.zeros((8, 8)))
        with pytest.raises(DimensionError):
            radon8.adjoint(np.zeros(3))

    def test_single_pixel_chords_match_quadrature(self, radon8):
        # column of the system matrix = chord lengths of every ray through that pixel
        x = np.zeros(radon8.domain_shape)
        x[0, 3, 5] = 1.0
        got = radon8.apply(x)
        ref = quadrature_line_integrals(x, radon8.angles, radon8.detector_bins, 400_001)
        np.testing.assert_allclose(got, ref, atol=5e-5)
        assert got.max() > 0.2  # the pixel is actually hit

    def test_random_image_matches_quadrature(self, radon8, rng):
        x = rng.uniform(size=radon8.domain_shape)
        ref = quadrature_line_integrals(x, radon8.angles, radon8.detector_bins)
        assert np.linalg.norm(radon8.apply(x) - ref) / np.linalg.norm(ref) < 1e-3

    def test_axis_aligned_chords(self):
        # a vertical ray (angle 0) crosses each pixel of its column for exactly h
        op = LimitedAngleRadonOp(4, [0.0], detector_bins=4, use_cache=False)
        row = op.matrix.toarray()[1].reshape(4, 4)
        h = 0.5
        offset = _radon.detector_offsets(4)[1]
        col = int(np.floor((offset + 1) / h))
        np.testing.assert_allclose(row[:, col], h)
        assert row.sum() == pytest.approx(2.0)

    def test_weights_nonnegative(self, radon16):
        assert radon16.matrix.data.min() >= 0
        assert radon16.matrix.shape == (12 * math.ceil(math.sqrt(2) * 16), 256)

    def test_full_mask_fourier_is_unitary(self, rng):
        op = MaskedFourierOp(8, np.arange(8))
        x = rng.standard_normal(op.domain_shape)
        assert np.linalg.norm(op.adjoint(op.apply(x)) - x) <= 1e-12 * np.linalg.norm(x)

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**16))
    def test_linearity(self, radon8, fourier8, a, b, seed):
        rng = np.random.default_rng(seed)
        for op in (radon8, fourier8):
            x1, x2 = rng.standard_normal((2, *op.domain_shape))
            lhs = op.apply(a * x1 + b * x2)
            rhs = a * op.apply(x1) + b * op.apply(x2)
            assert np.linalg.norm(lhs - rhs) <= 1e-12 * (1 + np.linalg.norm(rhs))


class TestAdjoint:
    def test_dot_test_radon16(self, radon16):
        assert dot_test(radon16, trials=100) <= 1e-10

    def test_dot_test_fourier_and_dense(self, fourier16, dense64):
        assert dot_test(fourier16) <= 1e-10
        assert dot_test(dense64) <= 1e-10

    def test_zero(self, radon8, fourier8):
        for op in (radon8, fourier8):
            assert np.all(op.adjoint(np.zeros(op.range_shape)) == 0)

    def test_dense_adjoint_is_transpose(self, dense64, rng):
        y = rng.standard_normal(6)
        np.testing.assert_array_equal(dense64.adjoint(y), dense64.matrix.T @ y)

    def test_radon_adjoint_is_sparse_transpose(self, radon8, rng):
        y = rng.standard_normal(radon8.range_shape)
        np.testing.assert_allclose(radon8.adjoint(y).ravel(), radon8.matrix.toarray().T @ y,
                                   rtol=1e-13, atol=1e-13)

    def test_fourier_round_trip(self, fourier16, rng):
        y = _rand_meas(fourier16, rng)
        at_y = fourier16.adjoint(y)
        np.testing.assert_allclose(fourier16.adjoint(fourier16.apply(at_y)), at_y, atol=1e-13)


class TestPseudoinverse:
    def test_fourier_right_inverse(self, fourier16, rng):
        y = _rand_meas(fourier16, rng)
        np.testing.assert_allclose(fourier16.apply(fourier16.pseudoinverse(y)), y, atol=1e-10)

    def test_fourier_pinv_is_adjoint(self, fourier16, rng):
        y = _rand_meas(fourier16, rng)
        np.testing.assert_array_equal(fourier16.pseudoinverse(y), fourier16.adjoint(y))

    def test_dense_normal_equations(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
        op = DenseMatrixOp(a)
        y = np.array([1.0, -2.0, 0.5])
        ref = np.linalg.solve(a.T @ a, a.T @ y)
        np.testing.assert_allclose(op.pseudoinverse(y), ref, rtol=1e-10)

    def test_invertible_square(self, rng):
        a = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        op = DenseMatrixOp(a, tau=0.0)
        y = rng.standard_normal(5)
        np.testing.assert_allclose(op.pseudoinverse(y), np.linalg.solve(a, y), rtol=1e-8)

    def test_truncation_threshold(self, radon16):
        svd = radon16.svd
        assert np.all(svd.s >= svd.tau * svd.s_full[0])
        assert svd.rank < len(svd.s_full)

    def test_pinv_is_reflexive(self, radon16, rng):
        y = rng.standard_normal(radon16.range_shape)
        p = radon16.pseudoinverse(y)
        again = radon16.pseudoinverse(radon16.apply(p))
        assert np.linalg.norm(again - p) <= 1e-8 * np.linalg.norm(p)

    def test_radon_needs_svd(self):
        op = LimitedAngleRadonOp.limited(8, 4)
        with pytest.raises(StateError):
            op.pseudoinverse(np.zeros(op.range_shape))
        with pytest.raises(StateError):
            op.null_space_project(np.zeros(op.domain_shape))

    def test_batch_matches_single(self, radon16, rng):
        ys = rng.standard_normal((3, *radon16.range_shape))
        batch = radon16.pseudoinverse_batch(ys)
        for y, b in zip(ys, batch):
            np.testing.assert_allclose(b, radon16.pseudoinverse(y), atol=1e-12)


class TestNullSpaceProjection:
    @pytest.mark.parametrize("name", ["radon16", "fourier16", "dense64"])
    def test_idempotent_and_self_adjoint(self, name, request, rng):
        op = request.getfixturevalue(name)
        x, z = rng.standard_normal((2, *op.domain_shape))
        p = op.null_space_project(x)
        assert np.linalg.norm(op.null_space_project(p) - p) <= 1e-10 * np.linalg.norm(p) + 1e-14
        lhs = real_inner(p, z)
        rhs = real_inner(x, op.null_space_project(z))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(z)

    def test_annihilated_by_operator(self, fourier16, radon16, rng):
        for op in (fourier16, radon16):
            x = rng.standard_normal(op.domain_shape)
            ap = op.range_project(op.apply(op.null_space_project(x)))
            assert np.linalg.norm(ap) <= 1e-8 * estimate_opnorm(op) * np.linalg.norm(x)

    def test_radon_truncation_leak_is_bounded_by_tau(self, radon16, rng):
        # without the range projection only components below tau * s_1 survive
        x = rng.standard_normal(radon16.domain_shape)
        leak = np.linalg.norm(radon16.apply(radon16.null_space_project(x)))
        assert leak <= radon16.tau * radon16.svd.s_full[0] * np.linalg.norm(x)

    def test_fourier_matches_kspace_masking(self, fourier16, rng):
        x = rng.standard_normal(fourier16.domain_shape)
        k = np.fft.fft2(x[0] + 1j * x[1], norm="ortho")
        k[fourier16.lines] = 0
        z = np.fft.ifft2(k, norm="ortho")
        np.testing.assert_allclose(fourier16.null_space_project(x), np.stack([z.real, z.imag]),
                                   atol=1e-13)

    def test_full_mask_trivial_null_space(self, rng):
        op = MaskedFourierOp(8, np.arange(8))
        assert np.abs(op.null_space_project(rng.standard_normal(op.domain_shape))).max() < 1e-14

    def test_torch_projector_agrees(self, radon16, fourier16, rng):
        import torch
        for op in (radon16, fourier16):
            xs = rng.standard_normal((3, *op.domain_shape))
            got = op.torch_null_projector()(torch.as_tensor(xs)).numpy()
            ref = np.stack([op.null_space_project(x) for x in xs])
            np.testing.assert_allclose(got, ref, atol=1e-12)


class TestLandweber:
    def test_fixed_point(self, dense64, rng):
        x0 = rng.standard_normal(4)
        y = dense64.apply(x0)
        out, res = landweber_project(dense64, x0, y, LandweberConfig(20, 0.01),
                                     return_residuals=True)
        np.testing.assert_array_equal(out, x0)
        assert np.all(res == 0)

    @pytest.mark.parametrize("shape,rank", [((6, 4), 4), ((6, 4), 3), ((4, 6), 4)])
    def test_matches_dense_projection(self, shape, rank):
        rng = np.random.default_rng(sum(shape) + rank)
        u, _ = np.linalg.qr(rng.standard_normal((shape[0], rank)))
        v, _ = np.linalg.qr(rng.standard_normal((shape[1], rank)))
        a = u @ np.diag(np.linspace(2.0, 0.3, rank)) @ v.T
        op = DenseMatrixOp(a)
        x0 = rng.standard_normal(shape[1])
        y = a @ rng.standard_normal(shape[1])
        lam = 1.0 / np.linalg.norm(a, 2) ** 2
        got = landweber_project(op, x0, y, LandweberConfig(10_000, lam))
        ref = dense_projection(a, x0, y)
        assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_gaussian_6x4(self):
        from nullspace_recon.checks import landweber_oracle_defect
        assert landweber_oracle_defect() <= 1e-6

    def test_zero_data_converges_to_null_projection(self, rng):
        a = rng.standard_normal((3, 6))
        op = DenseMatrixOp(a)
        x0 = rng.standard_normal(6)
        lam = 1.0 / np.linalg.norm(a, 2) ** 2
        got = landweber_project(op, x0, np.zeros(3), LandweberConfig(5000, lam))
        np.testing.assert_allclose(got, op.null_space_project(x0), atol=1e-8)

    def test_residual_non_increasing(self, radon16, rng):
        lam = 1.0 / estimate_opnorm(radon16) ** 2
        x0 = rng.standard_normal(radon16.domain_shape)
        y = rng.standard_normal(radon16.range_shape)
        _, res = landweber_project(radon16, x0, y, LandweberConfig(50, lam),
                                   return_residuals=True)
        assert np.all(np.diff(res) <= 1e-12 * res[0])

    def test_single_fourier_step_is_exact_projection(self, fourier16, rng):
        x0 = rng.standard_normal(fourier16.domain_shape)
        y = _rand_meas(fourier16, rng)
        got = landweber_project(fourier16, x0, y, LandweberConfig(1, 1.0))
        np.testing.assert_allclose(fourier16.apply(got), y, atol=1e-12)

    def test_divergence_detected(self, dense64, rng):
        lam = 10.0 / np.linalg.norm(dense64.matrix, 2) ** 2
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(DivergenceError) as info:
                landweber_project(dense64, rng.standard_normal(4), rng.standard_normal(6),
                                  LandweberConfig(200, lam))
        assert info.value.stepsize == lam
        assert str(lam) in str(info.value)

    def test_unstable_stepsize_warns(self, dense64, rng):
        lam = 2.5 / np.linalg.norm(dense64.matrix, 2) ** 2
        with pytest.warns(RuntimeWarning, match="stability bound"):
            try:
                landweber_project(dense64, np.zeros(4), rng.standard_normal(6),
                                  LandweberConfig(2, lam))
            except DivergenceError:
                pass

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LandweberConfig(0, 0.1)
        with pytest.raises(ValueError):
            LandweberConfig(3, -1.0)

    def test_paper_stepsize_is_stable_for_desk_ct(self, radon64):
        assert 0.003 <= 1.0 / estimate_opnorm(radon64) ** 2


class TestOpNorm:
    def test_identity(self):
        assert estimate_opnorm(DenseMatrixOp(np.eye(5))) == pytest.approx(1.0, abs=1e-6)

    def test_diagonal(self):
        assert estimate_opnorm(DenseMatrixOp(np.diag([3.0, 1.0]))) == pytest.approx(3.0, abs=0.15)

    def test_radon_vs_dense_svd(self, radon16):
        ref = np.linalg.svd(radon16.matrix.toarray(), compute_uv=False)[0]
        assert estimate_opnorm(radon16, iters=100) == pytest.approx(ref, rel=0.05)

    def test_deterministic(self, radon16):
        assert estimate_opnorm(radon16, seed=3) == estimate_opnorm(radon16, seed=3)

    def test_min_iterations(self, dense64):
        with pytest.raises(ValueError):
            estimate_opnorm(dense64, iters=5)


class TestSerialization:
    def test_descriptor_round_trip(self, tmp_path, radon16, fourier16):
        for op in (radon16, fourier16):
            path = tmp_path / f"{op.kind}.json"
            save_descriptor(op, path)
            back = load_descriptor(path)
            assert back.descriptor_hash() == op.descriptor_hash()
            assert back.matrix.nnz == op.matrix.nnz if hasattr(op, "matrix") else True

    def test_matrix_cache_file(self, radon16):
        from nullspace_recon.operators import cache_dir
        assert (cache_dir() / f"radon_{radon16._geometry_hash()}.npz").exists()

    def test_mask_construction(self):
        op = MaskedFourierOp.from_fraction(64, 0.25, 0.08, seed=0)
        assert op.lines.size == 16
        assert op.kept_fraction == 0.25
        assert {0, 1, 2, 62, 63} <= set(op.lines.tolist())

    def test_angles_validated(self):
        with pytest.raises(ValueError):
            LimitedAngleRadonOp(8, [0.0, 180.0])
