import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blurattack.kernels import (
    GaussianKernel,
    blur,
    blur_1d,
    build_kernel,
    build_kernel_traced,
    density_grid,
    export_kernel,
    gaussian_profile_1d,
    grid_from_text,
    grid_to_text,
    sigma_gradient_analytic,
    sigma_gradient_exact,
)
from blurattack.tensor import (
    ConfigError,
    DomainError,
    Tape,
    Tensor,
    UsageError,
    dense_forward,
    reduce_sum,
    relu,
    reshape,
    softmax_cross_entropy,
)

SIGMA_GRID = (0.1, 0.5, 0.75, 1.0, 5.0, 10.0)
SCALES = (3, 5, 7, 9)


class TestBuildKernel:
    def test_closed_form_n3_sigma1(self):
        # Normalizing exp(-d^2/2) over the 3x3 grid: one center cell,
        # four edge cells at d^2=1, four corner cells at d^2=2.
        z = 1.0 + 4.0 * math.exp(-0.5) + 4.0 * math.exp(-1.0)
        center, edge, corner = 1.0 / z, math.exp(-0.5) / z, math.exp(-1.0) / z
        w = build_kernel(3, [(1.0, 1.0)]).weights.data[0]
        assert abs(w[1, 1] - center) < 1e-12
        assert abs(w[0, 1] - edge) < 1e-12
        assert abs(w[0, 0] - corner) < 1e-12
        assert abs(center - 0.20418) < 5e-6
        assert abs(edge - 0.12384) < 5e-6
        assert abs(corner - 0.07511) < 5e-6

    def test_wide_sigma_limit_is_uniform(self):
        w = build_kernel(3, [(1000.0, 1000.0)]).weights.data[0]
        assert np.max(np.abs(w - 1.0 / 9.0)) < 1e-6

    def test_narrow_sigma_is_near_delta(self):
        w = build_kernel(9, [(0.05, 0.05)]).weights.data[0]
        assert w[4, 4] > 0.999

    def test_rejects_bad_parameters(self):
        with pytest.raises(DomainError):
            build_kernel(3, [(0.0, 1.0)])
        with pytest.raises(DomainError):
            build_kernel(3, [(-1.0, 1.0)])
        with pytest.raises(ConfigError):
            build_kernel(4, [(1.0, 1.0)])

    @pytest.mark.parametrize("N", SCALES)
    @pytest.mark.parametrize("sigma", SIGMA_GRID)
    def test_channel_sums_are_one(self, N, sigma):
        k = build_kernel(N, [(sigma, sigma), (2 * sigma, sigma)])
        sums = k.weights.data.sum(axis=(1, 2))
        assert np.max(np.abs(sums - 1.0)) <= 1e-12

    @pytest.mark.parametrize("N", SCALES)
    def test_center_weight_never_increases_with_sigma(self, N):
        centers = [build_kernel(N, [(s, s)]).weights.data[0, N // 2, N // 2]
                   for s in SIGMA_GRID]
        assert all(a >= b - 1e-15 for a, b in zip(centers, centers[1:]))

    def test_reflection_symmetry(self):
        w = build_kernel(5, [(0.8, 1.7)]).weights.data[0]
        assert np.allclose(w, w[::-1, :], atol=1e-15)
        assert np.allclose(w, w[:, ::-1], atol=1e-15)

    def test_unnormalized_matches_density_grid(self):
        k = build_kernel(5, [(1.3, 0.6)], normalized=False)
        assert np.allclose(k.weights.data, density_grid(5, [(1.3, 0.6)]), atol=1e-15)

    def test_mean_is_kernel_center(self):
        assert build_kernel(7, [(1.0, 1.0)]).mean == (3.0, 3.0)


class TestBlur:
    def test_near_delta_kernel_is_near_identity(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(3, 8, 8))
        k = build_kernel(9, [(0.05, 0.05)] * 3)
        out = blur(Tensor(x), k, padding="circular")
        assert np.max(np.abs(out.data - x)) < 1e-3

    def test_constant_channel_stays_constant(self):
        x = np.full((1, 6, 6), 0.5)
        for sigma in (0.3, 1.0, 7.0):
            out = blur(Tensor(x), build_kernel(5, [(sigma, sigma)]), padding="reflect")
            assert np.allclose(out.data, 0.5, atol=1e-12)

    def test_circular_padding_preserves_channel_sums(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(3, 8, 8))
        k = build_kernel(3, [(1.0, 1.0)] * 3)
        out = blur(Tensor(x), k, padding="circular")
        before = x.sum(axis=(1, 2))
        after = out.data.sum(axis=(1, 2))
        assert np.max(np.abs(after - before) / np.abs(before)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000),
           n=st.sampled_from(SCALES),
           sigma=st.sampled_from(SIGMA_GRID),
           padding=st.sampled_from(["zero", "reflect", "circular"]))
    def test_unit_interval_is_preserved(self, seed, n, sigma, padding):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(2, 9, 9))
        out = blur(Tensor(x), build_kernel(n, [(sigma, sigma)] * 2), padding=padding)
        assert np.all(out.data >= -1e-12) and np.all(out.data <= 1.0 + 1e-12)

    @pytest.mark.parametrize("padding", ["reflect", "circular"])
    def test_output_stays_within_channel_range(self, padding):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 8, 8))
        out = blur(Tensor(x), build_kernel(5, [(1.0, 2.0)] * 2), padding=padding)
        for c in range(2):
            assert out.data[c].min() >= x[c].min() - 1e-12
            assert out.data[c].max() <= x[c].max() + 1e-12

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            blur(Tensor(np.zeros((3, 4, 4))), build_kernel(3, [(1.0, 1.0)]))

    def test_unnormalized_kernel_rejected(self):
        k = build_kernel(3, [(1.0, 1.0)], normalized=False)
        with pytest.raises(ConfigError):
            blur(Tensor(np.zeros((1, 4, 4))), k)

    def test_per_channel_sigmas_do_not_mix_channels(self):
        x = np.zeros((2, 7, 7))
        x[0, 3, 3] = 1.0
        k = build_kernel(3, [(0.05, 0.05), (5.0, 5.0)])
        out = blur(Tensor(x), k, padding="circular")
        assert np.allclose(out.data[1], 0.0, atol=1e-15)


def density_path_loss(upstream, N, sigmas):
    """Oracle for the analytic gradient: L(sigma) = <u, density(sigma)> / N^2."""
    return float(np.sum(upstream * density_grid(N, sigmas))) / N**2


def fd_sigma(fn, sigmas, h=1e-5):
    """Central differences of a scalar function of the [C, 2] sigma array."""
    arr = np.asarray(sigmas, dtype=np.float64)
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        up, dn = arr.copy(), arr.copy()
        up[idx] += h
        dn[idx] -= h
        grad[idx] = (fn(up) - fn(dn)) / (2 * h)
    return grad


class TestSigmaGradientAnalytic:
    def test_axis_swap_symmetry_with_uniform_upstream(self):
        k = build_kernel(5, [(1.4, 1.4)], normalized=False)
        g = sigma_gradient_analytic(np.ones((1, 5, 5)), k)
        assert g[0, 0] == pytest.approx(g[0, 1], abs=0.0)

    def test_zero_upstream_gives_zero(self):
        k = build_kernel(3, [(2.0, 0.7)], normalized=False)
        assert np.all(sigma_gradient_analytic(np.zeros((1, 3, 3)), k) == 0.0)

    @pytest.mark.parametrize("N,sigma", [(3, 1.0), (3, 10.0), (9, 1.0), (9, 10.0)])
    def test_matches_finite_differences_of_density_path(self, N, sigma):
        rng = np.random.default_rng(3)
        upstream = rng.normal(size=(2, N, N))
        sigmas = np.array([[sigma, sigma], [sigma * 1.5, sigma * 0.5]])
        k = build_kernel(N, sigmas, normalized=False)
        analytic = sigma_gradient_analytic(upstream, k)

        def loss(s):
            return sum(density_path_loss(upstream[c : c + 1], N, s[c : c + 1])
                       for c in range(2))

        numeric = fd_sigma(loss, sigmas)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def traced_blur_ce_loss(x, sigma_arr, N, net_params, padding="reflect"):
    """Blur + one-dense-layer cross entropy, built on a fresh tape."""
    w, b = net_params
    tape = Tape()
    sig = Tensor(sigma_arr)
    kernel = build_kernel_traced(N, sig, tape)
    blurred = blur(Tensor(x), kernel, padding=padding, tape=tape)
    flat = reshape(blurred, (1, -1), tape)
    logits = dense_forward(flat, Tensor(w), Tensor(b), tape)
    loss = softmax_cross_entropy(logits, [0], tape)
    return loss, kernel, tape


class TestSigmaGradientExact:
    def test_constant_image_has_zero_gradient(self):
        x = np.full((2, 6, 6), 0.4)
        for sigma in (0.2, 1.0, 9.0):
            tape = Tape()
            sig = Tensor(np.full((2, 2), sigma))
            kernel = build_kernel_traced(3, sig, tape)
            out = blur(Tensor(x), kernel, padding="reflect", tape=tape)
            loss = reduce_sum(out, tape=tape)  # any functional of a constant blur
            g = sigma_gradient_exact(loss, kernel)
            assert np.max(np.abs(g)) < 1e-12

    def test_uniform_plateau_has_negligible_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(1, 6, 6))
        tape = Tape()
        sig = Tensor([[1000.0, 1000.0]])
        kernel = build_kernel_traced(3, sig, tape)
        out = blur(Tensor(x), kernel, padding="circular", tape=tape)
        loss = reduce_sum(out, tape=tape)
        g = sigma_gradient_exact(loss, kernel)
        assert np.max(np.abs(g)) < 1e-6

    def test_matches_finite_differences_through_small_net(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(2, 5, 5))
        w = rng.normal(size=(50, 3)) * 0.3
        b = rng.normal(size=3) * 0.1
        sigmas = np.array([[0.8, 1.6], [1.1, 0.5]])

        loss, kernel, _ = traced_blur_ce_loss(x, sigmas, 3, (w, b))
        analytic = sigma_gradient_exact(loss, kernel)

        def scalar(s):
            l2, _, _ = traced_blur_ce_loss(x, s, 3, (w, b))
            return l2.item()

        numeric = fd_sigma(scalar, sigmas, h=1e-5)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4

    def test_dead_tape_rejected(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(1, 4, 4))
        loss, kernel, _ = traced_blur_ce_loss(
            x, np.array([[1.0, 1.0]]), 3, (rng.normal(size=(16, 2)), np.zeros(2)))
        sigma_gradient_exact(loss, kernel)
        with pytest.raises(UsageError):
            sigma_gradient_exact(loss, kernel)

    def test_untraced_kernel_rejected(self):
        k = build_kernel(3, [(1.0, 1.0)])
        with pytest.raises(UsageError):
            sigma_gradient_exact(Tensor(0.0), k)

    def test_analytic_equals_exact_over_n_squared_on_density_upstream(self):
        # When the upstream is the gradient with respect to the raw density,
        # the closed form reproduces the exact sigma gradient up to its
        # fixed 1/N^2 prefactor, so the two always agree in sign.
        rng = np.random.default_rng(7)
        N = 9
        x = rng.uniform(size=(3, 12, 12))
        w = rng.normal(size=(3 * 144, 4)) * 0.2
        b = np.zeros(4)
        loss, kernel, tape = traced_blur_ce_loss(x, np.full((3, 2), 10.0), N, (w, b))
        tape.watch_param("density", kernel.density)
        from blurattack.tensor import backward

        bundle = backward(loss, wanted=("sigma", "density"), include_input=False)
        exact = bundle.param_grads["sigma"].data
        upstream = bundle.param_grads["density"].data
        analytic = sigma_gradient_analytic(upstream, kernel)
        assert np.allclose(analytic * N**2, exact, rtol=1e-9, atol=1e-18)


class TestOneDimensional:
    def test_profile_sums_to_one(self):
        for N in (3, 9, 101):
            assert abs(gaussian_profile_1d(N, 2.5).sum() - 1.0) < 1e-12

    def test_blur_1d_two_point_mixing(self):
        x = np.array([0.9, 0.1])
        out = blur_1d(Tensor(x), 3, 0.8, padding="circular")
        w = gaussian_profile_1d(3, 0.8)
        alpha = w[1]  # offsets -1 and +1 both wrap onto the other cell
        want = np.array([alpha * 0.9 + (1 - alpha) * 0.1,
                         alpha * 0.1 + (1 - alpha) * 0.9])
        assert np.allclose(out.data, want, atol=1e-15)

    def test_blur_1d_preserves_sum_circular(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(size=11)
        out = blur_1d(Tensor(x), 5, 1.7, padding="circular")
        assert abs(out.data.sum() - x.sum()) <= 1e-9 * abs(x.sum())


class TestKernelExport:
    def test_round_trip(self):
        k = build_kernel(5, [(1.0, 2.0), (0.3, 0.9), (4.0, 4.0)])
        text = export_kernel(k)
        back = grid_from_text(text)
        assert np.array_equal(back, k.weights.data)

    def test_grid_text_shape(self):
        text = grid_to_text(np.arange(8.0).reshape(2, 2, 2))
        blocks = text.strip().split("\n\n")
        assert len(blocks) == 2
        assert all(len(b.splitlines()) == 2 for b in blocks)

    def test_empty_text_rejected(self):
        with pytest.raises(UsageError):
            grid_from_text("   \n ")
