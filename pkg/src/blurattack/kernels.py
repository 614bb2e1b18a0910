"""Per-channel anisotropic Gaussian blur kernels and their sigma gradients.

A kernel of scale N holds one N x N weight grid per image channel, sampled
from the axis-aligned Gaussian density with the mean pinned to the kernel
center and a (sigma1, sigma2) pair per channel. Kernels are normalized to
sum 1 per channel by default so that blurring preserves brightness; the raw
density variant exists for gradient fidelity checks.

Two sigma-gradient routes are provided. ``sigma_gradient_exact`` is the
reverse-mode gradient through the whole normalized build; it drives the
blur attack. ``sigma_gradient_analytic`` is a closed-form expression for
the unnormalized density path with a fixed 1/N^2 prefactor, kept for
comparison against the exact route.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    add,
    backward,
    conv1d,
    depthwise_conv2d,
    div,
    exp,
    mul,
    reduce_sum,
    reshape,
    select,
)
from .tensor import PADDING_MODES  # noqa: F401  (re-exported border modes)

SIGMA_FLOOR = 0.05  # optimization clamp; the density has a 1/sigma^4 pole at 0


def _check_scale(N: int):
    if N % 2 == 0 or N < 1:
        raise ConfigError(f"kernel scale must be a positive odd integer, got {N}")


def _check_sigmas(sigmas: np.ndarray):
    if np.any(sigmas <= 0):
        raise DomainError(f"sigma values must be positive, got {sigmas.tolist()}")


def _as_sigma_array(sigmas) -> np.ndarray:
    """Coerce per-channel (sigma1, sigma2) pairs to a [C, 2] float array."""
    arr = np.asarray(sigmas, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.array([[float(arr), float(arr)]])
    elif arr.ndim == 1 and arr.shape[0] == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"sigmas must be a [C, 2] array of pairs, got {arr.shape}")
    return arr


@dataclass
class GaussianKernel:
    """Built blur kernel: per-channel weights plus the build parameters."""

    scale: int
    channels: int
    mean: tuple
    sigmas: np.ndarray          # [C, 2]
    normalized: bool
    weights: Tensor             # [C, N, N]
    sigma_leaf: Tensor | None = field(default=None, repr=False)
    density: Tensor | None = field(default=None, repr=False)
    sigma_name: str = field(default="sigma", repr=False)


def density_grid(N: int, sigmas) -> np.ndarray:
    """Raw Gaussian density weights A(a, b) / (2 pi s1 s2) on the N x N grid."""
    _check_scale(N)
    arr = _as_sigma_array(sigmas)
    _check_sigmas(arr)
    mu = (N - 1) / 2.0
    d2 = (np.arange(N) - mu) ** 2
    s1 = arr[:, 0][:, None, None]
    s2 = arr[:, 1][:, None, None]
    expo = d2[None, :, None] / s1**2 + d2[None, None, :] / s2**2
    return np.exp(-0.5 * expo) / (2.0 * np.pi * s1 * s2)


def build_kernel(N: int, sigmas, normalized: bool = True) -> GaussianKernel:
    """Build a per-channel Gaussian kernel from (sigma1, sigma2) pairs."""
    arr = _as_sigma_array(sigmas)
    w = density_grid(N, arr)
    if normalized:
        w = w / w.sum(axis=(1, 2), keepdims=True)
    mu = ((N - 1) / 2.0, (N - 1) / 2.0)
    return GaussianKernel(scale=N, channels=arr.shape[0], mean=mu, sigmas=arr,
                          normalized=normalized, weights=Tensor(w))


def build_kernel_traced(N: int, sigma_leaf: Tensor, tape: Tape,
                        normalized: bool = True,
                        name: str = "sigma") -> GaussianKernel:
    """Build the kernel on a tape so sigma gradients can be taken.

    ``sigma_leaf`` is a [C, 2] tensor watched on ``tape`` under ``name``;
    the returned kernel keeps both the normalized weights and the raw
    density node.
    """
    _check_scale(N)
    if sigma_leaf.ndim != 2 or sigma_leaf.shape[1] != 2:
        raise ShapeError(f"sigma leaf must be [C, 2], got {sigma_leaf.shape}")
    _check_sigmas(sigma_leaf.data)
    C = sigma_leaf.shape[0]
    tape.watch_param(name, sigma_leaf)

    mu = (N - 1) / 2.0
    d2 = Tensor(((np.arange(N) - mu) ** 2)[None, :])  # [1, N]
    s1 = select(sigma_leaf, 0, axis=1, tape=tape)     # [C]
    s2 = select(sigma_leaf, 1, axis=1, tape=tape)
    t1 = div(d2, reshape(mul(s1, s1, tape), (C, 1), tape), tape)   # [C, N]
    t2 = div(d2, reshape(mul(s2, s2, tape), (C, 1), tape), tape)
    expo = add(reshape(t1, (C, N, 1), tape), reshape(t2, (C, 1, N), tape), tape)
    a = exp(mul(Tensor(-0.5), expo, tape), tape)
    norm = reshape(mul(mul(s1, s2, tape), Tensor(2.0 * np.pi), tape), (C, 1, 1), tape)
    density = div(a, norm, tape)
    if normalized:
        total = reshape(reduce_sum(density, over=(1, 2), tape=tape), (C, 1, 1), tape)
        weights = div(density, total, tape)
    else:
        weights = density
    return GaussianKernel(scale=N, channels=C, mean=(mu, mu),
                          sigmas=sigma_leaf.data.copy(), normalized=normalized,
                          weights=weights, sigma_leaf=sigma_leaf,
                          density=density, sigma_name=name)


def blur(x: Tensor, kernel: GaussianKernel, padding: str = "reflect",
         tape: Tape | None = None) -> Tensor:
    """Depthwise blur: channel c of x is correlated with weights[c] only."""
    if x.ndim != 3:
        raise ShapeError(f"blur expects [C, H, W] input, got {x.shape}")
    if kernel.channels != x.shape[0]:
        raise ConfigError(
            f"kernel has {kernel.channels} channels but input has {x.shape[0]}")
    if not kernel.normalized:
        raise ConfigError("blur requires a normalized kernel")
    return depthwise_conv2d(x, kernel.weights, padding=padding, tape=tape)


def blur_1d(x: Tensor, N: int, sigma: float, padding: str = "circular",
            tape: Tape | None = None) -> Tensor:
    """Blur a 1-d signal with a normalized length-N Gaussian profile."""
    if x.ndim != 1:
        raise ShapeError(f"blur_1d expects a 1-d signal, got {x.shape}")
    w = gaussian_profile_1d(N, sigma)
    return conv1d(x, Tensor(w), padding=padding, tape=tape)


def gaussian_profile_1d(N: int, sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian weights of length N centered at (N-1)/2."""
    _check_scale(N)
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    mu = (N - 1) / 2.0
    w = np.exp(-0.5 * ((np.arange(N) - mu) / sigma) ** 2)
    return w / w.sum()


def sigma_gradient_analytic(upstream, kernel: GaussianKernel) -> np.ndarray:
    """Closed-form sigma gradient of the raw-density kernel path.

    ``upstream`` is the loss gradient with respect to the density weights,
    shape [C, N, N]. For each channel the result composes upstream with the
    density's derivative in sigma1/sigma2 and a fixed 1/N^2 prefactor;
    normalization of the kernel is deliberately not differentiated here.
    Returns a [C, 2] array of (dL/dsigma1, dL/dsigma2) per channel.
    """
    u = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=np.float64)
    N = kernel.scale
    C = kernel.channels
    if u.shape != (C, N, N):
        raise ShapeError(f"upstream shape {u.shape} does not match kernel ({C}, {N}, {N})")
    s1 = kernel.sigmas[:, 0][:, None, None]
    s2 = kernel.sigmas[:, 1][:, None, None]
    # One routine serves both axes (the second via transposed arguments), so
    # the axis-swap symmetry at sigma1 == sigma2 is bitwise exact.
    g1 = _density_axis_gradient(u, N, s1, s2)
    g2 = _density_axis_gradient(np.ascontiguousarray(u.transpose(0, 2, 1)), N, s2, s1)
    return np.stack([g1, g2], axis=1)


def _density_axis_gradient(u, N, s_main, s_other):
    """d<u, density>/ds for the row axis, with the 1/N^2 prefactor."""
    mu = (N - 1) / 2.0
    d2 = (np.arange(N) - mu) ** 2
    a = np.exp(-0.5 * (d2[None, :, None] / s_main**2 + d2[None, None, :] / s_other**2))
    dk = (d2[None, :, None] - s_main**2) * a / (2.0 * np.pi * s_main**4 * s_other)
    return np.sum(u * dk, axis=(1, 2)) / N**2


def sigma_gradient_exact(loss: Tensor, kernel: GaussianKernel) -> np.ndarray:
    """Reverse-mode sigma gradient through the full normalized pipeline.

    ``loss`` must be a scalar recorded on the same live tape the kernel was
    built on. Returns a [C, 2] array of (dL/dsigma1, dL/dsigma2).
    """
    if kernel.sigma_leaf is None:
        raise UsageError("kernel was not built on a tape; use build_kernel_traced")
    bundle = backward(loss, wanted=(kernel.sigma_name,), include_input=False)
    return bundle.param_grads[kernel.sigma_name].data.copy()


# ---------------------------------------------------------------------------
# plain-text kernel grids (one channel per block, one row per line)


def grid_to_text(weights: np.ndarray) -> str:
    """Render a [C, N, M] stack as channel blocks of space-separated decimals."""
    arr = np.asarray(weights, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    blocks = []
    for ch in arr:
        blocks.append("\n".join(" ".join(repr(float(v)) for v in row) for row in ch))
    return "\n\n".join(blocks) + "\n"


def grid_from_text(text: str) -> np.ndarray:
    """Parse the output of grid_to_text back into a [C, N, M] array."""
    blocks = [b for b in text.strip().split("\n\n") if b.strip()]
    if not blocks:
        raise UsageError("empty grid text")
    chans = [np.array([[float(v) for v in line.split()] for line in b.splitlines()])
             for b in blocks]
    return np.stack(chans)


def export_kernel(kernel: GaussianKernel) -> str:
    return grid_to_text(kernel.weights.data)
