"""Synthetic datasets: a two-spirals point benchmark and small pattern images.

Both generators are deterministic per seed and attach the generating class
as an oracle label, the ground truth that exists independently of any
trained model. For spiral points the oracle extends to arbitrary 2-d
coordinates as nearest-arm classification in the noiseless geometry; for
pattern images the class is defined by generator parameters rather than
pixel values, so any pixel-level smoothing leaves the oracle label fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

SPIRAL_TURNS = 1.75
SPIRAL_NOISE = 0.03
SPIRAL_THETA_MIN_FRAC = 0.25  # start angle as a fraction of one turn

IMAGE_SIZE = 16
IMAGE_CHANNELS = 3
IMAGE_CLASSES = ("stripes", "rings", "checker", "ramp", "blob")


@dataclass
class LabeledSample:
    input: Tensor
    label: int
    oracle_label: int


# ---------------------------------------------------------------------------
# two spirals


def _spiral_arm(theta: np.ndarray) -> np.ndarray:
    """Arm 0 of the noiseless geometry; arm 1 is its point reflection."""
    r = theta / (2.0 * np.pi * SPIRAL_TURNS)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def spiral_theta_range(turns: float = SPIRAL_TURNS):
    return (SPIRAL_THETA_MIN_FRAC * 2.0 * np.pi, turns * 2.0 * np.pi)


def gen_two_spirals(n_per_class: int, noise_std: float = SPIRAL_NOISE,
                    turns: float = SPIRAL_TURNS, seed: int = 0):
    """Two interleaved spiral arms as labeled 2-d points.

    Class 0 lies on (r cos t, r sin t) with r proportional to t; class 1 is
    the point-reflected arm. Gaussian positional noise is added on top.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    lo, hi = spiral_theta_range(turns)
    theta = np.linspace(lo, hi, n_per_class)
    r = theta / (2.0 * np.pi * turns)
    base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    samples = []
    for label, sign in ((0, 1.0), (1, -1.0)):
        pts = sign * base + rng.normal(scale=noise_std, size=base.shape)
        for p in pts:
            samples.append(LabeledSample(Tensor(p), label, label))
    return samples


_ORACLE_THETA = np.linspace(*spiral_theta_range(), 4000)
_ORACLE_ARM = _spiral_arm(_ORACLE_THETA)


def spiral_oracle(point) -> int:
    """Nearest spiral arm in the noiseless geometry (0 or 1)."""
    p = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    d0 = np.min(np.sum((_ORACLE_ARM - p) ** 2, axis=1))
    d1 = np.min(np.sum((_ORACLE_ARM + p) ** 2, axis=1))
    return 0 if d0 <= d1 else 1


def spiral_arm_distance_gap(point) -> float:
    """Signed distance gap d(arm1) - d(arm0); positive means arm 0 is closer."""
    p = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    d0 = np.sqrt(np.min(np.sum((_ORACLE_ARM - p) ** 2, axis=1)))
    d1 = np.sqrt(np.min(np.sum((_ORACLE_ARM + p) ** 2, axis=1)))
    return float(d1 - d0)


# ---------------------------------------------------------------------------
# toy pattern images


def _coords(size):
    i = np.arange(size, dtype=np.float64)
    return np.meshgrid(i, i, indexing="ij")


def _stripes(rng, size):
    ii, _ = _coords(size)
    period = rng.uniform(5.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * ii / period + phase)


def _rings(rng, size):
    ii, jj = _coords(size)
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    period = rng.uniform(4.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    d = np.sqrt((ii - cy) ** 2 + (jj - cx) ** 2)
    return 0.5 + 0.5 * np.cos(2 * np.pi * d / period + phase)


def _checker(rng, size):
    ii, jj = _coords(size)
    tile = rng.integers(3, 5)
    oy, ox = rng.integers(0, tile, size=2)
    return (((ii + oy) // tile + (jj + ox) // tile) % 2).astype(np.float64)


def _ramp(rng, size):
    ii, jj = _coords(size)
    ang = rng.uniform(0, 2 * np.pi)
    field = np.cos(ang) * ii + np.sin(ang) * jj
    field = field - field.min()
    return field / max(field.max(), 1e-9)


def _blob(rng, size):
    ii, jj = _coords(size)
    out = np.zeros((size, size))
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(4, size - 4, size=2)
        s = rng.uniform(1.8, 2.8)
        out += np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * s**2))
    return np.clip(out, 0.0, 1.0)


_PATTERNS = (_stripes, _rings, _checker, _ramp, _blob)


def gen_toy_images(classes: int = 5, per_class: int = 50, size: int = IMAGE_SIZE,
                   channels: int = IMAGE_CHANNELS, seed: int = 0):
    """Small multi-class pattern images with per-sample jitter, values in [0, 1].

    Each class is a distinct parametric pattern (stripes, rings, checker,
    ramp, blobs); position, phase, and color vary randomly per sample, so
    color carries no class information.
    """
    if classes < 2 or classes > len(_PATTERNS):
        raise ValueError(f"classes must be in [2, {len(_PATTERNS)}], got {classes}")
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(classes):
        pattern = _PATTERNS[label]
        for _ in range(per_class):
            base = pattern(rng, size)
            fg = rng.uniform(0.6, 1.0, size=channels)
            bg = rng.uniform(0.0, 0.25, size=channels)
            img = (base[None, :, :] * fg[:, None, None]
                   + (1.0 - base[None, :, :]) * bg[:, None, None])
            samples.append(LabeledSample(Tensor(np.clip(img, 0.0, 1.0)), label, label))
    return samples


def constant_oracle(label: int):
    """Oracle for generated images: class identity is parameter-defined, so
    pixel-level smoothing cannot change it."""
    return lambda _tensor: label
