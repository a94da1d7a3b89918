"""Integration-path baselines.

``lbq_baseline`` is lower-bound quantization: per channel, sort the pixel
values, cut the sorted vector into regions at random gaps, and replace
every value by the minimum of its region. The result never exceeds the
input, so the straight path from it to the input is monotonic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Baseline:
    image: np.ndarray
    kind: str
    source_digest: str
    seed: int | None = None


def digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()[:16]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def quantize_regions(values: np.ndarray, cuts) -> np.ndarray:
    """Region-minimum quantization of one channel.

    ``values`` is any array (flattened internally); ``cuts`` are gap
    positions in ``1..n-1`` of the stably sorted vector, a cut at ``g``
    separating sorted elements ``g-1`` and ``g``.
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    n = flat.size
    cuts = np.asarray(cuts, dtype=np.int64).reshape(-1)
    if cuts.size and (cuts.min() < 1 or cuts.max() > n - 1):
        raise ValueError(f"cuts must lie in [1, {n - 1}]")
    order = np.argsort(flat, kind="stable")
    ordered = flat[order]
    start = np.zeros(n, dtype=np.int64)
    start[cuts] = cuts
    start = np.maximum.accumulate(start)
    out = np.empty(n)
    out[order] = ordered[start]
    return out.reshape(np.shape(values))


def lbq_cuts(n_pixels: int, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n_pixels - 1, size=n_regions - 1, replace=False) + 1)


def lbq_image(x: np.ndarray, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    """LBQ over every channel of ``(C,H,W)`` (or every image of a batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return np.stack([lbq_image(xi, n_regions, rng) for xi in x])
    if x.ndim != 3:
        raise ValueError(f"expected a C x H x W image, got shape {x.shape}")
    c = x.shape[0]
    n = x[0].size
    if n_regions < 1:
        raise ValueError("n_regions must be at least 1")
    if n_regions > n:
        raise ValueError(f"n_regions={n_regions} exceeds {n} pixels per channel")
    flat = x.reshape(c, n)
    order = np.argsort(flat, axis=1, kind="stable")
    ordered = np.take_along_axis(flat, order, axis=1)
    start = np.zeros((c, n), dtype=np.int64)
    if n_regions > 1:
        for ch in range(c):
            cuts = lbq_cuts(n, n_regions, rng)
            start[ch, cuts] = cuts
        start = np.maximum.accumulate(start, axis=1)
    out = np.empty_like(flat)
    np.put_along_axis(out, order, np.take_along_axis(ordered, start, axis=1), axis=1)
    return out.reshape(x.shape)


def lbq_baseline(x: np.ndarray, n_regions: int = 2, seed=None) -> Baseline:
    seed_value = seed if isinstance(seed, (int, np.integer)) else None
    return Baseline(lbq_image(x, n_regions, _rng(seed)), "lbq", digest(x), seed_value)


def black_baseline(x: np.ndarray, channel_min: bool = False) -> Baseline:
    """All-zero image; with ``channel_min`` each channel is filled with its
    own minimum instead (identical to single-region LBQ)."""
    x = np.asarray(x, dtype=np.float64)
    if channel_min:
        axes = tuple(range(x.ndim - 2, x.ndim))
        img = np.broadcast_to(x.min(axis=axes, keepdims=True), x.shape).copy()
    else:
        img = np.zeros_like(x)
    return Baseline(img, "black", digest(x))


def noise_image(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, sigma, x.shape), 0.0, 1.0)


def noise_baseline(x: np.ndarray, sigma: float = 0.1, seed=None) -> Baseline:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    seed_value = seed if isinstance(seed, (int, np.integer)) else None
    return Baseline(noise_image(x, sigma, _rng(seed)), "noise", digest(x), seed_value)


def box_blur(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """Box filter over the last two axes with edge replication."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    x = np.asarray(x, dtype=np.float64)
    r = kernel_size // 2
    spec = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, spec, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel_size, kernel_size), axis=(-2, -1))
    return win.mean(axis=(-2, -1))


def blur_baseline(x: np.ndarray, kernel_size: int = 5) -> Baseline:
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 3, got {kernel_size}")
    return Baseline(box_blur(x, kernel_size), "blur", digest(x))
