"""Shape-preserving random input transformations.

A ``TransformSpec`` carries every random draw, so applying it is a pure
function of the image. Ranges are mild DIM-style defaults and can be
overridden through ``TransformRanges``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import bilinear_matrix
from .baselines import box_blur

KINDS = ("identity", "resize_pad", "affine", "blur", "noise")
DEFAULT_LIBRARY = ("resize_pad", "affine")


@dataclass(frozen=True)
class TransformRanges:
    resize_ratio: tuple[float, float] = (0.8, 1.0)
    max_rotation_deg: float = 10.0
    max_translation: float = 0.1
    scale: tuple[float, float] = (0.9, 1.1)
    blur_kernels: tuple[int, ...] = (3, 5)
    max_noise_sigma: float = 0.05


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")


IDENTITY = TransformSpec("identity")


def sample_transform(
    library, rng: np.random.Generator, shape=None, ranges: TransformRanges = TransformRanges()
) -> TransformSpec:
    """Pick a kind uniformly from ``library`` and freeze its parameters.

    ``shape`` (``(..., H, W)``) is needed for resize_pad offsets.
    """
    library = tuple(library)
    if not library:
        raise ValueError("transform library is empty")
    for k in library:
        if k not in KINDS:
            raise ValueError(f"unknown transform kind {k!r}")
    kind = library[int(rng.integers(len(library)))]
    if kind == "identity":
        return IDENTITY
    if kind == "resize_pad":
        if shape is None:
            raise ValueError("resize_pad sampling needs the image shape")
        h, w = shape[-2:]
        lo, hi = ranges.resize_ratio
        ratio = float(rng.uniform(lo, hi))
        nh, nw = max(1, int(round(ratio * h))), max(1, int(round(ratio * w)))
        top = int(rng.integers(h - nh + 1))
        left = int(rng.integers(w - nw + 1))
        return TransformSpec(kind, {"ratio": ratio, "size": (nh, nw), "offset": (top, left)})
    if kind == "affine":
        m = ranges.max_translation
        return TransformSpec(
            kind,
            {
                "angle": float(rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg)),
                "translate": (float(rng.uniform(-m, m)), float(rng.uniform(-m, m))),
                "scale": float(rng.uniform(*ranges.scale)),
            },
        )
    if kind == "blur":
        return TransformSpec(kind, {"kernel": int(rng.choice(ranges.blur_kernels))})
    sigma = float(ranges.max_noise_sigma * (1.0 - rng.uniform(0.0, 1.0)))  # (0, max]
    return TransformSpec(kind, {"sigma": sigma, "noise_seed": int(rng.integers(2**63 - 1))})


def resize_pad(x: np.ndarray, size: tuple[int, int], offset: tuple[int, int]) -> np.ndarray:
    h, w = x.shape[-2:]
    nh, nw = size
    top, left = offset
    if nh > h or nw > w or top + nh > h or left + nw > w:
        raise ValueError(f"resize {size} at {offset} does not fit in {(h, w)}")
    small = np.matmul(np.matmul(bilinear_matrix(h, nh), x), bilinear_matrix(w, nw).T)
    out = np.zeros_like(x)
    out[..., top : top + nh, left : left + nw] = small
    return out


def _affine_taps(shape, angle: float, translate: tuple[float, float], scale: float):
    """Bilinear taps of the inverse-mapped sampling grid: four (flat source
    index, weight) pairs per output pixel, zero weight outside the source."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle)
    cos, sin = np.cos(th), np.sin(th)
    ty, tx = translate[0] * h, translate[1] * w
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy - ty, xx - cx - tx
    # inverse of rotation-then-scale
    sy = (cos * dy - sin * dx) / scale + cy
    sx = (sin * dy + cos * dx) / scale + cx
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    taps = []
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            taps.append((idx, np.where(valid, wy * wx, 0.0)))
    return taps


def affine(x: np.ndarray, angle: float, translate: tuple[float, float], scale: float) -> np.ndarray:
    """Rotate (degrees) and scale about the centre, then shift by a fraction
    of each side. Bilinear sampling, zeros outside the source."""
    h, w = x.shape[-2:]
    flat = x.reshape(x.shape[:-2] + (h * w,))
    out = np.zeros_like(x)
    for idx, weight in _affine_taps((h, w), angle, translate, scale):
        out = out + weight * flat[..., idx]
    return out


def _affine_adjoint(g: np.ndarray, angle, translate, scale) -> np.ndarray:
    h, w = g.shape[-2:]
    lead = g.shape[:-2]
    rows = g.reshape(-1, h * w)
    out = np.zeros_like(rows)
    for idx, weight in _affine_taps((h, w), angle, translate, scale):
        contrib = rows * weight.reshape(-1)
        for r in range(len(rows)):
            out[r] += np.bincount(idx.reshape(-1), contrib[r], minlength=h * w)
    return out.reshape(lead + (h, w))


def _resize_pad_adjoint(g: np.ndarray, size, offset) -> np.ndarray:
    h, w = g.shape[-2:]
    nh, nw = size
    top, left = offset
    crop = g[..., top : top + nh, left : left + nw]
    return np.matmul(np.matmul(bilinear_matrix(h, nh).T, crop), bilinear_matrix(w, nw))


def _box_blur_adjoint(g: np.ndarray, kernel_size: int) -> np.ndarray:
    r = kernel_size // 2
    h, w = g.shape[-2:]
    spec = [(0, 0)] * (g.ndim - 2) + [(2 * r, 2 * r), (2 * r, 2 * r)]
    gp = np.pad(g, spec)
    win = np.lib.stride_tricks.sliding_window_view(gp, (kernel_size, kernel_size), axis=(-2, -1))
    full = win.mean(axis=(-2, -1))  # padded-coordinate contributions, (H + 2r, W + 2r)
    # fold replicated border positions back onto the edge pixels
    full[..., r, :] += full[..., :r, :].sum(axis=-2)
    full[..., r + h - 1, :] += full[..., r + h :, :].sum(axis=-2)
    full = full[..., r : r + h, :]
    full[..., :, r] += full[..., :, :r].sum(axis=-1)
    full[..., :, r + w - 1] += full[..., :, r + w :].sum(axis=-1)
    return full[..., :, r : r + w]


def _raw_transform(x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    p = spec.params
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "resize_pad":
        return resize_pad(x, tuple(p["size"]), tuple(p["offset"]))
    if spec.kind == "affine":
        return affine(x, p["angle"], tuple(p["translate"]), p["scale"])
    if spec.kind == "blur":
        return box_blur(x, int(p["kernel"]))
    rng = np.random.default_rng(p["noise_seed"])
    return x + rng.normal(0.0, p["sigma"], x.shape)


def apply_transform(x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply a frozen spec to ``(..., H, W)``; output is clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "identity":
        return x.copy()
    return np.clip(_raw_transform(x, spec), 0.0, 1.0)


def transform_adjoint(g: np.ndarray, x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Pull a gradient on ``apply_transform(x, spec)`` back onto ``x``.

    Every kind is affine in ``x`` before clipping, so this is the exact
    vector-Jacobian product: the clip mask, then the transposed linear map.
    """
    g = np.asarray(g, dtype=np.float64)
    if spec.kind == "identity":
        return g
    raw = _raw_transform(np.asarray(x, dtype=np.float64), spec)
    g = np.where((raw >= 0.0) & (raw <= 1.0), g, 0.0)
    p = spec.params
    if spec.kind == "resize_pad":
        return _resize_pad_adjoint(g, tuple(p["size"]), tuple(p["offset"]))
    if spec.kind == "affine":
        return _affine_adjoint(g, p["angle"], tuple(p["translate"]), p["scale"])
    if spec.kind == "blur":
        return _box_blur_adjoint(g, int(p["kernel"]))
    return g
