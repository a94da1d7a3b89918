"""Straight integration paths, their sample points and monotonicity checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class IntegrationPath:
    baseline: np.ndarray
    endpoint: np.ndarray
    n_points: int = 1
    position_factor: float = 0.65

    def __post_init__(self):
        b = np.asarray(self.baseline, dtype=np.float64)
        e = np.asarray(self.endpoint, dtype=np.float64)
        if b.shape != e.shape:
            raise ValueError(f"baseline {b.shape} and endpoint {e.shape} differ in shape")
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        if not 0.0 <= self.position_factor <= 1.0:
            raise ValueError("position_factor must lie in [0, 1]")
        object.__setattr__(self, "baseline", b)
        object.__setattr__(self, "endpoint", e)

    @property
    def direction(self) -> np.ndarray:
        return self.endpoint - self.baseline

    def coefficients(self) -> np.ndarray:
        return (np.arange(self.n_points) + self.position_factor) / self.n_points


def interpolated_points(path: IntegrationPath) -> list[np.ndarray]:
    return list(point_stack(path.baseline, path.endpoint, path.n_points, path.position_factor))


def point_stack(baseline: np.ndarray, endpoint: np.ndarray, n_points: int, position_factor: float) -> np.ndarray:
    """All sample points of the path stacked on a new leading axis."""
    coef = (np.arange(n_points) + position_factor) / n_points
    coef = coef.reshape((n_points,) + (1,) * np.ndim(baseline))
    pts = baseline[None] + coef * (endpoint - baseline)[None]
    # keep points between the endpoints despite rounding; coefficient 1 is the endpoint exactly
    pts = np.clip(pts, np.minimum(baseline, endpoint), np.maximum(baseline, endpoint))
    if position_factor == 1.0:
        pts[-1] = endpoint
    return pts


def is_monotonic(points: Sequence[np.ndarray]) -> bool:
    """Elementwise non-decreasing along the sequence.

    Checking consecutive pairs covers every pair ``s < m`` by transitivity.
    """
    if len(points) == 0:
        raise ValueError("need at least one point")
    arrs = [np.asarray(p, dtype=np.float64) for p in points]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"point shapes differ: {shape} vs {a.shape}")
    return all(bool(np.all(prev <= nxt)) for prev, nxt in zip(arrs, arrs[1:]))


def is_monotonic_path(path: IntegrationPath) -> bool:
    """Straight-path shortcut: monotonic iff the direction is non-negative."""
    return bool(np.all(path.direction >= 0))


def sign_conflict_fraction(direction: np.ndarray, gradient: np.ndarray) -> float:
    """Share of elements whose gradient sign the path factor reverses.

    Elements with a zero direction or zero gradient have no sign and are
    not counted as conflicts (they still count in the denominator).
    """
    direction = np.asarray(direction, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if direction.shape != gradient.shape:
        raise ValueError(f"direction {direction.shape} and gradient {gradient.shape} differ in shape")
    if direction.size == 0:
        return 0.0
    conflict = (direction < 0) & (gradient != 0)
    return float(np.count_nonzero(conflict)) / direction.size


def integrated_gradient(grad_fn, baseline: np.ndarray, endpoint: np.ndarray, n_points: int, position_factor: float):
    """Riemann-sum IG along the straight path ``baseline -> endpoint``.

    ``grad_fn`` maps a stack of points ``(n_points * S, ...)`` to gradients
    of the same shape; ``baseline``/``endpoint`` are ``(S, ...)`` stacks.
    Returns ``(ig, gradient_sum)``, where ``ig = (endpoint - baseline) /
    n_points * gradient_sum``.
    """
    pts = point_stack(baseline, endpoint, n_points, position_factor)
    g = np.asarray(grad_fn(pts.reshape((-1,) + baseline.shape[1:]))).reshape(pts.shape)
    gsum = g.sum(axis=0)
    return (endpoint - baseline) / n_points * gsum, gsum
