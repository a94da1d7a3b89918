"""Momentum sign-gradient attack with integrated-gradient estimators.

Estimator ladder (``AttackConfig.estimator``):

``plain``        loss gradient at the current iterate (MIM when momentum is on)
``ig_single``    one straight path from a black baseline (MIG-style)
``muig``         mean IG over ``n_baselines`` arbitrary baselines (noise/blur)
``mumoig``       mean IG over ``n_baselines`` LBQ baselines
``mumodig_all``  LBQ paths to transformed copies plus the segment back to x
``mumodig``      LBQ paths to transformed copies only

All estimators work on batches; each example owns a random stream derived
from ``(seed, example index)`` so results do not depend on how examples are
grouped.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import box_blur, lbq_image, noise_image
from .models import ClassifierModel, LossKind, input_gradient, loss_value
from .paths import integrated_gradient
from .transforms import DEFAULT_LIBRARY, TransformRanges, apply_transform, sample_transform, transform_adjoint

log = logging.getLogger(__name__)

ESTIMATORS = ("plain", "ig_single", "muig", "mumoig", "mumodig_all", "mumodig")
MUIG_BASELINES = ("noise", "blur", "black", "black-mix")


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 10
    epsilon: float = 16 / 255
    step_size: float = 1.6 / 255
    decay: float = 1.0
    position_factor: float = 0.65
    n_regions: int = 2
    n_interpolate: int = 1
    n_baselines: int = 1
    n_transforms: int = 6
    estimator: str = "mumodig"
    muig_baseline: str = "noise"
    noise_sigma: float = 0.1
    blur_kernel: int = 5
    loss: str = "neg_log_prob"
    transforms: tuple[str, ...] = DEFAULT_LIBRARY
    ranges: TransformRanges = field(default_factory=TransformRanges)
    lbq_zero_single_region: bool = False
    normalization: str = "mean_abs"
    transform_gradient: str = "adjoint"
    seed: int = 0
    chunk_size: int = 256

    def __post_init__(self):
        problems = []
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.epsilon < 0:
            problems.append("epsilon must be >= 0")
        if self.step_size <= 0:
            problems.append("step_size must be > 0")
        if self.decay < 0:
            problems.append("decay must be >= 0")
        if not 0.0 <= self.position_factor <= 1.0:
            problems.append("position_factor must lie in [0, 1]")
        if self.n_regions < 1 or self.n_interpolate < 1 or self.n_baselines < 1:
            problems.append("n_regions, n_interpolate and n_baselines must be >= 1")
        if self.n_transforms < 0:
            problems.append("n_transforms must be >= 0")
        if self.estimator not in ESTIMATORS:
            problems.append(f"estimator must be one of {ESTIMATORS}")
        if self.muig_baseline not in MUIG_BASELINES:
            problems.append(f"muig_baseline must be one of {MUIG_BASELINES}")
        if self.normalization not in ("mean_abs", "sum_abs"):
            problems.append("normalization must be mean_abs or sum_abs")
        if self.transform_gradient not in ("adjoint", "direct"):
            problems.append("transform_gradient must be adjoint or direct")
        if self.chunk_size < 1:
            problems.append("chunk_size must be >= 1")
        if not self.transforms:
            problems.append("transform library must not be empty")
        if self.loss not in [k.value for k in LossKind]:
            problems.append(f"loss must be one of {[k.value for k in LossKind]}")
        if problems:
            raise ValueError("; ".join(problems))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "loss", LossKind(self.loss).value)

    @property
    def keep_nonmonotonic(self) -> bool:
        return self.estimator == "mumodig_all"

    @property
    def auxiliary_inputs(self) -> int:
        """Per-iteration budget N = N_T * N_B * N_I (identity branch not counted)."""
        return self.n_transforms * self.n_baselines * self.n_interpolate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transforms"] = list(self.transforms)
        d["ranges"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["ranges"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        d = dict(d)
        if "ranges" in d and isinstance(d["ranges"], dict):
            d["ranges"] = TransformRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["ranges"].items()})
        if "transforms" in d:
            d["transforms"] = tuple(d["transforms"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GradientEstimate:
    """Per-example estimator output for a batch.

    ``sign_conflict`` is the mean over accumulated segments of the
    fraction of elements whose gradient sign the path factor flips.
    """

    gradient: np.ndarray
    branch_count: int
    sign_conflict: np.ndarray
    monotonic_branches: np.ndarray


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    loss_trace: list[float]
    clean_prediction: int
    adversarial_prediction: int
    sign_conflict: float = 0.0
    zero_gradient_steps: int = 0


# ---------------------------------------------------------------------------
# gradient plumbing


def _batched_gradient(model: ClassifierModel, points: np.ndarray, labels: np.ndarray, loss, chunk: int) -> np.ndarray:
    out = np.empty_like(points)
    for i in range(0, len(points), chunk):
        out[i : i + chunk] = input_gradient(model, points[i : i + chunk], labels[i : i + chunk], loss)
    return out


def _conflict(direction: np.ndarray, gsum: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, direction.ndim))
    return ((direction < 0) & (gsum != 0)).mean(axis=axes)


def _ig_terms(model, baselines, x, labels, cfg, n_points=None):
    n_i = cfg.n_interpolate if n_points is None else n_points
    lab = np.tile(labels, n_i)
    ig, gsum = integrated_gradient(
        lambda pts: _batched_gradient(model, pts, lab, cfg.loss, cfg.chunk_size), baselines, x, n_i, cfg.position_factor
    )
    direction = x - baselines
    return ig, _conflict(direction, gsum), np.all(direction >= 0, axis=tuple(range(1, x.ndim)))


def _accumulate(total, term):
    # Start from the first term rather than zeros so a single-term sum keeps
    # its exact bits (0.0 + -0.0 would flip signed zeros).
    return term if total is None else total + term


def _rngs(cfg: AttackConfig, indices) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.seed, int(i)]) for i in indices]


# ---------------------------------------------------------------------------
# estimators


def estimate_plain(model, x, y, loss=LossKind.NEG_LOG_PROB, chunk_size: int = 256) -> GradientEstimate:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    g = _batched_gradient(model, xb, yb, loss, chunk_size)
    n = len(xb)
    est = GradientEstimate(g, 1, np.zeros(n), np.ones(n, dtype=np.int64))
    return _unbatch(est) if single else est


def estimate_ig(model, x, y, baseline, n_interpolate=1, position_factor=0.65, loss=LossKind.NEG_LOG_PROB, chunk_size=256):
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != x.shape:
        raise ValueError(f"baseline shape {baseline.shape} differs from input {x.shape}")
    single = x.ndim == 3
    xb, bb = (x[None], baseline[None]) if single else (x, baseline)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    cfg = AttackConfig(n_interpolate=n_interpolate, position_factor=position_factor, loss=LossKind(loss).value, chunk_size=chunk_size)
    ig, conflict, mono = _ig_terms(model, bb, xb, yb, cfg)
    est = GradientEstimate(ig, 1, conflict, mono.astype(np.int64))
    return _unbatch(est) if single else est


def _muig_baselines(x: np.ndarray, cfg: AttackConfig, rngs) -> np.ndarray:
    kind = cfg.muig_baseline
    out = np.empty_like(x)
    for i, rng in enumerate(rngs):
        if kind == "black-mix":
            kind_i = "black" if rng.uniform() < 0.5 else "noise"
        else:
            kind_i = kind
        if kind_i == "noise":
            out[i] = noise_image(x[i], cfg.noise_sigma, rng)
        elif kind_i == "blur":
            out[i] = box_blur(x[i], cfg.blur_kernel)
        else:
            out[i] = 0.0
    return out


def estimate_muig(model, x, y, cfg: AttackConfig, rngs) -> GradientEstimate:
    """Mean IG over ``cfg.n_baselines`` sampled arbitrary baselines."""
    total = None
    conflict = np.zeros(len(x))
    mono = np.zeros(len(x), dtype=np.int64)
    for _ in range(cfg.n_baselines):
        b = _muig_baselines(x, cfg, rngs)
        ig, c, m = _ig_terms(model, b, x, y, cfg)
        total = _accumulate(total, ig)
        conflict += c
        mono += m
    return GradientEstimate(total / cfg.n_baselines, cfg.n_baselines, conflict / cfg.n_baselines, mono)


def _lbq_batch(x: np.ndarray, cfg: AttackConfig, rngs) -> np.ndarray:
    if cfg.n_regions == 1 and cfg.lbq_zero_single_region:
        return np.zeros_like(x)
    return np.stack([lbq_image(xi, cfg.n_regions, rng) for xi, rng in zip(x, rngs)])


def estimate_mumodig(model, x, y, cfg: AttackConfig, rngs, keep_nonmonotonic: bool | None = None) -> GradientEstimate:
    """Diversified monotonic IG.

    Branch 0 is the identity; branches 1..N_T use a fresh transform per
    example. For each branch and each of N_B LBQ baselines ``b`` of the
    transformed input ``x'``, segment A (b -> x') is always accumulated;
    segment B (x' -> x) only when ``keep_nonmonotonic``. The branch sum is
    divided by ``(N_T + 1) * N_B``.

    Segment A lives in the coordinates of ``x'``. With
    ``transform_gradient="adjoint"`` it is pulled back onto ``x`` through
    the transposed transform (clip mask included); ``"direct"`` adds it
    pixel-for-pixel.
    """
    keep = cfg.keep_nonmonotonic if keep_nonmonotonic is None else keep_nonmonotonic
    n = len(x)
    total = None
    conflict = np.zeros(n)
    segments = 0
    mono = np.zeros(n, dtype=np.int64)
    for p in range(cfg.n_transforms + 1):
        if p == 0:
            xt = x
        else:
            specs = [sample_transform(cfg.transforms, rng, x.shape, cfg.ranges) for rng in rngs]
            xt = np.stack([apply_transform(xi, s) for xi, s in zip(x, specs)])
        for _ in range(cfg.n_baselines):
            b = _lbq_batch(xt, cfg, rngs)
            ig, c, m_a = _ig_terms(model, b, xt, y, cfg)
            if p > 0 and cfg.transform_gradient == "adjoint":
                ig = np.stack([transform_adjoint(gi, xi, s) for gi, xi, s in zip(ig, x, specs)])
            total = _accumulate(total, ig)
            conflict += c
            segments += 1
            branch_mono = m_a
            if keep and p > 0:
                ig_b, c_b, m_b = _ig_terms(model, xt, x, y, cfg)
                total = total + ig_b
                conflict += c_b
                segments += 1
                branch_mono = branch_mono & m_b
            mono += branch_mono
    branches = (cfg.n_transforms + 1) * cfg.n_baselines
    return GradientEstimate(total / branches, branches, conflict / segments, mono)


def estimate(model, x, y, cfg: AttackConfig, rngs) -> GradientEstimate:
    """Dispatch on ``cfg.estimator`` for a batch ``x`` of shape (N, C, H, W)."""
    kind = cfg.estimator
    if kind == "plain":
        return estimate_plain(model, x, y, cfg.loss, cfg.chunk_size)
    if kind == "ig_single":
        ig, c, m = _ig_terms(model, np.zeros_like(x), x, y, cfg)
        return GradientEstimate(ig, 1, c, m.astype(np.int64))
    if kind == "muig":
        return estimate_muig(model, x, y, cfg, rngs)
    if kind == "mumoig":
        return estimate_mumodig(model, x, y, replace(cfg, n_transforms=0), rngs, keep_nonmonotonic=False)
    return estimate_mumodig(model, x, y, cfg, rngs)


def _unbatch(est: GradientEstimate) -> GradientEstimate:
    return GradientEstimate(est.gradient[0], est.branch_count, est.sign_conflict[0], est.monotonic_branches[0])


# ---------------------------------------------------------------------------
# attack loop


def _normalise(g: np.ndarray, how: str) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(range(1, g.ndim))
    scale = np.abs(g).mean(axis=axes) if how == "mean_abs" else np.abs(g).sum(axis=axes)
    zero = scale == 0
    safe = np.where(zero, 1.0, scale).reshape((-1,) + (1,) * (g.ndim - 1))
    return np.where(zero.reshape(safe.shape), 0.0, g / safe), zero


def run_attack_batch(
    model: ClassifierModel, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig, indices=None
) -> list[AdversarialResult]:
    """Attack every image; ``indices`` name each example's random stream."""
    clean = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if clean.ndim != 4 or len(labels) != len(clean):
        raise ValueError(f"expected (N, C, H, W) images with N labels, got {clean.shape} / {labels.shape}")
    if clean.min(initial=0.0) < 0 or clean.max(initial=0.0) > 1:
        raise ValueError("images must lie in [0, 1]")
    indices = np.arange(len(clean)) if indices is None else np.asarray(indices)
    rngs = _rngs(cfg, indices)
    n = len(clean)
    momentum = np.zeros_like(clean)
    x = clean.copy()
    traces = [[] for _ in range(n)]
    conflicts = np.zeros(n)
    zero_steps = np.zeros(n, dtype=np.int64)
    for t in range(cfg.iterations):
        for i, v in enumerate(loss_value(model, x, labels, cfg.loss)):
            traces[i].append(float(v))
        est = estimate(model, x, labels, cfg, rngs)
        normed, zero = _normalise(est.gradient, cfg.normalization)
        if zero.any():
            log.info("iteration %d: zero estimator gradient for %d example(s); momentum only", t, int(zero.sum()))
        zero_steps += zero
        conflicts += est.sign_conflict
        momentum = cfg.decay * momentum + normed
        stepped = x + cfg.step_size * np.sign(momentum)
        x = np.clip(clean + np.clip(stepped - clean, -cfg.epsilon, cfg.epsilon), 0.0, 1.0)
    final_loss = loss_value(model, x, labels, cfg.loss)
    delta = x - clean
    adversarial = clean + delta
    before = model.predict(clean)
    after = model.predict(adversarial)
    results = []
    for i in range(n):
        results.append(
            AdversarialResult(
                adversarial[i],
                delta[i],
                traces[i] + [float(final_loss[i])],
                int(before[i]),
                int(after[i]),
                float(conflicts[i] / cfg.iterations),
                int(zero_steps[i]),
            )
        )
    return results


def run_attack(model: ClassifierModel, image: np.ndarray, label: int, cfg: AttackConfig, index: int = 0) -> AdversarialResult:
    return run_attack_batch(model, np.asarray(image)[None], np.asarray([label]), cfg, [index])[0]
