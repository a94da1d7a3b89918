"""Transfer evaluation, gradient diagnostics and the bit-depth defense."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, run_attack_batch
from .models import ClassifierModel, LossKind, input_gradient, loss_value
from .paths import IntegrationPath, integrated_gradient, interpolated_points
from .transforms import apply_transform, sample_transform

REPORT_COLUMNS = ("estimator", "target", "asr_filtered", "asr_unfiltered", "n_eligible", "n_total")


class EmptyDenominatorError(ValueError):
    pass


@dataclass(frozen=True)
class ASR:
    filtered: float
    unfiltered: float
    n_eligible: int
    n_total: int


def attack_success_rate(
    target: ClassifierModel, clean: np.ndarray, adversarial: np.ndarray, labels: np.ndarray, bits: int | None = None
) -> ASR:
    """Misclassification rate of ``adversarial`` on ``target``.

    The filtered rate only counts examples whose clean image the target
    classifies correctly; the unfiltered rate counts all of them. With
    ``bits`` both images pass through bit-depth reduction first.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDenominatorError("no examples to evaluate")
    if bits is not None:
        clean, adversarial = bit_depth_reduce(clean, bits), bit_depth_reduce(adversarial, bits)
    correct = target.predict(clean) == labels
    fooled = target.predict(adversarial) != labels
    n_eligible = int(correct.sum())
    if n_eligible == 0:
        raise EmptyDenominatorError("target misclassifies every clean image; filtered ASR undefined")
    return ASR(float(fooled[correct].mean()), float(fooled.mean()), n_eligible, len(labels))


@dataclass
class TransferReport:
    surrogate: str
    rows: list[dict]
    n_examples: int
    seed: int
    config_digest: str
    configs: dict = field(default_factory=dict)

    def asr(self, estimator: str, target: str, column: str = "asr_filtered") -> float:
        for row in self.rows:
            if row["estimator"] == estimator and row["target"] == target:
                return row[column]
        raise KeyError((estimator, target))

    def to_csv(self) -> str:
        extra = sorted({k for r in self.rows for k in r} - set(REPORT_COLUMNS))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(REPORT_COLUMNS) + extra, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "surrogate": self.surrogate,
                "n_examples": self.n_examples,
                "seed": self.seed,
                "config_digest": self.config_digest,
                "configs": self.configs,
                "rows": self.rows,
            },
            indent=2,
            sort_keys=True,
        )


def ladder_digest(configs: dict[str, AttackConfig]) -> str:
    blob = json.dumps({k: c.to_dict() for k, c in configs.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def report_rows(
    estimator: str,
    targets: dict[str, ClassifierModel],
    clean: np.ndarray,
    adversarial: np.ndarray,
    labels: np.ndarray,
    defense_bits: int | None = None,
) -> list[dict]:
    rows = []
    for name, target in targets.items():
        asr = attack_success_rate(target, clean, adversarial, labels)
        row = {
            "estimator": estimator,
            "target": name,
            "asr_filtered": asr.filtered,
            "asr_unfiltered": asr.unfiltered,
            "n_eligible": asr.n_eligible,
            "n_total": asr.n_total,
        }
        if defense_bits is not None:
            row[f"asr_bdr{defense_bits}"] = attack_success_rate(target, clean, adversarial, labels, defense_bits).filtered
        rows.append(row)
    return rows


def transfer_matrix(
    surrogate: ClassifierModel,
    targets: dict[str, ClassifierModel],
    images: np.ndarray,
    labels: np.ndarray,
    configs: dict[str, AttackConfig],
    surrogate_name: str = "surrogate",
    defense_bits: int | None = None,
) -> tuple[TransferReport, dict[str, np.ndarray]]:
    """Craft once per estimator on the surrogate, score on every target.

    Rows follow the order of ``configs``; returns the report and the
    adversarial batches keyed by estimator name.
    """
    rows = []
    adversarial = {}
    for name, cfg in configs.items():
        results = run_attack_batch(surrogate, images, labels, cfg)
        adv = np.stack([r.adversarial for r in results])
        adversarial[name] = adv
        rows.extend(report_rows(name, targets, images, adv, labels, defense_bits))
    seeds = {c.seed for c in configs.values()}
    report = TransferReport(
        surrogate_name,
        rows,
        len(labels),
        min(seeds) if seeds else 0,
        ladder_digest(configs),
        {k: c.to_dict() for k, c in configs.items()},
    )
    return report, adversarial


def archive_report(
    archives: dict,
    targets: dict[str, ClassifierModel],
    surrogate_name: str = "surrogate",
    defense_bits: int | None = None,
) -> TransferReport:
    """Score stored adversarial archives (estimator name -> archive).

    Rows keep the archive order, then the target order.
    """
    rows = []
    configs = {}
    counts = set()
    for name, arc in archives.items():
        rows.extend(report_rows(name, targets, arc.clean, arc.adversarial, arc.labels, defense_bits))
        configs[name] = arc.meta.get("attack", {})
        counts.add(len(arc))
    if len(counts) > 1:
        raise ValueError(f"archives hold different example counts: {sorted(counts)}")
    blob = json.dumps(configs, sort_keys=True).encode()
    seeds = [c.get("seed", 0) for c in configs.values()]
    return TransferReport(
        surrogate_name, rows, counts.pop() if counts else 0, min(seeds) if seeds else 0,
        hashlib.sha256(blob).hexdigest()[:16], configs,
    )


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class CosineProfile:
    matrix: np.ndarray  # NaN marks pairs involving a zero gradient

    def mean_adjacent(self) -> float:
        return float(np.nanmean(np.diag(self.matrix, 1)))

    def to_csv(self) -> str:
        return grid_csv(self.matrix)


def cosine_matrix(grads: np.ndarray) -> np.ndarray:
    flat = np.asarray(grads, dtype=np.float64).reshape(len(grads), -1)
    norms = np.linalg.norm(flat, axis=1)
    unit = np.divide(flat, norms[:, None], out=np.zeros_like(flat), where=norms[:, None] > 0)
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    m = 0.5 * (m + m.T)
    live = norms > 0
    np.fill_diagonal(m, 1.0)
    m[~live, :] = np.nan
    m[:, ~live] = np.nan
    return m


def gradient_cosine_profile(model: ClassifierModel, y: int, path: IntegrationPath, loss=LossKind.NEG_LOG_PROB) -> CosineProfile:
    if path.n_points < 2:
        raise ValueError("a cosine profile needs at least two points")
    pts = np.stack(interpolated_points(path))
    grads = input_gradient(model, pts, np.full(len(pts), y), loss)
    return CosineProfile(cosine_matrix(grads))


def transformed_gradient_similarity(
    model: ClassifierModel, x: np.ndarray, y: int, n_variants: int, rng: np.random.Generator, library, loss=LossKind.NEG_LOG_PROB
) -> float:
    """Mean cosine between the gradient at ``x`` and at transformed copies of ``x``."""
    specs = [sample_transform(library, rng, x.shape) for _ in range(n_variants)]
    batch = np.stack([x] + [apply_transform(x, s) for s in specs])
    grads = input_gradient(model, batch, np.full(len(batch), y), loss)
    return float(np.nanmean(cosine_matrix(grads)[0, 1:]))


def attribution_map(
    model: ClassifierModel | None,
    x: np.ndarray,
    y: int,
    n_interpolate: int = 64,
    position_factor: float = 0.5,
    loss=LossKind.NEG_PROB,
    grad_fn=None,
) -> np.ndarray:
    """Channel-summed IG from a black baseline, shape ``(H, W)``.

    ``grad_fn`` (stack of points -> gradients) replaces the model's loss
    gradient when given.
    """
    x = np.asarray(x, dtype=np.float64)
    if grad_fn is None:
        grad_fn = lambda pts: input_gradient(model, pts, np.full(len(pts), y), loss)  # noqa: E731
    ig, _ = integrated_gradient(grad_fn, np.zeros_like(x)[None], x[None], n_interpolate, position_factor)
    return ig[0].sum(axis=0)


def bit_depth_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize to ``2**bits`` levels, rounding halves up."""
    if not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    levels = 2 ** int(bits) - 1
    return np.floor(np.asarray(x, dtype=np.float64) * levels + 0.5) / levels


def grid_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.atleast_2d(grid):
        writer.writerow(["nan" if np.isnan(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def mean_loss(model: ClassifierModel, x: np.ndarray, y: np.ndarray, loss=LossKind.NEG_LOG_PROB) -> float:
    return float(np.mean(loss_value(model, x, y, loss)))
