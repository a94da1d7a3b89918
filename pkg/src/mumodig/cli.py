"""``mumodig`` command line: train, attack, evaluate, diagnose.

Every subcommand reads one JSON config (``--config``), validates all of it
before doing any work, and writes its outputs plus ``config.json`` (the
resolved config, defaults filled in) into ``--out``. Outputs are staged in a
temporary directory and moved into place only on success.

Exit codes: 0 ok, 2 invalid config or missing input, 3 training diverged,
4 budget invariant violated while writing adversarial examples.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import typing
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, create_model

from .archive import AdversarialArchive, ArchiveError
from .attack import ESTIMATORS, AttackConfig, run_attack_batch
from .baselines import lbq_image
from .dataio import DataFormatError, Dataset, SynthSpec, load_idx_dataset, parse_cifar10, synth_split
from .evaluate import (
    CosineProfile,
    archive_report,
    attribution_map,
    gradient_cosine_profile,
    grid_csv,
    transformed_gradient_similarity,
)
from .models import (
    ARCHITECTURES,
    CheckpointError,
    LossKind,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from .paths import IntegrationPath
from .transforms import DEFAULT_LIBRARY, TransformRanges

log = logging.getLogger("mumodig")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_BUDGET = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _section_from_dataclass(cls, name: str, nested: dict | None = None):
    """A strict pydantic model whose fields and defaults mirror ``cls``."""
    hints = typing.get_type_hints(cls)
    nested = nested or {}
    fields = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if f.name in nested:
            fields[f.name] = (nested[f.name], Field(default_factory=nested[f.name]))
        else:
            fields[f.name] = (hints[f.name], default)
    return create_model(name, __base__=Strict, **fields)


RangesSection = _section_from_dataclass(TransformRanges, "RangesSection")
AttackSection = _section_from_dataclass(AttackConfig, "AttackSection", {"ranges": RangesSection})
TrainSection = _section_from_dataclass(TrainConfig, "TrainSection")


def attack_config(section) -> AttackConfig:
    return AttackConfig.from_dict(section.model_dump())


# -- dataset sections ---------------------------------------------------------


class SynthSection(Strict):
    source: Literal["synth"] = "synth"
    num_classes: int = 10
    image_shape: tuple[int, int, int] = (3, 32, 32)
    per_class_count: int = 200
    test_per_class: int = 40
    seed: int | None = None  # defaults to the master seed
    noise: float = 0.06
    contrast_range: tuple[float, float] = SynthSpec.contrast_range


class IdxSection(Strict):
    source: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int = 10


class CifarSection(Strict):
    source: Literal["cifar10"]
    train: list[str]
    test: str


def _default_source(value):
    if isinstance(value, dict) and "source" not in value:
        return {"source": "synth", **value}
    return value


DatasetSection = Annotated[
    Union[SynthSection, IdxSection, CifarSection], Field(discriminator="source"), BeforeValidator(_default_source)
]


class ExamplesSection(Strict):
    split: Literal["train", "test"] = "test"
    start: int = Field(0, ge=0)
    count: int = Field(200, ge=1)


class ModelSection(Strict):
    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    arch: Literal[ARCHITECTURES] = "small_cnn"  # type: ignore[valid-type]
    seed: int = 0
    activation: Literal["relu", "softplus"] = "relu"


class TrainRun(Strict):
    seed: int = 0
    workers: int | None = None
    dataset: DatasetSection = Field(default_factory=SynthSection)
    models: list[ModelSection] = Field(
        default_factory=lambda: [
            ModelSection(name="surrogate", arch="small_cnn", seed=1),
            ModelSection(name="target", arch="small_cnn_wide", seed=2),
        ],
        min_length=1,
    )
    train: TrainSection = Field(default_factory=TrainSection)


class AttackRun(Strict):
    seed: int = 0
    workers: int | None = None
    dataset: DatasetSection = Field(default_factory=SynthSection)
    examples: ExamplesSection = Field(default_factory=ExamplesSection)
    surrogate: str
    attack: AttackSection = Field(default_factory=AttackSection)
    estimators: list[Literal[ESTIMATORS]] | None = None  # type: ignore[valid-type]
    job_size: int = Field(25, ge=1)


class EvaluateRun(Strict):
    seed: int = 0
    workers: int | None = None
    archives: list[str] = Field(min_length=1)
    targets: dict[str, str] = Field(default_factory=dict)
    surrogate: str | None = None
    defense_bits: int | None = Field(None, ge=1, le=8)


class ProfileSection(Strict):
    n_points: int = Field(10, ge=2)
    n_regions: int = Field(2, ge=1)
    position_factor: float = Field(0.5, ge=0.0, le=1.0)
    n_variants: int = Field(10, ge=1)
    transforms: tuple[str, ...] = DEFAULT_LIBRARY


class AttributionSection(Strict):
    n_interpolate: int = Field(64, ge=1)
    position_factor: float = Field(0.5, ge=0.0, le=1.0)


class DiagnoseRun(Strict):
    seed: int = 0
    workers: int | None = None
    model: str
    dataset: DatasetSection = Field(default_factory=SynthSection)
    examples: ExamplesSection = Field(default_factory=lambda: ExamplesSection(count=10))
    loss: LossKind = LossKind.NEG_LOG_PROB
    profile: ProfileSection = Field(default_factory=ProfileSection)
    attribution: AttributionSection = Field(default_factory=AttributionSection)


RUNS = {"train": TrainRun, "attack": AttackRun, "evaluate": EvaluateRun, "diagnose": DiagnoseRun}


# -- helpers ------------------------------------------------------------------


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def load_dataset(section, master_seed: int) -> tuple[Dataset, Dataset]:
    try:
        if section.source == "synth":
            seed = master_seed if section.seed is None else section.seed
            spec = SynthSpec(
                section.num_classes, tuple(section.image_shape), section.per_class_count, seed, section.noise,
                tuple(section.contrast_range),
            )
            return synth_split(spec, section.test_per_class)
        if section.source == "idx":
            train = load_idx_dataset(_read(section.train_images), _read(section.train_labels), section.num_classes, "train")
            test = load_idx_dataset(_read(section.test_images), _read(section.test_labels), section.num_classes, "test")
            return train, test
        parts = [parse_cifar10(_read(p)) for p in section.train]
        train = Dataset(
            np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]), 10, "train"
        )
        return train, parse_cifar10(_read(section.test), "test")
    except DataFormatError as exc:
        raise CliError(f"dataset: {exc}") from None
    except ValueError as exc:
        raise CliError(f"dataset: {exc}") from None


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise CliError(f"bad checkpoint {path}: {exc}") from None


def _archive(path: str) -> AdversarialArchive:
    try:
        return AdversarialArchive.load(path)
    except OSError as exc:
        raise CliError(f"cannot read archive {path}: {exc.strerror}") from None
    except ArchiveError as exc:
        raise CliError(f"bad archive {path}: {exc}") from None


def _select(train: Dataset, test: Dataset, ex) -> tuple[np.ndarray, Dataset]:
    pool = test if ex.split == "test" else train
    if ex.start + ex.count > len(pool):
        raise CliError(f"examples: requested [{ex.start}, {ex.start + ex.count}) but the {ex.split} split has {len(pool)}")
    idx = np.arange(ex.start, ex.start + ex.count)
    return idx, pool.subset(idx)


def _workers(requested: int | None) -> int:
    return max(1, requested if requested else (os.cpu_count() or 1))


def _map(fn, jobs: list, workers: int) -> list:
    """Run jobs in order; results do not depend on ``workers``."""
    if workers == 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -----------------------------------------------------------------


def _train_one(dataset, test, arch, cfg, seed, activation):
    return train_classifier(dataset, arch, cfg, seed, test, activation)


def cmd_train(run: TrainRun, stage: Path) -> None:
    names = [m.name for m in run.models]
    if len(set(names)) != len(names):
        raise CliError(f"models: duplicate model names {names}")
    train, test = load_dataset(run.dataset, run.seed)
    cfg = TrainConfig(**run.train.model_dump())
    jobs = [(train, test, m.arch, cfg, derive_seed(run.seed, m.seed), m.activation) for m in run.models]
    try:
        trained = _map(_train_one, jobs, _workers(run.workers))
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from None
    metrics = {}
    for spec, (model, report) in zip(run.models, trained):
        save_checkpoint(model, stage / f"{spec.name}.ckpt")
        metrics[spec.name] = {
            "arch": spec.arch,
            "seed": model.seed,
            "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy,
            "history": report.history,
        }
        log.info("%s: train %.4f test %.4f", spec.name, report.train_accuracy, report.test_accuracy)
    _write_json(stage / "metrics.json", metrics)


def _attack_job(model, images, labels, cfg, indices):
    return run_attack_batch(model, images, labels, cfg, indices)


def cmd_attack(run: AttackRun, stage: Path) -> None:
    model = _checkpoint(run.surrogate)
    train, test = load_dataset(run.dataset, run.seed)
    idx, data = _select(train, test, run.examples)
    if tuple(model.input_shape) != data.image_shape:
        raise CliError(f"surrogate expects {model.input_shape} inputs, dataset has {data.image_shape}")
    base = attack_config(run.attack)
    base = dataclasses.replace(base, seed=run.seed)
    estimators = run.estimators or [base.estimator]
    workers = _workers(run.workers)
    surrogate_digest = _sha256(run.surrogate)
    for name in estimators:
        cfg = dataclasses.replace(base, estimator=name)
        jobs = [
            (model, data.images[i : i + run.job_size], data.labels[i : i + run.job_size], cfg, idx[i : i + run.job_size])
            for i in range(0, len(data), run.job_size)
        ]
        results = [r for chunk in _map(_attack_job, jobs, workers) for r in chunk]
        adv = np.stack([r.adversarial for r in results])
        delta = adv - data.images
        excess = np.abs(delta).max() - cfg.epsilon
        if excess > 1e-9 or adv.min() < 0.0 or adv.max() > 1.0:
            raise CliError(f"{name}: perturbation budget violated (excess {excess:.3g}); nothing written", EXIT_BUDGET)
        meta = {
            "estimator": name,
            "keep_nonmonotonic": cfg.keep_nonmonotonic,
            "config_digest": cfg.digest(),
            "attack": cfg.to_dict(),
            "surrogate_sha256": surrogate_digest,
            "split": run.examples.split,
        }
        AdversarialArchive(idx, data.labels, data.images, adv, meta).save(stage / f"adv_{name}.bin")
        records = [
            {
                "index": int(i),
                "label": int(y),
                "clean_prediction": r.clean_prediction,
                "adversarial_prediction": r.adversarial_prediction,
                "linf": float(np.abs(r.perturbation).max()),
                "l2": float(np.linalg.norm(r.perturbation)),
                "loss_trace": r.loss_trace,
                "sign_conflict": r.sign_conflict,
                "zero_gradient_steps": r.zero_gradient_steps,
            }
            for i, y, r in zip(idx, data.labels, results)
        ]
        _write_json(stage / f"examples_{name}.json", {"meta": meta, "examples": records})
        fooled = np.mean([r.adversarial_prediction != int(y) for r, y in zip(results, data.labels)])
        log.info("%s: surrogate misclassifies %.3f of %d adversarial images", name, fooled, len(results))


def cmd_evaluate(run: EvaluateRun, stage: Path) -> None:
    archives = {}
    for path in run.archives:
        arc = _archive(path)
        name = arc.meta.get("estimator", Path(path).stem)
        if name in archives:
            raise CliError(f"archives: two archives for estimator {name!r}")
        archives[name] = arc
    targets = {}
    if run.surrogate:
        targets["surrogate"] = _checkpoint(run.surrogate)
    for name, path in run.targets.items():
        if name in targets:
            raise CliError(f"targets: name {name!r} clashes with the surrogate row")
        targets[name] = _checkpoint(path)
    if not targets:
        raise CliError("targets: give at least one target or a surrogate")
    try:
        report = archive_report(archives, targets, "surrogate", run.defense_bits)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    (stage / "report.csv").write_text(report.to_csv())
    (stage / "report.json").write_text(report.to_json() + "\n")
    for row in report.rows:
        log.info("%-12s %-12s ASR %.3f", row["estimator"], row["target"], row["asr_filtered"])


def cmd_diagnose(run: DiagnoseRun, stage: Path) -> None:
    model = _checkpoint(run.model)
    train, test = load_dataset(run.dataset, run.seed)
    idx, data = _select(train, test, run.examples)
    summary = []
    p = run.profile
    for i, x, y in zip(idx, data.images, data.labels):
        rng = np.random.default_rng([run.seed, int(i)])
        base = lbq_image(x, p.n_regions, rng)
        profile: CosineProfile = gradient_cosine_profile(
            model, int(y), IntegrationPath(base, x, p.n_points, p.position_factor), run.loss
        )
        transformed = transformed_gradient_similarity(model, x, int(y), p.n_variants, rng, p.transforms, run.loss)
        amap = attribution_map(model, x, int(y), run.attribution.n_interpolate, run.attribution.position_factor)
        (stage / f"profile_{i}.csv").write_text(profile.to_csv())
        (stage / f"attribution_{i}.csv").write_text(grid_csv(amap))
        summary.append(
            {"index": int(i), "mean_adjacent_cosine": profile.mean_adjacent(), "mean_transformed_cosine": transformed}
        )
    _write_json(
        stage / "summary.json",
        {
            "examples": summary,
            "mean_adjacent_cosine": float(np.nanmean([s["mean_adjacent_cosine"] for s in summary])),
            "mean_transformed_cosine": float(np.nanmean([s["mean_transformed_cosine"] for s in summary])),
        },
    )


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate, "diagnose": cmd_diagnose}


# -- entry point --------------------------------------------------------------


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{key}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def resolve_config(command: str, raw: dict[str, Any], seed: int | None = None, workers: int | None = None):
    if seed is not None:
        raw = {**raw, "seed": seed}
    if workers is not None:
        raw = {**raw, "workers": workers}
    try:
        return RUNS[command].model_validate(raw)
    except ValidationError as exc:
        raise CliError(_format_validation(exc)) from None
    except ValueError as exc:  # AttackConfig/TrainConfig checks raised while building sections
        raise CliError(f"invalid config: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mumodig", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file (omit for all defaults)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="master seed; overrides the config")
        p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    stage = None
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except OSError as exc:
                raise CliError(f"cannot read config {args.config}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise CliError(f"config {args.config} is not valid JSON: {exc}") from None
            if not isinstance(raw, dict):
                raise CliError("config must be a JSON object")
        if args.workers is not None and args.workers < 1:
            raise CliError("--workers must be >= 1")
        cfg = resolve_config(args.command, raw, args.seed, args.workers)
        if getattr(cfg, "attack", None) is not None:
            try:
                attack_config(cfg.attack)  # cross-field checks before any work
            except ValueError as exc:
                raise CliError("invalid config: " + "; ".join(f"attack.{p}" for p in str(exc).split("; "))) from None
        args.out.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{args.out.name}.", dir=args.out.parent))
        _write_json(stage / "config.json", cfg.model_dump(mode="json"))
        COMMANDS[args.command](cfg, stage)
        args.out.mkdir(parents=True, exist_ok=True)
        for item in sorted(stage.iterdir()):
            os.replace(item, args.out / item.name)
        return EXIT_OK
    except CliError as exc:
        print(f"mumodig {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"mumodig {args.command}: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if stage is not None and stage.exists():
            shutil.rmtree(stage, ignore_errors=True)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
