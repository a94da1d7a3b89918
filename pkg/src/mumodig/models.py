"""Small differentiable classifiers, their trainer and checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"MMDGCKPT"
    u32       format version (CHECKPOINT_VERSION)
    u32       descriptor length L
    L bytes   UTF-8 JSON architecture descriptor
    u32       tensor count T
    T times:  u16 name length, name bytes, u32 ndim, u32 dims[ndim],
              f64 values (C order)
"""

from __future__ import annotations

import enum
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMDGCKPT"
CHECKPOINT_VERSION = 1
# Mean cross-entropy above this means logit gaps of ~1e6: treat as diverged.
DIVERGENCE_LOSS = 1e6

ARCHITECTURES = ("small_cnn", "small_cnn_wide", "mlp")


class LossKind(str, enum.Enum):
    NEG_PROB = "neg_prob"
    NEG_LOG_PROB = "neg_log_prob"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch} (loss non-finite or above {DIVERGENCE_LOSS:g})")
        self.epoch = epoch


# Fixed input standardisation applied before the first learned layer.
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def architecture_layers(arch: str, input_shape, num_classes: int) -> list[dict]:
    norm = {"type": "normalize", "mean": INPUT_MEAN, "std": INPUT_STD}
    return [norm] + _body_layers(arch, input_shape, num_classes)


def _body_layers(arch: str, input_shape, num_classes: int) -> list[dict]:
    c, h, w = input_shape
    if arch == "small_cnn":
        return [
            {"type": "conv", "in": c, "out": 16, "k": 3, "stride": 1, "pad": 1},
            {"type": "act"},
            {"type": "conv", "in": 16, "out": 32, "k": 3, "stride": 2, "pad": 1},
            {"type": "act"},
            {"type": "conv", "in": 32, "out": 32, "k": 3, "stride": 2, "pad": 1},
            {"type": "act"},
            {"type": "gap"},
            {"type": "linear", "in": 32, "out": num_classes},
        ]
    if arch == "small_cnn_wide":
        return [
            {"type": "conv", "in": c, "out": 24, "k": 5, "stride": 2, "pad": 2},
            {"type": "act"},
            {"type": "conv", "in": 24, "out": 48, "k": 3, "stride": 2, "pad": 1},
            {"type": "act"},
            {"type": "gap"},
            {"type": "linear", "in": 48, "out": 48},
            {"type": "act"},
            {"type": "linear", "in": 48, "out": num_classes},
        ]
    if arch == "mlp":
        d = c * h * w
        return [
            {"type": "flatten"},
            {"type": "linear", "in": d, "out": 128},
            {"type": "act"},
            {"type": "linear", "in": 128, "out": num_classes},
        ]
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def _param_shapes(layers: list[dict]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, layer in enumerate(layers):
        if layer["type"] == "conv":
            shapes[f"{i}.weight"] = (layer["out"], layer["in"], layer["k"], layer["k"])
            shapes[f"{i}.bias"] = (layer["out"],)
        elif layer["type"] == "linear":
            shapes[f"{i}.weight"] = (layer["in"], layer["out"])
            shapes[f"{i}.bias"] = (layer["out"],)
    return shapes


@dataclass
class ClassifierModel:
    """Architecture descriptor plus float64 parameters.

    Treat instances as immutable once trained; ``forward`` and
    ``input_gradient`` never modify ``params``.
    """

    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    params: dict[str, np.ndarray]
    activation: str = "relu"
    seed: int = 0
    layers: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers:
            self.layers = architecture_layers(self.arch, self.input_shape, self.num_classes)
        if self.activation not in ("relu", "softplus"):
            raise ValueError(f"activation must be relu or softplus, got {self.activation!r}")
        expected = _param_shapes(self.layers)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(
        cls,
        arch: str,
        input_shape,
        num_classes: int,
        seed: int = 0,
        activation: str = "relu",
        zero_head: bool = False,
    ) -> ClassifierModel:
        layers = architecture_layers(arch, input_shape, num_classes)
        rng = np.random.default_rng(seed)
        params = {}
        last_linear = max(i for i, layer in enumerate(layers) if layer["type"] == "linear")
        for name, shape in _param_shapes(layers).items():
            idx = int(name.split(".")[0])
            if name.endswith("bias") or (zero_head and idx == last_linear):
                params[name] = np.zeros(shape)
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        return cls(arch, tuple(input_shape), num_classes, params, activation, seed, layers)

    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "seed": self.seed,
            "layers": self.layers,
        }

    # -- graph construction ------------------------------------------------

    def logits_graph(self, x: ad.Tensor, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ad.ShapeError(f"model expects input {self.input_shape}, got {tuple(x.shape[1:])}")
        p = params if params is not None else {k: ad.Tensor(v) for k, v in self.params.items()}
        act = ad.relu if self.activation == "relu" else ad.softplus
        h = x
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "normalize":
                h = ad.mul(ad.sub(h, layer["mean"]), 1.0 / layer["std"])
            elif kind == "conv":
                h = ad.conv2d(h, p[f"{i}.weight"], p[f"{i}.bias"], stride=layer["stride"], padding=layer["pad"])
            elif kind == "act":
                h = act(h)
            elif kind == "gap":
                h = ad.mean(h, axis=(2, 3))
            elif kind == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
            elif kind == "linear":
                h = ad.add(ad.matmul(h, p[f"{i}.weight"]), p[f"{i}.bias"])
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_graph(ad.Tensor(x)).data

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Softmax probabilities; ``(C,H,W)`` gives ``(K,)``, batches give ``(N,K)``."""
        x = np.asarray(x, dtype=np.float64)
        probs = ad.softmax(self.logits_graph(ad.Tensor(x))).data
        return probs[0] if x.ndim == 3 else probs

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            return np.asarray(int(np.argmax(self.logits(x)[0])))
        out = [np.argmax(self.logits(x[i : i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, dataset: Dataset) -> float:
        return float(np.mean(self.predict(dataset.images) == dataset.labels)) if len(dataset) else float("nan")


def loss_graph(logits: ad.Tensor, labels: np.ndarray, loss: LossKind) -> ad.Tensor:
    """Summed per-example attack loss, so the gradient for each batch row is
    that example's own loss gradient."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    if LossKind(loss) is LossKind.NEG_LOG_PROB:
        picked = ad.log_softmax(logits)
    else:
        picked = ad.softmax(logits)
    return ad.mul(ad.sum_all(ad.mul(picked, onehot)), -1.0)


def loss_value(model: ClassifierModel, x: np.ndarray, y, loss: LossKind = LossKind.NEG_LOG_PROB) -> np.ndarray:
    """Per-example loss values for a batch (or a scalar for one image)."""
    x = np.asarray(x, dtype=np.float64)
    probs = model.forward(x)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim == 3:
        p = probs[int(y)]
    else:
        p = probs[np.arange(len(y)), y]
    if LossKind(loss) is LossKind.NEG_LOG_PROB:
        logits = model.logits(x)
        lsm = logits - logits.max(axis=-1, keepdims=True)
        lsm = lsm - np.log(np.exp(lsm).sum(axis=-1, keepdims=True))
        return -(lsm[0, int(y)] if x.ndim == 3 else lsm[np.arange(len(y)), y])
    return -p


def input_gradient(model: ClassifierModel, x: np.ndarray, y, loss: LossKind = LossKind.NEG_LOG_PROB) -> np.ndarray:
    """dL/dx for a single image ``(C,H,W)`` or a batch ``(N,C,H,W)``."""
    x = np.asarray(x, dtype=np.float64)
    xt = ad.Tensor(x, requires_grad=True)
    out = loss_graph(model.logits_graph(xt), np.atleast_1d(y), loss)
    return ad.grad(out, xt)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: float = 0.0  # per-image probability of a random library transform


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float | None
    history: list[dict]
    seconds: float


def _augment(batch: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    from .transforms import DEFAULT_LIBRARY, apply_transform, sample_transform

    out = batch.copy()
    for i in np.flatnonzero(rng.uniform(size=len(batch)) < prob):
        out[i] = apply_transform(batch[i], sample_transform(DEFAULT_LIBRARY, rng, batch.shape[1:]))
    return out


def train_classifier(
    dataset: Dataset,
    arch: str = "small_cnn",
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    test: Dataset | None = None,
    activation: str = "relu",
) -> tuple[ClassifierModel, TrainReport]:
    """Mini-batch SGD with momentum and a cosine learning-rate schedule."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.epochs < 1 or config.batch_size < 1 or config.lr <= 0 or not 0 <= config.augment <= 1:
        raise ValueError(f"invalid training hyperparameters {config}")
    model = ClassifierModel.init(arch, dataset.image_shape, dataset.num_classes, seed, activation)
    rng = np.random.default_rng([seed, 7919])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    n = len(dataset)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    history = []
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = dataset.images[idx]
            if config.augment > 0:
                batch = _augment(batch, config.augment, rng)
            lr = 0.5 * config.lr * (1 + np.cos(np.pi * step / total))
            params = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
            logits = model.logits_graph(ad.Tensor(batch), params)
            loss = ad.mul(loss_graph(logits, dataset.labels[idx], LossKind.NEG_LOG_PROB), 1.0 / len(idx))
            if not np.isfinite(loss.data) or loss.data > DIVERGENCE_LOSS:
                raise TrainingDiverged(epoch)
            grads = ad.backward(loss)
            for k, t in params.items():
                g = grads[t] + config.weight_decay * model.params[k]
                velocity[k] = config.momentum * velocity[k] + g
                model.params[k] = model.params[k] - lr * velocity[k]
            running += float(loss.data) * len(idx)
            step += 1
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingDiverged(epoch)
        entry = {"epoch": epoch, "loss": running / n, "train_accuracy": model.accuracy(dataset)}
        if test is not None:
            entry["test_accuracy"] = model.accuracy(test)
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)
    report = TrainReport(
        history[-1]["train_accuracy"],
        history[-1].get("test_accuracy"),
        history,
        time.perf_counter() - start,
    )
    return model, report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ClassifierModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_bytes(model: ClassifierModel) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(desc)), desc]
    names = sorted(model.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> ClassifierModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> ClassifierModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, dlen = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        pos = 16
        desc = json.loads(data[pos : pos + dlen].decode())
        pos += dlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated tensor {name}")
            params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after tensors")
    try:
        return ClassifierModel(
            desc["arch"],
            tuple(desc["input_shape"]),
            desc["num_classes"],
            params,
            desc.get("activation", "relu"),
            desc.get("seed", 0),
            desc["layers"],
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its descriptor: {exc}") from exc
