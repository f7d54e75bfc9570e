"""Backbones, deterministic SGD training, evaluation and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .analysis import SampleRecord, make_records
from .autodiff import Node, Parameter
from .data import BatchPlan, Dataset, batches
from .errors import DimensionError, DivergenceError, FormatError, TruncatedFileError, UnsupportedVersionError
from .losses import ClassifierHead, LossSpec
from .rng import Xoshiro256

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CMNC"
CHECKPOINT_VERSION = 1
META_RECORD = "__meta__"


@dataclass(frozen=True)
class BackboneConfig:
    """``mlp`` uses ``hidden`` widths; ``cnn`` uses one 3x3 conv + 2x2 max-pool stage per ``channels`` entry.

    Both end in a linear feature layer of width ``feature_dim``.
    """

    kind: str = "cnn"
    hidden: tuple[int, ...] = (64,)
    channels: tuple[int, ...] = (32, 64, 128)
    feature_dim: int = 2
    activation: str = "prelu"
    slope: float = 0.25

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    decay_epochs: tuple[int, ...] = (12, 17)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.learning_rate * self.decay_factor**drops


class Model:
    """Backbone producing features plus a classifier head, parameters kept in creation order."""

    def __init__(self, backbone: BackboneConfig, input_shape: tuple[int, ...], classes: int, params: dict[str, Parameter]):
        self.backbone = backbone
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.params = params
        self.head = ClassifierHead(params["head.W"])

    @classmethod
    def build(cls, backbone: BackboneConfig, input_shape, classes: int, rng: Xoshiro256) -> "Model":
        input_shape = tuple(int(s) for s in input_shape)
        params: dict[str, Parameter] = {}

        def add(name, shape, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            params[name] = Parameter(name, rng.uniform_array(shape, -bound, bound))

        def bias(name, width):
            params[name] = Parameter(name, np.zeros(width))

        if backbone.kind == "mlp":
            width = int(np.prod(input_shape))
            for i, h in enumerate(backbone.hidden, 1):
                add(f"fc{i}.W", (width, h), width)
                bias(f"fc{i}.b", h)
                width = h
        else:
            if len(input_shape) != 3:
                raise DimensionError(f"cnn backbone needs [c, h, w] inputs, got {input_shape}")
            ch, h, w = input_shape
            for i, out_ch in enumerate(backbone.channels, 1):
                add(f"conv{i}.W", (out_ch, ch, 3, 3), ch * 9)
                bias(f"conv{i}.b", out_ch)
                ch, h, w = out_ch, h // 2, w // 2
                if h == 0 or w == 0:
                    raise DimensionError(f"input {input_shape} too small for {len(backbone.channels)} pooling stages")
            width = ch * h * w
        add("feature.W", (width, backbone.feature_dim), width)
        bias("feature.b", backbone.feature_dim)
        add("head.W", (backbone.feature_dim, classes), backbone.feature_dim)
        return cls(backbone, input_shape, classes, params)

    def _act(self, x: Node) -> Node:
        return ad.activation(x, self.backbone.activation, self.backbone.slope)

    def features(self, images) -> Node:
        """Raw backbone output: the features the classifier head sees."""
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.input_shape:
            raise DimensionError(f"model expects inputs of shape {self.input_shape}, got {images.shape[1:]}")
        p = self.params
        x = ad.constant(images)
        if self.backbone.kind == "mlp":
            x = ad.flatten(x)
            for i in range(1, len(self.backbone.hidden) + 1):
                x = self._act(ad.add(ad.matmul(x, p[f"fc{i}.W"]), p[f"fc{i}.b"]))
        else:
            for i, out_ch in enumerate(self.backbone.channels, 1):
                x = ad.conv2d(x, p[f"conv{i}.W"], stride=1, padding=1)
                x = self._act(ad.add(x, ad.reshape(p[f"conv{i}.b"], (1, out_ch, 1, 1))))
                x = ad.max_pool2d(x, 2)
            x = ad.flatten(x)
        return ad.add(ad.matmul(x, p["feature.W"]), p["feature.b"])


@dataclass
class TrainState:
    model: Model
    loss_spec: LossSpec
    optimizer: OptimizerConfig
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    rng_state: list | None = None

    @property
    def parameters(self) -> dict[str, Parameter]:
        return self.model.params


def _decays(name: str) -> bool:
    return not name.endswith(".b")


def train(
    dataset: Dataset,
    backbone: BackboneConfig,
    loss_spec: LossSpec,
    opt: OptimizerConfig,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """SGD with momentum: v <- mu v - lr (g + wd w); w <- w + v.

    One xoshiro256** stream seeded from ``opt.seed`` initialises the weights
    and then draws the per-epoch shuffles, so the run is bitwise reproducible.
    """
    rng = Xoshiro256(opt.seed)
    model = Model.build(backbone, dataset.sample_shape, dataset.class_count, rng)
    state = TrainState(model, loss_spec, opt)
    velocity = {name: np.zeros_like(p.value) for name, p in model.params.items()}
    plan = BatchPlan(opt.batch_size, opt.seed)
    batch_index = 0
    for epoch in range(opt.epochs):
        lr = opt.lr_at(epoch)
        total, seen = 0.0, 0
        for images, labels in batches(dataset, plan, rng):
            out = loss_spec(model.features(images), model.head, labels)
            value = float(out.loss.value)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at batch {batch_index} (epoch {epoch})", batch_index=batch_index
                )
            ad.backward(out.loss)
            for name, p in model.params.items():
                g = p.grad
                if opt.weight_decay and _decays(name):
                    g = g + opt.weight_decay * p.value
                v = velocity[name]
                v *= opt.momentum
                v -= lr * g
                p.value += v
            total += value * len(labels)
            seen += len(labels)
            batch_index += 1
        state.epoch = epoch + 1
        state.loss_history.append(total / max(seen, 1))
        state.rng_state = rng.get_state()
        log.info("epoch %d lr %.4g mean loss %.6f", epoch + 1, lr, state.loss_history[-1])
        if on_epoch is not None:
            on_epoch(state)
    state.rng_state = rng.get_state()
    return state


def _eval_loss(spec: LossSpec) -> LossSpec:
    # margins shape training only; scoring uses the plain cosines
    if spec.kind == "cm_margin":
        return LossSpec("cm_softmax", p=spec.p, gamma=spec.gamma)
    if spec.kind == "fixed_margin":
        return LossSpec("fixed_norm", s=spec.s)
    return spec


def predict(state: TrainState, images, batch_size: int = 500):
    """Features, argmax predictions and the [n x c] softmax probabilities."""
    spec = _eval_loss(state.loss_spec)
    feats, preds, probs = [], [], []
    labels_dummy = None
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        f = state.model.features(chunk)
        if labels_dummy is None or len(labels_dummy) != len(chunk):
            labels_dummy = np.zeros(len(chunk), dtype=np.int64)
        out = spec(f, state.model.head, labels_dummy)
        z = out.logits.value
        e = np.exp(z - z.max(axis=1, keepdims=True))
        feats.append(f.value)
        preds.append(out.cosines.argmax(axis=1))
        probs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(feats), np.concatenate(preds), np.concatenate(probs)


def evaluate(state: TrainState, dataset: Dataset, batch_size: int = 500) -> tuple[float, list[SampleRecord]]:
    if dataset.sample_shape != state.model.input_shape:
        raise DimensionError(
            f"dataset samples {dataset.sample_shape} do not match model input {state.model.input_shape}"
        )
    if dataset.class_count != state.model.classes:
        raise DimensionError(f"dataset has {dataset.class_count} classes, model head has {state.model.classes}")
    feats, preds, probs = predict(state, dataset.images, batch_size)
    labels = dataset.labels
    true_prob = probs[np.arange(len(labels)), labels]
    records = make_records(feats, labels, preds, true_prob)
    accuracy = float(np.mean(preds == labels)) if len(labels) else math.nan
    return accuracy, records


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    return (
        struct.pack("<I", len(encoded))
        + encoded
        + struct.pack("<I", array.ndim)
        + struct.pack(f"<{array.ndim}I", *array.shape)
        + array.tobytes()
    )


def save_checkpoint(state: TrainState, path) -> None:
    """Write ``CMNC`` + u32 version + one record per parameter.

    Configs, epoch and history travel in a final ``__meta__`` record whose
    float64 payload holds the bytes of a UTF-8 JSON document.
    """
    model = state.model
    meta = {
        "backbone": asdict(model.backbone),
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "loss": asdict(state.loss_spec),
        "optimizer": asdict(state.optimizer),
        "epoch": state.epoch,
        "loss_history": state.loss_history,
        "rng_state": state.rng_state,
        "parameters": list(model.params),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts += [_record(name, p.value) for name, p in model.params.items()]
    parts.append(_record(META_RECORD, np.frombuffer(blob, dtype=np.uint8).astype(np.float64)))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: checkpoint truncated at byte {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_checkpoint(path) -> TrainState:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4 or r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    meta = None
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        array = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        if name == META_RECORD:
            meta = json.loads(array.astype(np.uint8).tobytes().decode("utf-8"))
            if not r.done:
                raise FormatError(f"{path}: data after metadata record")
        else:
            arrays[name] = array
    if meta is None:
        raise TruncatedFileError(f"{path}: metadata record missing (truncated file?)")
    if list(arrays) != meta["parameters"]:
        raise FormatError(f"{path}: parameter records do not match metadata")
    backbone = BackboneConfig(**meta["backbone"])
    params = {name: Parameter(name, value) for name, value in arrays.items()}
    model = Model(backbone, tuple(meta["input_shape"]), meta["classes"], params)
    return TrainState(
        model,
        LossSpec(**meta["loss"]),
        OptimizerConfig(**meta["optimizer"]),
        meta["epoch"],
        list(meta["loss_history"]),
        meta["rng_state"],
    )
