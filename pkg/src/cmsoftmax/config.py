"""Experiment configuration in plain ``key = value`` files.

Lines hold one dotted key each; ``#`` starts a comment.  Example::

    seed = 1
    data.source = synth
    synth.classes = 4
    backbone.kind = mlp
    backbone.hidden = 32
    loss.kind = cm_margin
    loss.m = 0.5
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, load_mnist, parse_idx, synth_blobs
from .errors import ConfigError, DomainError
from .losses import LOSS_KINDS, LossSpec
from .training import BackboneConfig, OptimizerConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    mnist_dir: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 50_000
    classes: int = 10
    # synthetic blobs
    synth_classes: int = 4
    synth_dims: int = 2
    synth_n_per_class: int = 250
    synth_test_n_per_class: int = 250
    synth_noise_good: float = 0.05
    synth_noise_low: float = 0.5
    synth_low_fraction: float = 0.2
    synth_radius: float = 1.0
    synth_seed: int = 1
    synth_test_seed: int = 2

    def load(self, split: str) -> Dataset:
        if self.source == "synth":
            n = self.synth_n_per_class if split == "train" else self.synth_test_n_per_class
            seed = self.synth_seed if split == "train" else self.synth_test_seed
            return synth_blobs(
                self.synth_classes, self.synth_dims, n, self.synth_noise_good,
                self.synth_noise_low, self.synth_low_fraction, seed, self.synth_radius,
            )
        if self.source == "mnist":
            return load_mnist(self.mnist_dir, split)
        images, labels = (
            (self.train_images, self.train_labels) if split == "train" else (self.test_images, self.test_labels)
        )
        ds = parse_idx(images, labels, self.classes)
        if split == "train" and len(ds) > self.train_limit:
            ds = ds.subset(range(self.train_limit))
        return ds


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    out: str = "runs/experiment"
    fraction: float = 0.2

    @property
    def seed(self) -> int:
        return self.optimizer.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, optimizer=dataclasses.replace(self.optimizer, seed=seed))

    def with_out(self, out) -> "ExperimentConfig":
        return dataclasses.replace(self, out=str(out))


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


# key -> (section, field, converter)
_KEYS: dict[str, tuple[str, str, object]] = {
    "seed": ("optimizer", "seed", int),
    "out": ("", "out", str),
    "eval.fraction": ("", "fraction", float),
    "data.source": ("data", "source", str),
    "data.mnist_dir": ("data", "mnist_dir", str),
    "data.train_images": ("data", "train_images", str),
    "data.train_labels": ("data", "train_labels", str),
    "data.test_images": ("data", "test_images", str),
    "data.test_labels": ("data", "test_labels", str),
    "data.train_limit": ("data", "train_limit", int),
    "data.classes": ("data", "classes", int),
    "synth.classes": ("data", "synth_classes", int),
    "synth.dims": ("data", "synth_dims", int),
    "synth.n_per_class": ("data", "synth_n_per_class", int),
    "synth.test_n_per_class": ("data", "synth_test_n_per_class", int),
    "synth.noise_good": ("data", "synth_noise_good", float),
    "synth.noise_low": ("data", "synth_noise_low", float),
    "synth.low_fraction": ("data", "synth_low_fraction", float),
    "synth.radius": ("data", "synth_radius", float),
    "synth.seed": ("data", "synth_seed", int),
    "synth.test_seed": ("data", "synth_test_seed", int),
    "backbone.kind": ("backbone", "kind", str),
    "backbone.hidden": ("backbone", "hidden", _ints),
    "backbone.channels": ("backbone", "channels", _ints),
    "backbone.feature_dim": ("backbone", "feature_dim", int),
    "backbone.activation": ("backbone", "activation", str),
    "backbone.slope": ("backbone", "slope", float),
    "loss.kind": ("loss", "kind", str),
    "loss.s": ("loss", "s", float),
    "loss.p": ("loss", "p", float),
    "loss.gamma": ("loss", "gamma", float),
    "loss.variant": ("loss", "variant", str),
    "loss.m": ("loss", "m", float),
    "optim.lr": ("optimizer", "learning_rate", float),
    "optim.decay_epochs": ("optimizer", "decay_epochs", _ints),
    "optim.decay_factor": ("optimizer", "decay_factor", float),
    "optim.momentum": ("optimizer", "momentum", float),
    "optim.weight_decay": ("optimizer", "weight_decay", float),
    "optim.epochs": ("optimizer", "epochs", int),
    "optim.batch_size": ("optimizer", "batch_size", int),
}
_PATH_KEYS = ("data.mnist_dir", "data.train_images", "data.train_labels", "data.test_images", "data.test_labels")
_SOURCES = ("synth", "idx", "mnist")


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    """Parse config text; relative data paths resolve against ``base_dir``."""
    base_dir = Path(base_dir)
    sections: dict[str, dict] = {"": {}, "data": {}, "backbone": {}, "loss": {}, "optimizer": {}}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, key)
        section, name, conv = _KEYS[key]
        if key in _PATH_KEYS and value:
            value = str((base_dir / value).resolve())
        try:
            sections[section][name] = conv(value)
        except ValueError:
            raise ConfigError(f"invalid value {value!r} for {key}", lineno, key) from None
        lines[key] = lineno

    def build(key_prefix, cls, kwargs):
        try:
            return cls(**kwargs)
        except (ValueError, DomainError) as exc:
            line = min((n for k, n in lines.items() if k.startswith(key_prefix)), default=None)
            raise ConfigError(f"{key_prefix.rstrip('.')}: {exc}", line, key_prefix.rstrip(".")) from None

    loss_kind = sections["loss"].get("kind", "softmax")
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(
            f"loss.kind: unknown loss {loss_kind!r} (expected one of {', '.join(LOSS_KINDS)})",
            lines.get("loss.kind"), "loss.kind",
        )
    data = DataConfig(**sections["data"])
    if data.source not in _SOURCES:
        raise ConfigError(f"data.source must be one of {_SOURCES}", lines.get("data.source"), "data.source")
    _check_paths(data, lines)
    return ExperimentConfig(
        data=data,
        backbone=build("backbone.", BackboneConfig, sections["backbone"]),
        loss=build("loss.", LossSpec, sections["loss"]),
        optimizer=build("optim.", OptimizerConfig, sections["optimizer"]),
        **sections[""],
    )


def _check_paths(data: DataConfig, lines: dict[str, int]) -> None:
    if data.source == "idx":
        for key in _PATH_KEYS[1:]:
            path = getattr(data, key.split(".", 1)[1])
            if not path or not Path(path).exists():
                raise ConfigError(f"{key}: file {path!r} not found", lines.get(key), key)
    elif data.source == "mnist":
        if not data.mnist_dir or not Path(data.mnist_dir).is_dir():
            raise ConfigError(f"data.mnist_dir: directory {data.mnist_dir!r} not found", lines.get("data.mnist_dir"), "data.mnist_dir")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every key, so the output alone reproduces the run."""
    lines = ["# resolved experiment configuration"]
    for key, (section, name, conv) in _KEYS.items():
        holder = cfg if section == "" else getattr(cfg, section)
        value = getattr(holder, name)
        if conv is _ints:
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
