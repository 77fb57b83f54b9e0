"""Experiment configuration files.

A config is INI-style text with the sections ``model``, ``dropout``,
``data``, ``optim``, ``run`` and ``ablation``. Every key has a default (see
:data:`KEYS`), so an empty file is valid; unknown sections or keys are
rejected. The defaults are the desk-scale preset: DenseNet-BC-22, k=8, a
5000-image stratified CIFAR-10 subset and 30 epochs.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from densedrop.dropout import DropoutMode, Granularity
from densedrop.models import ConfigError, ModelConfig
from densedrop.schedules import ScheduleKind


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "full") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return t

    return parse


# (section, key) -> (default text, parser, description)
KEYS: Dict[Tuple[str, str], Tuple[str, Callable[[str], Any], str]] = {
    ("model", "variant"): ("bc", _choice("bc", "plain"), "bc (bottleneck + compression) or plain DenseNet"),
    ("model", "depth"): ("22", int, "network depth; 6n+4 for bc, 3n+4 for plain"),
    ("model", "growth_rate"): ("8", int, "channels added by each composite layer (k)"),
    ("dropout", "mode"): ("none", _choice("none", "standard", "pre"), "dropout wiring inside dense blocks"),
    ("dropout", "granularity"): ("channel", _choice("unit", "channel", "layer"), "unit dropped atomically"),
    ("dropout", "schedule"): ("uniform", _choice("uniform", "v1", "v2", "v3"), "survival probability table"),
    ("dropout", "uniform_p"): ("0.5", float, "survival probability of the uniform schedule"),
    ("data", "dir"): ("data/cifar-10-batches-bin", str, "directory with the CIFAR binary archives"),
    ("data", "variant"): ("c10", _choice("c10", "c100"), "CIFAR-10 or CIFAR-100"),
    ("data", "subset_size"): ("5000", _optional_int, "stratified training subset size; none = full split"),
    ("data", "test_subset_size"): ("none", _optional_int, "stratified test subset size; none = full split"),
    ("data", "seed"): ("0", int, "seed for choosing the subsets"),
    ("data", "augment"): ("true", _bool, "flip + translate training batches"),
    ("optim", "lr"): ("0.1", float, "initial learning rate (divided by 10 at 50% and 75% of training)"),
    ("optim", "momentum"): ("0.9", float, "SGD momentum coefficient"),
    ("optim", "weight_decay"): ("1e-4", float, "L2 penalty, not applied to BN gamma/beta"),
    ("optim", "epochs"): ("30", int, "training epochs"),
    ("optim", "batch_size"): ("64", int, "mini-batch size"),
    ("run", "seed"): ("0", int, "master seed for weights, shuffling, augmentation and masks"),
    ("run", "out"): ("runs/default", str, "output directory"),
    ("run", "dtype"): ("float32", _choice("float32", "float64"), "floating point precision"),
    ("ablation", "depths"): ("", _int_list, "depths for the headline suite; empty = model.depth"),
}

SECTIONS = sorted({s for s, _ in KEYS})

DEFAULT_CLASSES = {"c10": 10, "c100": 100}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    data_dir: str
    data_variant: str
    subset_size: Optional[int]
    test_subset_size: Optional[int]
    data_seed: int
    augment: bool
    lr: float
    momentum: float
    weight_decay: float
    epochs: int
    batch_size: int
    seed: int
    out: str
    dtype: str
    ablation_depths: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.model.num_classes != DEFAULT_CLASSES[self.data_variant]:
            raise ConfigError("model class count does not match data.variant")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_dropout(self, mode: str, granularity: str = "channel", schedule: str = "uniform", p: float = 0.5):
        model = dataclasses.replace(
            self.model,
            dropout=DropoutMode(mode),
            granularity=Granularity(granularity),
            schedule=ScheduleKind(schedule),
            uniform_p=p,
        )
        return self.replace(model=model)

    def values(self) -> Dict[Tuple[str, str], str]:
        m = self.model
        v = {
            ("model", "variant"): m.variant,
            ("model", "depth"): str(m.depth),
            ("model", "growth_rate"): str(m.growth_rate),
            ("dropout", "mode"): m.dropout.value,
            ("dropout", "granularity"): m.granularity.value,
            ("dropout", "schedule"): m.schedule.value,
            ("dropout", "uniform_p"): repr(m.uniform_p),
            ("data", "dir"): self.data_dir,
            ("data", "variant"): self.data_variant,
            ("data", "subset_size"): "none" if self.subset_size is None else str(self.subset_size),
            ("data", "test_subset_size"): "none" if self.test_subset_size is None else str(self.test_subset_size),
            ("data", "seed"): str(self.data_seed),
            ("data", "augment"): "true" if self.augment else "false",
            ("optim", "lr"): repr(self.lr),
            ("optim", "momentum"): repr(self.momentum),
            ("optim", "weight_decay"): repr(self.weight_decay),
            ("optim", "epochs"): str(self.epochs),
            ("optim", "batch_size"): str(self.batch_size),
            ("run", "seed"): str(self.seed),
            ("run", "out"): self.out,
            ("run", "dtype"): self.dtype,
            ("ablation", "depths"): ", ".join(str(d) for d in self.ablation_depths),
        }
        return v

    def to_text(self) -> str:
        lines = []
        values = self.values()
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for (s, key), _ in KEYS.items():
                if s == section:
                    lines.append(f"{key} = {values[(s, key)]}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Parse config text. ``overrides`` maps ``"section.key"`` to raw values."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    raw = {k: default for k, (default, _, _) in KEYS.items()}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        for key, value in parser.items(section):
            if (section, key) not in KEYS:
                raise ConfigError(f"unknown key {section}.{key}")
            raw[(section, key)] = value
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if (section, key) not in KEYS:
            raise ConfigError(f"unknown key {dotted}")
        raw[(section, key)] = str(value)

    v = {}
    for k, text_value in raw.items():
        parse = KEYS[k][1]
        try:
            v[k] = parse(text_value)
        except ValueError as exc:
            raise ConfigError(f"{k[0]}.{k[1]}: {exc}") from exc

    variant = v[("data", "variant")]
    model = ModelConfig(
        variant=v[("model", "variant")],
        depth=v[("model", "depth")],
        growth_rate=v[("model", "growth_rate")],
        num_classes=DEFAULT_CLASSES[variant],
        dropout=DropoutMode(v[("dropout", "mode")]),
        granularity=Granularity(v[("dropout", "granularity")]),
        schedule=ScheduleKind(v[("dropout", "schedule")]),
        uniform_p=v[("dropout", "uniform_p")],
    )
    return ExperimentConfig(
        model=model,
        data_dir=v[("data", "dir")],
        data_variant=variant,
        subset_size=v[("data", "subset_size")],
        test_subset_size=v[("data", "test_subset_size")],
        data_seed=v[("data", "seed")],
        augment=v[("data", "augment")],
        lr=v[("optim", "lr")],
        momentum=v[("optim", "momentum")],
        weight_decay=v[("optim", "weight_decay")],
        epochs=v[("optim", "epochs")],
        batch_size=v[("optim", "batch_size")],
        seed=v[("run", "seed")],
        out=v[("run", "out")],
        dtype=v[("run", "dtype")],
        ablation_depths=v[("ablation", "depths")],
    )


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


def describe_keys() -> str:
    rows = [f"{s}.{k} (default {d!r}): {doc}" for (s, k), (d, _, doc) in KEYS.items()]
    return "\n".join(rows)
