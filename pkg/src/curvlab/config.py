"""INI run configuration.

Every section maps onto a dataclass; unknown sections or keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .nn import TrainConfig
from .robustness import AttackConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"


@dataclass
class DatasetSection:
    kind: str = "gaussians"
    n: int = 1500
    classes: int = 3
    dim: int = 2
    noise: float = 0.03
    path: str = ""
    label_path: str = ""
    test_fraction: float = 0.2


@dataclass
class ModelSection:
    hidden: tuple = (16, 16)
    bias: bool = False


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.2
    weight_decay: float = 1e-4
    loss_kind: str = "cross_entropy"


@dataclass
class AttackSection:
    norm: str = "l2"
    epsilon: float = 0.5
    step_size: float = 0.05
    steps: int = 25
    random_start: bool = False
    max_samples: int = 300


@dataclass
class SweepSection:
    scales: tuple = (0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 50.0)


@dataclass
class CertifySection:
    epsilon: float = 0.1
    gradient_term: bool = True


@dataclass
class AnalysisSection:
    tau: float = 0.1
    folds: int = 5
    bins: int = 30
    detector_measure: str = "spectral"
    probes: int = 100
    per_layer: bool = False
    alphas: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


SECTIONS = {
    "run": RunSection,
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "attack": AttackSection,
    "sweep": SweepSection,
    "certify": CertifySection,
    "analysis": AnalysisSection,
}
_TUPLE_ITEM = {"hidden": int, "scales": float, "alphas": float}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    certify: CertifySection = field(default_factory=CertifySection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def dataset_spec(self) -> DatasetSpec:
        d = self.dataset
        return DatasetSpec(
            kind=d.kind,
            n=d.n,
            classes=d.classes,
            dim=d.dim,
            noise=d.noise,
            seed=self.seed,
            path=d.path or None,
            label_path=d.label_path or None,
            test_fraction=d.test_fraction,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.weight_decay, self.seed, t.loss_kind)

    def attack_config(self) -> AttackConfig:
        a = self.attack
        return AttackConfig(a.norm, a.epsilon, a.step_size, a.steps, self.seed, True, a.random_start)

    def dims(self) -> list[int]:
        return [self.dataset.dim, *self.model.hidden, self.dataset.classes]

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.replace(";", ",").split(",") if s.strip()]
            return tuple(_TUPLE_ITEM[name](s) for s in items)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return raw


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(key, getattr(target, key), raw))
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
