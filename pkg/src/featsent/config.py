"""Declarative experiment configuration (TOML or JSON) with strict validation."""
import json
from pathlib import Path
from typing import Optional

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks.crafting import AttackSpec
from .classifiers import ARCHITECTURES, DEFAULT_TAPS, TAPS
from .data import DATASETS, split_sizes
from .errors import ConfigError
from .utils import derive_seed, hash_obj


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    name: str = "cifar10"
    subset: Optional[int] = None
    val: Optional[int] = None
    test: Optional[int] = None
    root: Optional[str] = None

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in DATASETS:
            raise ValueError(f"unknown dataset {v!r}; expected one of {DATASETS}")
        return v

    @field_validator("subset", "val", "test")
    @classmethod
    def _positive(cls, v):
        if v is not None and v < 1:
            raise ValueError("must be >= 1")
        return v

    def sizes(self):
        return split_sizes(self.subset, 50_000, self.val, self.test)


class ClassifierConfig(_Strict):
    architecture: str = "resnet34"
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(128, ge=1)
    weight_decay: float = Field(5e-4, ge=0)

    @field_validator("architecture")
    @classmethod
    def _known(cls, v):
        if v not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {v!r}; expected one of {ARCHITECTURES}")
        return v


class AttackConfig(_Strict):
    attack: str
    name: str = ""
    params: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _valid(self):
        spec = AttackSpec(self.attack, dict(self.params), 0, self.name)
        self.name = spec.name
        return self

    def spec(self, seed):
        return AttackSpec(self.attack, dict(self.params), seed, self.name)


class DetectorConfig(_Strict):
    gram_set: list[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    instances_per_gram: int = Field(100, ge=1)
    dropout_rate: float = Field(0.5, ge=0, lt=1)

    @field_validator("gram_set")
    @classmethod
    def _grams(cls, v):
        if not v or any(n < 1 for n in v) or len(set(v)) != len(v):
            raise ValueError("gram_set must be distinct positive integers")
        return sorted(v)


class TrainerConfig(_Strict):
    epochs: int = Field(10, ge=1)
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(128, ge=1)
    balance: bool = True
    val_fraction: float = Field(0.1, ge=0, lt=1)
    cache: bool = False
    # number of training images attacked; the next equally many supply benign examples
    craft_train: Optional[int] = None


class EvalConfig(_Strict):
    latency_calls: int = Field(100, ge=0)
    adaptive_base: str = "pgd"
    adaptive_attack: AttackConfig = Field(default_factory=lambda: AttackConfig(attack="adaptive_alt"))
    adaptive_train: Optional[int] = None
    fine_tune_epochs: int = Field(5, ge=1)
    sigmas: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    diagnose_attack: Optional[str] = None
    ablation_attack: Optional[str] = None
    ablation_epochs: Optional[int] = None
    layer_subsets: Optional[list[list[str]]] = None
    gram_subsets: Optional[list[list[int]]] = None
    export_words: bool = True
    export_limit: int = Field(200, ge=1)
    csv: bool = False

    @field_validator("sigmas")
    @classmethod
    def _sigmas(cls, v):
        if any(not 0 <= s <= 1 for s in v):
            raise ValueError("sigmas must lie in [0, 1]")
        return v


class ExperimentConfig(_Strict):
    name: str = "default"
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    taps: Optional[list[str]] = None
    attacks: list[AttackConfig] = Field(default_factory=list)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _consistent(self):
        arch = self.classifier.architecture
        if self.taps is None:
            self.taps = list(DEFAULT_TAPS[arch])
        unknown = [t for t in self.taps if t not in TAPS[arch]]
        if unknown:
            raise ValueError(f"taps {unknown} are not taps of {arch}")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attack names {names}")
        return self

    def to_dict(self):
        return self.model_dump(mode="json")

    def hash(self):
        return hash_obj(self.to_dict())

    def seed_for(self, label):
        return derive_seed(label, self.seed)

    def attack(self, name):
        for a in self.attacks:
            if a.name == name:
                return a
        raise ConfigError(f"no attack named {name!r} in config (have {[a.name for a in self.attacks]})")


def _format_errors(err):
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors())


def parse_config(data):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_format_errors(err)}") from None
    except ValueError as err:
        raise ConfigError(f"invalid config: {err}") from None


def load_config(path):
    """Parse a TOML (or ``.json``) file into a validated :class:`ExperimentConfig`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    return parse_config(data)
