"""Experiment configuration schema and persistent experiment records.

A single structured config file drives every pipeline stage; unknown keys are
rejected up front. Records are append-only: every command writes a new versioned
record file under <out>/records/.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import PoisonConfig, TriggerSpec
from .data import SyntheticSceneConfig
from .errors import ConfigurationError
from .models import TrainConfig
from .reverse import REConfig

RECORD_VERSION = 1


def _build_dataclass(cls, mapping: dict, path: str):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}; allowed: {sorted(names)}")
    coerced = {}
    for key, value in mapping.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


@dataclass
class DatasetBlock:
    synthetic: SyntheticSceneConfig | None = None
    directory: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if (self.synthetic is None) == (self.directory is None):
            raise ConfigurationError("dataset block needs exactly one of 'synthetic' or 'directory'")


@dataclass
class ModelBlock:
    preset: str = "small-cnn"
    feature_dim: int = 64
    output_dim: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class AttackBlock:
    trigger: TriggerSpec = field(default_factory=lambda: TriggerSpec("patch"))
    poison: PoisonConfig = field(default_factory=PoisonConfig)


@dataclass
class DefenseBlock:
    reverse: REConfig = field(default_factory=REConfig)
    epsilon: float | None = 0.03


@dataclass
class Seeds:
    data: int = 0
    model: int = 1
    defense: int = 2


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock
    model: ModelBlock = field(default_factory=ModelBlock)
    attack: AttackBlock | None = None
    defense: DefenseBlock = field(default_factory=DefenseBlock)
    seeds: Seeds = field(default_factory=Seeds)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("experiment config must be a mapping")
        unknown = set(raw) - {"dataset", "model", "attack", "defense", "seeds"}
        if unknown:
            raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
        if "dataset" not in raw:
            raise ConfigurationError("experiment config requires a 'dataset' block")

        ds_raw = dict(raw["dataset"])
        synthetic = ds_raw.pop("synthetic", None)
        if synthetic is not None:
            synthetic = _build_dataclass(SyntheticSceneConfig, synthetic, "dataset.synthetic")
        dataset = _build_dataclass(DatasetBlock, {**ds_raw, "synthetic": synthetic}, "dataset")

        model_raw = dict(raw.get("model", {}))
        train = model_raw.pop("train", {})
        model = _build_dataclass(
            ModelBlock, {**model_raw, "train": _build_dataclass(TrainConfig, train, "model.train")},
            "model")

        attack = None
        if raw.get("attack") is not None:
            attack_raw = dict(raw["attack"])
            trigger = _build_dataclass(TriggerSpec, attack_raw.pop("trigger", {"variant": "patch"}),
                                       "attack.trigger")
            poison = _build_dataclass(PoisonConfig, attack_raw.pop("poison", {}), "attack.poison")
            if attack_raw:
                raise ConfigurationError(f"attack: unknown keys {sorted(attack_raw)}")
            attack = AttackBlock(trigger=trigger, poison=poison)

        defense_raw = dict(raw.get("defense", {}))
        reverse = _build_dataclass(REConfig, defense_raw.pop("reverse", {}), "defense.reverse")
        defense = _build_dataclass(DefenseBlock, {**defense_raw, "reverse": reverse}, "defense")

        seeds = _build_dataclass(Seeds, raw.get("seeds", {}), "seeds")
        config = cls(dataset=dataset, model=model, attack=attack, defense=defense, seeds=seeds)
        config._apply_seeds()
        return config

    def _apply_seeds(self):
        """Route the three named seeds into every seeded sub-config."""
        if self.dataset.synthetic is not None:
            self.dataset.synthetic.seed = self.seeds.data
        if self.attack is not None:
            self.attack.trigger.seed = self.seeds.data
            self.attack.poison.seed = self.seeds.data
        self.model.train.seed = self.seeds.model
        self.defense.reverse.seed = self.seeds.defense

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return cls.from_mapping(raw)

    def to_dict(self) -> dict:
        blob = {
            "dataset": {
                "synthetic": dataclasses.asdict(self.dataset.synthetic) if self.dataset.synthetic else None,
                "directory": self.dataset.directory,
                "split": list(self.dataset.split),
            },
            "model": {
                "preset": self.model.preset,
                "feature_dim": self.model.feature_dim,
                "output_dim": self.model.output_dim,
                "train": dataclasses.asdict(self.model.train),
            },
            "attack": None,
            "defense": {
                "reverse": dataclasses.asdict(self.defense.reverse),
                "epsilon": self.defense.epsilon,
            },
            "seeds": dataclasses.asdict(self.seeds),
        }
        if self.attack is not None:
            blob["attack"] = {"trigger": self.attack.trigger.to_dict(),
                              "poison": dataclasses.asdict(self.attack.poison)}
        return blob


def _records_dir(out_dir: str | Path) -> Path:
    return Path(out_dir) / "records"


def latest_record(out_dir: str | Path) -> tuple[dict | None, int]:
    """Newest record and its version, or (None, 0) when no record exists."""
    records = sorted(_records_dir(out_dir).glob("record_v*.json"))
    if not records:
        return None, 0
    latest = records[-1]
    version = int(latest.stem.split("_v")[1])
    with open(latest) as fh:
        return json.load(fh), version


def write_record(out_dir: str | Path, record: dict) -> Path:
    """Append a new versioned record; existing records are never modified."""
    records = _records_dir(out_dir)
    records.mkdir(parents=True, exist_ok=True)
    _, version = latest_record(out_dir)
    path = records / f"record_v{version + 1:04d}.json"
    record = dict(record)
    record["record_version"] = RECORD_VERSION
    record["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
    return path


def update_record(out_dir: str | Path, config: ExperimentConfig, stage: str,
                  stage_record: dict, elapsed: float) -> Path:
    """Merge a stage result into the latest record and write a new version."""
    record, _ = latest_record(out_dir)
    if record is None:
        record = {"config": config.to_dict(), "stages": {}, "timings": {}}
    record.setdefault("stages", {})[stage] = stage_record
    record.setdefault("timings", {})[stage] = round(elapsed, 3)
    record["config"] = config.to_dict()
    return write_record(out_dir, record)
