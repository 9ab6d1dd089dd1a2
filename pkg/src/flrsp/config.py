"""Experiment configuration (JSON-backed dataclasses).

Schema, with defaults::

    {
      "name": "run",
      "clients": 5, "epochs": 10, "batch_size": 32, "lr": 0.1,
      "local_epochs": 1,
      "aggregation": "fedsgd",            # or "fedavg"
      "model": {"type": "mlp", "hidden": [32]},
      #        {"type": "vit", "patch_size": 4, "embed_dim": 16, "mlp_dim": 16}
      "defense": {"type": "none"},        # "flrsp" (R), "dp" (epsilon, delta,
                                          # sensitivity), "fixed_position"
      "attack": {"type": "none"},         # "april" or "optimization"
                                          # (iterations, step_size, num_images,
                                          #  intercept_epoch, intercept_round)
      "partition": {"scheme": "iid"},     # or {"scheme": "dirichlet", "alpha": 0.1}
      "dataset": {"kind": "synthetic", "num_classes": 3, "num_train": 300,
                  "num_test": 150, "image_shape": [1, 8, 8], "noise": 0.05},
                 # or {"kind": "file", "train": "...", "test": "..."}
      "seeds": {"root": 0, "data": 0, "attack": 0},
      "eval_every": 1, "snapshot_every": 0
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


AGGREGATIONS = ("fedsgd", "fedavg")
DEFENSES = ("none", "flrsp", "dp", "fixed_position")
ATTACKS = ("none", "april", "optimization")
MODELS = ("mlp", "vit")
PARTITIONS = ("iid", "dirichlet")

# Reference experiment settings kept at desk scale.
REFERENCE_CLIENTS = 5
REFERENCE_BATCH = 32
REFERENCE_R = (0.2, 0.5, 0.8)
REFERENCE_EPSILON = (1.0, 2.0, 4.0)
REFERENCE_DELTA = 0.5


def _defaults():
    return {
        "model": {"type": "mlp", "hidden": [32]},
        "defense": {"type": "none"},
        "attack": {"type": "none"},
        "partition": {"scheme": "iid"},
        "dataset": {
            "kind": "synthetic", "num_classes": 3, "num_train": 300, "num_test": 150,
            "image_shape": [1, 8, 8], "noise": 0.05,
        },
        "seeds": {"root": 0, "data": 0, "attack": 0},
    }


ATTACK_DEFAULTS = {
    "iterations": 2000,
    "step_size": 0.01,
    "num_images": 15,
    "intercept_epoch": None,   # None -> final epoch
    "intercept_round": 0,
}


@dataclass
class ExperimentConfig:
    name: str = "run"
    clients: int = REFERENCE_CLIENTS
    epochs: int = 10
    batch_size: int = REFERENCE_BATCH
    lr: float = 0.1
    local_epochs: int = 1
    aggregation: str = "fedsgd"
    model: dict = field(default_factory=lambda: _defaults()["model"])
    defense: dict = field(default_factory=lambda: _defaults()["defense"])
    attack: dict = field(default_factory=lambda: _defaults()["attack"])
    partition: dict = field(default_factory=lambda: _defaults()["partition"])
    dataset: dict = field(default_factory=lambda: _defaults()["dataset"])
    seeds: dict = field(default_factory=lambda: _defaults()["seeds"])
    eval_every: int = 1
    snapshot_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("epochs, batch_size and local_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.model.get("type") not in MODELS:
            raise ConfigError(f"model.type must be one of {MODELS}")
        kind = self.defense.get("type", "none")
        if kind not in DEFENSES:
            raise ConfigError(f"defense.type must be one of {DEFENSES}")
        if kind == "flrsp" and not 0.0 <= float(self.defense.get("R", -1)) <= 1.0:
            raise ConfigError("flrsp defense needs R in [0, 1]")
        if kind == "dp":
            eps = float(self.defense.get("epsilon", 0))
            delta = float(self.defense.get("delta", REFERENCE_DELTA))
            if eps <= 0 or not 0 < delta < 1:
                raise ConfigError("dp defense needs epsilon > 0 and delta in (0, 1)")
            if float(self.defense.get("sensitivity", 0.5)) < 0:
                raise ConfigError("dp sensitivity must be non-negative")
        if kind == "fixed_position" and self.model["type"] != "vit":
            raise ConfigError("fixed_position defense applies only to the ViT model")
        atk = self.attack.get("type", "none")
        if atk not in ATTACKS:
            raise ConfigError(f"attack.type must be one of {ATTACKS}")
        if atk == "april" and self.model["type"] != "vit":
            raise ConfigError("APRIL targets the ViT model")
        if atk == "optimization" and self.model["type"] != "mlp":
            raise ConfigError("the optimization attack targets the input-bias MLP")
        if atk != "none":
            opts = self.attack_options()
            if opts["iterations"] < 1 or opts["num_images"] < 1:
                raise ConfigError("attack iterations and num_images must be >= 1")
        if self.partition.get("scheme") not in PARTITIONS:
            raise ConfigError(f"partition.scheme must be one of {PARTITIONS}")
        if self.partition["scheme"] == "dirichlet" and float(self.partition.get("alpha", 0)) <= 0:
            raise ConfigError("dirichlet partition needs alpha > 0")
        if self.dataset.get("kind") not in ("synthetic", "file"):
            raise ConfigError("dataset.kind must be 'synthetic' or 'file'")

    def attack_options(self) -> dict:
        opts = dict(ATTACK_DEFAULTS)
        opts.update({k: v for k, v in self.attack.items() if k != "type"})
        if opts["intercept_epoch"] is None:
            opts["intercept_epoch"] = self.epochs - 1
        return opts

    @property
    def defense_label(self) -> str:
        kind = self.defense.get("type", "none")
        if kind == "flrsp":
            return f"flrsp_R{self.defense['R']}"
        if kind == "dp":
            return f"dp_eps{self.defense['epsilon']}"
        return kind

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = copy.deepcopy(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        defaults = _defaults()
        for key in ("dataset", "seeds"):
            if key in data:
                merged = dict(defaults[key])
                merged.update(data[key])
                data[key] = merged
        try:
            return cls(**data)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> ExperimentConfig:
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_dict(data)
