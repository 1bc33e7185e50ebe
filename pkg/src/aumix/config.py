"""Run configuration: one JSON document describing a full experiment."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DatasetBundle, SynthConfig, load_bundle_jsonl, synth_task
from .errors import ConfigError, InvalidInputError
from .mixup import Ablation, MixupConfig, Strategy
from .model import ModelConfig
from .training import TrainConfig

# smoothing used by the "+LS" rows of the matrix when the config sets none
DEFAULT_MATRIX_SIGMA = 0.03

_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} | {"seed"}
_JSONL_KEYS = {"paths", "labels", "text_key", "label_key", "text_b_key"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"num_classes", "seed"}
_MIXUP_KEYS = {"alpha", "beta", "gamma", "delta", "strategy", "ablation"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _check_keys(section: str, d, allowed: set) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    return dict(d)


@dataclass(frozen=True)
class RunConfig:
    dataset: dict = field(default_factory=lambda: {"source": "synth", "synth": {}})
    model: dict = field(default_factory=dict)
    mixup: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    label_smoothing: float | None = None
    temperature_scaling: bool = False
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    n_bins: int = 10
    matrix_sigma: float = DEFAULT_MATRIX_SIGMA

    def __post_init__(self):
        # sub-configs are built once here so that every error surfaces before any work
        try:
            self._validate()
        except ConfigError:
            raise
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def _validate(self) -> None:
        ds = _check_keys("dataset", self.dataset, {"source", "synth", "jsonl"})
        source = ds.get("source", "synth")
        if source == "synth":
            _check_keys("dataset.synth", ds.get("synth", {}), _SYNTH_KEYS)
            synth = {k: v for k, v in ds.get("synth", {}).items() if k != "seed"}
            SynthConfig(**synth)
        elif source == "jsonl":
            js = _check_keys("dataset.jsonl", ds.get("jsonl"), _JSONL_KEYS)
            if "paths" not in js or "labels" not in js:
                raise ConfigError("dataset.jsonl needs 'paths' and 'labels'")
            missing = set(DatasetBundle.SPLITS) - set(js["paths"])
            if missing:
                raise ConfigError(f"dataset.jsonl.paths lacks split(s): {', '.join(sorted(missing))}")
        else:
            raise ConfigError(f"dataset.source must be 'synth' or 'jsonl', got {source!r}")
        _check_keys("model", self.model, _MODEL_KEYS)
        _check_keys("mixup", self.mixup, _MIXUP_KEYS)
        _check_keys("training", self.training, _TRAIN_KEYS)
        self.mixup_config()
        self.train_config()
        ModelConfig(num_classes=2, **self.model)
        if self.label_smoothing is not None and not 0 < self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in (0, 1) or be null")
        if not 0 < self.matrix_sigma < 1:
            raise ConfigError("matrix_sigma must lie in (0, 1)")
        if not isinstance(self.temperature_scaling, bool):
            raise ConfigError("temperature_scaling must be true or false")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not isinstance(self.n_bins, int) or self.n_bins < 1:
            raise ConfigError("n_bins must be a positive int")

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes) -> RunConfig:
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("strategy", "ablation"):
                d["mixup"] = {**d["mixup"], k: v}
            else:
                d[k] = v
        return RunConfig.from_dict(d)

    # -- hashes -------------------------------------------------------------

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return digest(d)

    def phase1_hash(self) -> str:
        """Hash of the inputs of the categorization run (data, model, training)."""
        return digest({"dataset": self.dataset, "model": self.model, "training": self.training})

    # -- sub-configs ---------------------------------------------------------

    @property
    def strategy(self) -> Strategy:
        return Strategy(self.mixup.get("strategy", Strategy.NONE.value))

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.mixup.get("ablation", Ablation.FULL.value))

    def mixup_config(self) -> MixupConfig:
        return MixupConfig(**self.mixup)

    def train_config(self, label_smoothing: float | None = None) -> TrainConfig:
        return TrainConfig(**self.training, label_smoothing=label_smoothing)

    def model_config(self, num_classes: int, seed: int) -> ModelConfig:
        return ModelConfig(num_classes=num_classes, seed=seed, **self.model)

    def data_seed(self, seed: int) -> int:
        synth = self.dataset.get("synth", {})
        return int(synth["seed"]) if "seed" in synth else seed

    def load_bundle(self, seed: int) -> DatasetBundle:
        if self.dataset.get("source", "synth") == "jsonl":
            js = self.dataset["jsonl"]
            return load_bundle_jsonl(js["paths"], js["labels"], js.get("text_key", "text"),
                                     js.get("label_key", "label"), js.get("text_b_key"))
        synth = {k: v for k, v in self.dataset.get("synth", {}).items() if k != "seed"}
        return synth_task(self.data_seed(seed), **synth)
