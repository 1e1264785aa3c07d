"""Experiment configuration: a YAML (or JSON) tree with strict keys.

Precedence, lowest first: built-in defaults, the config file, then
``--set section.key=value`` overrides. Override values are parsed as YAML
scalars/lists, so ``--set train.lr=1e-3`` gives a float and
``--set model.architecture='[{type: dense, units: 10}]'`` gives a list.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field, fields

import yaml

from .inference import TrainSpec
from .layers import VARIANTS


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` as a float (YAML 1.1 insists on a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


DATA_KEYS = {
    "source", "seed", "split_seed", "test_fraction", "n", "n_test", "noise", "path", "test_path",
    "label_column", "images", "labels", "test_images", "test_labels", "normalize", "root",
    "limit", "n_classes",
}


@dataclass
class ModelConfig:
    architecture: list = field(default_factory=lambda: [
        {"type": "dense", "units": 100}, {"type": "relu"}, {"type": "dense", "units": None}])
    variant: str = "vsd"
    layer_defaults: dict = field(default_factory=dict)
    likelihood: str | None = None
    log_precision: float = 0.0
    learn_precision: bool = True

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.likelihood not in (None, "categorical", "gaussian"):
            raise ConfigError(f"model.likelihood must be categorical or gaussian, got {self.likelihood!r}")
        if not isinstance(self.architecture, list) or not self.architecture:
            raise ConfigError("model.architecture must be a nonempty list of layer mappings")
        for i, layer in enumerate(self.architecture):
            if not isinstance(layer, dict) or "type" not in layer:
                raise ConfigError(f"model.architecture[{i}] needs a 'type'")


@dataclass
class ObjectiveConfig:
    kl_weight: float = 1.0
    mc_train: int | None = None

    def validate(self):
        if not self.kl_weight >= 0:
            raise ConfigError("objective.kl_weight must be >= 0")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    momentum: float = 0.9
    lr_step_size: int | None = 10
    lr_gamma: float = 0.3
    lr_milestones: list | None = None
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    mc_samples: int = 100

    def validate(self):
        try:
            self.to_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def to_spec(self) -> TrainSpec:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["betas"] = tuple(d["betas"])
        return TrainSpec(**d)


@dataclass
class EvalConfig:
    mc_samples: int = 100
    ece_bins: int = 15
    entropy_bins: int = 20
    normalize_entropy: bool = False
    seed: int = 0

    def validate(self):
        if self.mc_samples < 1 or self.ece_bins < 1 or self.entropy_bins < 1:
            raise ConfigError("eval.mc_samples, eval.ece_bins and eval.entropy_bins must be >= 1")


_SECTIONS = {"model": ModelConfig, "objective": ObjectiveConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: dict = field(default_factory=lambda: {"source": "synthetic-cubic"})
    ood_data: dict | None = None
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        for key, desc in (("data", self.data), ("ood_data", self.ood_data)):
            if desc is None:
                continue
            if not isinstance(desc, dict) or "source" not in desc:
                raise ConfigError(f"{key} must be a mapping with a 'source'")
            unknown = set(desc) - DATA_KEYS
            if unknown:
                raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
        return self

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: copy.deepcopy(getattr(sec, f.name)) for f in fields(sec)}
        out["data"] = copy.deepcopy(self.data)
        out["ood_data"] = copy.deepcopy(self.ood_data)
        out["output_dir"] = self.output_dir
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            raw = d.get(name) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = section_cls(**copy.deepcopy(raw))
        for name in ("data", "ood_data", "output_dir"):
            if name in d:
                kwargs[name] = copy.deepcopy(d[name])
        return cls(**kwargs).validate()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            raw = _yaml_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls.from_dict(raw or {})


def parse_override(item: str):
    """``"a.b=value"`` -> ``(["a", "b"], parsed_value)``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [k for k in key.strip().split(".") if k]
    if not path:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = _yaml_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value in {item!r}: {exc}") from None
    return path, value


def apply_overrides(tree: dict, overrides) -> dict:
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        path, value = parse_override(item)
        node = tree
        for k in path[:-1]:
            if node.get(k) is None:
                node[k] = {}
            node = node[k]
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[path[-1]] = value
    return tree


def load_config(path: str | None = None, overrides=None) -> ExperimentConfig:
    """Defaults, then ``path`` (YAML or JSON), then ``overrides``."""
    tree = ExperimentConfig().to_dict()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = json.loads(text) if str(path).endswith(".json") else _yaml_load(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        for key, value in raw.items():
            if key in _SECTIONS and isinstance(value, dict) and isinstance(tree.get(key), dict):
                tree[key].update(value)
            else:
                tree[key] = value
    tree = apply_overrides(tree, overrides)
    return ExperimentConfig.from_dict(tree)
