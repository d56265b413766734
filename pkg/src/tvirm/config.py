"""YAML experiment configuration with documented defaults and strict keys."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Sequence

import yaml

from .bench import CsvData, Experiment, RegressionData, SimulationData
from .objectives import Method
from .risk import LossKind
from .trainer import TrainConfig

DEFAULT_YAML = """\
train:
  method: ERM            # ERM, IRM_TV_L2, IRM_TV_L1, VREX, MINIMAX_TV_L2, MINIMAX_TV_L1
  lam: 1.0               # penalty weight, >= 0
  epochs: 5300
  lr_phi: 0.001          # Adam step for the predictor
  lr_rho: 0.001          # Adam step for the environment network (minimax only)
  batch_size: null       # null trains full-batch
  warmup_epochs: 0       # epochs with the penalty weight held at 0
  rho_steps: 1           # environment-network ascent steps per epoch
  n_envs: 2              # environments inferred by the minimax methods
  loss: BINARY_CE        # BINARY_CE, MULTI_CE, MSE
  n_classes: null        # required for MULTI_CE
  phi_hidden: []         # hidden widths of the predictor; [] is linear
  rho_hidden: 16         # hidden width of the environment network
data:
  kind: simulation       # simulation, regression, csv
  simulation:
    p_s_minus: 0.999     # spurious agreement for t < 0.5
    p_s_plus: 0.9        # spurious agreement for t >= 0.5
    p_v: 0.8             # invariant agreement
    n_per_env: 5000      # training rows per half of the time range
    n_test_per_env: 5000
  regression:
    n_train: 5000
    n_test: 5000
    slope_1900: 2.0      # spurious slope on the label in 1900
    slope_2000: -1.0     # and in 2000, linear in between
    label_noise: 0.5
    spurious_noise: 0.5
  csv:
    train: null          # path of the training CSV
    test: []             # paths of the test CSVs, one per environment
    features: []
    label: y
    aux: []
    env: null            # integer environment column for partition methods
    task: classification # classification or regression
    standardize: true    # z-score features with training statistics
    label_group: null    # standardize labels within groups of this column
bench:
  reps: 10
  base_seed: 0           # repetition r uses seed base_seed + r
  jobs: 1                # worker processes for repetitions
"""

DEFAULTS: dict = yaml.safe_load(DEFAULT_YAML)

# expected type per leaf key; "?" marks keys that may be null
_TYPES = {
    "train.method": "method", "train.lam": "float", "train.epochs": "int",
    "train.lr_phi": "float", "train.lr_rho": "float", "train.batch_size": "int?",
    "train.warmup_epochs": "int", "train.rho_steps": "int", "train.n_envs": "int",
    "train.loss": "loss", "train.n_classes": "int?", "train.phi_hidden": "ints",
    "train.rho_hidden": "int",
    "data.kind": "kind",
    "data.csv.train": "str?", "data.csv.test": "strs", "data.csv.features": "strs",
    "data.csv.label": "str", "data.csv.aux": "strs", "data.csv.env": "str?",
    "data.csv.task": "task", "data.csv.standardize": "bool", "data.csv.label_group": "str?",
    "bench.reps": "int", "bench.base_seed": "int", "bench.jobs": "int",
}
for _k in DEFAULTS["data"]["simulation"]:
    _TYPES[f"data.simulation.{_k}"] = "int" if _k.startswith("n_") else "float"
for _k in DEFAULTS["data"]["regression"]:
    _TYPES[f"data.regression.{_k}"] = "int" if _k.startswith("n_") else "float"


class ConfigError(ValueError):
    """Bad configuration. ``key`` is the dotted name of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key: str, value: Any) -> Any:
    kind = _TYPES[key]
    if kind.endswith("?"):
        if value is None:
            return None
        kind = kind[:-1]
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind in ("ints", "strs"):
            if not isinstance(value, list):
                raise TypeError
            inner = key + "[]"
            _TYPES[inner] = "int" if kind == "ints" else "str"
            return [_coerce(inner, v) for v in value]
        if kind == "method":
            return Method.parse(str(value)).name
        if kind == "loss":
            return LossKind[str(value).upper()].name
        if kind == "kind":
            if value not in ("simulation", "regression", "csv"):
                raise ValueError(f"unknown data kind {value!r}")
            return value
        if kind == "task":
            if value not in ("classification", "regression"):
                raise ValueError(f"unknown task {value!r}")
            return value
    except (TypeError, ValueError, KeyError) as err:
        detail = str(err) if isinstance(err, ValueError) and str(err) else f"cannot use {value!r} as {kind}"
        raise ConfigError(key, detail) from None
    raise AssertionError(kind)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    if not isinstance(update, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(key, "unknown key")
        if isinstance(base[k], dict):
            _merge(base[k], v, key + ".")
        else:
            base[k] = _coerce(key, v)


def parse_override(text: str) -> tuple[str, Any]:
    """``"train.lam=10"`` to ``("train.lam", 10)``; the value is read as YAML."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(text, "override must look like KEY=VALUE")
    return key, yaml.safe_load(raw) if raw.strip() else None


def apply_override(cfg: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown key")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(key, "unknown key")
    node[parts[-1]] = _coerce(key, value)


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the YAML file at ``path``, then ``KEY=VALUE`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError("--config", str(err)) from None
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError(str(path), f"invalid YAML: {err}") from None
        if doc is not None:
            _merge(cfg, doc)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            method=Method[t["method"]], lam=t["lam"], epochs=t["epochs"],
            lr_phi=t["lr_phi"], lr_rho=t["lr_rho"], batch_size=t["batch_size"],
            seed=cfg["bench"]["base_seed"], warmup_epochs=t["warmup_epochs"],
            rho_steps=t["rho_steps"], n_envs=t["n_envs"], loss=LossKind[t["loss"]],
            n_classes=t["n_classes"], phi_hidden=tuple(t["phi_hidden"]), rho_hidden=t["rho_hidden"],
        )
    except ValueError as err:
        raise ConfigError("train", str(err)) from None


def data_source(cfg: dict):
    d = cfg["data"]
    kind = d["kind"]
    if kind == "simulation":
        return SimulationData(**d["simulation"])
    if kind == "regression":
        return RegressionData(**d["regression"])
    c = d["csv"]
    if c["train"] is None:
        raise ConfigError("data.csv.train", "required when data.kind is csv")
    if not c["test"]:
        raise ConfigError("data.csv.test", "at least one test file is required")
    if not c["features"]:
        raise ConfigError("data.csv.features", "at least one feature column is required")
    return CsvData(
        train=c["train"], test=tuple(c["test"]), features=tuple(c["features"]), label=c["label"],
        aux=tuple(c["aux"]), env=c["env"], task=c["task"], standardize=c["standardize"],
        label_group=c["label_group"],
    )


def experiment(cfg: dict) -> Experiment:
    for key in ("bench.reps", "bench.jobs"):
        sec, name = key.split(".")
        if cfg[sec][name] < 1:
            raise ConfigError(key, "must be at least 1")
    return Experiment(data_source(cfg), train_config(cfg), cfg["bench"]["base_seed"])


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
