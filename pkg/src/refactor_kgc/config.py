"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields

from .refactor import RefactorConfig
from .scoring import ModelSpec
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run. ``layers = inf`` never clears the cache."""

    mode: str = "fm"
    model: str = "complex"
    dim: int = 200
    relation_dim: int | None = None
    init_scale: float = 0.02
    learning_rate: float = 0.1
    batch_size: int | None = 100
    epochs: int = 10
    reg_weight: float = 0.0
    rp_weight: float = 0.0
    optimizer: str = "adagrad"
    adagrad_eps: float = 1e-10
    forget_interval: int | None = None
    seed: int = 0
    softmax_mode: str = "full"
    in_batch_negatives: int = 128
    global_negatives: int = 1
    entity_terms: str = "object"
    rp_over_base_relations: bool = False
    lr_schedule: str = "constant"
    schedule_steps: int = 0
    clip_norm: float | None = None
    reciprocals: bool = True
    eval_every: int = 1
    # refactor mode
    layers: float = math.inf
    beta: float = 0.1
    alpha: float | None = None
    include_n_term: bool = True
    layer_optimizer: str = "sgd"
    relation_optimizer: str = "adagrad"
    relation_lr: float | None = None
    feature_source: str = "random"
    feature_scale: float = 0.02
    features_path: str | None = None
    feature_seed: int = 0
    n3_weight: float = 0.0

    def __post_init__(self):
        if self.mode not in ("fm", "refactor"):
            raise ConfigError(f"mode: expected 'fm' or 'refactor', got {self.mode!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        try:
            self.train_config()
            if self.mode == "refactor":
                self.refactor_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def finite_layers(self) -> int | None:
        return None if math.isinf(self.layers) else int(self.layers)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.model, self.dim, self.relation_dim, self.init_scale)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self.model_spec(),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            reg_weight=self.reg_weight,
            rp_weight=self.rp_weight,
            optimizer=self.optimizer,
            adagrad_eps=self.adagrad_eps,
            forget_interval=self.forget_interval,
            seed=self.seed,
            softmax_mode=self.softmax_mode,
            in_batch_negatives=self.in_batch_negatives,
            global_negatives=self.global_negatives,
            entity_terms=self.entity_terms,
            rp_over_base_relations=self.rp_over_base_relations,
            lr_schedule=self.lr_schedule,
            schedule_steps=self.schedule_steps,
            clip_norm=self.clip_norm,
        )

    def refactor_config(self) -> RefactorConfig:
        return RefactorConfig(
            layers=self.finite_layers,
            beta=self.beta,
            alpha=self.alpha,
            include_n_term=self.include_n_term,
            decoder=self.model_spec(),
            feature_source=self.feature_source,
            feature_scale=self.feature_scale,
            layer_optimizer=self.layer_optimizer,
            relation_optimizer=self.relation_optimizer,
            relation_lr=self.relation_lr,
            adagrad_eps=self.adagrad_eps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            softmax_mode=self.softmax_mode,
            global_negatives=self.global_negatives,
            n3_weight=self.n3_weight,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = "inf" if math.isinf(self.layers) else int(self.layers)
        return d

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, known[key].type, raw)
        return cls(**kwargs)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, type_str: str, raw):
    if not isinstance(raw, str):
        raw = _fmt(raw)
    text = raw.strip()
    optional = "None" in type_str
    base = type_str.replace("| None", "").strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if base == "bool":
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {base}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return RunConfig.from_dict(values)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))
