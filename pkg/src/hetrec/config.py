"""Run configuration: a flat dotted key namespace loaded from YAML."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import yaml

from .evaluation import EvalConfig
from .models import ModelConfig
from .sampling import PipelineMode
from .trainer import ConfigError, PipelineConfig, TrainConfig

DEFAULTS: dict[str, Any] = {
    "graph.schema": [],
    "graph.edges_path": None,
    "graph.side_info_path": None,
    "walk.metapaths": [],
    "walk.len": 24,
    "walk.per_node": 1,
    "pipeline.win_size": 2,
    "pipeline.fanouts": [10, 10],
    "pipeline.order": "ego_first",
    "pipeline.batch_size": 1000,
    "model.kind": "lightgcn",
    "model.layers": 2,
    "model.dim": 64,
    "model.alpha": 0.0,
    "model.phi": "uniform",
    "model.side_info": False,
    "train.neg_mode": "in_batch",
    "train.neg_num": 5,
    "train.neg_dist": "uniform",
    "train.pair_budget": None,
    "train.sparse_lr": 0.1,
    "train.warm_start_path": None,
    "train.seed": 0,
    "train.workers": 1,
    "ps.shards": 1,
    "ps.endpoints": [],
    "eval.strategy": "u2i",
    "eval.N": 20,
    "eval.K": 100,
}

_LIST_KEYS = {"graph.schema", "walk.metapaths", "pipeline.fanouts", "ps.endpoints"}
_INT_KEYS = {"walk.len", "walk.per_node", "pipeline.win_size", "pipeline.batch_size", "model.layers",
             "model.dim", "train.neg_num", "train.seed", "train.workers", "ps.shards", "eval.N", "eval.K"}
_FLOAT_KEYS = {"model.alpha", "train.sparse_lr"}


def flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    """``{"a": {"b": 1}}`` -> ``{"a.b": 1}``; dotted keys pass through."""
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not key=value")
    return key.strip(), yaml.safe_load(value)


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def from_mapping(cls, data: Mapping | None, overrides: Iterable[tuple[str, Any]] = ()) -> "RunConfig":
        flat = flatten(data or {})
        flat.update(dict(overrides))
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = copy.deepcopy(DEFAULTS)
        values.update(flat)
        cfg = cls(values)
        cfg._coerce()
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Iterable[tuple[str, Any]] = ()) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
        if data is not None and not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_mapping(data, overrides)

    def __getitem__(self, key: str):
        return self.values[key]

    def _coerce(self):
        v = self.values
        try:
            for k in _LIST_KEYS:
                if isinstance(v[k], (str, int)):
                    v[k] = [v[k]]
                v[k] = list(v[k] or [])
            for k in _INT_KEYS:
                if isinstance(v[k], bool) or int(v[k]) != v[k]:
                    raise ConfigError(f"{k} must be an integer, got {v[k]!r}")
                v[k] = int(v[k])
            for k in _FLOAT_KEYS:
                v[k] = float(v[k])
            v["pipeline.fanouts"] = [int(f) for f in v["pipeline.fanouts"]]
            if v["train.pair_budget"] is not None:
                v["train.pair_budget"] = int(float(v["train.pair_budget"]))
            if not isinstance(v["model.side_info"], bool):
                raise ConfigError("model.side_info must be true or false")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value type: {exc}") from exc

    def validate(self) -> None:
        """Build every sub-config once so that field errors surface at load time,
        then check the cross-field rules."""
        v = self.values
        try:
            PipelineMode(v["pipeline.order"])
            self.pipeline_config()
            self.train_config()
            self.eval_config()
            if v["model.kind"] != "walk_only":
                # relations are only known once the graph is read
                ModelConfig(v["model.kind"], v["model.layers"], v["model.dim"], v["model.alpha"],
                            v["model.phi"], ("_",), v["model.side_info"])
            else:
                ModelConfig(v["model.kind"], v["model.layers"], v["model.dim"], v["model.alpha"], v["model.phi"])
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if v["model.dim"] < 1:
            raise ConfigError("model.dim must be positive")
        if v["walk.len"] < 1 or v["walk.per_node"] < 1:
            raise ConfigError("walk.len and walk.per_node must be positive")
        if v["model.kind"] != "walk_only" and len(v["pipeline.fanouts"]) < v["model.layers"]:
            raise ConfigError(f"pipeline.fanouts needs one entry per layer "
                              f"({len(v['pipeline.fanouts'])} < model.layers={v['model.layers']})")
        if v["ps.endpoints"]:
            if v["ps.shards"] not in (1, len(v["ps.endpoints"])):
                raise ConfigError("ps.shards must match the number of ps.endpoints")
        elif v["ps.shards"] < 1:
            raise ConfigError("ps.shards must be >= 1")

    # typed views ----------------------------------------------------------
    def pipeline_config(self) -> PipelineConfig:
        v = self.values
        return PipelineConfig(v["pipeline.win_size"], tuple(v["pipeline.fanouts"]), v["pipeline.order"])

    def train_config(self, **extra) -> TrainConfig:
        v = self.values
        return TrainConfig(batch_size=v["pipeline.batch_size"], pair_budget=v["train.pair_budget"],
                           sparse_lr=v["train.sparse_lr"], neg_mode=v["train.neg_mode"],
                           neg_num=v["train.neg_num"], neg_dist=v["train.neg_dist"], seed=v["train.seed"],
                           workers=v["train.workers"], **extra)

    def model_config(self, relations) -> ModelConfig:
        v = self.values
        return ModelConfig(v["model.kind"], v["model.layers"], v["model.dim"], v["model.alpha"], v["model.phi"],
                           tuple(relations) if v["model.kind"] != "walk_only" else (), v["model.side_info"])

    def eval_config(self) -> EvalConfig:
        v = self.values
        return EvalConfig(N=v["eval.N"], K=v["eval.K"], strategy=v["eval.strategy"])

    def dump(self) -> str:
        return yaml.safe_dump(dict(sorted(self.values.items())), sort_keys=False, default_flow_style=None)
