"""Strict YAML experiment configuration.

Every section maps onto a dataclass; unknown keys and mistyped values are rejected with
the offending line number and dotted field path.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .finetune import FinetuneConfig
from .meta import MetaConfig
from .nsga2 import Nsga2Config
from .policy import PpoHyper

RUN_MODES = ("meta-train", "fine-tune", "nsga2", "evaluate", "diagnose-variance")


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    family: str = "supply-chain"
    complexity: str = "simple"
    perturb: bool = True
    task_seed: int = 10_000
    bounds_episodes: int = 100
    horizon: int | None = None


@dataclass
class FinetuneSection:
    meta_checkpoint: str | None = None
    k: int = 21
    steps: int = 5000
    t_add: int | None = None
    eval_episodes: int = 5
    psa_steps: int = 10
    psa_delta: float = 0.05
    use_psa: bool = True
    scalarization: str = "linear"
    ppo: PpoHyper = field(default_factory=PpoHyper)


@dataclass
class EvaluateSection:
    algorithms: dict[str, list[str]] = field(default_factory=dict)
    compare: list[list[str]] = field(default_factory=list)
    eum_seed: int = 7
    eum_weights: int = 100


@dataclass
class VarianceSection:
    checkpoint: str | None = None
    k_values: list[int] = field(default_factory=lambda: [2, 8])
    n_repeats: int = 30
    n_tasks: int = 4


@dataclass
class TraceSection:
    export: bool = True


@dataclass
class ExperimentConfig:
    mode: str = "meta-train"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    bounds_path: str | None = None
    workers: int = 1
    env: EnvSection = field(default_factory=EnvSection)
    meta: MetaConfig = field(default_factory=MetaConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    nsga2: Nsga2Config = field(default_factory=Nsga2Config)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    variance: VarianceSection = field(default_factory=VarianceSection)
    traces: TraceSection = field(default_factory=TraceSection)

    def finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(k=f.k, steps=f.steps, t_add=f.t_add, eval_episodes=f.eval_episodes,
                              psa_steps=f.psa_steps, psa_delta=f.psa_delta, use_psa=f.use_psa,
                              scalarization=f.scalarization, workers=self.workers, ppo=f.ppo)


# --- YAML with line numbers ---------------------------------------------------------

def _construct(node, path: str, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate field '{sub}'")
            out[key] = _construct(value_node, sub, lines)
            lines[sub] = key_node.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_yaml(text: str, source: str = "<config>") -> tuple[dict, dict]:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ConfigError(f"{source}: {where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if node is None:
        return {}, {}
    lines: dict = {}
    data = _construct(node, "", lines)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: top level must be a mapping")
    return data, lines


# --- typed conversion -----------------------------------------------------------------

def _where(lines, source, path):
    line = lines.get(path)
    return f"{source}: line {line}: " if line else f"{source}: "


def _coerce(value, tp, path, lines, source):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, lines, source)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{_where(lines, source, path)}field '{path}' must be a mapping")
        return build_dataclass(tp, value, path, lines, source)
    bad = ConfigError(f"{_where(lines, source, path)}field '{path}' expects {getattr(tp, '__name__', tp)}, "
                      f"got {value!r}")
    if tp is bool:
        if not isinstance(value, bool):
            raise bad
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise bad
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise bad
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise bad
        item = args[0] if args else typing.Any
        items = [_coerce(v, item, f"{path}[{i}]", lines, source) for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise bad
        return {str(k): _coerce(v, args[1], f"{path}.{k}", lines, source) for k, v in value.items()}
    return value


def build_dataclass(cls, data: dict, prefix: str = "", lines=None, source: str = "<config>"):
    lines = lines or {}
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"{_where(lines, source, path)}unknown field '{path}'; "
                              f"expected one of: {', '.join(names)}")
        kwargs[key] = _coerce(value, hints[key], path, lines, source)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, source, prefix)}invalid '{prefix or 'config'}': {exc}") from None


def apply_override(data: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override '{item}': expected key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{item}': '{p}' is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def parse_config(text: str, source: str = "<config>", overrides=(), seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    data, lines = load_yaml(text, source)
    data = copy.deepcopy(data)
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seeds"] = [seed]
    if out is not None:
        data["output_dir"] = out
    cfg = build_dataclass(ExperimentConfig, data, "", lines, source)
    if cfg.mode not in RUN_MODES:
        raise ConfigError(f"{_where(lines, source, 'mode')}field 'mode' must be one of {RUN_MODES}, "
                          f"got {cfg.mode!r}")
    if not cfg.seeds:
        raise ConfigError(f"{_where(lines, source, 'seeds')}field 'seeds' must list at least one seed")
    return cfg


def load_config(path, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p), overrides, seed, out)


def config_to_dict(cfg) -> dict:
    def clean(v):
        if dataclasses.is_dataclass(v):
            return {f.name: clean(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v
    return clean(cfg)
