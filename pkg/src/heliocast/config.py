"""Hierarchical run configuration with include/override semantics.

A run document is YAML with the top-level sections ``seed``, ``data``,
``model``, ``train``, ``synth`` and ``eval``. ``include`` (a path or list of
paths, relative to the including file; bare names also resolve against the
packaged ``configs/`` directory) is merged first and the including document
overrides it key by key. Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, HeliocastError
from .nnet import ModelConfig
from .pipeline import Designation
from .synth import SynthConfig
from .train import TrainConfig

PACKAGE_CONFIGS = Path(__file__).parent / "configs"
SECTIONS = ("seed", "data", "model", "train", "synth", "eval")


@dataclass
class DataConfig:
    root: str | None = None
    impute: str | None = None
    train: dict | None = None
    val: dict | None = None
    test: dict | None = None
    eval_stride: int = 48
    flow_alpha: float = 0.1
    flow_iterations: int = 100
    turbidity: float = 3.0

    def __post_init__(self):
        if self.impute not in (None, "clear-sky-scaled"):
            raise ConfigError(f"unknown imputation policy '{self.impute}'")
        for name in ("train", "val", "test"):
            d = getattr(self, name)
            if d is not None and set(d) - {"stations", "days"}:
                raise ConfigError(f"data.{name}: unknown keys {sorted(set(d) - {'stations', 'days'})}")
        if self.eval_stride < 1:
            raise ConfigError("data.eval_stride must be positive")

    def designation(self, name: str) -> Designation:
        d = getattr(self, name)
        if d is None:
            raise ConfigError(f"data.{name} designation is required")
        return Designation.from_dict(d)


@dataclass
class EvalConfig:
    daylight_only: bool = False
    pooling: str = "timesteps"

    def __post_init__(self):
        if self.pooling not in ("timesteps", "windows"):
            raise ConfigError(f"eval.pooling must be 'timesteps' or 'windows', got {self.pooling}")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        try:
            data = _build(DataConfig, doc.get("data") or {}, "data")
            model_doc = dict(doc.get("model") or {})
            if isinstance(model_doc.get("patch_size"), (list, tuple)):
                p = model_doc["patch_size"]
                if len(p) != 2 or p[0] != p[1]:
                    raise ConfigError(f"only square patches are supported, got {p}")
                model_doc["patch_size"] = int(p[0])
            model = ModelConfig.from_dict(model_doc)
            train_doc = dict(doc.get("train") or {})
            train_doc["seed"] = seed
            train = TrainConfig.from_dict(train_doc)
            synth = SynthConfig.from_dict(doc.get("synth") or {})
            ev = _build(EvalConfig, doc.get("eval") or {}, "eval")
        except ConfigError:
            raise
        except (HeliocastError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(seed, data, model, train, synth, ev)


def _build(cls, d: dict, section: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve(ref: str, here: Path) -> Path:
    for candidate in (here / ref, PACKAGE_CONFIGS / ref, PACKAGE_CONFIGS / f"{ref}.yaml"):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"cannot find config '{ref}'")


def read_document(path, _seen: tuple = ()) -> dict:
    """Load one YAML document with its includes merged underneath it."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for ref in includes:
        merged = deep_merge(merged, read_document(_resolve(ref, path.parent), _seen + (path,)))
    return deep_merge(merged, doc)


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key.path=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Resolve a run config: packaged defaults <- file (with includes) <- overrides."""
    doc = read_document(PACKAGE_CONFIGS / "crossvivit.yaml")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            p = _resolve(str(path), Path.cwd())
        doc = deep_merge(doc, read_document(p))
    for o in overrides:
        doc = deep_merge(doc, parse_override(o))
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
