"""Experiment configuration: nested dataclasses serialized as YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .frontend import FrontendConfig
from .nnet.mlp import BnConfig
from .nnet.xvector import XvectorConfig
from .synth import SyntheticCorpusSpec
from .tcl import TclConfig

SYSTEMS = ("gmm-ubm", "ivector", "xvector", "score-fusion", "vector-fusion")
FEATURES = ("mfcc", "bn")
BN_TASKS = ("spkr", "spkr+phrase", "phone", "stcl", "utcl")


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    """Either a synthetic spec or pre-extracted feature archives with metadata.

    File corpora need: `background` / `evaluation` feature archives,
    `background_info` (``utt speaker phrase`` lines), `enroll`
    (``model utt1 utt2 ...`` lines) and `trials`.
    """

    synthetic: SyntheticCorpusSpec | None = field(default_factory=SyntheticCorpusSpec)
    background: str | None = None
    background_info: str | None = None
    evaluation: str | None = None
    enroll: str | None = None
    trials: str | None = None
    phone_labels: str | None = None
    phone_table: str | None = None


@dataclass
class GmmConfig:
    components: int = 512
    em_iters: int = 10
    relevance: float = 10.0
    map_iters: int = 3


@dataclass
class IvectorConfig:
    rank: int = 400
    iters: int = 10
    min_divergence: bool = False


@dataclass
class PldaConfig:
    iters: int = 10
    norm_iters: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    work_dir: str = "tdsv-run"
    features: str = "mfcc"
    bn_task: str = "utcl"
    systems: list = field(default_factory=lambda: list(SYSTEMS))
    fusion_weights: list | None = None
    single_thread: bool = True
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    bn: BnConfig = field(default_factory=BnConfig)
    tcl: TclConfig = field(default_factory=TclConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    ivector: IvectorConfig = field(default_factory=IvectorConfig)
    plda: PldaConfig = field(default_factory=PldaConfig)
    xvector: XvectorConfig = field(default_factory=XvectorConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.features not in FEATURES:
            raise ConfigError(f"features must be one of {FEATURES}")
        if self.bn_task not in BN_TASKS:
            raise ConfigError(f"bn_task must be one of {BN_TASKS}")
        unknown = [s for s in self.systems if s not in SYSTEMS]
        if unknown:
            raise ConfigError(f"unknown systems {unknown}")
        if not 0.0 <= self.bn.gamma <= 1.0:
            raise ConfigError("bn.gamma must lie in [0, 1]")
        if self.gmm.components < 1 or self.ivector.rank < 1:
            raise ConfigError("gmm.components and ivector.rank must be positive")
        if self.plda.norm_iters < 0:
            raise ConfigError("plda.norm_iters must be >= 0")
        c = self.corpus
        if c.synthetic is None and not all([c.background, c.background_info, c.evaluation,
                                            c.enroll, c.trials]):
            raise ConfigError("file corpora need background, background_info, evaluation, "
                              "enroll and trials")
        paths = [p for p in (c.background, c.background_info, c.evaluation, c.enroll, c.trials,
                             c.phone_labels, c.phone_table) if p]
        if len(set(paths)) != len(paths):
            raise ConfigError("corpus paths must be distinct")


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


_NESTED = {
    "corpus": CorpusConfig, "frontend": FrontendConfig, "bn": BnConfig, "tcl": TclConfig,
    "gmm": GmmConfig, "ivector": IvectorConfig, "plda": PldaConfig, "xvector": XvectorConfig,
}


def _build(cls, data: dict):
    if data is None:
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**data)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for key, value in data.items():
        if key == "corpus":
            value = dict(value or {})
            if "synthetic" in value:
                value["synthetic"] = _build(SyntheticCorpusSpec, value["synthetic"])
            kwargs[key] = _build(CorpusConfig, value)
        elif key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value or {})
        else:
            kwargs[key] = value
    try:
        return _build(ExperimentConfig, kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg, path=None) -> str:
    text = yaml.safe_dump(to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return from_dict(yaml.safe_load(fh))


def load_synth_spec(path) -> SyntheticCorpusSpec:
    with open(path, encoding="utf-8") as fh:
        return _build(SyntheticCorpusSpec, yaml.safe_load(fh) or {})


def config_hash(*parts) -> str:
    """Stable short hash of JSON-serializable parts (dataclasses allowed)."""
    blob = json.dumps([to_dict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
