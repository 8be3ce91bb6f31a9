"""Experiment configuration: a TOML document with one section per module.

Every field has a default, so an empty file (or no file) gives a working
offline sweep against the simulated backend::

    [experiment]
    topics = ["Deep Learning"]
    models = ["sim:demo", "sim:sparse"]
    pipelines = ["P2_Sequential", "P4_Taxonomy_L3W3"]
    seed = 7

    [saturation]
    min_novel = 3

    [sim.models.sparse]
    coverage = 0.4
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import KBProbeError, SaturationConfig
from .gateway import EXTRACTION_TEMPERATURE, Gateway, OpenAICompatBackend, RetryPolicy
from .policies import BASELINE_PRESET, PRESETS, PolicyConfig, preset
from .processor import DedupConfig
from .prompts import TEMPLATE_KEYS
from .sim_oracle import SIM_PREFIX, CorpusSpec, SimBackend, SimModel, corpus_from_spec

DEFAULT_TOPICS = ("Deep Learning", "Machine Learning Systems", "Probabilistic Methods")


def default_sim_models() -> dict[str, SimModel]:
    # a little filler so the audit stage has something to reject
    return {"demo": SimModel("demo", noise_rate=0.1)}


class ConfigError(KBProbeError, ValueError):
    pass


@dataclass(frozen=True)
class GatewaySettings:
    base_url: Optional[str] = None  # OpenAI-compatible server for non-sim ids
    concurrency: int = 32
    max_attempts: int = 3
    base_delay: float = 0.5
    timeout: float = 120.0
    batch_size: int = 128
    temperature: float = EXTRACTION_TEMPERATURE
    max_output_tokens: int = 2048


@dataclass(frozen=True)
class SimSettings:
    corpus: CorpusSpec = CorpusSpec()
    models: dict[str, SimModel] = field(default_factory=default_sim_models)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "models": {k: asdict(v) for k, v in sorted(self.models.items())},
        }


@dataclass(frozen=True)
class ExperimentConfig:
    topics: tuple[str, ...] = DEFAULT_TOPICS
    models: tuple[str, ...] = ("sim:demo",)
    pipelines: tuple[str, ...] = tuple(PRESETS)
    baseline: str = BASELINE_PRESET
    seed: int = 0
    output: str = "runs"
    include_wall_clock: bool = False
    saturation: SaturationConfig = SaturationConfig()
    gateway: GatewaySettings = GatewaySettings()
    dedup: DedupConfig = DedupConfig()
    sim: SimSettings = SimSettings()
    templates: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("topics", "models", "pipelines"):
            if not getattr(self, name):
                raise ConfigError(f"experiment.{name} must not be empty")
        for p in (*self.pipelines, self.baseline):
            if p not in PRESETS:
                raise ConfigError(f"unknown pipeline {p!r}; valid presets: {', '.join(PRESETS)}")
        for key in self.templates:
            if key not in TEMPLATE_KEYS:
                raise ConfigError(f"unknown template key {key!r}")

    def policy(self, name: str) -> PolicyConfig:
        return preset(name, self.saturation)

    def build_gateway(self, trace: bool = False, record: bool = False) -> Gateway:
        g = self.gateway
        backends = {SIM_PREFIX: SimBackend(corpus_from_spec(self.sim.corpus), self.sim.models, seed=self.seed)}
        default = None
        if g.base_url:
            default = OpenAICompatBackend(g.base_url, timeout=g.timeout, trace=trace)
        return Gateway(
            backends=backends,
            default=default,
            concurrency=g.concurrency,
            retry=RetryPolicy(max_attempts=g.max_attempts, base_delay=g.base_delay),
            batch_size=g.batch_size,
            record=record,
        )

    def settings_dict(self) -> dict[str, Any]:
        """What a run header needs to regenerate its backend."""
        return {"seed": self.seed, "sim": self.sim.to_dict()}


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    allowed = {"experiment", "saturation", "gateway", "processor", "sim", "templates"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    exp = dict(doc.get("experiment", {}))
    for name in ("topics", "models", "pipelines"):
        if name in exp:
            exp[name] = tuple(exp[name])
    sim_doc = dict(doc.get("sim", {}))
    models_doc = sim_doc.pop("models", {})
    sim = SimSettings(
        corpus=_build(CorpusSpec, sim_doc, "sim"),
        models={
            **default_sim_models(),
            **{k: _build(SimModel, {"name": k, **v}, f"sim.models.{k}") for k, v in models_doc.items()},
        },
    )
    kw = dict(
        saturation=_build(SaturationConfig, doc.get("saturation", {}), "saturation"),
        gateway=_build(GatewaySettings, doc.get("gateway", {}), "gateway"),
        dedup=_build(DedupConfig, doc.get("processor", {}), "processor"),
        sim=sim,
        templates=dict(doc.get("templates", {})),
    )
    overlap = set(exp) & set(kw)
    if overlap:
        raise ConfigError(f"[experiment] unknown keys: {', '.join(sorted(overlap))}")
    return _build(ExperimentConfig, {**exp, **kw}, "experiment")


def load_config(path: Optional[Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
